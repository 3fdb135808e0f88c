"""Command-line surface: prepare, train, predict, evaluate.

Exit codes: 0 success, 2 input/usage error, 3 numeric failure. Every
successful command writes a JSON run manifest with config and input/output
digests so identical (inputs, seed) runs are checkable byte for byte.
"""

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__, baselines, corpus, eval as ev, model as M
from .errors import NregError, NumericError

INPUT_ERROR, NUMERIC_ERROR = 2, 3


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require_inputs(*paths):
    for p in paths:
        if p and not os.path.exists(p):
            raise NregError("input path does not exist: %s" % p)


def _write_manifest(path, command, config, inputs, outputs, started,
                    warnings=None):
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": {p: _digest(p) for p in inputs},
        "outputs": {p: _digest(p) for p in outputs},
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
        "warnings": warnings or {},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def parse_config_file(path):
    """Flat key=value lines; blank lines and # comments ignored."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise NregError("%s:%d expected key=value" % (path, lineno))
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


CONFIG_FLAGS = {
    # CLI flag dest -> ModelConfig field
    "variant": "decoder_variant",
    "beam": "beam_size",
    "dropout": "dropout_p",
    "seed": "seed",
    "embedding_dim": "embedding_dim",
    "hidden_dim": "hidden_dim",
    "attn_dim": "attn_dim",
    "batch_size": "batch_size",
    "max_epochs": "max_epochs",
    "patience": "patience",
}


def build_model_config(args):
    """Defaults, then config-file entries, then explicit CLI flags."""
    values = {}
    if getattr(args, "config", None):
        raw = parse_config_file(args.config)
        fields = M.ModelConfig.__dataclass_fields__
        for key, text in raw.items():
            if key not in fields:
                raise NregError("unknown config key %r" % key)
            typ = fields[key].type
            values[key] = (text if typ is str
                           else float(text) if typ is float else int(text))
    for dest, field_name in CONFIG_FLAGS.items():
        flag_value = getattr(args, dest, None)
        if flag_value is not None:
            values[field_name] = flag_value
    return M.ModelConfig(**values)


def _threads():
    try:
        return max(1, int(os.environ.get("NREG_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# prepare


def cmd_prepare(args):
    started = time.perf_counter()
    _require_inputs(args.template)
    ratios = tuple(float(x) for x in args.ratios.split(","))
    if len(ratios) != 3:
        raise NregError("--ratios needs train,dev,test")
    blocks = corpus.parse_template_file(args.template)
    if not blocks:
        raise NregError("template file %s holds no texts" % args.template)
    instances, failures = corpus.prepare_corpus(blocks)
    for text_id, exc in failures:
        print("alignment failure in %s: %s" % (text_id, exc), file=sys.stderr)
    split = corpus.split_dataset(instances, ratios, args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    outputs = []

    def out(name):
        outputs.append(os.path.join(args.out_dir, name))
        return outputs[-1]

    corpus.write_instances(out("train.tsv"), split.train)
    corpus.write_instances(out("dev.tsv"), split.dev)
    corpus.write_instances(out("test.tsv"), split.test)
    input_vocab, output_vocab = corpus.build_vocab(split.train,
                                                   min_freq=args.min_freq)
    input_vocab.save(out("input_vocab.txt"))
    output_vocab.save(out("output_vocab.txt"))
    corpus.write_split_manifest(out("split_manifest.txt"),
                                corpus.split_text_ids(split))
    with open(out("stats.tsv"), "w", encoding="utf-8") as f:
        f.write("split\tinstances\n")
        for name, part in (("train", split.train), ("dev", split.dev),
                           ("test", split.test)):
            f.write("%s\t%d\n" % (name, len(part)))
        f.write("form\tfraction\n")
        for form, frac in sorted(corpus.form_distribution(instances).items()):
            f.write("%s\t%.4f\n" % (form, frac))
    _write_manifest(
        os.path.join(args.out_dir, "manifest.json"), "prepare",
        {"ratios": list(ratios), "seed": args.seed, "min_freq": args.min_freq,
         "feature_source": "context_heuristic"},
        [args.template], outputs, started,
        warnings={"alignment_failures": [t for t, _ in failures]})
    print("prepared %d instances from %d texts (%d alignment failures)"
          % (len(instances), len(blocks), len(failures)))
    return INPUT_ERROR if failures else 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args):
    started = time.perf_counter()
    _require_inputs(args.train, args.dev, getattr(args, "config", None))
    config = build_model_config(args)
    train_instances = corpus.read_instances(args.train)
    dev_instances = corpus.read_instances(args.dev)
    input_vocab, output_vocab = corpus.build_vocab(train_instances,
                                                   min_freq=args.min_freq)
    dtype = np.float64 if args.precision == "f64" else np.float32
    net = M.NeuralModel(config, input_vocab, output_vocab, dtype=dtype)
    log_path = args.log or args.out + ".log.tsv"

    def progress(state, row):
        if not args.quiet:
            print("epoch %d loss %.4f dev_acc %.4f (%.1fs)" % row)

    net, history, state = M.train(net, train_instances, dev_instances, config,
                                  callback=progress)
    M.save_model(args.out, net)
    M.write_training_log(log_path, history)
    _write_manifest(args.out + ".manifest.json", "train", config.to_dict(),
                    [args.train, args.dev], [args.out, log_path], started,
                    warnings={"stop_reason": state.stop_reason,
                              "best_dev_accuracy": state.best_dev_accuracy})
    print("stopped after epoch %d (%s), best dev accuracy %.4f"
          % (state.epoch, state.stop_reason, state.best_dev_accuracy))
    return 0


# ---------------------------------------------------------------------------
# predict


def _predict_neural(args, instances):
    net = M.load_model(args.model)
    config = net.config
    if args.beam is not None:
        config = M.ModelConfig.from_dict(
            dict(config.to_dict(), beam_size=args.beam))
    fallbacks = 0
    def one(instance):
        nonlocal fallbacks
        try:
            return M.beam_search(net, instance, config)
        except M.VocabularyError:
            fallbacks += 1
            return baselines.only_names(instance.entity).split()
    threads = _threads()
    if threads > 1 and len(instances) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            preds = list(pool.map(one, instances))
    else:
        preds = [one(inst) for inst in instances]
    return preds, {"vocabulary_fallbacks": fallbacks}


def _predict_ferreira(args, instances):
    if not args.train_instances:
        raise NregError("--system ferreira requires --train-instances")
    _require_inputs(args.train_instances)
    train_instances = corpus.read_instances(args.train_instances)
    form_model = baselines.nb_train(train_instances)
    table = baselines.VariantTable.from_instances(train_instances)
    return ([baselines.predict_ferreira(form_model, table, inst).split()
             for inst in instances], {})


def cmd_predict(args):
    started = time.perf_counter()
    _require_inputs(args.instances)
    instances = corpus.read_instances(args.instances)
    inputs = [args.instances]
    if args.system == "neural":
        if not args.model:
            raise NregError("--system neural requires --model")
        _require_inputs(args.model)
        inputs.append(args.model)
        preds, warnings = _predict_neural(args, instances)
    elif args.system == "onlynames":
        preds = [baselines.predict_onlynames(inst).split()
                 for inst in instances]
        warnings = {}
    else:
        inputs.append(args.train_instances)
        preds, warnings = _predict_ferreira(args, instances)
    with open(args.out, "w", encoding="utf-8") as f:
        for inst, pred in zip(instances, preds):
            f.write("%s\t%s\n" % (inst.entity, " ".join(pred)))
    config = {"system": args.system, "beam": args.beam}
    if args.system == "ferreira":
        # form features come from the instance TSV columns, so the report
        # can state what produced them (nreg prepare: the context heuristic)
        config["feature_source"] = "instance_tsv"
    _write_manifest(args.out + ".manifest.json", "predict", config,
                    inputs, [args.out], started, warnings=warnings)
    print("wrote %d predictions to %s" % (len(preds), args.out))
    return 0


def read_predictions(path):
    entities = []
    refexes = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            entity, _, refex = line.partition("\t")
            entities.append(entity)
            refexes.append(refex.split())
    return entities, refexes


# ---------------------------------------------------------------------------
# evaluate


def _rederive_texts(template_path, split_manifest_path, split_name):
    """Instance/text alignment for the evaluated split, straight from the
    template file: per-text blocks, wiki instances in file order."""
    blocks = corpus.parse_template_file(template_path)
    wanted = corpus.read_split_manifest(split_manifest_path)[split_name]
    by_id = {b.text_id: b for b in blocks}
    missing = [t for t in wanted if t not in by_id]
    if missing:
        raise NregError("split manifest names unknown texts: %s"
                        % ", ".join(missing[:10]))
    texts = []
    for text_id in wanted:
        block = by_id[text_id]
        instances = corpus.extract_instances(block)
        texts.append((block, instances, corpus.filter_wiki(instances)))
    return texts


def _relex_texts(texts, preds_by_position):
    """Candidate and reference token lists per text. Wiki slots take the
    system's predictions; constant slots keep the gold extracted span."""
    candidates, references, text_ids = [], [], []
    cursor = 0
    for block, all_instances, wiki_instances in texts:
        assignments = {inst.slot_index: inst.refex for inst in all_instances
                       if corpus.is_constant(inst.entity)}
        for inst in wiki_instances:
            assignments[inst.slot_index] = preds_by_position[cursor]
            cursor += 1
        candidates.append(ev.relexicalize(block.template_tokens,
                                          block.tag_map, assignments))
        references.append(block.original_tokens)
        text_ids.append(block.text_id)
    return candidates, references


def cmd_evaluate(args):
    started = time.perf_counter()
    _require_inputs(args.golds, args.template, args.split_manifest)
    golds = corpus.read_instances(args.golds)
    systems = {}
    for spec_item in args.pred:
        name, _, path = spec_item.partition("=")
        if not path:
            raise NregError("--pred needs NAME=PATH, got %r" % spec_item)
        _require_inputs(path)
        systems[name] = path
    if not systems:
        raise NregError("no --pred systems given")

    texts = None
    text_ids = None
    if args.template:
        if not args.split_manifest:
            raise NregError("--template requires --split-manifest")
        texts = _rederive_texts(args.template, args.split_manifest, args.split)
        derived = [inst for _, _, wiki in texts for inst in wiki]
        mism = [(i, golds[i].entity, inst.entity)
                for i, inst in enumerate(derived)
                if i >= len(golds) or golds[i].entity != inst.entity]
        if len(derived) != len(golds) or mism:
            for i, g, d in mism[:10]:
                print("instance %d: gold entity %r vs template entity %r"
                      % (i, g, d), file=sys.stderr)
            raise NregError(
                "gold file does not align with the re-derived split "
                "(%d vs %d instances)" % (len(golds), len(derived)))
        text_ids = [block.text_id for block, _, wiki in texts for _ in wiki]

    reports = {}
    correct_by_system = {}
    sed_by_system = {}
    texts_by_system = {}
    references = None
    gold_refexes = [g.refex for g in golds]
    for name, path in sorted(systems.items()):
        entities, preds = read_predictions(path)
        mism = [(i, g.entity, e) for i, (g, e) in enumerate(zip(golds, entities))
                if g.entity != e]
        if len(preds) != len(golds) or mism:
            for i, g, e in mism[:10]:
                print("%s instance %d: gold entity %r vs predicted entity %r"
                      % (name, i, g, e), file=sys.stderr)
            raise NregError("%s predictions misaligned with golds (%d vs %d)"
                            % (name, len(preds), len(golds)))
        candidate_texts = None
        if texts is not None:
            candidate_texts, references = _relex_texts(texts, preds)
            texts_by_system[name] = candidate_texts
        reports[name] = ev.build_report(
            preds, gold_refexes, text_ids=text_ids,
            candidate_texts=candidate_texts, reference_texts=references)
        norm = lambda toks: [t.lower() for t in toks]
        correct_by_system[name] = [norm(p) == norm(g)
                                   for p, g in zip(preds, gold_refexes)]
        sed_by_system[name] = ev.sed_scores(preds, gold_refexes)

    os.makedirs(args.out_dir, exist_ok=True)
    report_tsv = os.path.join(args.out_dir, "report.tsv")
    report_txt = os.path.join(args.out_dir, "report.txt")
    ev.write_report_tsv(report_tsv, reports)
    with open(report_txt, "w", encoding="utf-8") as f:
        f.write(ev.format_report_table(reports) + "\n")
    outputs = [report_tsv, report_txt]
    if len(systems) > 1:
        rows = ev.pairwise_significance(
            correct_by_system, sed_by_system,
            texts_by_system if texts is not None else None,
            [[r] for r in references] if references is not None else None,
            iterations=args.iterations, seed=args.seed)
        sig_path = os.path.join(args.out_dir, "significance.tsv")
        ev.write_significance_tsv(sig_path, rows)
        outputs.append(sig_path)
    _write_manifest(
        os.path.join(args.out_dir, "manifest.json"), "evaluate",
        {"split": args.split, "iterations": args.iterations, "seed": args.seed},
        [args.golds] + sorted(systems.values())
        + [p for p in (args.template, args.split_manifest) if p],
        outputs, started)
    print(ev.format_report_table(reports))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_model_flags(p):
    p.add_argument("--variant", choices=M.VARIANTS, default=None)
    p.add_argument("--beam", type=int, choices=(1, 5), default=None)
    p.add_argument("--dropout", type=float, choices=(0.2, 0.3), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--embedding-dim", type=int, dest="embedding_dim")
    p.add_argument("--hidden-dim", type=int, dest="hidden_dim")
    p.add_argument("--attn-dim", type=int, dest="attn_dim")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--patience", type=int)
    p.add_argument("--config", help="key=value config file; flags win")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nreg",
        description="Referring-expression generation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="extract instances from a template file")
    p.add_argument("--template", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-freq", type=int, default=1, dest="min_freq")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train the neural generator")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--out", required=True, help="model file path")
    p.add_argument("--log", default=None, help="training log TSV path")
    p.add_argument("--min-freq", type=int, default=1, dest="min_freq")
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--quiet", action="store_true")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict refexes for instances")
    p.add_argument("--instances", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--system", choices=("neural", "onlynames", "ferreira"),
                   default="neural")
    p.add_argument("--model", help="model file (neural)")
    p.add_argument("--beam", type=int, choices=(1, 5), default=None)
    p.add_argument("--train-instances", dest="train_instances",
                   help="training TSV for the form/variant system (ferreira)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score prediction files against golds")
    p.add_argument("--golds", required=True, help="gold instance TSV")
    p.add_argument("--pred", action="append", default=[],
                   metavar="NAME=PATH", help="repeatable system predictions")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--template", default=None,
                   help="template file for text-level metrics")
    p.add_argument("--split-manifest", dest="split_manifest", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print("numeric failure: %s" % exc, file=sys.stderr)
        return NUMERIC_ERROR
    except (NregError, OSError, ValueError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
