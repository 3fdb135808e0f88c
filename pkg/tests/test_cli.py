"""Command-line pipeline tests.

A module-scoped fixture runs the full chain once on a synthetic ten-text
corpus: prepare, train a small generator, predict with all three systems,
evaluate them together. Individual tests then assert on the artifacts.
Error paths check the exit-code contract: 0 ok, 2 input, 3 numeric.
"""

import json
import os

import pytest

from nreg import cli, corpus
from nreg import model as M
from nreg.errors import NregError, NumericError

from conftest import make_blocks

HERE = os.path.dirname(__file__)
FIXTURE = os.path.join(HERE, "data", "figures.tpl")


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    tpl = str(root / "texts.tpl")
    corpus.write_template_file(tpl, make_blocks())
    data = str(root / "data")
    assert cli.main(["prepare", "--template", tpl, "--out-dir", data,
                     "--ratios", "0.6,0.2,0.2", "--seed", "0"]) == 0
    model_path = str(root / "model.nreg")
    assert cli.main(["train",
                     "--train", os.path.join(data, "train.tsv"),
                     "--dev", os.path.join(data, "dev.tsv"),
                     "--out", model_path,
                     "--embedding-dim", "4", "--hidden-dim", "6",
                     "--batch-size", "4", "--max-epochs", "3",
                     "--patience", "5", "--seed", "1", "--quiet"]) == 0
    preds = {}
    for system, extra in (
            ("neural", ["--model", model_path]),
            ("onlynames", []),
            ("ferreira", ["--train-instances",
                          os.path.join(data, "train.tsv")])):
        out = str(root / ("pred_%s.tsv" % system))
        assert cli.main(["predict", "--instances",
                         os.path.join(data, "test.tsv"),
                         "--out", out, "--system", system] + extra) == 0
        preds[system] = out
    evals = str(root / "eval")
    assert cli.main(["evaluate",
                     "--golds", os.path.join(data, "test.tsv"),
                     "--pred", "neural=" + preds["neural"],
                     "--pred", "onlynames=" + preds["onlynames"],
                     "--pred", "ferreira=" + preds["ferreira"],
                     "--out-dir", evals,
                     "--template", tpl,
                     "--split-manifest",
                     os.path.join(data, "split_manifest.txt"),
                     "--split", "test",
                     "--iterations", "150", "--seed", "0"]) == 0
    return {"root": str(root), "tpl": tpl, "data": data,
            "model": model_path, "preds": preds, "evals": evals}


class TestPrepare:
    def test_fixture_corpus(self, tmp_path, capsys):
        out_dir = str(tmp_path / "data")
        rc = cli.main(["prepare", "--template", FIXTURE, "--out-dir", out_dir,
                       "--ratios", "1,0,0", "--seed", "0"])
        assert rc == 0
        for name in ("train.tsv", "dev.tsv", "test.tsv", "input_vocab.txt",
                     "output_vocab.txt", "split_manifest.txt", "stats.tsv",
                     "manifest.json"):
            assert os.path.exists(os.path.join(out_dir, name)), name
        instances = corpus.read_instances(os.path.join(out_dir, "train.tsv"))
        assert len(instances) == 6
        assert "prepared 6 instances from 2 texts" in capsys.readouterr().out

    def test_manifest_digests(self, tmp_path):
        out_dir = str(tmp_path / "data")
        cli.main(["prepare", "--template", FIXTURE, "--out-dir", out_dir,
                  "--ratios", "1,0,0"])
        manifest = json.load(open(os.path.join(out_dir, "manifest.json")))
        assert manifest["command"] == "prepare"
        assert manifest["inputs"][FIXTURE] == cli._digest(FIXTURE)
        train_path = os.path.join(out_dir, "train.tsv")
        assert manifest["outputs"][train_path] == cli._digest(train_path)
        assert manifest["warnings"]["alignment_failures"] == []
        assert manifest["config"]["feature_source"] == "context_heuristic"

    def test_same_seed_same_bytes(self, tmp_path):
        digests = []
        for run in ("a", "b"):
            out_dir = str(tmp_path / run)
            cli.main(["prepare", "--template", FIXTURE, "--out-dir", out_dir,
                      "--ratios", "1,0,0", "--seed", "7"])
            digests.append([cli._digest(os.path.join(out_dir, n))
                            for n in ("train.tsv", "input_vocab.txt",
                                      "output_vocab.txt",
                                      "split_manifest.txt", "stats.tsv")])
        assert digests[0] == digests[1]

    def test_alignment_failure_is_partial_not_fatal(self, tmp_path, capsys):
        # first block's template has adjacent tags, which cannot be aligned
        bad = corpus.TextBlock(
            text_id="text-0",
            triples=[corpus.Triple("A_x", "rel", "B_y")],
            tag_map={"AGENT-1": "A_x", "PATIENT-1": "B_y"},
            template_tokens="AGENT-1 PATIENT-1 met .".split(),
            original_tokens="A x B y met .".split())
        good = corpus.TextBlock(
            text_id="text-1",
            triples=[corpus.Triple("Alan_Shepard", "birthPlace",
                                   "New_Hampshire")],
            tag_map={"AGENT-1": "Alan_Shepard", "PATIENT-1": "New_Hampshire"},
            template_tokens="AGENT-1 was born in PATIENT-1 .".split(),
            original_tokens="Alan Shepard was born in New Hampshire .".split())
        tpl = str(tmp_path / "partial.tpl")
        corpus.write_template_file(tpl, [bad, good])
        out_dir = str(tmp_path / "data")
        rc = cli.main(["prepare", "--template", tpl, "--out-dir", out_dir,
                       "--ratios", "1,0,0"])
        assert rc == 2
        assert "alignment failure in text-0" in capsys.readouterr().err
        survivors = corpus.read_instances(os.path.join(out_dir, "train.tsv"))
        assert len(survivors) == 2
        manifest = json.load(open(os.path.join(out_dir, "manifest.json")))
        assert manifest["warnings"]["alignment_failures"] == ["text-0"]

    def test_missing_template(self, tmp_path):
        assert cli.main(["prepare", "--template", str(tmp_path / "no.tpl"),
                         "--out-dir", str(tmp_path / "d")]) == 2

    def test_bad_ratios(self, tmp_path):
        assert cli.main(["prepare", "--template", FIXTURE,
                         "--out-dir", str(tmp_path / "d"),
                         "--ratios", "0.5,0.5"]) == 2

    def test_empty_template(self, tmp_path):
        tpl = str(tmp_path / "empty.tpl")
        open(tpl, "w").close()
        assert cli.main(["prepare", "--template", tpl,
                         "--out-dir", str(tmp_path / "d")]) == 2


class TestTrain:
    def test_artifacts(self, pipeline):
        model_path = pipeline["model"]
        net = M.load_model(model_path)
        assert net.config.hidden_dim == 6
        assert net.config.seed == 1
        log_lines = open(model_path + ".log.tsv").read().splitlines()
        assert log_lines[0] == "epoch\ttrain_loss\tdev_accuracy\tseconds"
        assert len(log_lines) >= 2
        manifest = json.load(open(model_path + ".manifest.json"))
        assert manifest["command"] == "train"
        assert manifest["config"]["hidden_dim"] == 6
        assert manifest["warnings"]["stop_reason"] in ("patience", "max_epochs")

    def test_config_file_with_flag_override(self, pipeline, tmp_path):
        cfg = str(tmp_path / "run.cfg")
        with open(cfg, "w") as f:
            f.write("# experiment defaults\n\n"
                    "hidden_dim=5\nembedding_dim=4\nmax_epochs=1\n"
                    "dropout_p=0.25\nbatch_size=4\n")
        out = str(tmp_path / "model.nreg")
        rc = cli.main(["train",
                       "--train", os.path.join(pipeline["data"], "train.tsv"),
                       "--dev", os.path.join(pipeline["data"], "dev.tsv"),
                       "--out", out, "--config", cfg,
                       "--hidden-dim", "6", "--patience", "5", "--quiet"])
        assert rc == 0
        net = M.load_model(out)
        assert net.config.hidden_dim == 6      # flag beats file
        assert net.config.embedding_dim == 4   # file beats default
        assert net.config.dropout_p == 0.25
        assert net.config.max_epochs == 1

    def test_unknown_config_key(self, pipeline, tmp_path):
        cfg = str(tmp_path / "bad.cfg")
        with open(cfg, "w") as f:
            f.write("vintage=1988\n")
        rc = cli.main(["train",
                       "--train", os.path.join(pipeline["data"], "train.tsv"),
                       "--dev", os.path.join(pipeline["data"], "dev.tsv"),
                       "--out", str(tmp_path / "m.nreg"), "--config", cfg,
                       "--quiet"])
        assert rc == 2

    def test_missing_split_file(self, tmp_path):
        assert cli.main(["train", "--train", str(tmp_path / "none.tsv"),
                         "--dev", str(tmp_path / "none.tsv"),
                         "--out", str(tmp_path / "m.nreg"), "--quiet"]) == 2

    def test_custom_log_path(self, pipeline, tmp_path):
        out = str(tmp_path / "m.nreg")
        log = str(tmp_path / "curve.tsv")
        rc = cli.main(["train",
                       "--train", os.path.join(pipeline["data"], "train.tsv"),
                       "--dev", os.path.join(pipeline["data"], "dev.tsv"),
                       "--out", out, "--log", log,
                       "--embedding-dim", "4", "--hidden-dim", "5",
                       "--max-epochs", "1", "--quiet"])
        assert rc == 0
        assert os.path.exists(log)
        assert not os.path.exists(out + ".log.tsv")


class TestPredict:
    def test_prediction_files_align_with_golds(self, pipeline):
        golds = corpus.read_instances(
            os.path.join(pipeline["data"], "test.tsv"))
        for system, path in pipeline["preds"].items():
            entities, refexes = cli.read_predictions(path)
            assert entities == [g.entity for g in golds], system
            assert len(refexes) == len(golds)

    def test_ferreira_manifest_names_feature_source(self, pipeline):
        manifest = json.load(
            open(pipeline["preds"]["ferreira"] + ".manifest.json"))
        assert manifest["config"]["feature_source"] == "instance_tsv"

    def test_onlynames_output_is_cleaned_id(self, pipeline):
        _, refexes = cli.read_predictions(pipeline["preds"]["onlynames"])
        golds = corpus.read_instances(
            os.path.join(pipeline["data"], "test.tsv"))
        for gold, pred in zip(golds, refexes):
            assert pred == corpus.wikify_id(gold.entity).replace("_", " ").split()

    def test_beam_override_recorded(self, pipeline, tmp_path):
        out = str(tmp_path / "beam5.tsv")
        rc = cli.main(["predict",
                       "--instances", os.path.join(pipeline["data"],
                                                   "test.tsv"),
                       "--out", out, "--system", "neural",
                       "--model", pipeline["model"], "--beam", "5"])
        assert rc == 0
        manifest = json.load(open(out + ".manifest.json"))
        assert manifest["config"]["beam"] == 5

    def test_threaded_prediction_matches_serial(self, pipeline, tmp_path,
                                                monkeypatch):
        serial = str(tmp_path / "serial.tsv")
        threaded = str(tmp_path / "threaded.tsv")
        base = ["predict", "--instances",
                os.path.join(pipeline["data"], "test.tsv"),
                "--system", "neural", "--model", pipeline["model"]]
        monkeypatch.delenv("NREG_THREADS", raising=False)
        assert cli.main(base + ["--out", serial]) == 0
        monkeypatch.setenv("NREG_THREADS", "2")
        assert cli.main(base + ["--out", threaded]) == 0
        assert open(serial).read() == open(threaded).read()

    def test_neural_requires_model(self, pipeline):
        assert cli.main(["predict",
                         "--instances", os.path.join(pipeline["data"],
                                                     "test.tsv"),
                         "--out", "/tmp/never.tsv",
                         "--system", "neural"]) == 2

    def test_ferreira_requires_train_instances(self, pipeline):
        assert cli.main(["predict",
                         "--instances", os.path.join(pipeline["data"],
                                                     "test.tsv"),
                         "--out", "/tmp/never.tsv",
                         "--system", "ferreira"]) == 2

    def test_unseen_entity_falls_back_to_only_names(self, pipeline, tmp_path):
        stranger = corpus.RefexInstance(
            entity="Comet_Visitor", pre_context=["was", "born"],
            pos_context=[], refex=["Comet", "Visitor"], form="name")
        stranger.features = __import__(
            "nreg.baselines", fromlist=["x"]).extract_features_heuristic(
                stranger)
        path = str(tmp_path / "odd.tsv")
        corpus.write_instances(path, [stranger])
        out = str(tmp_path / "odd_pred.tsv")
        rc = cli.main(["predict", "--instances", path, "--out", out,
                       "--system", "neural", "--model", pipeline["model"]])
        assert rc == 0
        _, refexes = cli.read_predictions(out)
        assert refexes == [["Comet", "Visitor"]]
        manifest = json.load(open(out + ".manifest.json"))
        assert manifest["warnings"]["vocabulary_fallbacks"] == 1


class TestEvaluate:
    def test_report_files(self, pipeline):
        evals = pipeline["evals"]
        lines = open(os.path.join(evals, "report.tsv")).read().splitlines()
        assert lines[0].startswith("system\taccuracy\t")
        systems = [line.split("\t")[0] for line in lines[1:]]
        assert systems == ["ferreira", "neural", "onlynames"]
        table = open(os.path.join(evals, "report.txt")).read()
        assert "onlynames" in table

    def test_significance_rows(self, pipeline):
        path = os.path.join(pipeline["evals"], "significance.tsv")
        lines = open(path).read().splitlines()
        assert lines[0] == ("system_a\tsystem_b\tmetric\tstatistic\t"
                            "p_raw\tp_bonferroni")
        rows = [line.split("\t") for line in lines[1:]]
        assert len(rows) == 9  # 3 pairs x 3 metrics
        metrics = {r[2] for r in rows}
        assert metrics == {"accuracy_mcnemar", "sed_wilcoxon",
                           "bleu_randomization"}
        for r in rows:
            assert 0.0 <= float(r[4]) <= 1.0
            assert float(r[5]) >= float(r[4]) - 1e-12

    def test_text_metrics_present(self, pipeline):
        lines = open(os.path.join(pipeline["evals"],
                                  "report.tsv")).read().splitlines()
        header = lines[0].split("\t")
        bleu_col = header.index("bleu")
        for line in lines[1:]:
            value = line.split("\t")[bleu_col]
            assert value != ""
            assert 0.0 <= float(value) <= 100.0

    def test_perfect_predictions_score_perfectly(self, pipeline, tmp_path):
        golds = corpus.read_instances(
            os.path.join(pipeline["data"], "test.tsv"))
        ideal = str(tmp_path / "ideal.tsv")
        with open(ideal, "w") as f:
            for g in golds:
                f.write("%s\t%s\n" % (g.entity, " ".join(g.refex)))
        out_dir = str(tmp_path / "eval")
        rc = cli.main(["evaluate",
                       "--golds", os.path.join(pipeline["data"], "test.tsv"),
                       "--pred", "ideal=" + ideal, "--out-dir", out_dir,
                       "--template", pipeline["tpl"],
                       "--split-manifest",
                       os.path.join(pipeline["data"], "split_manifest.txt"),
                       "--split", "test"])
        assert rc == 0
        lines = open(os.path.join(out_dir, "report.tsv")).read().splitlines()
        header, row = lines[0].split("\t"), lines[1].split("\t")
        record = dict(zip(header, row))
        assert float(record["accuracy"]) == 1.0
        assert float(record["sed_all"]) == 0.0
        assert float(record["bleu"]) == pytest.approx(100.0, abs=1e-6)
        assert float(record["text_accuracy"]) == 1.0
        # single system: no pairwise table
        assert not os.path.exists(os.path.join(out_dir, "significance.tsv"))

    def test_refex_only_mode_skips_text_metrics(self, pipeline, tmp_path):
        out_dir = str(tmp_path / "eval")
        rc = cli.main(["evaluate",
                       "--golds", os.path.join(pipeline["data"], "test.tsv"),
                       "--pred", "neural=" + pipeline["preds"]["neural"],
                       "--out-dir", out_dir])
        assert rc == 0
        lines = open(os.path.join(out_dir, "report.tsv")).read().splitlines()
        record = dict(zip(lines[0].split("\t"), lines[1].split("\t")))
        assert record["bleu"] == ""
        assert record["text_accuracy"] == ""
        assert record["accuracy"] != ""

    def test_misaligned_predictions_rejected(self, pipeline, tmp_path,
                                             capsys):
        lines = open(pipeline["preds"]["neural"]).read().splitlines()
        swapped = str(tmp_path / "swapped.tsv")
        with open(swapped, "w") as f:
            f.write("\n".join([lines[1], lines[0]] + lines[2:]) + "\n")
        rc = cli.main(["evaluate",
                       "--golds", os.path.join(pipeline["data"], "test.tsv"),
                       "--pred", "bad=" + swapped,
                       "--out-dir", str(tmp_path / "eval")])
        assert rc == 2
        assert "gold entity" in capsys.readouterr().err

    def test_pred_flag_needs_name_and_path(self, pipeline, tmp_path):
        assert cli.main(["evaluate",
                         "--golds", os.path.join(pipeline["data"],
                                                 "test.tsv"),
                         "--pred", "justapath.tsv",
                         "--out-dir", str(tmp_path / "e")]) == 2

    def test_no_systems_rejected(self, pipeline, tmp_path):
        assert cli.main(["evaluate",
                         "--golds", os.path.join(pipeline["data"],
                                                 "test.tsv"),
                         "--out-dir", str(tmp_path / "e")]) == 2

    def test_template_requires_split_manifest(self, pipeline, tmp_path):
        assert cli.main(["evaluate",
                         "--golds", os.path.join(pipeline["data"],
                                                 "test.tsv"),
                         "--pred", "neural=" + pipeline["preds"]["neural"],
                         "--out-dir", str(tmp_path / "e"),
                         "--template", pipeline["tpl"]]) == 2


class TestExitCodes:
    def test_numeric_error_maps_to_three(self, monkeypatch, capsys):
        def boom(args):
            raise NumericError("loss diverged")
        monkeypatch.setattr(cli, "cmd_prepare", boom)
        parser_args = ["prepare", "--template", "x", "--out-dir", "y"]
        # the parser object binds cmd_prepare at build time, so patch there
        monkeypatch.setattr(cli, "build_parser", _patched_parser(boom))
        assert cli.main(parser_args) == 3
        assert "numeric failure" in capsys.readouterr().err

    def test_nreg_error_maps_to_two(self, monkeypatch, capsys):
        def reject(args):
            raise NregError("bad input")
        monkeypatch.setattr(cli, "build_parser", _patched_parser(reject))
        assert cli.main(["prepare", "--template", "x", "--out-dir", "y"]) == 2
        assert "error: bad input" in capsys.readouterr().err


def _patched_parser(func):
    def build():
        parser = cli.argparse.ArgumentParser(prog="nreg")
        sub = parser.add_subparsers(dest="command", required=True)
        p = sub.add_parser("prepare")
        p.add_argument("--template")
        p.add_argument("--out-dir")
        p.set_defaults(func=func)
        return parser
    return build


class TestHelpers:
    def test_parse_config_file(self, tmp_path):
        path = str(tmp_path / "c.cfg")
        with open(path, "w") as f:
            f.write("# comment\n\nseed = 3\nhidden_dim=8\n")
        assert cli.parse_config_file(path) == {"seed": "3", "hidden_dim": "8"}

    def test_parse_config_file_rejects_bare_words(self, tmp_path):
        path = str(tmp_path / "c.cfg")
        with open(path, "w") as f:
            f.write("justaword\n")
        with pytest.raises(NregError, match="key=value"):
            cli.parse_config_file(path)

    @pytest.mark.parametrize("value,expected", [
        ("4", 4), ("abc", 1), ("-3", 1), ("0", 1),
    ])
    def test_threads_env(self, monkeypatch, value, expected):
        monkeypatch.setenv("NREG_THREADS", value)
        assert cli._threads() == expected

    def test_threads_default(self, monkeypatch):
        monkeypatch.delenv("NREG_THREADS", raising=False)
        assert cli._threads() == 1

    def test_read_predictions_empty_refex(self, tmp_path):
        path = str(tmp_path / "p.tsv")
        with open(path, "w") as f:
            f.write("Alan_Shepard\t\n")
        entities, refexes = cli.read_predictions(path)
        assert entities == ["Alan_Shepard"]
        assert refexes == [[]]
