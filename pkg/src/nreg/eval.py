"""Automatic metrics, paired significance tests, and relexicalization.

Refex-level metrics treat predictions and golds as token lists; text-level
metrics (BLEU, text accuracy) work on relexicalized token sequences.
"""

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .corpus import classify_form
from .errors import ConfigurationError, ContractError
from .kernels import levenshtein


def _norm(tokens):
    return [t.lower() for t in tokens]


def accuracy(preds, golds):
    """Exact-match fraction on lowercased token sequences."""
    if len(preds) != len(golds):
        raise ContractError("%d predictions vs %d golds" % (len(preds), len(golds)))
    if not golds:
        raise ContractError("empty evaluation set")
    hits = sum(_norm(p) == _norm(g) for p, g in zip(preds, golds))
    return hits / len(golds)


def edit_distance(a, b):
    """Character-level Levenshtein with unit insert/delete/substitute costs."""
    ca = np.array([ord(c) for c in a], dtype=np.int32)
    cb = np.array([ord(c) for c in b], dtype=np.int32)
    return int(levenshtein(ca, cb))


def token_edit_distance(a_tokens, b_tokens):
    """Token-level Levenshtein on lowercased tokens; secondary to the
    character-level headline number."""
    codes = {}
    for tok in _norm(a_tokens) + _norm(b_tokens):
        codes.setdefault(tok, len(codes))
    ca = np.array([codes[t] for t in _norm(a_tokens)], dtype=np.int32)
    cb = np.array([codes[t] for t in _norm(b_tokens)], dtype=np.int32)
    return int(levenshtein(ca, cb))


def _refex_string(tokens):
    return " ".join(_norm(tokens))


def sed_scores(preds, golds):
    """Per-instance character edit distances on lowercased refex strings."""
    if len(preds) != len(golds):
        raise ContractError("%d predictions vs %d golds" % (len(preds), len(golds)))
    return [edit_distance(_refex_string(p), _refex_string(g))
            for p, g in zip(preds, golds)]


def sed_scores_tokens(preds, golds):
    """Per-instance token edit distances."""
    if len(preds) != len(golds):
        raise ContractError("%d predictions vs %d golds" % (len(preds), len(golds)))
    return [token_edit_distance(p, g) for p, g in zip(preds, golds)]


class PronounReport(NamedTuple):
    accuracy: float
    precision: float
    recall: float
    f1: float
    undefined: tuple  # metric names whose denominator was zero


def _form_or_none(tokens):
    return classify_form(tokens) if tokens else None


def pronoun_metrics(preds, golds):
    """Pronoun-form confusion metrics plus exact-string accuracy restricted
    to gold pronouns. Zero denominators score 0 and are flagged."""
    if len(preds) != len(golds):
        raise ContractError("%d predictions vs %d golds" % (len(preds), len(golds)))
    tp = fp = fn = 0
    gold_pron = 0
    gold_pron_hits = 0
    for p, g in zip(preds, golds):
        p_pron = _form_or_none(p) == "pronoun"
        g_pron = _form_or_none(g) == "pronoun"
        tp += p_pron and g_pron
        fp += p_pron and not g_pron
        fn += g_pron and not p_pron
        if g_pron:
            gold_pron += 1
            gold_pron_hits += _norm(p) == _norm(g)
    undefined = []
    if gold_pron:
        acc = gold_pron_hits / gold_pron
    else:
        acc, undefined = 0.0, undefined + ["accuracy"]
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision, undefined = 0.0, undefined + ["precision"]
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall, undefined = 0.0, undefined + ["recall"]
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1, undefined = 0.0, undefined + ["f1"]
    return PronounReport(acc, precision, recall, f1, tuple(undefined))


def relexicalize(template_tokens, tag_map, assignments, constant_map=None):
    """Substitute each reference slot: assignments are keyed by occurrence
    index (slots of the same tag may differ); constant slots without an
    assignment copy their source form verbatim."""
    constant_map = constant_map or {}
    out = []
    occurrence = 0
    for tok in template_tokens:
        if tok in tag_map:
            if occurrence in assignments:
                out.extend(assignments[occurrence])
            elif tok in constant_map:
                out.extend(constant_map[tok])
            else:
                raise ContractError("no refex assigned for %s" % tok)
            occurrence += 1
        else:
            out.append(tok)
    return out


# ---------------------------------------------------------------------------
# Corpus BLEU


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(candidate, references, max_n=4):
    """Sufficient statistics for one text: clipped matches and totals per
    n-gram order, candidate length, effective (closest) reference length."""
    if not references:
        raise ContractError("candidate without references")
    stats = np.zeros(2 * max_n + 2, dtype=np.int64)
    for n in range(1, max_n + 1):
        cand = _ngram_counts(candidate, n)
        best = Counter()
        for ref in references:
            for gram, count in _ngram_counts(ref, n).items():
                best[gram] = max(best[gram], count)
        stats[2 * (n - 1)] = sum(min(c, best[g]) for g, c in cand.items())
        stats[2 * (n - 1) + 1] = sum(cand.values())
    stats[2 * max_n] = len(candidate)
    stats[2 * max_n + 1] = min((len(r) for r in references),
                               key=lambda L: (abs(L - len(candidate)), L))
    return stats


def bleu_from_stats(stats, max_n=4):
    """Corpus score in [0, 100]: geometric mean of modified precisions with
    brevity penalty; any zero precision zeroes the score (no smoothing)."""
    cand_len = stats[2 * max_n]
    ref_len = stats[2 * max_n + 1]
    if cand_len == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        match, total = stats[2 * (n - 1)], stats[2 * (n - 1) + 1]
        if match == 0 or total == 0:
            return 0.0
        log_sum += math.log(match / total) / max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * bp * math.exp(log_sum)


def bleu(candidates, references, max_n=4):
    """Corpus BLEU; references holds one list of reference token lists per
    candidate."""
    if not candidates:
        raise ContractError("empty corpus")
    if len(candidates) != len(references):
        raise ContractError("%d candidates vs %d reference sets"
                            % (len(candidates), len(references)))
    total = sum(bleu_stats(c, r, max_n) for c, r in zip(candidates, references))
    return bleu_from_stats(total, max_n)


# ---------------------------------------------------------------------------
# Significance tests


class TestResult(NamedTuple):
    statistic: float
    p_value: float
    flags: tuple = ()


def mcnemar(paired_correctness):
    """Continuity-corrected McNemar on discordant pairs; p from chi-square
    with one degree of freedom."""
    b = sum(1 for x, y in paired_correctness if x and not y)
    c = sum(1 for x, y in paired_correctness if y and not x)
    if b + c == 0:
        return TestResult(0.0, 1.0, ("no_discordant_pairs",))
    statistic = (abs(b - c) - 1) ** 2 / (b + c)
    p = math.erfc(math.sqrt(statistic / 2.0))
    return TestResult(statistic, min(1.0, p))


def _signed_ranks(diffs):
    """Average ranks of |diffs| (zeros already dropped)."""
    absd = np.abs(np.asarray(diffs, dtype=np.float64))
    order = np.argsort(absd, kind="stable")
    ranks = np.empty(len(absd))
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and absd[order[j + 1]] == absd[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks, absd


def _exact_wilcoxon_p(ranks, w_obs):
    """Exact two-sided p over all sign assignments, by convolution over the
    doubled (integer) ranks."""
    doubled = [int(round(2 * r)) for r in ranks]
    dist = {0: 1}
    for r in doubled:
        new = {}
        for s, cnt in dist.items():
            new[s] = new.get(s, 0) + cnt
            new[s + r] = new.get(s + r, 0) + cnt
        dist = new
    mu = sum(doubled) / 2.0
    threshold = abs(2 * w_obs - mu)
    total = sum(dist.values())
    extreme = sum(cnt for s, cnt in dist.items() if abs(s - mu) >= threshold - 1e-9)
    return extreme / total


def wilcoxon(a, b):
    """Two-sided signed-rank test on paired samples: zero differences are
    dropped, ties get average ranks; exact enumeration up to n=25, normal
    approximation with tie correction beyond."""
    if len(a) != len(b):
        raise ContractError("%d vs %d paired samples" % (len(a), len(b)))
    diffs = [x - y for x, y in zip(a, b) if x != y]
    if not diffs:
        return TestResult(0.0, 1.0, ("all_differences_zero",))
    ranks, absd = _signed_ranks(diffs)
    w_plus = float(sum(r for r, d in zip(ranks, diffs) if d > 0))
    n = len(diffs)
    if n <= 25:
        return TestResult(w_plus, _exact_wilcoxon_p(ranks, w_plus))
    mu = n * (n + 1) / 4.0
    tie_term = 0.0
    for _, count in Counter(absd.tolist()).items():
        tie_term += count ** 3 - count
    sigma2 = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term / 48.0
    if sigma2 <= 0:
        return TestResult(w_plus, 1.0, ("degenerate_variance",))
    z = (w_plus - mu) / math.sqrt(sigma2)
    return TestResult(w_plus, min(1.0, math.erfc(abs(z) / math.sqrt(2.0))))


def bonferroni(p_values, m):
    if m < len(p_values):
        raise ConfigurationError(
            "correction factor %d below the %d comparisons" % (m, len(p_values)))
    return [min(1.0, p * m) for p in p_values]


class BleuSignificance(NamedTuple):
    p_value: float
    delta: float
    ci_low: float
    ci_high: float


def bleu_significance(cand_a, cand_b, references, iterations=1000, seed=0):
    """Approximate randomization on the corpus BLEU delta, with a bootstrap
    percentile interval over texts reported alongside."""
    if iterations < 1:
        raise ConfigurationError("iterations must be at least 1")
    stats_a = np.array([bleu_stats(c, r) for c, r in zip(cand_a, references)])
    stats_b = np.array([bleu_stats(c, r) for c, r in zip(cand_b, references)])
    if len(stats_a) != len(stats_b) or len(stats_a) == 0:
        raise ContractError("misaligned or empty candidate corpora")
    delta_obs = bleu_from_stats(stats_a.sum(0)) - bleu_from_stats(stats_b.sum(0))
    rng = np.random.default_rng(seed)
    n = len(stats_a)
    count = 0
    for _ in range(iterations):
        flip = rng.random(n) < 0.5
        sum_a = np.where(flip[:, None], stats_b, stats_a).sum(0)
        sum_b = np.where(flip[:, None], stats_a, stats_b).sum(0)
        delta = bleu_from_stats(sum_a) - bleu_from_stats(sum_b)
        if abs(delta) >= abs(delta_obs) - 1e-12:
            count += 1
    p = (count + 1) / (iterations + 1)
    deltas = np.empty(iterations)
    for i in range(iterations):
        idx = rng.integers(0, n, size=n)
        deltas[i] = (bleu_from_stats(stats_a[idx].sum(0))
                     - bleu_from_stats(stats_b[idx].sum(0)))
    ci_low, ci_high = np.percentile(deltas, [2.5, 97.5])
    return BleuSignificance(p, delta_obs, float(ci_low), float(ci_high))


# ---------------------------------------------------------------------------
# Report assembly


@dataclass
class EvalReport:
    accuracy: float
    sed_all: float
    sed_incorrect_only: float
    sed_tokens_all: float
    pronoun: PronounReport
    text_accuracy: Optional[float] = None
    bleu: Optional[float] = None
    counts: dict = field(default_factory=dict)


def build_report(preds, golds, text_ids=None, candidate_texts=None,
                 reference_texts=None):
    """Refex-level metrics, plus text-level metrics when text groupings and
    relexicalized texts are supplied."""
    acc = accuracy(preds, golds)
    seds = sed_scores(preds, golds)
    tok_seds = sed_scores_tokens(preds, golds)
    wrong = [s for p, g, s in zip(preds, golds, seds) if _norm(p) != _norm(g)]
    report = EvalReport(
        accuracy=acc,
        sed_all=sum(seds) / len(seds),
        sed_incorrect_only=sum(wrong) / len(wrong) if wrong else 0.0,
        sed_tokens_all=sum(tok_seds) / len(tok_seds),
        pronoun=pronoun_metrics(preds, golds),
        counts={"instances": len(golds),
                "correct": round(acc * len(golds)),
                "gold_pronouns": sum(_form_or_none(g) == "pronoun" for g in golds)},
    )
    if text_ids is not None:
        by_text = {}
        for tid, p, g in zip(text_ids, preds, golds):
            by_text.setdefault(tid, []).append(_norm(p) == _norm(g))
        report.text_accuracy = (sum(all(v) for v in by_text.values())
                                / len(by_text))
        report.counts["texts"] = len(by_text)
    if candidate_texts is not None:
        report.bleu = bleu(candidate_texts,
                           [[r] for r in reference_texts])
    return report


REPORT_FIELDS = ("accuracy", "sed_all", "sed_incorrect_only", "sed_tokens_all",
                 "pronoun_accuracy", "pronoun_precision", "pronoun_recall",
                 "pronoun_f1", "text_accuracy", "bleu")


def report_row(report):
    values = (report.accuracy, report.sed_all, report.sed_incorrect_only,
              report.sed_tokens_all, report.pronoun.accuracy,
              report.pronoun.precision, report.pronoun.recall,
              report.pronoun.f1, report.text_accuracy, report.bleu)
    return ["" if v is None else "%.4f" % v for v in values]


def write_report_tsv(path, reports):
    """reports: mapping system name -> EvalReport."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("system\t" + "\t".join(REPORT_FIELDS) + "\n")
        for name in sorted(reports):
            f.write(name + "\t" + "\t".join(report_row(reports[name])) + "\n")


def format_report_table(reports):
    """Human-readable summary: All References | Pronouns | Text."""
    header = ("system", "acc", "sed", "pron_acc", "pron_prec", "pron_rec",
              "pron_f1", "text_acc", "bleu")
    rows = [header]
    for name in sorted(reports):
        r = reports[name]
        rows.append((
            name, "%.2f" % r.accuracy, "%.2f" % r.sed_all,
            "%.2f" % r.pronoun.accuracy, "%.2f" % r.pronoun.precision,
            "%.2f" % r.pronoun.recall, "%.2f" % r.pronoun.f1,
            "-" if r.text_accuracy is None else "%.2f" % r.text_accuracy,
            "-" if r.bleu is None else "%.2f" % r.bleu))
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


def pairwise_significance(correct_by_system, sed_by_system,
                          texts_by_system=None, references=None,
                          iterations=1000, seed=0):
    """All system pairs: McNemar on accuracy, Wilcoxon on SED, approximate
    randomization on BLEU when texts are given; Bonferroni over the pairs."""
    names = sorted(correct_by_system)
    pairs = [(a, b) for i, a in enumerate(names) for b in names[i + 1:]]
    m = max(1, len(pairs))
    rows = []
    for a, b in pairs:
        mc = mcnemar(list(zip(correct_by_system[a], correct_by_system[b])))
        rows.append((a, b, "accuracy_mcnemar", mc.statistic, mc.p_value,
                     bonferroni([mc.p_value], m)[0]))
        wx = wilcoxon(sed_by_system[a], sed_by_system[b])
        rows.append((a, b, "sed_wilcoxon", wx.statistic, wx.p_value,
                     bonferroni([wx.p_value], m)[0]))
        if texts_by_system is not None:
            bs = bleu_significance(texts_by_system[a], texts_by_system[b],
                                   references, iterations=iterations, seed=seed)
            rows.append((a, b, "bleu_randomization", bs.delta, bs.p_value,
                         bonferroni([bs.p_value], m)[0]))
    return rows


def write_significance_tsv(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        f.write("system_a\tsystem_b\tmetric\tstatistic\tp_raw\tp_bonferroni\n")
        for a, b, metric, stat, p_raw, p_adj in rows:
            f.write("%s\t%s\t%s\t%.6g\t%.6g\t%.6g\n"
                    % (a, b, metric, stat, p_raw, p_adj))
