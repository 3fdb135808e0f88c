"""Comparison systems: a name-echo baseline and a Naive Bayes form chooser
paired with a frequency-ranked variant table with back-off."""

from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .corpus import FORMS, SENTENCE_BOUNDARY, wikify_id
from .errors import ConfigurationError, ContractError


class FormFeatures(NamedTuple):
    syntactic_position: str   # subject | object | genitive
    text_status: str          # new | given
    sentence_status: str      # new | given


FEATURE_DOMAINS = {
    "syntactic_position": ("subject", "object", "genitive"),
    "text_status": ("new", "given"),
    "sentence_status": ("new", "given"),
}

# deterministic argmax tie-break order
FORM_ORDER = ("name", "description", "demonstrative", "pronoun")

BACKOFF_LEVELS = (
    ("syntactic_position", "text_status", "sentence_status"),
    ("syntactic_position", "text_status"),
    ("syntactic_position",),
    (),
)


def only_names(wiki_id):
    if not wiki_id:
        raise ContractError("empty entity ID")
    return wiki_id.replace("_", " ")


@dataclass
class FormModel:
    prior_counts: dict        # form -> count
    cond_counts: dict         # (feature, value, form) -> count
    smoothing: float = 1.0

    def __post_init__(self):
        if any(c < 0 for c in self.prior_counts.values()):
            raise ContractError("negative prior count")
        if any(c < 0 for c in self.cond_counts.values()):
            raise ContractError("negative conditional count")


def nb_train(instances):
    if not instances:
        raise ContractError("cannot train the form model on an empty corpus")
    priors = Counter()
    conds = Counter()
    for inst in instances:
        if inst.features is None:
            raise ContractError("instance for %r lacks features" % inst.entity)
        priors[inst.form] += 1
        for feature in FEATURE_DOMAINS:
            conds[(feature, getattr(inst.features, feature), inst.form)] += 1
    return FormModel(prior_counts=dict(priors), cond_counts=dict(conds))


def nb_posterior(model, features):
    """P(f|X) with add-one smoothing on priors and conditionals; the closed
    feature domains fix the smoothing denominators."""
    k = model.smoothing
    total = sum(model.prior_counts.values())
    scores = {}
    for form in FORMS:
        n_form = model.prior_counts.get(form, 0)
        p = (n_form + k) / (total + k * len(FORMS))
        for feature, domain in FEATURE_DOMAINS.items():
            value = getattr(features, feature)
            p *= ((model.cond_counts.get((feature, value, form), 0) + k)
                  / (n_form + k * len(domain)))
        scores[form] = p
    z = sum(scores.values())
    return {form: score / z for form, score in scores.items()}


def choose_form(model, features, mode="argmax", seed=0):
    posterior = nb_posterior(model, features)
    if mode == "argmax":
        return max(FORM_ORDER, key=lambda f: (posterior[f], -FORM_ORDER.index(f)))
    if mode == "sample":
        probs = np.array([posterior[f] for f in FORM_ORDER])
        idx = np.random.default_rng(seed).choice(len(FORM_ORDER),
                                                 p=probs / probs.sum())
        return FORM_ORDER[idx]
    raise ConfigurationError("unknown form-choice mode %r" % mode)


class VariantTable:
    """Refex variants per (entity, features, form) key, ranked by training
    frequency with lexicographic tie-breaks. Aggregate tables for each
    back-off depth are built up front."""

    def __init__(self, counts=None):
        # counts: full key (entity, position, text_status, sentence_status,
        # form) -> Counter over refex strings
        self.counts = counts or {}
        self._levels = None

    @classmethod
    def from_instances(cls, instances):
        table = cls()
        for inst in instances:
            if inst.features is None:
                raise ContractError("instance for %r lacks features" % inst.entity)
            key = (inst.entity, inst.features.syntactic_position,
                   inst.features.text_status, inst.features.sentence_status,
                   inst.form)
            table.counts.setdefault(key, Counter())[" ".join(inst.refex)] += 1
        return table

    def _aggregates(self):
        if self._levels is None:
            levels = []
            for fields in BACKOFF_LEVELS:
                agg = {}
                for (entity, pos, text, sent, form), refexes in self.counts.items():
                    values = {"syntactic_position": pos, "text_status": text,
                              "sentence_status": sent}
                    key = (entity,) + tuple(values[f] for f in fields) + (form,)
                    bucket = agg.setdefault(key, Counter())
                    bucket.update(refexes)
                levels.append(agg)
            self._levels = levels
        return self._levels

    def lookup(self, entity, features, form):
        """Most frequent variant at the shallowest back-off depth that hits,
        or None when the entity+form pair was never seen."""
        for fields, agg in zip(BACKOFF_LEVELS, self._aggregates()):
            key = ((entity,)
                   + tuple(getattr(features, f) for f in fields)
                   + (form,))
            bucket = agg.get(key)
            if bucket:
                return min(bucket, key=lambda r: (-bucket[r], r))
        return None


def select_variant(table, entity, features, form):
    variant = table.lookup(entity, features, form)
    if variant is None:
        return only_names(entity)
    return variant


# ---------------------------------------------------------------------------
# Context-based feature heuristic (stand-in for the parser-driven original)

AUXILIARIES = {
    "is", "are", "was", "were", "am", "be", "been", "being",
    "has", "have", "had", "does", "do", "did",
    "will", "would", "shall", "should", "can", "could", "may", "might", "must",
}


def _verb_candidate(token):
    return token in AUXILIARIES or (len(token) > 3 and token.endswith("ed"))


def _current_sentence(pre_context):
    for i in range(len(pre_context) - 1, -1, -1):
        if pre_context[i] in SENTENCE_BOUNDARY:
            return list(pre_context[i + 1:])
    return list(pre_context)


def extract_features_heuristic(instance):
    """Information status from entity mentions in the wikified contexts;
    grammatical position from a shallow verb scan of the current sentence."""
    target = wikify_id(instance.entity).lower()
    sentence = _current_sentence(instance.pre_context)
    text_status = "given" if target in instance.pre_context else "new"
    sentence_status = "given" if target in sentence else "new"
    if instance.pos_context and instance.pos_context[0] == "'s":
        position = "genitive"
    elif any(_verb_candidate(tok) for tok in sentence):
        position = "object"
    else:
        position = "subject"
    return FormFeatures(position, text_status, sentence_status)


def predict_onlynames(instance):
    return only_names(instance.entity)


def predict_ferreira(model, table, instance, mode="argmax", seed=0):
    """Form choice then variant selection; the predicted form keys the table."""
    if instance.features is None:
        raise ContractError("instance for %r lacks features" % instance.entity)
    form = choose_form(model, instance.features, mode=mode, seed=seed)
    return select_variant(table, instance.entity, instance.features, form)


# ---------------------------------------------------------------------------
# Serialization: plain-text count tables


def save_form_model(path, model):
    with open(path, "w", encoding="utf-8") as f:
        for form in sorted(model.prior_counts):
            f.write("%s\t%d\n" % (form, model.prior_counts[form]))
        for (feature, value, form) in sorted(model.cond_counts):
            f.write("%s\t%s\t%s\t%d\n"
                    % (feature, value, form, model.cond_counts[(feature, value, form)]))


def load_form_model(path):
    priors = {}
    conds = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            fields = line.rstrip("\n").split("\t")
            if len(fields) == 2:
                priors[fields[0]] = int(fields[1])
            elif len(fields) == 4:
                conds[(fields[0], fields[1], fields[2])] = int(fields[3])
            elif line.strip():
                raise ContractError("bad form-model line %r" % line)
    return FormModel(prior_counts=priors, cond_counts=conds)


def save_variant_table(path, table):
    with open(path, "w", encoding="utf-8") as f:
        for key in sorted(table.counts):
            for refex, count in sorted(table.counts[key].items()):
                f.write("\t".join(key) + "\t%s\t%d\n" % (refex, count))


def load_variant_table(path):
    counts = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            fields = line.rstrip("\n").split("\t")
            if not line.strip():
                continue
            if len(fields) != 7:
                raise ContractError("bad variant-table line %r" % line)
            key = tuple(fields[:5])
            counts.setdefault(key, Counter())[fields[5]] = int(fields[6])
    return VariantTable(counts)
