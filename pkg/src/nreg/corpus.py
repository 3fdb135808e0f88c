"""Dataset pipeline: entity tagging, refex extraction, contexts, splits, vocabularies.

Texts arrive as delexicalized template/original token pairs plus the triple set
they verbalize. This module turns them into per-reference instances: the target
entity, the lowercased wikified context on each side of the slot, the truecased
gold referring expression, and its surface form class.
"""

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import AlignmentError, ConfigurationError, ContractError
from .kernels import lcs_table

TOKEN_RE = re.compile(r"'s|\w+|[^\w\s]")
ROLE_TAG_RE = re.compile(r"^(AGENT|BRIDGE|PATIENT)-\d+$")
CONSTANT_SUFFIX_RE = re.compile(r"@[A-Za-z]\w*$")
SENTENCE_BOUNDARY = {".", "!", "?"}

PRONOUNS = {
    "he", "she", "it", "they", "him", "her", "them", "his", "hers", "its",
    "their", "theirs", "himself", "herself", "itself", "themselves",
    "who", "whom", "whose",
}
DEMONSTRATIVES = {"this", "that", "these", "those"}
ARTICLES = {"the", "a", "an"}

FORMS = ("name", "pronoun", "description", "demonstrative")


def tokenize(text):
    """Split on whitespace with punctuation as separate tokens; "'s" stays whole."""
    return TOKEN_RE.findall(text)


@dataclass(frozen=True)
class Triple:
    subject: str
    predicate: str
    object: str


@dataclass
class RefexInstance:
    entity: str                      # raw ID, original case
    pre_context: list                # lowercased wikified tokens before the slot
    pos_context: list                # same, after the slot
    refex: list                      # truecased tokens
    form: str
    features: Optional[object] = None
    text_id: Optional[str] = None    # bookkeeping, not serialized
    slot_index: Optional[int] = None  # occurrence index within the text


@dataclass
class TextBlock:
    text_id: str
    triples: list
    tag_map: dict                    # tag -> entity/constant ID
    template_tokens: list
    original_tokens: list


@dataclass
class DatasetSplit:
    train: list
    dev: list
    test: list


def is_constant(entity_id):
    return CONSTANT_SUFFIX_RE.search(entity_id) is not None


def normalize_constant(raw):
    """Quote-stripped, whitespace collapsed to underscores."""
    s = raw.strip()
    if len(s) >= 2 and s[0] == s[-1] and s[0] in "\"'":
        s = s[1:-1].strip()
    return re.sub(r"\s+", "_", s)


def wikify_id(entity_id):
    """One-word context representation: constants lose their type suffix."""
    if is_constant(entity_id):
        return normalize_constant(CONSTANT_SUFFIX_RE.sub("", entity_id))
    return entity_id


def assign_entity_tags(triples):
    """Role tags by triple-set position: subject-only AGENT, object-only
    PATIENT, both-sides BRIDGE; numbered by first appearance."""
    if not triples:
        raise ContractError("cannot tag an empty triple set")
    subjects = {t.subject for t in triples}
    objects = {t.object for t in triples}
    seen = []
    for t in triples:
        for entity in (t.subject, t.object):
            if entity not in seen:
                seen.append(entity)
    counters = {"AGENT": 0, "BRIDGE": 0, "PATIENT": 0}
    tag_map = {}
    for entity in seen:
        if entity in subjects and entity in objects:
            role = "BRIDGE"
        elif entity in subjects:
            role = "AGENT"
        else:
            role = "PATIENT"
        counters[role] += 1
        tag_map["%s-%d" % (role, counters[role])] = entity
    return tag_map


def find_tag_occurrences(template_tokens, tag_map):
    """(token position, tag) pairs in template order."""
    out = []
    for i, tok in enumerate(template_tokens):
        if tok in tag_map:
            out.append((i, tok))
        elif ROLE_TAG_RE.match(tok):
            raise ContractError("template tag %r missing from the tag map" % tok)
    return out


def _lcs_match_pairs(a, b):
    """Greedy walk over the suffix LCS table. Matches template tokens as late
    as possible in the original so reference gaps absorb maximal spans."""
    codes = {}
    for tok in a + b:
        codes.setdefault(tok, len(codes))
    ca = np.array([codes[t] for t in a], dtype=np.int32)
    cb = np.array([codes[t] for t in b], dtype=np.int32)
    table = lcs_table(ca, cb)
    pairs = []
    i = j = 0
    while i < len(a) and j < len(b):
        if a[i] == b[j]:
            pairs.append((i, j))
            i += 1
            j += 1
        elif table[i + 1, j] > table[i, j + 1]:
            i += 1
        else:
            j += 1
    return pairs


def extract_refexes(original_tokens, template_tokens, tag_map):
    """Align template to original by token LCS; each gap must hold exactly one
    reference tag, whose substitute span becomes the extracted refex."""
    pairs = _lcs_match_pairs(template_tokens, original_tokens)
    anchors = pairs + [(len(template_tokens), len(original_tokens))]
    refexes = []
    ti = oi = 0
    for t_next, o_next in anchors:
        gap_t = template_tokens[ti:t_next]
        gap_o = original_tokens[oi:o_next]
        if gap_t or gap_o:
            tags = [tok for tok in gap_t if tok in tag_map]
            if len(tags) != len(gap_t) or len(tags) != 1 or not gap_o:
                raise AlignmentError(
                    "cannot align template gap %r with original span %r"
                    % (gap_t, gap_o), template_tokens, original_tokens)
            refexes.append((tags[0], list(gap_o)))
        ti, oi = t_next + 1, o_next + 1
    return refexes


def wikify_template(template_tokens, tag_map):
    return [wikify_id(tag_map[t]) if t in tag_map else t for t in template_tokens]


def build_contexts(template_tokens, occurrence_index):
    """Lowercased token sequences before and after the target slot."""
    if not 0 <= occurrence_index < len(template_tokens):
        raise ContractError(
            "slot index %d outside template of %d tokens"
            % (occurrence_index, len(template_tokens)))
    pre = [t.lower() for t in template_tokens[:occurrence_index]]
    pos = [t.lower() for t in template_tokens[occurrence_index + 1:]]
    return pre, pos


def classify_form(refex_tokens):
    if not refex_tokens:
        raise ContractError("cannot classify an empty referring expression")
    first = refex_tokens[0].lower()
    if len(refex_tokens) == 1 and first in PRONOUNS:
        return "pronoun"
    if first in DEMONSTRATIVES:
        return "demonstrative"
    if first in ARTICLES:
        return "description"
    return "name"


def extract_instances(block):
    """All reference instances of one text, constants included."""
    extracted = extract_refexes(block.original_tokens, block.template_tokens,
                                block.tag_map)
    occurrences = find_tag_occurrences(block.template_tokens, block.tag_map)
    wikified = wikify_template(block.template_tokens, block.tag_map)
    instances = []
    for slot, ((position, tag), (_, span)) in enumerate(zip(occurrences, extracted)):
        pre, pos = build_contexts(wikified, position)
        instances.append(RefexInstance(
            entity=block.tag_map[tag],
            pre_context=pre,
            pos_context=pos,
            refex=span,
            form=classify_form(span),
            text_id=block.text_id,
            slot_index=slot,
        ))
    return instances


def filter_wiki(instances):
    """Drop references to typed constants (dates, numbers, amounts)."""
    return [inst for inst in instances if not is_constant(inst.entity)]


def form_distribution(instances):
    counts = Counter(inst.form for inst in instances)
    total = max(1, len(instances))
    return {form: counts.get(form, 0) / total for form in FORMS}


def split_dataset(instances, ratios, seed):
    """Seeded split with whole texts kept in one part; leftovers go to train."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError("split ratios %r do not sum to 1" % (ratios,))
    by_text = {}
    for i, inst in enumerate(instances):
        key = inst.text_id if inst.text_id is not None else "__inst_%d" % i
        by_text.setdefault(key, []).append(inst)
    text_ids = list(by_text)
    order = np.random.default_rng(seed).permutation(len(text_ids))
    shuffled = [text_ids[i] for i in order]
    n = len(shuffled)
    n_dev = int(ratios[1] * n)
    n_test = int(ratios[2] * n)
    n_train = n - n_dev - n_test
    parts = (shuffled[:n_train],
             shuffled[n_train:n_train + n_dev],
             shuffled[n_train + n_dev:])
    train, dev, test = ([inst for t in ids for inst in by_text[t]]
                        for ids in parts)
    return DatasetSplit(train=train, dev=dev, test=test)


def split_text_ids(split):
    """Ordered unique text IDs per part, for the split manifest."""
    out = {}
    for name, part in (("train", split.train), ("dev", split.dev),
                       ("test", split.test)):
        seen = []
        for inst in part:
            if inst.text_id is not None and inst.text_id not in seen:
                seen.append(inst.text_id)
        out[name] = seen
    return out


class Vocabulary:
    """Token-index bijection with four reserved slots at the front."""

    PAD, BOS, EOS, UNK = 0, 1, 2, 3
    RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

    def __init__(self, tokens):
        for tok in tokens:
            if tok in self.RESERVED:
                raise ContractError("token %r collides with a reserved entry" % tok)
        self._i2t = list(self.RESERVED) + list(tokens)
        self._t2i = {t: i for i, t in enumerate(self._i2t)}
        if len(self._t2i) != len(self._i2t):
            raise ContractError("duplicate tokens in vocabulary")

    def index(self, token):
        return self._t2i.get(token, self.UNK)

    def token(self, index):
        return self._i2t[index]

    def __len__(self):
        return len(self._i2t)

    def __contains__(self, token):
        return token in self._t2i

    @property
    def tokens(self):
        """Non-reserved entries in index order."""
        return self._i2t[len(self.RESERVED):]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.tokens:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])


def build_vocab(train_instances, min_freq=1):
    """Shared input vocabulary (contexts, entity IDs, refex tokens) and the
    refex-only output vocabulary. Entity IDs bypass the frequency cut."""
    if not train_instances:
        raise ContractError("cannot build vocabularies from an empty training set")
    in_counts = Counter()
    out_counts = Counter()
    entity_ids = set()
    for inst in train_instances:
        in_counts.update(inst.pre_context)
        in_counts.update(inst.pos_context)
        in_counts.update(inst.refex)
        out_counts.update(inst.refex)
        entity_ids.add(wikify_id(inst.entity).lower())

    def ordered(counts, always=()):
        keep = {t for t, c in counts.items() if c >= min_freq} | set(always)
        return sorted(keep, key=lambda t: (-counts.get(t, 0), t))

    input_vocab = Vocabulary(ordered(in_counts, entity_ids))
    output_vocab = Vocabulary(ordered(out_counts))
    return input_vocab, output_vocab


# ---------------------------------------------------------------------------
# File formats


def parse_template_file(path):
    """Blocks of three paragraphs: triples, tag map, template/original lines."""
    with open(path, encoding="utf-8") as f:
        lines = f.read().split("\n")
    paragraphs = []
    current = []
    for line in lines:
        if line.strip():
            current.append(line)
        elif current:
            paragraphs.append(current)
            current = []
    if current:
        paragraphs.append(current)
    if len(paragraphs) % 3 != 0:
        raise ContractError(
            "template file must hold blocks of 3 paragraphs, found %d paragraphs"
            % len(paragraphs))
    blocks = []
    for b in range(0, len(paragraphs), 3):
        triples = []
        for line in paragraphs[b]:
            fields = line.split("\t")
            if len(fields) != 3:
                raise ContractError("bad triple line %r" % line)
            triples.append(Triple(*fields))
        tag_map = {}
        for line in paragraphs[b + 1]:
            fields = line.split("\t")
            if len(fields) != 2:
                raise ContractError("bad tag-map line %r" % line)
            tag_map[fields[0]] = fields[1]
        if len(paragraphs[b + 2]) != 2:
            raise ContractError(
                "block %d needs a template line and an original line" % (b // 3))
        template_tokens = paragraphs[b + 2][0].split()
        original_tokens = paragraphs[b + 2][1].split()
        find_tag_occurrences(template_tokens, tag_map)  # validates tag coverage
        blocks.append(TextBlock(
            text_id="text-%d" % (b // 3),
            triples=triples,
            tag_map=tag_map,
            template_tokens=template_tokens,
            original_tokens=original_tokens,
        ))
    return blocks


def write_template_file(path, blocks):
    parts = []
    for block in blocks:
        lines = ["%s\t%s\t%s" % (t.subject, t.predicate, t.object)
                 for t in block.triples]
        lines.append("")
        lines.extend("%s\t%s" % (tag, eid) for tag, eid in block.tag_map.items())
        lines.append("")
        lines.append(" ".join(block.template_tokens))
        lines.append(" ".join(block.original_tokens))
        parts.append("\n".join(lines))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n\n".join(parts) + "\n")


INSTANCE_COLUMNS = ("entity", "pre_context", "pos_context", "refex", "form",
                    "syntactic_position", "text_status", "sentence_status")


def write_instances(path, instances):
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            if inst.features is None:
                raise ContractError(
                    "instance for %r has no features to serialize" % inst.entity)
            row = (inst.entity,
                   " ".join(inst.pre_context),
                   " ".join(inst.pos_context),
                   " ".join(inst.refex),
                   inst.form,
                   inst.features.syntactic_position,
                   inst.features.text_status,
                   inst.features.sentence_status)
            f.write("\t".join(row) + "\n")


def read_instances(path):
    from .baselines import FormFeatures
    instances = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != len(INSTANCE_COLUMNS):
                raise ContractError(
                    "%s:%d expected %d columns, found %d"
                    % (path, lineno, len(INSTANCE_COLUMNS), len(fields)))
            instances.append(RefexInstance(
                entity=fields[0],
                pre_context=fields[1].split(),
                pos_context=fields[2].split(),
                refex=fields[3].split(),
                form=fields[4],
                features=FormFeatures(fields[5], fields[6], fields[7]),
            ))
    return instances


def write_split_manifest(path, text_ids_by_split):
    with open(path, "w", encoding="utf-8") as f:
        for name in ("train", "dev", "test"):
            f.write("counts\t%s\t%d\n" % (name, len(text_ids_by_split[name])))
        for name in ("train", "dev", "test"):
            for text_id in text_ids_by_split[name]:
                f.write("%s\t%s\n" % (name, text_id))


def read_split_manifest(path):
    out = {"train": [], "dev": [], "test": []}
    with open(path, encoding="utf-8") as f:
        for line in f:
            fields = line.rstrip("\n").split("\t")
            if not fields or fields[0] == "counts" or not fields[0]:
                continue
            out[fields[0]].append(fields[1])
    return out


def prepare_corpus(blocks):
    """Extraction over all blocks. Returns (instances, alignment failures);
    a failing text is skipped, not fatal, so one bad annotation cannot sink
    the corpus. Features are filled by the documented context heuristic."""
    from .baselines import extract_features_heuristic
    instances = []
    failures = []
    for block in blocks:
        try:
            block_instances = extract_instances(block)
        except AlignmentError as exc:
            failures.append((block.text_id, exc))
            continue
        for inst in filter_wiki(block_instances):
            inst.features = extract_features_heuristic(inst)
            instances.append(inst)
    return instances, failures
