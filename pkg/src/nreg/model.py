"""Referring-expression generator: bidirectional context encoders around the
target slot, an entity embedding, and an LSTM decoder with three context
fusion variants (mean pooling, per-side attention, hierarchical attention).
Decoding is beam search with length normalization.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .corpus import Vocabulary, wikify_id
from .errors import (
    ConfigurationError,
    ContractError,
    NumericError,
    VocabularyError,
)
from .optim import AdadeltaState, adadelta_step, clip_global_norm
from .serialize import load_model_file, save_model_file

log = logging.getLogger(__name__)

VARIANTS = ("seq2seq", "catt", "hieratt")
GRAD_CLIP = 5.0


@dataclass
class ModelConfig:
    embedding_dim: int = 300
    hidden_dim: int = 512          # per direction
    attn_dim: int = 0              # 0 means: use hidden_dim
    dropout_p: float = 0.2
    beam_size: int = 1
    max_len: int = 30
    eos_stop_count: int = 2
    length_norm_alpha: float = 0.6
    batch_size: int = 40
    max_epochs: int = 60
    patience: int = 20
    decoder_variant: str = "catt"
    seed: int = 0

    def __post_init__(self):
        if self.attn_dim == 0:
            self.attn_dim = self.hidden_dim
        if min(self.embedding_dim, self.hidden_dim, self.attn_dim) < 1:
            raise ConfigurationError("model dimensions must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError("dropout_p must be in [0,1)")
        if self.beam_size < 1:
            raise ConfigurationError("beam_size must be at least 1")
        if self.decoder_variant not in VARIANTS:
            raise ConfigurationError("decoder_variant must be one of %s"
                                     % (VARIANTS,))
        if self.max_len < 1 or self.eos_stop_count < 1:
            raise ConfigurationError("max_len and eos_stop_count must be positive")

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def length_penalty(length, alpha):
    """Hypothesis score divisor ((5+|y|)^a)/(6^a)."""
    return (5.0 + length) ** alpha / 6.0 ** alpha


def _context_width(config):
    if config.decoder_variant == "hieratt":
        return config.attn_dim
    return 4 * config.hidden_dim  # two sides, 2*hidden each


class NeuralModel:
    """Parameter container plus the forward graph builders."""

    def __init__(self, config, input_vocab, output_vocab, dtype=np.float32,
                 init=True):
        self.config = config
        self.input_vocab = input_vocab
        self.output_vocab = output_vocab
        self.dtype = np.dtype(dtype)
        self.params = {}
        rng = T.RngState(config.seed).spawn(0)
        H, E, A = config.hidden_dim, config.embedding_dim, config.attn_dim
        dec_in = _context_width(config) + 2 * E

        def matrix(name, rows, cols):
            if init:
                self.params[name] = T.glorot_init(rows, cols, rng,
                                                  dtype=self.dtype, name=name)
            else:
                self.params[name] = T.Tensor(np.zeros((rows, cols)),
                                             dtype=self.dtype, name=name)

        def vector(name, n):
            # same fan-based bound as a (n, 1) matrix
            bound = math.sqrt(6.0 / (n + 1)) if init else 0.0
            self.params[name] = T.Tensor(rng.uniform(-bound, bound, n) if init
                                         else np.zeros(n),
                                         dtype=self.dtype, name=name)

        def lstm_bias(name, hdim):
            b = np.zeros(4 * hdim, dtype=self.dtype)
            b[hdim:2 * hdim] = 1.0  # forget gate starts open
            self.params[name] = T.Tensor(b, dtype=self.dtype, name=name)

        matrix("V", len(input_vocab), E)
        for side in ("pre", "pos"):
            for direction in ("fwd", "bwd"):
                base = "enc_%s_%s" % (side, direction)
                matrix(base + "_W", E, 4 * H)
                matrix(base + "_U", H, 4 * H)
                lstm_bias(base + "_b", H)
        if config.decoder_variant in ("catt", "hieratt"):
            for side in ("pre", "pos"):
                matrix("att_%s_W" % side, H, A)
                matrix("att_%s_U" % side, 2 * H, A)
                vector("att_%s_v" % side, A)
        if config.decoder_variant == "hieratt":
            for side in ("pre", "pos"):
                matrix("hier_%s_W" % side, H, A)
                matrix("hier_%s_U" % side, 2 * H, A)
                vector("hier_%s_v" % side, A)
        matrix("dec_W", dec_in, 4 * H)
        matrix("dec_U", H, 4 * H)
        lstm_bias("dec_b", H)
        matrix("out_W", H, len(output_vocab))
        self.params["out_b"] = T.Tensor(np.zeros(len(output_vocab)),
                                        dtype=self.dtype, name="out_b")

    # -- vocabulary plumbing ------------------------------------------------

    def entity_index(self, entity):
        token = wikify_id(entity).lower()
        if token not in self.input_vocab:
            raise VocabularyError("entity %r not in the input vocabulary" % entity)
        return self.input_vocab.index(token)

    def _zeros(self, n):
        return T.Tensor(np.zeros(n), dtype=self.dtype)

    # -- encoders -----------------------------------------------------------

    def lstm_cell(self, x, h_prev, c_prev, base):
        z = T.add(T.add(T.matmul(x, self.params[base + "_W"]),
                        T.matmul(h_prev, self.params[base + "_U"])),
                  self.params[base + "_b"])
        hc = T.lstm_gates(z, c_prev)
        H = self.config.hidden_dim
        return T.slice1d(hc, 0, H), T.slice1d(hc, H, 2 * H)

    def encode_context(self, tokens, side, training=False, rng=None):
        """Annotation vectors [forward_t, backward_t], one per token."""
        if side not in ("pre", "pos"):
            raise ContractError("context side must be pre or pos, not %r" % side)
        if not tokens:
            return []
        V = self.params["V"]
        embeds = [T.embedding_lookup(V, self.input_vocab.index(tok))
                  for tok in tokens]
        H = self.config.hidden_dim
        states = {}
        for direction, sequence in (("fwd", embeds), ("bwd", embeds[::-1])):
            h, c = self._zeros(H), self._zeros(H)
            outputs = []
            for x in sequence:
                h, c = self.lstm_cell(x, h, c, "enc_%s_%s" % (side, direction))
                outputs.append(h)
            states[direction] = outputs
        states["bwd"].reverse()
        annotations = [T.concat([f, b])
                       for f, b in zip(states["fwd"], states["bwd"])]
        if training:
            annotations = [T.dropout(a, self.config.dropout_p, True, rng)
                           for a in annotations]
        return annotations

    # -- context fusion variants ---------------------------------------------

    def context_seq2seq(self, h_pre, h_pos):
        """Time-averaged annotations from both sides, concatenated."""
        if not h_pre and not h_pos:
            log.debug("reference with two empty contexts: zero context vector")
        halves = []
        for annotations in (h_pre, h_pos):
            if annotations:
                stacked = T.stack_rows(annotations)
                weights = T.Tensor(
                    np.full(len(annotations), 1.0 / len(annotations)),
                    dtype=self.dtype)
                halves.append(T.matmul(weights, stacked))
            else:
                halves.append(self._zeros(2 * self.config.hidden_dim))
        return T.concat(halves)

    def attention(self, s_prev, annotations, side, prefix="att"):
        """Additive attention: weights over annotations and their weighted sum."""
        if not annotations:
            raise ContractError("attention over an empty %s context" % side)
        W = self.params["%s_%s_W" % (prefix, side)]
        U = self.params["%s_%s_U" % (prefix, side)]
        v = self.params["%s_%s_v" % (prefix, side)]
        stacked = T.stack_rows(annotations)
        scores = T.matmul(T.tanh(T.bias_add(T.matmul(stacked, U),
                                            T.matmul(s_prev, W))), v)
        alpha = T.softmax(scores)
        summary = T.matmul(alpha, stacked)
        return alpha, summary

    def _side_summary(self, s_prev, annotations, side):
        if not annotations:
            return self._zeros(2 * self.config.hidden_dim)
        _, summary = self.attention(s_prev, annotations, side)
        return summary

    def context_catt(self, s_prev, h_pre, h_pos):
        """Concatenated per-side attention summaries."""
        return T.concat([self._side_summary(s_prev, h_pre, "pre"),
                         self._side_summary(s_prev, h_pos, "pos")])

    def context_hieratt(self, s_prev, summary_pre, summary_pos):
        """Second attention over the two side summaries; the fused context is
        the beta-weighted sum of the projected summaries."""
        energies = []
        projections = []
        for side, summary in (("pre", summary_pre), ("pos", summary_pos)):
            W = self.params["hier_%s_W" % side]
            U = self.params["hier_%s_U" % side]
            v = self.params["hier_%s_v" % side]
            projected = T.matmul(summary, U)
            hidden = T.tanh(T.add(T.matmul(s_prev, W), projected))
            # (1, attn_dim) @ (attn_dim,) keeps the energy a length-1 vector
            energies.append(T.matmul(T.stack_rows([hidden]), v))
            projections.append(projected)
        beta = T.softmax(T.concat(energies))
        return T.matmul(beta, T.stack_rows(projections))

    def context_vector(self, s_prev, h_pre, h_pos):
        variant = self.config.decoder_variant
        if variant == "seq2seq":
            return self.context_seq2seq(h_pre, h_pos)
        if variant == "catt":
            return self.context_catt(s_prev, h_pre, h_pos)
        pre = self._side_summary(s_prev, h_pre, "pre")
        pos = self._side_summary(s_prev, h_pos, "pos")
        return self.context_hieratt(s_prev, pre, pos)

    # -- decoder --------------------------------------------------------------

    def _step(self, s_h, s_c, context, y_prev_input_idx, entity_idx,
              training=False, rng=None):
        V = self.params["V"]
        x = T.concat([context,
                      T.embedding_lookup(V, y_prev_input_idx),
                      T.embedding_lookup(V, entity_idx)])
        if training:
            x = T.dropout(x, self.config.dropout_p, True, rng)
        h, c = self.lstm_cell(x, s_h, s_c, "dec")
        logits = T.add(T.matmul(h, self.params["out_W"]), self.params["out_b"])
        return h, c, logits

    def decoder_step(self, s_prev, context, y_prev_input_idx, entity_idx):
        """One evaluation-mode step: new state and the output distribution."""
        s_h, s_c = s_prev
        h, c, logits = self._step(s_h, s_c, context, y_prev_input_idx, entity_idx)
        return (h, c), T.softmax(logits)


def _output_to_input_index(model, out_idx):
    return model.input_vocab.index(model.output_vocab.token(out_idx))


def _teacher_sequences(model, instance):
    """Target output indices (refex plus the two stop tokens) and the gold
    input indices that precede each of them."""
    out_v, in_v = model.output_vocab, model.input_vocab
    targets = ([out_v.index(tok) for tok in instance.refex]
               + [out_v.EOS] * model.config.eos_stop_count)
    inputs = ([in_v.BOS] + [in_v.index(tok) for tok in instance.refex]
              + [in_v.EOS] * (model.config.eos_stop_count - 1))
    return targets, inputs


def instance_loss(model, instance, training=False, rng=None):
    """Token-summed NLL of the gold refex (teacher forcing)."""
    H = model.config.hidden_dim
    h_pre = model.encode_context(instance.pre_context, "pre", training, rng)
    h_pos = model.encode_context(instance.pos_context, "pos", training, rng)
    entity_idx = model.entity_index(instance.entity)
    targets, inputs = _teacher_sequences(model, instance)
    s_h, s_c = model._zeros(H), model._zeros(H)
    static_context = (model.context_seq2seq(h_pre, h_pos)
                      if model.config.decoder_variant == "seq2seq" else None)
    losses = []
    for target, y_prev in zip(targets, inputs):
        context = (static_context if static_context is not None
                   else model.context_vector(s_h, h_pre, h_pos))
        s_h, s_c, logits = model._step(s_h, s_c, context, y_prev, entity_idx,
                                       training, rng)
        losses.append(T.nll_logits(logits, target))
    total = losses[0]
    for piece in losses[1:]:
        total = T.add(total, piece)
    return total


def batch_loss(model, batch, training=False, rng=None):
    """Mean over instances of token-summed NLL."""
    if not batch:
        raise ContractError("empty batch")
    total = instance_loss(model, batch[0], training, rng)
    for instance in batch[1:]:
        total = T.add(total, instance_loss(model, instance, training, rng))
    return T.scale(total, 1.0 / len(batch))


# ---------------------------------------------------------------------------
# decoding


def _log_softmax(values):
    m = values.max()
    return values - (m + math.log(np.exp(values - m).sum()))


@dataclass
class Hypothesis:
    tokens: tuple           # output-vocab indices, EOS included
    log_prob: float
    state: tuple            # (s_h, s_c) Tensors
    eos_seen: int

    def score(self, alpha):
        return self.log_prob / length_penalty(max(1, len(self.tokens)), alpha)


def _finished(hyp, config):
    return (hyp.eos_seen >= config.eos_stop_count
            or len(hyp.tokens) >= config.max_len)


def beam_search(model, instance, config=None):
    """Best refex tokens under length-normalized beam search. A hypothesis
    finishes on its second stop token or at the length cap; stop tokens are
    stripped from the returned tokens."""
    config = config or model.config
    H = model.config.hidden_dim
    h_pre = model.encode_context(instance.pre_context, "pre")
    h_pos = model.encode_context(instance.pos_context, "pos")
    entity_idx = model.entity_index(instance.entity)
    static_context = (model.context_seq2seq(h_pre, h_pos)
                      if model.config.decoder_variant == "seq2seq" else None)
    eos = model.output_vocab.EOS
    start = Hypothesis((), 0.0, (model._zeros(H), model._zeros(H)), 0)
    active = [start]
    done = []
    while active:
        candidates = []
        for hyp in active:
            s_h, s_c = hyp.state
            context = (static_context if static_context is not None
                       else model.context_vector(s_h, h_pre, h_pos))
            y_prev = (model.input_vocab.BOS if not hyp.tokens
                      else _output_to_input_index(model, hyp.tokens[-1]))
            new_h, new_c, logits = model._step(s_h, s_c, context, y_prev,
                                               entity_idx)
            log_probs = _log_softmax(logits.values.astype(np.float64))
            k = min(config.beam_size, len(log_probs))
            top = np.argpartition(-log_probs, k - 1)[:k]
            for idx in top:
                candidates.append(Hypothesis(
                    hyp.tokens + (int(idx),),
                    hyp.log_prob + float(log_probs[idx]),
                    (new_h, new_c),
                    hyp.eos_seen + (1 if idx == eos else 0)))
        candidates.sort(key=lambda h: (-h.score(config.length_norm_alpha),
                                       len(h.tokens), h.tokens))
        active = []
        for hyp in candidates[:config.beam_size]:
            if _finished(hyp, config):
                done.append(hyp)
            else:
                active.append(hyp)
    best = min(done, key=lambda h: (-h.score(config.length_norm_alpha),
                                    len(h.tokens), h.tokens))
    return [model.output_vocab.token(i) for i in best.tokens if i != eos]


def greedy_decode(model, instance, config=None):
    """Step-by-step argmax decoding; the beam_size=1 reference behavior."""
    config = config or model.config
    H = model.config.hidden_dim
    h_pre = model.encode_context(instance.pre_context, "pre")
    h_pos = model.encode_context(instance.pos_context, "pos")
    entity_idx = model.entity_index(instance.entity)
    static_context = (model.context_seq2seq(h_pre, h_pos)
                      if model.config.decoder_variant == "seq2seq" else None)
    eos = model.output_vocab.EOS
    s_h, s_c = model._zeros(H), model._zeros(H)
    tokens = []
    eos_seen = 0
    y_prev = model.input_vocab.BOS
    while len(tokens) < config.max_len and eos_seen < config.eos_stop_count:
        context = (static_context if static_context is not None
                   else model.context_vector(s_h, h_pre, h_pos))
        s_h, s_c, logits = model._step(s_h, s_c, context, y_prev, entity_idx)
        idx = int(np.argmax(logits.values))
        tokens.append(idx)
        eos_seen += idx == eos
        y_prev = _output_to_input_index(model, idx)
    return [model.output_vocab.token(i) for i in tokens if i != eos]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    epoch: int = 0
    best_dev_accuracy: float = -1.0
    epochs_since_improvement: int = 0
    stop_reason: str = ""
    optimizer: object = None


def _dev_accuracy(model, dev_instances, config):
    hits = 0
    for instance in dev_instances:
        try:
            pred = beam_search(model, instance, config)
        except VocabularyError:
            continue  # unseen entity counts as a miss
        if [t.lower() for t in pred] == [t.lower() for t in instance.refex]:
            hits += 1
    return hits / len(dev_instances)


def train(model, train_instances, dev_instances, config=None, callback=None):
    """Seeded minibatch Adadelta with early stopping on dev accuracy.

    Returns (model restored to its best-dev parameters, history rows,
    final TrainState). History rows are (epoch, train_loss, dev_accuracy,
    seconds).
    """
    config = config or model.config
    if not train_instances or not dev_instances:
        raise ContractError("training needs non-empty train and dev splits")
    shuffle_rng = T.RngState(config.seed).spawn(1)
    dropout_rng = T.RngState(config.seed).spawn(2)
    state = TrainState(optimizer=AdadeltaState(model.params))
    history = []
    best_values = {k: t.values.copy() for k, t in model.params.items()}
    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(len(train_instances))
        epoch_losses = []
        for b0 in range(0, len(order), config.batch_size):
            batch = [train_instances[i] for i in order[b0:b0 + config.batch_size]]
            with T.Tape() as tape:
                loss = batch_loss(model, batch, training=True, rng=dropout_rng)
                loss_value = float(loss.values)
                if not math.isfinite(loss_value):
                    raise NumericError(
                        "non-finite loss at epoch %d, batch %d"
                        % (epoch, b0 // config.batch_size))
                tape.backward(loss)
            grads = {name: t.grad for name, t in model.params.items()
                     if t.grad is not None}
            clip_global_norm(grads, GRAD_CLIP)
            adadelta_step(model.params, grads, state.optimizer)
            for t in model.params.values():
                t.zero_grad()
            epoch_losses.append(loss_value)
        dev_acc = _dev_accuracy(model, dev_instances, config)
        seconds = time.perf_counter() - started
        history.append((epoch, sum(epoch_losses) / len(epoch_losses),
                        dev_acc, seconds))
        state.epoch = epoch
        if dev_acc > state.best_dev_accuracy:
            state.best_dev_accuracy = dev_acc
            state.epochs_since_improvement = 0
            best_values = {k: t.values.copy() for k, t in model.params.items()}
        else:
            state.epochs_since_improvement += 1
        if callback is not None:
            callback(state, history[-1])
        if state.epochs_since_improvement > config.patience:
            state.stop_reason = "patience"
            break
    else:
        state.stop_reason = "max_epochs"
    for name, values in best_values.items():
        model.params[name].values = values
    return model, history, state


def write_training_log(path, history):
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch\ttrain_loss\tdev_accuracy\tseconds\n")
        for epoch, loss, acc, seconds in history:
            f.write("%d\t%.6f\t%.6f\t%.3f\n" % (epoch, loss, acc, seconds))


# ---------------------------------------------------------------------------
# persistence


def save_model(path, model):
    meta = {
        "config": model.config.to_dict(),
        "dtype": model.dtype.name,
        "input_vocab": model.input_vocab.tokens,
        "output_vocab": model.output_vocab.tokens,
    }
    save_model_file(path, meta, model.params)


def load_model(path):
    meta, params = load_model_file(path)
    config = ModelConfig.from_dict(meta["config"])
    model = NeuralModel(config, Vocabulary(meta["input_vocab"]),
                        Vocabulary(meta["output_vocab"]),
                        dtype=np.dtype(meta["dtype"]), init=False)
    for name, tensor in model.params.items():
        if name not in params:
            raise ContractError("model file lacks parameter %r" % name)
        if params[name].shape != tensor.values.shape:
            raise ContractError("parameter %r has shape %s, expected %s"
                                % (name, params[name].shape,
                                   tensor.values.shape))
        tensor.values = params[name].astype(model.dtype)
    return model
