"""Optimization and evaluation protocols.

Training minimizes the batch-mean CTC loss plus ``ce_weight`` times the
cross-entropy of the global-token classifier on single-token samples, with
Adam and decoupled weight decay. Batches hold samples of one length, so no
padding or masking is needed anywhere in the network.
"""
from __future__ import annotations

import json
import logging
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .ctc import DecodeResult, beam_decode, ctc_loss_tensor, greedy_decode, log_softmax, min_frames
from .dataset import (DatasetSplit, Vocabulary, augment_train, check_no_leakage,
                      stratified_split)
from .errors import InfeasibleTargetError, InvalidParameterError
from .model import ModelConfig, forward, init_params, is_decayed
from .signal import preprocess

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.001
    weight_decay: float = 1e-5
    batch_size: int = 32
    epochs: int = 50
    ce_weight: float = 1.0
    seed: int = 0
    beam_width: int = 8
    few_shot_epochs: int = 5
    few_shot_lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("lr", "batch_size", "epochs", "beam_width"):
            if getattr(self, name) <= 0:
                raise InvalidParameterError(f"{name} must be positive")
        if self.weight_decay < 0 or self.ce_weight < 0:
            raise InvalidParameterError("weight_decay and ce_weight must be non-negative")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidParameterError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, cfg, lr=None):
    """One Adam update; decoupled weight decay on weights only.

    ``params`` maps names to Tensors (a ModelParams works), ``grads`` maps
    names to arrays; parameters without a gradient are left alone.
    """
    lr = cfg.lr if lr is None else lr
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    tensors = params.tensors if hasattr(params, "tensors") else params
    for name, g in grads.items():
        if g is None:
            continue
        p = tensors[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if cfg.weight_decay and is_decayed(name):
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# features


class FeatureSource:
    """Preprocessed features for samples of a split, optionally channel/axis-restricted.

    Originals are cached; augmented samples are rebuilt on demand.
    """

    def __init__(self, split, channels=None, axes=None):
        self.split = split
        self.channels = None if channels is None else list(channels)
        self.axes = None if axes is None else list(axes)
        self._cache = {}

    def __call__(self, s):
        hit = self._cache.get(s.uid)
        if hit is not None:
            return hit
        w = self.split.window(s)
        if self.channels is not None:
            w = w[:, self.channels]
        if self.axes is not None:
            w = w[:, :, self.axes]
        f = preprocess(w, s.uid).values
        if s.recipe is None:
            self._cache[s.uid] = f
        return f


def _batches(samples, batch_size, rng):
    by_len = defaultdict(list)
    for s in samples:
        by_len[s.shape[0]].append(s)
    out = []
    for t_len in sorted(by_len):
        group = by_len[t_len]
        order = rng.permutation(len(group))
        for i in range(0, len(group), batch_size):
            out.append([group[j] for j in order[i:i + batch_size]])
    return [out[i] for i in rng.permutation(len(out))]


def _eval_batches(samples, batch_size=64):
    by_len = defaultdict(list)
    for i, s in enumerate(samples):
        by_len[s.shape[0]].append(i)
    for t_len in sorted(by_len):
        idx = by_len[t_len]
        for i in range(0, len(idx), batch_size):
            yield idx[i:i + batch_size]


def check_feasible(samples, model_cfg):
    for s in samples:
        if min_frames(s.labels) > model_cfg.frames_out(s.shape[0]):
            raise InfeasibleTargetError(
                f"sample {s.uid}: {len(s.labels)} labels cannot fit "
                f"{model_cfg.frames_out(s.shape[0])} output frames", s.uid)


def batch_loss(params, feats, samples, train_mode, seed, ce_weight):
    """Returns ``(total, ctc, ce)``; ``total`` is a scalar Tensor."""
    x = np.stack(feats)
    ctc_logits, cls_logits = forward(params, x, train_mode, seed)
    ctc = ctc_loss_tensor(ctc_logits, [s.labels for s in samples], [s.uid for s in samples])
    single = [i for i, s in enumerate(samples) if len(s.labels) == 1]
    total, ce_val = ctc, 0.0
    if single and ce_weight:
        ce = ad.cross_entropy(cls_logits[np.array(single)],
                              [samples[i].labels[0] - 1 for i in single])
        ce_val = float(ce.data)
        total = ctc + ce * ce_weight
    return total, float(ctc.data), ce_val


# ---------------------------------------------------------------------------
# decoding and metrics


def decode(params, samples, features, beam_width=8):
    """Eval-mode decoding of every sample; returns DecodeResults in input order."""
    out = [None] * len(samples)
    for idx in _eval_batches(samples):
        x = np.stack([features(samples[i]) for i in idx])
        ctc_logits, _ = forward(params, x, False)
        lp = log_softmax(ctc_logits.data)
        for j, i in enumerate(idx):
            out[i] = greedy_decode(lp[j]) if beam_width == 1 else beam_decode(lp[j], beam_width)
    return out


def alignment_counts(ref, hyp):
    """Levenshtein alignment of two id sequences: ``(hits, subs, dels, ins)``.

    Minimizes edit cost; among equal-cost alignments, maximizes hits.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    # cells hold (cost, -hits, subs, dels, ins)
    dp = [[None] * (m + 1) for _ in range(n + 1)]
    dp[0][0] = (0, 0, 0, 0, 0)
    for i in range(1, n + 1):
        dp[i][0] = (i, 0, 0, i, 0)
    for j in range(1, m + 1):
        dp[0][j] = (j, 0, 0, 0, j)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            c, h, s, d, a = dp[i - 1][j - 1]
            if ref[i - 1] == hyp[j - 1]:
                diag = (c, h - 1, s, d, a)
            else:
                diag = (c + 1, h, s + 1, d, a)
            c, h, s, d, a = dp[i - 1][j]
            up = (c + 1, h, s, d + 1, a)
            c, h, s, d, a = dp[i][j - 1]
            left = (c + 1, h, s, d, a + 1)
            dp[i][j] = min(diag, up, left)
    _, neg_hits, subs, dels, ins = dp[n][m]
    return -neg_hits, subs, dels, ins


def _ids(x):
    return tuple(x.ids) if isinstance(x, DecodeResult) else tuple(x)


def word_accuracy(refs, hyps):
    """Correctly recognized reference words over total reference words."""
    if len(refs) != len(hyps):
        raise InvalidParameterError(f"{len(refs)} references but {len(hyps)} hypotheses")
    if not refs:
        raise InvalidParameterError("word accuracy needs at least one reference")
    hits = total = 0
    for r, h in zip(refs, hyps):
        r = _ids(r)
        hits += alignment_counts(r, _ids(h))[0]
        total += len(r)
    if total == 0:
        raise InvalidParameterError("references contain no words")
    return hits / total


def insertion_rate(refs, hyps):
    ins = sum(alignment_counts(_ids(r), _ids(h))[3] for r, h in zip(refs, hyps))
    return ins / sum(len(_ids(r)) for r in refs)


def accuracy_by_length(refs, hyps):
    """``{label length: (mean, std)}`` of per-sample word accuracy (population std)."""
    groups = defaultdict(list)
    for r, h in zip(refs, hyps):
        groups[len(_ids(r))].append(word_accuracy([r], [h]))
    return {k: (float(np.mean(v)), float(np.std(v))) for k, v in sorted(groups.items())}


def eval_by_length(params, test, features, cfg):
    hyps = decode(params, test, features, cfg.beam_width)
    return accuracy_by_length([s.labels for s in test], hyps)


# ---------------------------------------------------------------------------
# training


def _grads(params):
    return {n: t.grad for n, t in params.tensors.items()}


def fit(params, train_samples, cfg, features, *, epochs=None, lr=None, val_samples=None,
        seed=None, held_out=frozenset(), log_path=None, select_best=True):
    """Run the optimization loop on ``params`` in place.

    Returns ``(best_params, records)``; ``best_params`` is a copy of the
    parameters at the epoch with the highest validation word accuracy (the
    final parameters when there is no validation set).
    """
    epochs = cfg.epochs if epochs is None else epochs
    seed = cfg.seed if seed is None else seed
    state = AdamState()
    records = []
    best, best_acc = params.copy(), -1.0
    sink = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, epochs + 1):
            t0 = time.perf_counter()
            rng = np.random.default_rng([seed, epoch])
            tot = ctc_sum = ce_sum = 0.0
            n_batches = 0
            for bi, batch in enumerate(_batches(train_samples, cfg.batch_size, rng)):
                leaked = [s.uid for s in batch if held_out.intersection(s.sources)]
                if leaked:
                    raise InvalidParameterError(f"held-out data in training batch: {leaked}")
                feats = [features(s) for s in batch]
                params.zero_grad()
                loss, c, e = batch_loss(params, feats, batch, True,
                                        seed * 1_000_003 + epoch * 10_007 + bi, cfg.ce_weight)
                loss.backward()
                adam_step(params, _grads(params), state, cfg, lr)
                tot += float(loss.data)
                ctc_sum += c
                ce_sum += e
                n_batches += 1
            rec = {"epoch": epoch, "train_loss": tot / max(n_batches, 1),
                   "train_ctc": ctc_sum / max(n_batches, 1),
                   "train_ce": ce_sum / max(n_batches, 1)}
            if val_samples:
                hyps = decode(params, val_samples, features, cfg.beam_width)
                acc = word_accuracy([s.labels for s in val_samples], hyps)
                rec["val_word_accuracy"] = acc
                if acc > best_acc or not select_best:
                    best, best_acc = params.copy(), acc
            else:
                best = params.copy()
            rec["wall_time_s"] = time.perf_counter() - t0
            records.append(rec)
            log.info("epoch %d loss %.4f val %s", epoch, rec["train_loss"],
                     rec.get("val_word_accuracy"))
            if sink:
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()
    return best, records


def train(split, cfg, model_cfg, *, channels=None, axes=None, log_path=None, init=None,
          features=None):
    """Train on ``split.train``, select by validation accuracy.

    Returns ``(params, records)``.
    """
    if not split.train:
        raise InvalidParameterError("training set is empty")
    check_no_leakage(split)
    check_feasible(split.train, model_cfg)
    held_out = frozenset(s.uid for s in split.validation) | frozenset(s.uid for s in split.test)
    features = features or FeatureSource(split, channels, axes)
    params = init.copy() if init is not None else init_params(model_cfg, cfg.seed)
    return fit(params, split.train, cfg, features, val_samples=split.validation,
               held_out=held_out, log_path=log_path)


def test_accuracy(params, split, cfg, features=None, samples=None):
    features = features or FeatureSource(split)
    samples = split.test if samples is None else samples
    hyps = decode(params, samples, features, cfg.beam_width)
    return word_accuracy([s.labels for s in samples], hyps)


# ---------------------------------------------------------------------------
# protocols


@dataclass
class EvalReport:
    word_accuracy: float
    per_length: dict
    per_participant: dict = field(default_factory=dict)
    ablation: dict = field(default_factory=dict)
    insertion_rate: float = 0.0
    n_test: int = 0
    decoder: str = "prefix-beam"
    beam_width: int = 8
    checkpoint_selection: str = "best validation word accuracy"

    def to_json(self):
        d = asdict(self)
        d["per_length"] = {str(k): {"mean": m, "std": s} for k, (m, s) in self.per_length.items()}
        d["per_participant"] = {
            str(k): {kk: vv for kk, vv in v.items()} for k, v in self.per_participant.items()}
        return d


def evaluate(params, split, cfg):
    """Held-out word accuracy, accuracy by sentence length and per participant."""
    features = FeatureSource(split)
    test = split.test
    hyps = decode(params, test, features, cfg.beam_width)
    refs = [s.labels for s in test]
    per_p = defaultdict(lambda: ([], []))
    for s, h in zip(test, hyps):
        per_p[s.participant][0].append(s.labels)
        per_p[s.participant][1].append(h)
    return EvalReport(
        word_accuracy=word_accuracy(refs, hyps),
        per_length=accuracy_by_length(refs, hyps),
        per_participant={p: {"standard": word_accuracy(r, h)}
                         for p, (r, h) in sorted(per_p.items())},
        insertion_rate=insertion_rate(refs, hyps),
        n_test=len(test),
        decoder="greedy" if cfg.beam_width == 1 else "prefix-beam",
        beam_width=cfg.beam_width,
    ), hyps


def few_shot_pick(samples, k, seed):
    """``k`` samples per label sequence, drawn after a seeded shuffle."""
    by_class = defaultdict(list)
    for s in samples:
        by_class[s.labels].append(s)
    rng = np.random.default_rng([seed, 4242])
    shots = []
    for key in sorted(by_class):
        group = by_class[key]
        if k > len(group):
            raise InvalidParameterError(
                f"few_shot_k={k} exceeds the {len(group)} samples of class {list(key)}")
        shots += [group[i] for i in rng.permutation(len(group))[:k]]
    return shots


def eval_cross_participant(per_participant, cfg, model_cfg, few_shot_k=5, augment_factor=10,
                           vocab=None, seed=0):
    """Standard, blind (leave-one-participant-out) and few-shot accuracy per participant.

    ``per_participant`` maps participant id to that participant's original
    samples. Each participant's recordings are split 70:15:15. For
    participant p the standard model trains on p's train part; the blind
    model trains on every other participant; the few-shot model fine-tunes
    the blind one on ``few_shot_k`` recordings per class from p's train part.
    All three are scored on p's test part.
    """
    if len(per_participant) < 2:
        raise InvalidParameterError("cross-participant evaluation needs >= 2 participants")
    vocab = vocab or Vocabulary.default()
    parts = {p: stratified_split(samples, seed) for p, samples in per_participant.items()}
    for p, (tr, _, _) in parts.items():
        few_shot_pick(tr, few_shot_k, seed)
    results = {}
    for p in sorted(parts):
        tr, va, te = parts[p]
        own = DatasetSplit(augment_train(tr, augment_factor, seed), va, te, seed, vocab)
        own_params, _ = train(own, cfg, model_cfg)
        standard = test_accuracy(own_params, own, cfg)

        o_tr = [s for q in sorted(parts) if q != p for s in parts[q][0]]
        o_va = [s for q in sorted(parts) if q != p for s in parts[q][1]]
        others = DatasetSplit(augment_train(o_tr, augment_factor, seed), o_va, te, seed, vocab)
        blind_params, _ = train(others, cfg, model_cfg)
        features = FeatureSource(others)
        blind = test_accuracy(blind_params, others, cfg, features)
        if few_shot_k:
            shots = few_shot_pick(tr, few_shot_k, seed)
            tuned = blind_params.copy()
            tuned, _ = fit(tuned, shots, cfg, features, epochs=cfg.few_shot_epochs,
                           lr=cfg.few_shot_lr, seed=seed + 1,
                           held_out=frozenset(s.uid for s in te))
            few = test_accuracy(tuned, others, cfg, features)
        else:
            few = blind
        results[p] = {"standard": standard, "blind": blind, "few_shot": few}
        log.info("participant %s: %s", p, results[p])
    return results


@dataclass(frozen=True)
class Subset:
    channels: tuple
    axes: tuple

    @property
    def key(self):
        return f"channels={','.join(map(str, self.channels))};axes={','.join(map(str, self.axes))}"


def subsets_for_mode(mode, n=6):
    """Single-index subsets followed by cumulative subsets of size 2..n."""
    full = tuple(range(n))
    if mode == "channels":
        make = lambda idx: Subset(tuple(idx), full)  # noqa: E731
    elif mode == "axes":
        make = lambda idx: Subset(full, tuple(idx))  # noqa: E731
    else:
        raise InvalidParameterError(f"ablation mode must be channels or axes, got {mode!r}")
    return [make((i,)) for i in range(n)] + [make(tuple(range(k))) for k in range(2, n + 1)]


def ablate(split, cfg, model_cfg, subsets, n_channels=6, n_axes=6):
    """Retrain on each channel/axis subset and report held-out word accuracy."""
    if not subsets:
        raise InvalidParameterError("no subsets given")
    out = {}
    for sub in subsets:
        if not sub.channels or not sub.axes:
            raise InvalidParameterError(f"empty subset {sub}")
        if (min(sub.channels) < 0 or max(sub.channels) >= n_channels
                or min(sub.axes) < 0 or max(sub.axes) >= n_axes):
            raise InvalidParameterError(f"subset indices out of range: {sub}")
        mcfg = ModelConfig(**{**asdict(model_cfg),
                              "input_dim": len(sub.channels) * len(sub.axes)})
        features = FeatureSource(split, sub.channels, sub.axes)
        params, _ = train(split, cfg, mcfg, features=features)
        out[sub] = test_accuracy(params, split, cfg, features)
        log.info("ablation %s: %.4f", sub.key, out[sub])
    return out


def spearman_rho(xs):
    """Spearman correlation of a series against its index."""
    xs = np.asarray(xs, dtype=np.float64)
    ranks = np.argsort(np.argsort(xs)).astype(np.float64)
    idx = np.arange(len(xs), dtype=np.float64)
    if len(xs) < 2 or ranks.std() == 0:
        return 0.0
    return float(np.corrcoef(idx, ranks)[0, 1])


def parameter_grad_check(params, feats, samples, n_probe=20, h=1e-5, seed=0, ce_weight=1.0):
    """Finite-difference check of the full training loss on random coordinates."""
    rng = np.random.default_rng(seed)
    names = list(params.tensors)
    probes = []
    for _ in range(n_probe):
        name = names[int(rng.integers(len(names)))]
        probes.append((name, int(rng.integers(params[name].data.size))))

    def loss():
        return batch_loss(params, feats, samples, True, 123, ce_weight)[0]

    params.zero_grad()
    loss().backward()
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for n, t in params.tensors.items()}
    saved = {n: b.copy() for n, b in params.buffers.items()}
    worst = 0.0
    for name, i in probes:
        flat = params[name].data.reshape(-1)
        old = flat[i]
        flat[i] = old + h
        fp = float(loss().data)
        flat[i] = old - h
        fm = float(loss().data)
        flat[i] = old
        num = (fp - fm) / (2 * h)
        ana = analytic[name].reshape(-1)[i]
        worst = max(worst, abs(ana - num) / max(1.0, abs(ana), abs(num)))
    for n, b in saved.items():
        params.buffers[n][...] = b
    return worst, probes

