"""Connectionist temporal classification: loss, exact oracle and decoders.

Lattices are ``[T, K]`` arrays of per-frame log-probabilities with column 0
the blank, ``K = V + 1``. All path arithmetic happens in log space.
"""
from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleTargetError, InvalidParameterError

BLANK = 0
NEG_INF = -np.inf
BRUTE_FORCE_LIMIT = 10**6


@dataclass
class DecodeResult:
    ids: tuple
    log_prob: float
    frame_alignment: tuple | None = None


def log_softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def collapse(path):
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for k in path:
        k = int(k)
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return tuple(out)


def min_frames(target):
    """Fewest frames able to emit ``target`` (repeats need a blank between)."""
    target = list(target)
    return len(target) + sum(a == b for a, b in zip(target, target[1:]))


def _extended(targets):
    """Blank-interleaved label sequences, padded to a common length with blanks."""
    s_max = 2 * max(len(t) for t in targets) + 1
    ext = np.zeros((len(targets), s_max), dtype=np.int64)
    valid = np.zeros((len(targets), s_max), dtype=bool)
    for b, t in enumerate(targets):
        ext[b, 1:2 * len(t):2] = t
        valid[b, :2 * len(t) + 1] = True
    skip = np.zeros_like(valid)
    skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2])
    return ext, valid, skip


def _check_targets(t_len, targets, sample_ids=None):
    for b, t in enumerate(targets):
        if len(t) == 0:
            raise InvalidParameterError("CTC targets must be non-empty")
        need = min_frames(t)
        if need > t_len:
            sid = None if sample_ids is None else sample_ids[b]
            where = f" (sample {sid})" if sid is not None else ""
            raise InfeasibleTargetError(
                f"target of length {len(t)} needs {need} frames, lattice has {t_len}{where}",
                sid)


def forward_backward(log_probs, targets, need_beta=True):
    """Log-space alpha/beta over blank-interleaved targets.

    ``log_probs``: [B, T, K]. Returns ``(log_alpha, log_beta, log_total, ext,
    valid)`` with alpha/beta of shape [B, T, S] (both include the emission at
    their own frame) and ``log_total`` of shape [B].
    """
    bsz, t_len, _ = log_probs.shape
    ext, valid, skip = _extended(targets)
    s_max = ext.shape[1]
    lp = np.take_along_axis(log_probs, np.broadcast_to(ext[:, None, :], (bsz, t_len, s_max)),
                            axis=2)
    lp = np.where(valid[:, None, :], lp, NEG_INF)
    ends = np.array([2 * len(t) for t in targets])
    rows = np.arange(bsz)

    alpha = np.full((bsz, t_len, s_max), NEG_INF)
    alpha[:, 0, :2] = lp[:, 0, :2]
    for t in range(1, t_len):
        prev = alpha[:, t - 1]
        acc = prev.copy()
        acc[:, 1:] = np.logaddexp(acc[:, 1:], prev[:, :-1])
        acc[:, 2:] = np.where(skip[:, 2:], np.logaddexp(acc[:, 2:], prev[:, :-2]), acc[:, 2:])
        alpha[:, t] = acc + lp[:, t]
    log_total = np.logaddexp(alpha[rows, -1, ends], alpha[rows, -1, ends - 1])

    beta = None
    if need_beta:
        beta = np.full((bsz, t_len, s_max), NEG_INF)
        beta[rows, -1, ends] = lp[rows, -1, ends]
        beta[rows, -1, ends - 1] = lp[rows, -1, ends - 1]
        skip_next = np.zeros_like(skip)
        skip_next[:, :-2] = skip[:, 2:]
        for t in range(t_len - 2, -1, -1):
            nxt = beta[:, t + 1]
            acc = nxt.copy()
            acc[:, :-1] = np.logaddexp(acc[:, :-1], nxt[:, 1:])
            acc[:, :-2] = np.where(skip_next[:, :-2], np.logaddexp(acc[:, :-2], nxt[:, 2:]),
                                   acc[:, :-2])
            beta[:, t] = acc + lp[:, t]
    return alpha, beta, log_total, ext, valid


def ctc_loss_batch(log_probs, targets, sample_ids=None):
    """Per-sample CTC losses and gradients w.r.t. the pre-softmax logits.

    ``log_probs`` [B, T, K] must be log-softmax outputs. Returns ``(losses [B],
    grads [B, T, K])``; the gradient of ``losses[b]`` w.r.t. the logits that
    produced ``log_probs[b]`` is ``grads[b]``.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    bsz, t_len, k = log_probs.shape
    targets = [tuple(int(i) for i in t) for t in targets]
    _check_targets(t_len, targets, sample_ids)
    alpha, beta, log_total, ext, valid = forward_backward(log_probs, targets)
    lp = np.take_along_axis(log_probs, np.broadcast_to(ext[:, None, :], alpha.shape), axis=2)
    with np.errstate(invalid="ignore"):
        gamma = alpha + beta - lp - log_total[:, None, None]
    occ_s = np.where(np.isfinite(gamma) & valid[:, None, :], np.exp(gamma), 0.0)
    occ = np.zeros_like(log_probs)
    for s in range(ext.shape[1]):
        occ[np.arange(bsz), :, ext[:, s]] += occ_s[:, :, s]
    grads = np.exp(log_probs) - occ
    return -log_total, grads


def ctc_loss(lattice, target):
    """CTC negative log-likelihood of ``target`` under ``lattice`` [T, K].

    Returns ``(loss, grad)`` where ``grad`` is d loss / d logits, treating the
    lattice as the log-softmax of some logits.
    """
    lattice = np.asarray(lattice, dtype=np.float64)
    losses, grads = ctc_loss_batch(lattice[None], [tuple(target)])
    return float(losses[0]), grads[0]


def ctc_loss_tensor(logits, targets, sample_ids=None):
    """Mean CTC loss over a batch as an autodiff node on ``logits`` [B, T, K]."""
    from . import autodiff as ad

    losses, grads = ctc_loss_batch(log_softmax(logits.data), targets, sample_ids)
    scale = 1.0 / len(losses)
    return ad.custom_op(losses.mean(), logits, lambda g: g * grads * scale, "ctc_loss")


def sequence_log_probs(lattice, candidates):
    """Exact log P(candidate | lattice) for each candidate; infeasible -> -inf."""
    lattice = np.asarray(lattice, dtype=np.float64)
    t_len = lattice.shape[0]
    out = np.full(len(candidates), NEG_INF)
    live = []
    for i, c in enumerate(candidates):
        if len(c) == 0:
            out[i] = lattice[:, BLANK].sum()
        elif min_frames(c) <= t_len:
            live.append(i)
    if live:
        lp = np.broadcast_to(lattice, (len(live), *lattice.shape))
        _, _, log_total, _, _ = forward_backward(lp, [tuple(candidates[i]) for i in live],
                                                 need_beta=False)
        out[live] = log_total
    return out


def ctc_brute_force(lattice, target):
    """Exact CTC loss by enumerating every frame labelling. Small lattices only."""
    lattice = np.asarray(lattice, dtype=np.float64)
    t_len, k = lattice.shape
    if k ** t_len > BRUTE_FORCE_LIMIT:
        raise InvalidParameterError(f"{k}^{t_len} alignments exceed the enumeration limit")
    target = tuple(int(i) for i in target)
    paths = np.array(list(itertools.product(range(k), repeat=t_len)), dtype=np.int64)
    scores = lattice[np.arange(t_len), paths].sum(axis=1)
    prev = np.concatenate([np.full((len(paths), 1), -1), paths[:, :-1]], axis=1)
    keep = (paths != BLANK) & (paths != prev)
    n_kept = keep.sum(axis=1)
    match = n_kept == len(target)
    if len(target) > t_len:
        return float("inf")
    if len(target):
        collapsed = np.full((len(paths), t_len), -1)
        pos = np.cumsum(keep, axis=1) - 1
        r, c = np.nonzero(keep)
        collapsed[r, pos[r, c]] = paths[r, c]
        match &= (collapsed[:, :len(target)] == np.array(target)).all(axis=1)
    if not match.any():
        return float("inf")
    m = scores[match]
    top = m.max()
    return float(-(top + np.log(np.exp(m - top).sum())))


def greedy_decode(lattice):
    lattice = np.asarray(lattice, dtype=np.float64)
    best = lattice.argmax(axis=1)
    return DecodeResult(collapse(best), float(lattice[np.arange(len(best)), best].sum()),
                        tuple(int(k) for k in best))


def beam_decode(lattice, beam_width=8):
    """CTC prefix beam search.

    Each prefix tracks separate log-probabilities for paths ending in blank
    and in its last token. Survivors are ranked by total probability, ties by
    the token-id sequence. The final beam together with the greedy sequence
    is rescored exactly and the most probable sequence returned.
    """
    if beam_width < 1:
        raise InvalidParameterError(f"beam width must be >= 1, got {beam_width}")
    lattice = np.asarray(lattice, dtype=np.float64)
    t_len, k = lattice.shape
    n_cand = k - 1 if k - 1 <= 2 * beam_width else 2 * beam_width
    beam = {(): (0.0, NEG_INF)}
    for t in range(t_len):
        row = lattice[t]
        if n_cand == k - 1:
            tokens = range(1, k)
        else:
            tokens = sorted(1 + np.argsort(-row[1:], kind="stable")[:n_cand])
        nxt = defaultdict(lambda: [NEG_INF, NEG_INF])
        for prefix, (pb, pnb) in beam.items():
            total = np.logaddexp(pb, pnb)
            cell = nxt[prefix]
            cell[0] = np.logaddexp(cell[0], total + row[BLANK])
            last = prefix[-1] if prefix else None
            if last is not None:
                cell[1] = np.logaddexp(cell[1], pnb + row[last])
            for tok in tokens:
                tok = int(tok)
                ext = nxt[prefix + (tok,)]
                src = pb if tok == last else total
                ext[1] = np.logaddexp(ext[1], src + row[tok])
        ranked = sorted(nxt.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        beam = {p: tuple(v) for p, v in ranked[:beam_width]}
    candidates = list(beam)
    greedy = greedy_decode(lattice).ids
    if greedy not in beam:
        candidates.append(greedy)
    scores = sequence_log_probs(lattice, candidates)
    best = min(range(len(candidates)), key=lambda i: (-scores[i], candidates[i]))
    return DecodeResult(candidates[best], float(scores[best]))
