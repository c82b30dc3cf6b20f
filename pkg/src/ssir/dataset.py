"""Vocabulary, synthetic recordings, augmentation, splits and the container format.

The human recordings the recognizer was designed for are private, so every
sample here comes from a deterministic generator: each token owns a
multi-series template built from windowed sinusoid bursts, and each
participant sees that template through their own sensor mounting (a rotation
of the accelerometer and gyroscope axes per channel), gain and speaking rate.

Container layout (little-endian)::

    b"SSIR" | u32 version (=1) | u64 manifest length | manifest (UTF-8 JSON) | payload

The payload holds the raw windows of original samples as float32, each window
time-major, then channel, then axis. Augmented training samples are stored
as recipes (source sample ids plus seed) and re-materialized bit-exactly on
read, which keeps a tenfold-augmented container the size of its originals.
"""
from __future__ import annotations

import functools
import hashlib
import json
import struct
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InsufficientDataError, InvalidParameterError
from .signal import SAMPLE_RATE_HZ

WORDS = (
    "afternoon", "thanks", "beautiful", "wait", "breakfast", "want", "drink", "water",
    "hello", "welcome", "please", "what", "sorry", "wonder", "test", "wonderful",
)
PHRASES = (
    "tengtong", "fanshen", "xiachuang", "henkaixin",
    "xiexieni", "woyaoheshui", "woxiangchifan", "tianqizhenhao",
)
SENTENCES = (("drink", "water"), ("hello", "please", "wait"))
BLANK = "<blank>"

N_CHANNELS = 6
N_AXES = 6
WORD_LEN = 80
SENTENCE_LEN = 180
WORD_REPEATS = 100
SENTENCE_REPEATS = 30

MAGIC = b"SSIR"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")

KINDS = ("word", "sentence", "augmented")


class Vocabulary:
    """Token strings <-> ids 1..V; id 0 is the CTC blank."""

    blank_id = 0

    def __init__(self, tokens):
        tokens = list(tokens)
        if not tokens:
            raise InvalidParameterError("vocabulary needs at least one token")
        if len(set(tokens)) != len(tokens):
            raise InvalidParameterError("vocabulary tokens must be unique")
        if BLANK in tokens:
            raise InvalidParameterError(f"{BLANK!r} is reserved")
        self.tokens = tokens
        self.token_to_id = {t: i + 1 for i, t in enumerate(tokens)}

    @classmethod
    def default(cls):
        return cls(WORDS + PHRASES)

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, words):
        try:
            return tuple(self.token_to_id[w] for w in words)
        except KeyError as e:
            raise InvalidParameterError(f"unknown token {e.args[0]!r}") from None

    def decode(self, ids):
        return [self.tokens[i - 1] for i in ids]

    def digest(self):
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]


@dataclass
class LabeledSample:
    """One recording (or augmentation recipe) with its label sequence.

    Original samples carry ``window`` ([T, C, A] float32). Augmented samples
    may carry ``window=None`` plus a ``recipe`` describing how to rebuild it
    from other samples; use ``DatasetSplit.window`` to materialize.
    """
    uid: str
    labels: tuple
    participant: int
    kind: str
    window: np.ndarray | None = None
    recipe: dict | None = None
    shape: tuple | None = None

    def __post_init__(self):
        self.labels = tuple(int(i) for i in self.labels)
        if self.kind not in KINDS:
            raise InvalidParameterError(f"unknown sample kind {self.kind!r}")
        if not self.labels:
            raise InvalidParameterError(f"sample {self.uid} has no labels")
        if self.kind == "word" and len(self.labels) != 1:
            raise InvalidParameterError(f"word sample {self.uid} must have exactly one label")
        if self.window is not None:
            self.shape = tuple(self.window.shape)
        elif self.shape is not None:
            self.shape = tuple(self.shape)

    @property
    def sources(self):
        """Original sample ids this sample was derived from (itself if original)."""
        if self.recipe is None:
            return (self.uid,)
        if self.recipe["op"] == "concat":
            return tuple(self.recipe["sources"])
        return (self.recipe["source"],)


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    seed: int
    vocab: Vocabulary = field(default_factory=Vocabulary.default)

    def __post_init__(self):
        self._by_uid = {s.uid: s for s in self.all_samples()}

    def all_samples(self):
        return [*self.train, *self.validation, *self.test]

    def sample(self, uid):
        return self._by_uid[uid]

    def window(self, s):
        """Raw window of ``s``, rebuilding augmented samples from their recipe."""
        if s.window is not None:
            return s.window
        r = s.recipe
        if r["op"] == "concat":
            return concat_windows([self.window(self.sample(u)) for u in r["sources"]])
        if r["op"] == "noise":
            return add_noise(self.window(self.sample(r["source"])), r["seed"])
        raise FormatError(f"unknown augmentation op {r['op']!r} in {s.uid}")


# ---------------------------------------------------------------------------
# synthetic generation


def _rotation(rng, max_angle):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    theta = rng.uniform(0.5, 1.0) * max_angle
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * (k @ k)


@functools.lru_cache(maxsize=None)
def _participant_profile(participant_id, template_seed, n_channels, n_axes):
    rng = np.random.default_rng([template_seed, 7919, participant_id])
    mix = np.zeros((n_channels, n_axes, n_axes))
    for c in range(n_channels):
        mix[c] = np.eye(n_axes)
        # sensor mounting: accelerometer and gyroscope triads rotate together
        for lo in range(0, n_axes - n_axes % 3, 3):
            mix[c, lo:lo + 3, lo:lo + 3] = _rotation(rng, np.deg2rad(60.0))
    return {
        "mix": mix,
        "gain": rng.uniform(0.7, 1.3, size=(n_channels, n_axes)),
        "rate": rng.uniform(0.85, 1.15),
        "phase": rng.uniform(-np.pi, np.pi, size=(n_channels, n_axes)),
        "gravity": rng.normal(0.0, 3.0, size=(n_channels, n_axes)),
    }


def _draw_token(rng, n_channels, n_axes):
    n_bursts = int(rng.integers(2, 5))
    return {
        "center": np.sort(rng.uniform(0.15, 0.85, size=n_bursts)),
        "width": rng.uniform(0.06, 0.14, size=n_bursts),
        "freq": rng.uniform(3.0, 12.0, size=n_bursts),
        "amp": rng.uniform(0.3, 1.0, size=(n_bursts, n_channels, n_axes))
        * rng.choice([-1.0, 1.0], size=(n_bursts, n_channels, n_axes)),
        "phase": rng.uniform(-np.pi, np.pi, size=(n_bursts, n_channels, n_axes)),
    }


def _render(tok, t_len, rate=1.0, phase=0.0, shift=0.0, fscale=1.0):
    """Burst template on normalized time, carriers in Hz. Returns [T, C, A]."""
    u = (np.arange(t_len) + 0.5) / t_len
    secs = np.arange(t_len) / SAMPLE_RATE_HZ
    out = 0.0
    for b in range(len(tok["freq"])):
        env = np.exp(-0.5 * ((u - tok["center"][b] - shift) / tok["width"][b]) ** 2)
        arg = 2 * np.pi * tok["freq"][b] * rate * fscale * secs
        carrier = np.sin(arg[:, None, None] + tok["phase"][b] + phase)
        out = out + env[:, None, None] * tok["amp"][b] * carrier
    return out


def max_normalized_xcorr(a, b, max_lag=None):
    """Max |normalized cross-correlation| over series and lags of two [T, ...] arrays."""
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    t = a.shape[0]
    max_lag = t // 4 if max_lag is None else max_lag
    best = 0.0
    for j in range(a.shape[1]):
        x = a[:, j] - a[:, j].mean()
        y = b[:, j] - b[:, j].mean()
        den = np.linalg.norm(x) * np.linalg.norm(y)
        if den == 0:
            continue
        full = np.correlate(x, y, mode="full")[t - 1 - max_lag:t + max_lag]
        best = max(best, float(np.abs(full).max() / den))
    return best


XCORR_LIMIT = 0.9


@functools.lru_cache(maxsize=None)
def token_templates(n_tokens, template_seed=0, n_channels=N_CHANNELS, n_axes=N_AXES):
    """Template parameters for tokens 1..n_tokens, redrawn until pairwise distinct."""
    toks = [None]
    refs = []
    for tid in range(1, n_tokens + 1):
        for attempt in range(100):
            rng = np.random.default_rng([template_seed, tid, attempt])
            tok = _draw_token(rng, n_channels, n_axes)
            ref = _render(tok, WORD_LEN)
            if all(max_normalized_xcorr(ref, r) < XCORR_LIMIT for r in refs):
                break
        else:  # pragma: no cover
            raise RuntimeError(f"could not draw a distinct template for token {tid}")
        toks.append(tok)
        refs.append(ref)
    return tuple(toks)


def _clean_signal(tok, participant_id, t_len, rng, template_seed, n_channels, n_axes):
    prof = _participant_profile(participant_id, template_seed, n_channels, n_axes)
    sig = _render(tok, t_len, rate=prof["rate"], phase=prof["phase"],
                  shift=rng.uniform(-0.04, 0.04), fscale=rng.uniform(0.97, 1.03))
    sig = sig * prof["gain"] * rng.uniform(0.85, 1.15)
    return np.einsum("cij,tcj->tci", prof["mix"], sig)


def _sensor_offsets(t_len, participant_id, rng, template_seed, n_channels, n_axes):
    prof = _participant_profile(participant_id, template_seed, n_channels, n_axes)
    secs = np.arange(t_len) / SAMPLE_RATE_HZ
    drift = rng.normal(0, 0.3, size=(n_channels, n_axes)) * np.sin(
        2 * np.pi * rng.uniform(0.05, 0.3) * secs)[:, None, None]
    return prof["gravity"] + drift + rng.normal(0, 0.08, size=(t_len, n_channels, n_axes))


def synthesize_token_signal(token_id, participant_id, t_len, seed, *, n_tokens=None,
                            template_seed=0, n_channels=N_CHANNELS, n_axes=N_AXES):
    """One synthetic recording of ``token_id`` as a float32 [t_len, C, A] window.

    The token template depends only on ``(token_id, template_seed)``; the
    participant profile on ``participant_id``; ``seed`` drives repetition
    jitter (timing, gain, small frequency drift, sensor noise).
    """
    n_tokens = len(WORDS) + len(PHRASES) if n_tokens is None else n_tokens
    if not 1 <= token_id <= n_tokens:
        raise InvalidParameterError(f"token id {token_id} outside [1, {n_tokens}]")
    if t_len < 16:
        raise InvalidParameterError(f"t_len must be >= 16, got {t_len}")
    tok = token_templates(n_tokens, template_seed, n_channels, n_axes)[token_id]
    rng = np.random.default_rng([seed, participant_id, token_id, t_len])
    sig = _clean_signal(tok, participant_id, t_len, rng, template_seed, n_channels, n_axes)
    sig = sig + _sensor_offsets(t_len, participant_id, rng, template_seed, n_channels, n_axes)
    return sig.astype(np.float32)


def synthesize_sentence_signal(token_ids, participant_id, t_len, seed, *, n_tokens=None,
                               template_seed=0, n_channels=N_CHANNELS, n_axes=N_AXES):
    """A continuous multi-word recording in a fixed window.

    Words keep their natural length; when they do not fit, neighbours are
    cross-faded over the overlap (linking), otherwise the slack becomes rest
    before, between and after the words.
    """
    n_tokens = len(WORDS) + len(PHRASES) if n_tokens is None else n_tokens
    n = len(token_ids)
    rng = np.random.default_rng([seed, participant_id, 104729, *token_ids])
    slack = t_len - n * WORD_LEN
    if slack >= 0:
        gap = slack // (n + 1)
        starts = [gap + i * (WORD_LEN + gap) for i in range(n)]
    else:
        overlap = -slack // max(n - 1, 1) + (1 if -slack % max(n - 1, 1) else 0)
        starts = [i * (WORD_LEN - overlap) for i in range(n)]
    out = np.zeros((t_len, n_channels, n_axes))
    ramp = np.ones(WORD_LEN)
    if slack < 0:
        ramp = np.clip(np.minimum(np.arange(WORD_LEN) + 1, WORD_LEN - np.arange(WORD_LEN))
                       / (overlap + 1), 0.0, 1.0)
    for tid, st in zip(token_ids, starts):
        if not 1 <= tid <= n_tokens:
            raise InvalidParameterError(f"token id {tid} outside [1, {n_tokens}]")
        tok = token_templates(n_tokens, template_seed, n_channels, n_axes)[tid]
        word = _clean_signal(tok, participant_id, WORD_LEN, rng, template_seed,
                             n_channels, n_axes) * ramp[:, None, None]
        seg = out[st:st + WORD_LEN]
        seg += word[:len(seg)]
    out += _sensor_offsets(t_len, participant_id, rng, template_seed, n_channels, n_axes)
    return out.astype(np.float32)


def generate_corpus(vocab, participants=4, samples_per_word=WORD_REPEATS,
                    samples_per_sentence=SENTENCE_REPEATS, seed=0, template_seed=0,
                    words=WORDS, phrases=PHRASES, sentences=SENTENCES):
    """Original (un-augmented) recordings for every participant.

    Words use 80-sample windows; phrases and sentences 180-sample windows.
    Phrases are single opaque tokens and carry kind ``word``.
    """
    v = len(vocab)
    out = []
    for p in range(participants):
        for w in words:
            tid = vocab.token_to_id[w]
            for r in range(samples_per_word):
                win = synthesize_token_signal(tid, p, WORD_LEN, seed * 1_000_003 + r,
                                              n_tokens=v, template_seed=template_seed)
                out.append(LabeledSample(f"p{p}-{w}-{r:03d}", (tid,), p, "word", win))
        for ph in phrases:
            tid = vocab.token_to_id[ph]
            for r in range(samples_per_sentence):
                win = synthesize_token_signal(tid, p, SENTENCE_LEN, seed * 1_000_003 + r,
                                              n_tokens=v, template_seed=template_seed)
                out.append(LabeledSample(f"p{p}-{ph}-{r:03d}", (tid,), p, "word", win))
        for sent in sentences:
            ids = vocab.encode(sent)
            for r in range(samples_per_sentence):
                win = synthesize_sentence_signal(ids, p, SENTENCE_LEN, seed * 1_000_003 + r,
                                                 n_tokens=v, template_seed=template_seed)
                out.append(LabeledSample(f"p{p}-{'_'.join(sent)}-{r:03d}", ids, p,
                                         "sentence", win))
    return out


# ---------------------------------------------------------------------------
# augmentation


def concat_windows(windows):
    return np.concatenate(windows, axis=0)


def concat_augment(samples, n_words, seed, uid=None):
    """Time-concatenate ``n_words`` randomly chosen word samples into a pseudo-sentence."""
    if not 2 <= n_words <= 6:
        raise InvalidParameterError(f"n_words must be in [2, 6], got {n_words}")
    if not samples:
        raise InvalidParameterError("no source samples to concatenate")
    for s in samples:
        if s.kind != "word" or s.window is None or s.window.ndim != 3:
            raise InvalidParameterError(
                f"concat sources must be raw word windows; {s.uid} is not")
    if len({s.window.shape[1:] for s in samples}) != 1:
        raise InvalidParameterError("concat sources differ in channel/axis layout")
    rng = np.random.default_rng(seed)
    chosen = [samples[i] for i in rng.integers(0, len(samples), size=n_words)]
    labels = tuple(s.labels[0] for s in chosen)
    return LabeledSample(
        uid or f"aug-concat-{seed}", labels, chosen[0].participant, "augmented",
        concat_windows([s.window for s in chosen]),
        recipe={"op": "concat", "sources": [s.uid for s in chosen]})


def add_noise(window, seed):
    window = np.asarray(window)
    x = window.astype(np.float64)
    sd = x.std(axis=0) / 3.0
    rng = np.random.default_rng(seed)
    return (x + rng.normal(size=x.shape) * sd).astype(window.dtype)


def noise_augment(s, seed, uid=None):
    """Add Gaussian noise with per-series std equal to a third of that series' std."""
    if s.window is None or s.window.ndim != 3:
        raise InvalidParameterError(f"noise augmentation needs a raw window ({s.uid})")
    return LabeledSample(uid or f"aug-noise-{seed}", s.labels, s.participant, "augmented",
                         add_noise(s.window, seed),
                         recipe={"op": "noise", "source": s.uid, "seed": int(seed)})


# ---------------------------------------------------------------------------
# splits

MIN_PER_CLASS = 10
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
MAX_CONCAT_WORDS = 4


def _class_key(s):
    return s.labels


def stratified_split(samples, seed):
    by_class = defaultdict(list)
    for s in samples:
        by_class[_class_key(s)].append(s)
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for key in sorted(by_class):
        group = by_class[key]
        if len(group) < MIN_PER_CLASS:
            raise InsufficientDataError(
                f"class {list(key)} has {len(group)} samples, need >= {MIN_PER_CLASS}")
        order = rng.permutation(len(group))
        n_train = int(round(SPLIT_FRACTIONS[0] * len(group)))
        n_val = int(round(SPLIT_FRACTIONS[1] * len(group)))
        train += [group[i] for i in order[:n_train]]
        val += [group[i] for i in order[n_train:n_train + n_val]]
        test += [group[i] for i in order[n_train + n_val:]]
    return train, val, test


def augment_train(train, augment_factor, seed, max_concat=MAX_CONCAT_WORDS):
    """Expand ``train`` to ``augment_factor`` times its size with lazy recipes.

    Each extra sample is, with equal probability, a noisy copy of a random
    training sample or a concatenation of 2..max_concat word windows of one
    participant.
    """
    if augment_factor < 1:
        raise InvalidParameterError(f"augment_factor must be >= 1, got {augment_factor}")
    rng = np.random.default_rng([seed, 31337])
    words_by_p = defaultdict(list)
    for s in train:
        if s.kind == "word" and s.shape[0] == WORD_LEN:
            words_by_p[s.participant].append(s)
    extra = []
    for i in range((augment_factor - 1) * len(train)):
        src = train[int(rng.integers(len(train)))]
        pool = words_by_p.get(src.participant, [])
        if rng.random() < 0.5 and len(pool) >= 1:
            n = int(rng.integers(2, max_concat + 1))
            chosen = [pool[int(j)] for j in rng.integers(0, len(pool), size=n)]
            shape = (sum(c.shape[0] for c in chosen),) + tuple(chosen[0].shape[1:])
            extra.append(LabeledSample(
                f"aug{i:06d}", tuple(c.labels[0] for c in chosen), src.participant,
                "augmented", None, {"op": "concat", "sources": [c.uid for c in chosen]},
                shape))
        else:
            extra.append(LabeledSample(
                f"aug{i:06d}", src.labels, src.participant, "augmented", None,
                {"op": "noise", "source": src.uid, "seed": int(rng.integers(2**31))},
                src.shape))
    return list(train) + extra


def build_splits(samples, seed, augment_factor=10, vocab=None, max_concat=MAX_CONCAT_WORDS):
    """Stratified 70:15:15 split, then train-only augmentation to ``augment_factor``x."""
    train, val, test = stratified_split(samples, seed)
    train = augment_train(train, augment_factor, seed, max_concat)
    return DatasetSplit(train, val, test, seed, vocab or Vocabulary.default())


def check_no_leakage(split):
    """Raise if any training sample was derived from a validation/test recording."""
    held_out = {s.uid for s in split.validation} | {s.uid for s in split.test}
    for s in split.train:
        bad = held_out.intersection(s.sources)
        if bad:
            raise InvalidParameterError(f"train sample {s.uid} derives from held-out {sorted(bad)}")


# ---------------------------------------------------------------------------
# container


def write_container(split, path):
    records = []
    chunks = []
    offset = 0
    for name, samples in (("train", split.train), ("validation", split.validation),
                          ("test", split.test)):
        for s in samples:
            rec = {"uid": s.uid, "split": name, "participant": int(s.participant),
                   "kind": s.kind, "labels": list(s.labels), "shape": list(s.shape)}
            if s.recipe is not None:
                rec["recipe"] = s.recipe
            else:
                buf = np.ascontiguousarray(s.window, dtype="<f4").tobytes()
                rec["offset"] = offset
                rec["nbytes"] = len(buf)
                chunks.append(buf)
                offset += len(buf)
            records.append(rec)
    manifest = {
        "schema_version": VERSION,
        "vocabulary": {"blank": BLANK, "blank_id": 0, "tokens": split.vocab.tokens},
        "seed": int(split.seed),
        "layout": "float32-le, time-major, channel, axis",
        "payload_nbytes": offset,
        "samples": records,
    }
    blob = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(blob)))
        f.write(blob)
        for c in chunks:
            f.write(c)


def read_container(path):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise FormatError("file shorter than container header", 0)
    magic, version, mlen = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}", 4)
    start = _HEADER.size
    if start + mlen > len(data):
        raise FormatError(f"manifest of {mlen} bytes truncated", start)
    try:
        manifest = json.loads(data[start:start + mlen].decode("utf-8"))
        tokens = manifest["vocabulary"]["tokens"]
        records = manifest["samples"]
        seed = manifest["seed"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"unreadable manifest: {e}", start) from None
    if manifest.get("schema_version") != VERSION:
        raise FormatError(f"manifest schema version {manifest.get('schema_version')}", start)
    try:
        vocab = Vocabulary(tokens)
    except InvalidParameterError as e:
        raise FormatError(f"invalid vocabulary: {e}", start) from None
    payload_start = start + mlen
    payload = memoryview(data)[payload_start:]
    parts = {"train": [], "validation": [], "test": []}
    if not isinstance(records, list):
        raise FormatError("manifest samples must be a list", start)
    for rec in records:
        try:
            _read_record(rec, vocab, parts, payload, payload_start, start)
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            uid = rec.get("uid") if isinstance(rec, dict) else None
            raise FormatError(f"bad sample record {uid!r}: {e!r}", start) from None
    split = DatasetSplit(parts["train"], parts["validation"], parts["test"], seed, vocab)
    for s in split.train:
        if s.recipe is not None:
            if not _valid_recipe(s.recipe) or any(u not in split._by_uid for u in s.sources):
                raise FormatError(f"recipe of {s.uid!r} is malformed or references unknown "
                                  "samples", start)
    return split


def _valid_recipe(r):
    if not isinstance(r, dict):
        return False
    if r.get("op") == "concat":
        return isinstance(r.get("sources"), list) and len(r["sources"]) >= 1
    if r.get("op") == "noise":
        return isinstance(r.get("source"), str) and isinstance(r.get("seed"), int)
    return False


def _read_record(rec, vocab, parts, payload, payload_start, start):
    labels = rec["labels"]
    shape = tuple(int(d) for d in rec["shape"])
    split_name = rec["split"]
    if split_name not in parts:
        raise KeyError("split")
    bad = [i for i in labels if not (isinstance(i, int) and 1 <= i <= len(vocab))]
    if bad:
        raise FormatError(
            f"sample {rec['uid']!r} has label ids {bad} outside vocabulary of "
            f"{len(vocab)} tokens", start)
    window = None
    if "recipe" not in rec:
        off, n = rec["offset"], rec["nbytes"]
        if (not isinstance(off, int) or not isinstance(n, int) or off < 0
                or min(shape, default=0) < 1 or n != 4 * int(np.prod(shape))
                or off + n > len(payload)):
            raise FormatError(f"payload for sample {rec['uid']!r} truncated or mis-sized",
                              payload_start + (off if isinstance(off, int) else 0))
        window = np.frombuffer(payload[off:off + n], dtype="<f4").reshape(shape)
        window = window.astype(np.float32)
    try:
        s = LabeledSample(rec["uid"], tuple(labels), rec["participant"], rec["kind"],
                          window, rec.get("recipe"), shape)
    except InvalidParameterError as e:
        raise FormatError(str(e), start) from None
    parts[split_name].append(s)
