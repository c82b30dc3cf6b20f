"""Conformer-lite encoder with banded self-attention and a global token.

Layout: three conv blocks (conv -> batch norm -> ReLU -> dropout; the second
adds its input back, the third downsamples by ``downsample_stride``), a
learned global token prepended to the frame sequence, ``n_attn_blocks``
pre-norm blocks of multi-head local self-attention plus a feed-forward
layer, a final layer norm, and two linear heads: per-frame CTC logits over
blank + vocabulary, and a classification head on the global token.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import FormatError, InvalidParameterError, ShapeError

MAGIC = b"SSIM"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


@dataclass
class ModelConfig:
    input_dim: int = 36
    hidden_dim: int = 128
    n_conv_blocks: int = 3
    n_attn_blocks: int = 3
    n_heads: int = 4
    attn_window: int = 8
    downsample_stride: int = 2
    dropout_p: float = 0.1
    vocab_size: int = 24
    kernel_size: int = 5
    ffn_mult: int = 2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise InvalidParameterError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if self.attn_window < 1:
            raise InvalidParameterError("attn_window must be >= 1")
        if self.n_conv_blocks != 3:
            raise InvalidParameterError("the encoder has exactly three conv blocks")
        if self.kernel_size % 2 == 0:
            raise InvalidParameterError("kernel_size must be odd")
        if not 0 <= self.dropout_p < 1:
            raise InvalidParameterError("dropout_p must be in [0, 1)")

    @property
    def output_dim(self):
        return self.vocab_size + 1

    @property
    def conv_radius(self):
        """Receptive-field radius of the conv stack, in downsampled frames."""
        return math.ceil(self.n_conv_blocks * (self.kernel_size // 2) / self.downsample_stride)

    def frames_out(self, t_len):
        return -(-t_len // self.downsample_stride)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidParameterError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class ModelParams:
    """Named trainable tensors plus batch-norm running statistics."""

    def __init__(self, cfg, tensors, buffers):
        self.cfg = cfg
        self.tensors = tensors
        self.buffers = buffers

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors) + list(self.buffers)

    def arrays(self):
        """All parameter and buffer arrays in checkpoint order."""
        return [(n, t.data) for n, t in self.tensors.items()] + list(self.buffers.items())

    def copy(self):
        tensors = {n: Tensor(t.data.copy(), requires_grad=True) for n, t in self.tensors.items()}
        return ModelParams(self.cfg, tensors, {n: b.copy() for n, b in self.buffers.items()})

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def payload(self):
        return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in self.arrays())

    def digest(self):
        return hashlib.sha256(self.payload()).hexdigest()


def init_params(cfg, seed=0):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit norms."""
    rng = np.random.default_rng(seed)
    h, k = cfg.hidden_dim, cfg.kernel_size
    tensors, buffers = {}, {}

    def weight(name, shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        tensors[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def const(name, shape, value):
        tensors[name] = Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True)

    cin = cfg.input_dim
    for i in range(1, 4):
        weight(f"conv{i}.kernel", (h, cin, k), cin * k)
        const(f"conv{i}.bias", (h,), 0.0)
        const(f"conv{i}.bn_gamma", (h,), 1.0)
        const(f"conv{i}.bn_beta", (h,), 0.0)
        buffers[f"conv{i}.bn_mean"] = np.zeros(h)
        buffers[f"conv{i}.bn_var"] = np.ones(h)
        cin = h
    weight("global_token", (h,), h)
    f = h * cfg.ffn_mult
    for i in range(1, cfg.n_attn_blocks + 1):
        p = f"attn{i}"
        const(f"{p}.ln1.gamma", (h,), 1.0)
        const(f"{p}.ln1.beta", (h,), 0.0)
        for m in ("q", "k", "v", "o"):
            weight(f"{p}.W{m}", (h, h), h)
            const(f"{p}.b{m}", (h,), 0.0)
        const(f"{p}.ln2.gamma", (h,), 1.0)
        const(f"{p}.ln2.beta", (h,), 0.0)
        weight(f"{p}.ffn.W1", (h, f), h)
        const(f"{p}.ffn.b1", (f,), 0.0)
        weight(f"{p}.ffn.W2", (f, h), f)
        const(f"{p}.ffn.b2", (h,), 0.0)
    const("final_ln.gamma", (h,), 1.0)
    const("final_ln.beta", (h,), 0.0)
    weight("head_ctc.W", (h, cfg.output_dim), h)
    const("head_ctc.b", (cfg.output_dim,), 0.0)
    weight("head_cls.W", (h, cfg.vocab_size), h)
    const("head_cls.b", (cfg.vocab_size,), 0.0)
    return ModelParams(cfg, tensors, buffers)


def is_decayed(name):
    """Weight decay applies to weight matrices and kernels only."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf == "kernel" or leaf.startswith("W")


def band_mask(t_len, window):
    """Allowed attention pairs over ``[global, frame_0 .. frame_{t_len-1}]``.

    Index 0 is the global token, which sees and is seen by every position;
    frames see frames within ``window`` steps.
    """
    idx = np.arange(t_len + 1)
    allowed = np.abs(idx[:, None] - idx[None, :]) <= window
    allowed[0, :] = True
    allowed[:, 0] = True
    return allowed


def _conv_block(params, i, x, stride, train, rng, cfg):
    p = f"conv{i}"
    y = ad.conv1d(x, params[f"{p}.kernel"], params[f"{p}.bias"], stride=stride,
                  padding=cfg.kernel_size // 2)
    y = ad.batchnorm1d(y, params[f"{p}.bn_gamma"], params[f"{p}.bn_beta"],
                       params.buffers[f"{p}.bn_mean"], params.buffers[f"{p}.bn_var"],
                       train, cfg.bn_momentum, cfg.bn_eps)
    return ad.dropout(ad.relu(y), cfg.dropout_p, rng, train)


def _attention(params, p, z, mask, cfg):
    bsz, n, h = z.shape
    nh, dh = cfg.n_heads, h // cfg.n_heads

    def heads(t):
        return t.reshape(bsz, n, nh, dh).transpose(0, 2, 1, 3)

    # scale q rather than the [n, n] scores
    q = heads(ad.linear(z, params[f"{p}.Wq"], params[f"{p}.bq"]) * (1.0 / math.sqrt(dh)))
    k = heads(ad.linear(z, params[f"{p}.Wk"], params[f"{p}.bk"]))
    v = heads(ad.linear(z, params[f"{p}.Wv"], params[f"{p}.bv"]))
    scores = ad.matmul(q, k.transpose(0, 1, 3, 2))
    att = ad.softmax(scores, axis=-1, mask=mask)
    out = ad.matmul(att, v).transpose(0, 2, 1, 3).reshape(bsz, n, h)
    return ad.linear(out, params[f"{p}.Wo"], params[f"{p}.bo"])


def _pin_global(z, state):
    rest = z[:, 1:]
    pinned = Tensor(np.broadcast_to(state, (z.shape[0], 1, z.shape[2])))
    return ad.concat([pinned, rest], axis=1)


def forward(params, x, train_mode=False, seed=0, *, global_states=None, trace=None):
    """Run the encoder.

    ``x`` is ``[T, D]`` or ``[B, T, D]`` (array or Tensor). Returns
    ``(ctc_logits, cls_logits)`` as Tensors of shape ``[B, T'', V+1]`` and
    ``[B, V]`` (batch axis dropped for unbatched input).

    ``global_states``, when given, pins the global-token state entering each
    attention block (a list of ``n_attn_blocks`` arrays of shape ``[H]``);
    ``trace`` (a list) collects those states from an unpinned run.
    """
    cfg = params.cfg
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    if x.ndim != 3 or x.shape[-1] != cfg.input_dim:
        raise ShapeError(f"expected [B, T, {cfg.input_dim}] input, got {x.shape}")
    rng = np.random.default_rng(seed)

    h1 = _conv_block(params, 1, x, 1, train_mode, rng, cfg)
    h2 = h1 + _conv_block(params, 2, h1, 1, train_mode, rng, cfg)
    h3 = _conv_block(params, 3, h2, cfg.downsample_stride, train_mode, rng, cfg)

    bsz, t_out, h = h3.shape
    g = ad.expand(params["global_token"].reshape(1, 1, h), (bsz, 1, h))
    z = ad.concat([g, h3], axis=1)
    mask = band_mask(t_out, cfg.attn_window)
    for i in range(1, cfg.n_attn_blocks + 1):
        p = f"attn{i}"
        if global_states is not None:
            z = _pin_global(z, global_states[i - 1])
        if trace is not None:
            trace.append(z.data[:, 0].copy())
        y = ad.layernorm(z, params[f"{p}.ln1.gamma"], params[f"{p}.ln1.beta"])
        z = z + ad.dropout(_attention(params, p, y, mask, cfg), cfg.dropout_p, rng, train_mode)
        y = ad.layernorm(z, params[f"{p}.ln2.gamma"], params[f"{p}.ln2.beta"])
        f = ad.relu(ad.linear(y, params[f"{p}.ffn.W1"], params[f"{p}.ffn.b1"]))
        f = ad.linear(ad.dropout(f, cfg.dropout_p, rng, train_mode),
                      params[f"{p}.ffn.W2"], params[f"{p}.ffn.b2"])
        z = z + ad.dropout(f, cfg.dropout_p, rng, train_mode)
    z = ad.layernorm(z, params["final_ln.gamma"], params["final_ln.beta"])
    ctc_logits = ad.linear(z[:, 1:], params["head_ctc.W"], params["head_ctc.b"])
    cls_logits = ad.linear(z[:, 0], params["head_cls.W"], params["head_cls.b"])
    if single:
        return ctc_logits[0], cls_logits[0]
    return ctc_logits, cls_logits


# ---------------------------------------------------------------------------
# checkpoint


def save_checkpoint(path, params, vocab_tokens=None, meta=None, seed=None):
    arrays = params.arrays()
    layout, off = [], 0
    for name, a in arrays:
        n = int(a.size) * 4
        layout.append({"name": name, "shape": list(a.shape), "offset": off, "nbytes": n,
                       "buffer": name in params.buffers})
        off += n
    vocab_tokens = list(vocab_tokens) if vocab_tokens is not None else None
    header = {
        "format_version": VERSION,
        "config": asdict(params.cfg),
        "vocabulary": vocab_tokens,
        "vocab_hash": (hashlib.sha256("\n".join(vocab_tokens).encode()).hexdigest()[:16]
                       if vocab_tokens is not None else None),
        "training": meta or {},
        "seed": seed,
        "tensors": layout,
        "payload_nbytes": off,
    }
    blob = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(blob)))
        f.write(blob)
        f.write(params.payload())


def load_checkpoint(path):
    """Returns ``(params, header)``; parameters come back as float64 copies of float32."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise FormatError("file shorter than checkpoint header", 0)
    magic, version, hlen = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    start = _HEADER.size
    if start + hlen > len(data):
        raise FormatError(f"header of {hlen} bytes truncated", start)
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"])
        layout = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError,
            InvalidParameterError) as e:
        raise FormatError(f"unreadable checkpoint header: {e}", start) from None
    base = start + hlen
    try:
        expected = init_params(cfg, 0)
    except (ValueError, TypeError, OverflowError, MemoryError) as e:
        raise FormatError(f"checkpoint config is unusable: {e}", start) from None
    want = {n: a.shape for n, a in expected.arrays()}
    tensors, buffers = {}, {}
    if not isinstance(layout, list):
        raise FormatError("tensor layout must be a list", start)
    for entry in layout:
        try:
            name, shape = entry["name"], tuple(int(d) for d in entry["shape"])
            off, n = base + int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad tensor entry: {e!r}", start) from None
        if name not in want or want[name] != shape:
            raise FormatError(f"tensor {name!r} with shape {shape} does not fit the config", start)
        if off < base or n != 4 * int(np.prod(shape)) or off + n > len(data):
            raise FormatError(f"payload for tensor {name!r} truncated", off)
        a = np.frombuffer(data, dtype="<f4", count=n // 4, offset=off).reshape(shape)
        a = a.astype(np.float64)
        if entry.get("buffer"):
            buffers[name] = a
        else:
            tensors[name] = Tensor(a, requires_grad=True)
    missing = set(want) - set(tensors) - set(buffers)
    if missing:
        raise FormatError(f"checkpoint lacks tensors {sorted(missing)}", start)
    return ModelParams(cfg, tensors, buffers), header
