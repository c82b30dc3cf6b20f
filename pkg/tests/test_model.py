import numpy as np
import pytest

from ssir import autodiff as ad
from ssir.errors import FormatError, InvalidParameterError, ShapeError
from ssir.model import (ModelConfig, band_mask, forward, init_params, is_decayed,
                        load_checkpoint, save_checkpoint)

SMALL = ModelConfig(hidden_dim=16, n_heads=2, attn_window=3, vocab_size=5, input_dim=6)


def test_config_validation():
    with pytest.raises(InvalidParameterError):
        ModelConfig(hidden_dim=30, n_heads=4)
    with pytest.raises(InvalidParameterError):
        ModelConfig(dropout_p=1.0)
    cfg = ModelConfig.from_dict({"hidden_dim": 64})
    assert cfg.hidden_dim == 64 and cfg.output_dim == 25
    assert cfg.frames_out(80) == 40 and cfg.frames_out(81) == 41


def test_band_mask():
    m = band_mask(10, 2)
    assert m.shape == (11, 11)
    assert m[0].all() and m[:, 0].all()
    assert (m == m.T).all()
    frames = m[1:, 1:]
    i, j = np.indices(frames.shape)
    assert ((np.abs(i - j) <= 2) == frames).all()
    # each interior frame sees 2w + 1 frames plus the global token
    assert m[5].sum() == 2 * 2 + 1 + 1


def test_shapes():
    p = init_params(SMALL, 0)
    ctc, cls = forward(p, np.zeros((3, 20, 6)))
    assert ctc.shape == (3, 10, 6) and cls.shape == (3, 5)
    ctc1, cls1 = forward(p, np.zeros((21, 6)))
    assert ctc1.shape == (11, 6) and cls1.shape == (5,)
    with pytest.raises(ShapeError):
        forward(p, np.zeros((20, 7)))


def test_init_statistics():
    cfg = ModelConfig()
    p = init_params(cfg, 0)
    checks = {"conv1.kernel": 36 * 5, "attn1.Wq": 128, "attn1.ffn.W2": 256, "head_ctc.W": 128}
    for name, fan_in in checks.items():
        expected = (1 / np.sqrt(fan_in)) / np.sqrt(3)
        assert abs(p[name].data.std() - expected) <= 0.3 * expected, name
    assert np.all(p["attn1.bq"].data == 0)
    assert np.all(p["final_ln.gamma"].data == 1) and np.all(p["final_ln.beta"].data == 0)
    assert init_params(cfg, 0).digest() == p.digest()
    assert init_params(cfg, 1).digest() != p.digest()


def test_decay_selection():
    assert is_decayed("conv1.kernel") and is_decayed("attn2.Wq") and is_decayed("attn1.ffn.W1")
    assert not is_decayed("conv1.bias") and not is_decayed("attn1.ln1.gamma")
    assert not is_decayed("global_token") and not is_decayed("head_ctc.b")


def test_eval_mode_is_deterministic_and_batch_independent():
    p = init_params(SMALL, 0)
    x = np.random.default_rng(0).normal(size=(2, 16, 6))
    a, _ = forward(p, x)
    b, _ = forward(p, x[1])
    np.testing.assert_allclose(a.data[1], b.data, atol=1e-12)


def test_attention_is_local_given_pinned_global_states():
    cfg = ModelConfig(hidden_dim=16, n_heads=2, attn_window=2, vocab_size=5, input_dim=6,
                      n_attn_blocks=2)
    p = init_params(cfg, 0)
    x = np.random.default_rng(1).normal(size=(60, 6))
    trace = []
    base, _ = forward(p, x, trace=trace)
    states = [s[0] for s in trace]
    y = x.copy()
    y[-1] += 5.0  # perturb the last input frame
    out, _ = forward(p, y, global_states=states)
    # receptive field: conv radius 2 per block over 3 blocks, stride 2,
    # then window 2 per attention block
    changed = np.nonzero(np.abs(out.data - base.data).max(axis=1) > 1e-12)[0]
    reach_in = 3 * 2
    first = (60 - 1 - reach_in) // 2 - 2 * cfg.n_attn_blocks
    assert changed.min() >= first
    # without pinning the global token carries the change everywhere
    free, _ = forward(p, y)
    assert np.abs(free.data[0] - base.data[0]).max() > 1e-12


def test_train_mode_dropout_is_seeded():
    p = init_params(SMALL, 0)
    x = np.random.default_rng(0).normal(size=(2, 16, 6))
    a, _ = forward(p.copy(), x, True, seed=3)
    b, _ = forward(p.copy(), x, True, seed=3)
    c, _ = forward(p.copy(), x, True, seed=4)
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_gradients_reach_every_parameter():
    p = init_params(SMALL, 0)
    x = np.random.default_rng(0).normal(size=(2, 16, 6))
    ctc, cls = forward(p, x, True)
    (ad.tsum(ctc * ctc) + ad.tsum(cls * cls)).backward()
    for name, t in p.tensors.items():
        assert t.grad is not None and np.abs(t.grad).sum() > 0, name


def test_checkpoint_roundtrip(tmp_path):
    p = init_params(SMALL, 0)
    path = tmp_path / "m.ssim"
    save_checkpoint(path, p, ["a", "b", "c", "d", "e"], {"note": 1}, 0)
    q, header = load_checkpoint(path)
    assert q.digest() == p.digest()
    assert header["vocabulary"] == ["a", "b", "c", "d", "e"]
    assert q.cfg == SMALL
    save_checkpoint(tmp_path / "n.ssim", q, ["a", "b", "c", "d", "e"], {"note": 1}, 0)
    assert path.read_bytes() == (tmp_path / "n.ssim").read_bytes()


def test_checkpoint_corruption(tmp_path):
    p = init_params(SMALL, 0)
    path = tmp_path / "m.ssim"
    save_checkpoint(path, p)
    good = path.read_bytes()
    for bad in (b"NOPE" + good[4:], good[:len(good) - 10], good[:12], good[:40]):
        path.write_bytes(bad)
        with pytest.raises(FormatError):
            load_checkpoint(path)
    rng = np.random.default_rng(0)
    for _ in range(60):
        bad = bytearray(good)
        for i in rng.integers(0, 1500, size=3):
            bad[int(i)] = int(rng.integers(256))
        path.write_bytes(bytes(bad))
        try:
            load_checkpoint(path)
        except FormatError:
            pass
