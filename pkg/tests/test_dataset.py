import json
import struct

import numpy as np
import pytest

from ssir.dataset import (MAX_CONCAT_WORDS, SENTENCES, LabeledSample, Vocabulary, add_noise,
                          build_splits, check_no_leakage, concat_augment, generate_corpus,
                          max_normalized_xcorr, noise_augment, read_container,
                          stratified_split, token_templates,
                          _render, write_container)
from ssir.errors import FormatError, InsufficientDataError, InvalidParameterError


@pytest.fixture(scope="module")
def small_split():
    vocab = Vocabulary.default()
    samples = generate_corpus(vocab, participants=1, samples_per_word=10,
                              samples_per_sentence=10, seed=5)
    return build_splits(samples, 5, 3, vocab)


def word(uid, label, p=0, t=80, seed=0):
    w = np.random.default_rng(seed).normal(size=(t, 6, 6)).astype(np.float32)
    return LabeledSample(uid, (label,), p, "word", w)


def test_vocabulary_roundtrip():
    v = Vocabulary.default()
    assert len(v) == 24
    ids = v.encode(["drink", "water"])
    assert all(i >= 1 for i in ids)
    assert v.decode(ids) == ["drink", "water"]
    with pytest.raises(InvalidParameterError):
        v.encode(["nonsense"])
    with pytest.raises(InvalidParameterError):
        Vocabulary(["a", "a"])


def test_sample_validation():
    with pytest.raises(InvalidParameterError):
        LabeledSample("x", (1, 2), 0, "word")
    with pytest.raises(InvalidParameterError):
        LabeledSample("x", (), 0, "sentence")
    with pytest.raises(InvalidParameterError):
        LabeledSample("x", (1,), 0, "other")


def test_corpus_counts_and_shapes():
    vocab = Vocabulary.default()
    samples = generate_corpus(vocab, participants=2, samples_per_word=10,
                              samples_per_sentence=10, seed=1)
    assert len(samples) == 2 * (24 * 10 + len(SENTENCES) * 10)
    for s in samples:
        t = 80 if len(s.labels) == 1 and s.labels[0] <= 16 else 180
        assert s.window.shape == (t, 6, 6)
        assert s.window.dtype == np.float32
    assert len({s.uid for s in samples}) == len(samples)


def test_corpus_is_deterministic():
    vocab = Vocabulary.default()
    a = generate_corpus(vocab, 1, 10, 10, seed=3)
    b = generate_corpus(vocab, 1, 10, 10, seed=3)
    assert all(np.array_equal(x.window, y.window) for x, y in zip(a, b))


def test_templates_are_distinct():
    temps = [_render(tok, 80) for tok in token_templates(24)[1:]]
    worst = max(max_normalized_xcorr(a, b) for i, a in enumerate(temps)
                for b in temps[i + 1:])
    assert worst < 0.9


def test_xcorr_oracle():
    a = np.sin(np.linspace(0, 6, 50))[:, None]
    assert max_normalized_xcorr(a, a) == pytest.approx(1.0)
    assert max_normalized_xcorr(a, np.roll(a, 3)) > 0.9


def test_concat_augment():
    pool = [word(f"w{i}", 1 + i % 3, seed=i) for i in range(6)]
    s = concat_augment(pool, 3, seed=7)
    assert s.kind == "augmented" and len(s.labels) == 3
    assert s.window.shape == (240, 6, 6)
    chosen = [next(p for p in pool if p.uid == u) for u in s.recipe["sources"]]
    np.testing.assert_array_equal(s.window, np.concatenate([c.window for c in chosen]))
    assert s.labels == tuple(c.labels[0] for c in chosen)
    with pytest.raises(InvalidParameterError):
        concat_augment(pool, 1, seed=0)
    with pytest.raises(InvalidParameterError):
        concat_augment(pool, 7, seed=0)


def test_noise_std_is_a_third():
    w = np.random.default_rng(0).normal(0, 2.0, size=(5000, 2, 2))
    noisy = add_noise(w, 11)
    ratio = (noisy - w).std(axis=0) / w.std(axis=0)
    np.testing.assert_allclose(ratio, 1 / 3, atol=0.02)
    s = noise_augment(word("a", 1), 4)
    assert s.labels == (1,) and s.recipe == {"op": "noise", "source": "a", "seed": 4}


def test_default_split_counts():
    # 100 recordings per class -> 70/15/15, tenfold training expansion
    samples = [LabeledSample(f"s{c}-{i}", (c,), 0, "word", shape=(80, 6, 6))
               for c in range(1, 17) for i in range(100)]
    tr, va, te = stratified_split(samples, 0)
    assert (len(tr), len(va), len(te)) == (1120, 240, 240)


def test_split_needs_ten_per_class():
    samples = [LabeledSample(f"s{i}", (1,), 0, "word", shape=(80, 6, 6)) for i in range(9)]
    with pytest.raises(InsufficientDataError):
        stratified_split(samples, 0)


def test_augmented_split_is_leak_free(small_split):
    sp = small_split
    n_orig = sum(s.recipe is None for s in sp.train)
    assert len(sp.train) == 3 * n_orig
    check_no_leakage(sp)
    held = {s.uid for s in sp.validation + sp.test}
    for s in sp.train:
        assert not held.intersection(s.sources)
        if s.recipe and s.recipe["op"] == "concat":
            assert 2 <= len(s.labels) <= MAX_CONCAT_WORDS
            assert len({sp.sample(u).participant for u in s.sources}) == 1
        assert sp.window(s).shape == s.shape


def test_leakage_detected(small_split):
    sp = small_split
    bad = LabeledSample("leak", sp.test[0].labels, 0, "augmented",
                        recipe={"op": "noise", "source": sp.test[0].uid, "seed": 1},
                        shape=sp.test[0].shape)
    sp2 = type(sp)(sp.train + [bad], sp.validation, sp.test, sp.seed, sp.vocab)
    with pytest.raises(InvalidParameterError):
        check_no_leakage(sp2)


def test_container_roundtrip(small_split, tmp_path):
    path = tmp_path / "d.ssir"
    write_container(small_split, path)
    back = read_container(path)
    assert back.vocab == small_split.vocab
    for a, b in zip(small_split.all_samples(), back.all_samples()):
        assert (a.uid, a.labels, a.participant, a.kind, a.recipe, a.shape) == \
               (b.uid, b.labels, b.participant, b.kind, b.recipe, b.shape)
        assert np.array_equal(small_split.window(a), back.window(b))
    # rewriting the read split gives identical bytes
    write_container(back, tmp_path / "e.ssir")
    assert path.read_bytes() == (tmp_path / "e.ssir").read_bytes()


def _rewrite_manifest(path, edit):
    data = path.read_bytes()
    _, _, mlen = struct.unpack_from("<4sIQ", data)
    m = json.loads(data[16:16 + mlen])
    edit(m)
    blob = json.dumps(m).encode()
    path.write_bytes(struct.pack("<4sIQ", b"SSIR", 1, len(blob)) + blob + data[16 + mlen:])


def test_container_corruption(small_split, tmp_path):
    path = tmp_path / "d.ssir"
    write_container(small_split, path)
    good = path.read_bytes()

    path.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(FormatError, match="magic"):
        read_container(path)
    path.write_bytes(good[:len(good) // 2])
    with pytest.raises(FormatError, match="truncated"):
        read_container(path)
    path.write_bytes(good[:10])
    with pytest.raises(FormatError):
        read_container(path)
    path.write_bytes(good[:4] + struct.pack("<I", 9) + good[8:])
    with pytest.raises(FormatError, match="version"):
        read_container(path)

    path.write_bytes(good)
    _rewrite_manifest(path, lambda m: m["samples"][0].__setitem__("labels", [99]))
    with pytest.raises(FormatError, match="outside vocabulary"):
        read_container(path)

    path.write_bytes(good)
    _rewrite_manifest(path, lambda m: m["samples"][0].pop("offset"))
    with pytest.raises(FormatError):
        read_container(path)


def test_container_random_corruption_never_crashes(small_split, tmp_path):
    path = tmp_path / "d.ssir"
    write_container(small_split, path)
    good = bytearray(path.read_bytes())
    rng = np.random.default_rng(0)
    for _ in range(60):
        bad = bytearray(good)
        # flip bytes inside the header and manifest, where corruption is detectable
        for i in rng.integers(0, 4000, size=3):
            bad[int(i)] = int(rng.integers(256))
        path.write_bytes(bytes(bad))
        try:
            read_container(path)
        except FormatError:
            pass
