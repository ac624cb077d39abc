import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchadapt.dataio import (MANIFEST, DatasetError, DomainSpec, PatchSample, decode_sample,
                               default_specs, encode_sample, generate_domain, make_benchmark,
                               read_benchmark, read_dataset, tile, tile_count, write_benchmark,
                               write_dataset)


def random_corpus(n, seed, labelled=0.7):
    rng = np.random.default_rng(seed)
    out = []
    for i in rng.permutation(n):
        c, h, w = int(rng.integers(1, 5)), int(rng.integers(1, 20)), int(rng.integers(1, 20))
        img = rng.normal(size=(c, h, w)).astype(np.float32)
        img.flat[0] = np.float32(-0.0)
        lab = rng.integers(0, 256, size=(h, w)).astype(np.uint8) if rng.uniform() < labelled else None
        out.append(PatchSample(img, lab, str(rng.choice(["source", "target"])), f"s{i:04d}"))
    return out


def test_generation_is_deterministic():
    spec = default_specs(3)[1]
    a, b = generate_domain(spec, 5), generate_domain(spec, 5)
    assert all(x == y for x, y in zip(a, b))
    assert b"".join(encode_sample(s) for s in a) == b"".join(encode_sample(s) for s in b)


def test_generated_values_and_labels_valid():
    src, tgt = default_specs(0)
    for spec in (src, tgt):
        samples = generate_domain(spec, 60)
        labels = np.stack([s.label for s in samples])
        images = np.stack([s.image for s in samples])
        assert labels.max() < 6 and images.min() >= 0 and images.max() <= 1
        assert images.dtype == np.float32 and images.shape[1:] == (3, 32, 32)
        freq = np.bincount(labels.ravel(), minlength=6) / labels.size
        assert freq.min() >= 0.01, freq


def test_identity_transform_gives_no_shift():
    src = DomainSpec(seed=5, domain="source")
    tgt = DomainSpec(seed=5, domain="target")
    for a, b in zip(generate_domain(src, 4), generate_domain(tgt, 4)):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.label, b.label)


def test_default_specs_differ_in_layout_and_appearance():
    src, tgt = default_specs(0)
    assert src.class_weights != tgt.class_weights
    assert tgt.color_gain != (1.0, 1.0, 1.0) and any(tgt.color_bias)
    assert all(g != 0 for g in tgt.color_gain)


def test_noise_grows_with_shift_strength():
    base = dict(seed=3, domain="target", shift_range=(1.0, 1.0), texture_amplitude=0.0)
    clean = generate_domain(DomainSpec(noise=0.0, **base), 3)
    flat = generate_domain(DomainSpec(noise=0.01, **base), 3)
    grown = generate_domain(DomainSpec(noise=0.01, noise_gain=2.0, **base), 3)
    for c, a, b in zip(clean, flat, grown):
        da, db = (a.image - c.image).astype(np.float64), (b.image - c.image).astype(np.float64)
        inside = (b.image > 0) & (b.image < 1) & (a.image > 0) & (a.image < 1)
        np.testing.assert_allclose(db[inside], 3.0 * da[inside], atol=1e-6)


def test_invalid_specs_rejected():
    bad = [
        DomainSpec(color_gain=(1.0, 0.0, 1.0)),
        DomainSpec(class_weights=(1.0,) * 5),
        DomainSpec(domain="elsewhere"),
        DomainSpec(shift_range=(0.5, 0.1)),
        DomainSpec(n_classes=8),
        DomainSpec(noise_gain=-1.0),
    ]
    for spec in bad:
        with pytest.raises(ValueError):
            generate_domain(spec, 1)
    with pytest.raises(ValueError):
        generate_domain(DomainSpec(), 1, size=20)


def test_tile_examples():
    img = np.arange(3 * 8 * 8, dtype=np.float32).reshape(3, 8, 8)
    four = tile(img, 4, 4)
    assert len(four) == 4
    cover = np.zeros((8, 8), dtype=int)
    for k, p in enumerate(four):
        r, c = divmod(k, 2)
        np.testing.assert_array_equal(p.image, img[:, 4 * r:4 * r + 4, 4 * c:4 * c + 4])
        cover[4 * r:4 * r + 4, 4 * c:4 * c + 4] += 1
    assert (cover == 1).all()
    nine = tile(np.zeros((1, 10, 10)), 4, 3)
    assert len(nine) == 9 == tile_count(10, 10, 4, 3)
    assert [p.id for p in nine[:3]] == ["tile-r000c000", "tile-r000c001", "tile-r000c002"]
    with pytest.raises(ValueError):
        tile(np.zeros((1, 3, 8)), 4, 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 6), st.integers(1, 5))
def test_tile_count_formula(h, w, patch, stride):
    if patch > min(h, w):
        return
    label = np.arange(h * w).reshape(h, w) % 7
    tiles = tile(np.zeros((2, h, w)), patch, stride, label=label)
    assert len(tiles) == tile_count(h, w, patch, stride)
    assert all(t.label.shape == (patch, patch) for t in tiles)


def test_sample_encoding_layout():
    img = np.array([[[1.5, -2.0]]], dtype=np.float32)
    raw = encode_sample(PatchSample(img, np.array([[3, 4]], dtype=np.uint8), "source", "x"))
    assert raw == (b"PADS" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
                   + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                   + np.array([1.5, -2.0], dtype="<f4").tobytes() + bytes([3, 4]))


def test_roundtrip_bit_exact(tmp_path):
    corpus = random_corpus(100, 0)
    write_dataset(corpus, tmp_path)
    back = read_dataset(tmp_path)
    assert [s.id for s in back] == sorted(s.id for s in corpus)
    by_id = {s.id: s for s in corpus}
    for s in back:
        ref = by_id[s.id]
        assert s == ref and s.domain == ref.domain
        assert s.image.tobytes() == ref.image.tobytes()
    lines = (tmp_path / MANIFEST).read_text().splitlines()
    assert lines == sorted(lines) and lines[0].count("\t") == 2


def test_manifest_order_independent_of_write_order(tmp_path):
    corpus = random_corpus(10, 1)
    write_dataset(corpus, tmp_path / "a")
    write_dataset(corpus[::-1], tmp_path / "b")
    assert (tmp_path / "a" / MANIFEST).read_bytes() == (tmp_path / "b" / MANIFEST).read_bytes()


def test_malformed_records_name_the_sample(tmp_path):
    corpus = random_corpus(3, 2, labelled=1.0)
    write_dataset(corpus, tmp_path)
    victim = sorted(s.id for s in corpus)[1]
    path = tmp_path / f"{victim}.bin"
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(DatasetError, match=victim):
        read_dataset(tmp_path)
    with pytest.raises(DatasetError, match="bad magic"):
        decode_sample(b"NOPE" + bytes(16), "z", "source")
    with pytest.raises(DatasetError, match="missing"):
        read_dataset(tmp_path / "nowhere")


def test_write_rejects_duplicate_ids(tmp_path):
    s = random_corpus(1, 3)[0]
    with pytest.raises(DatasetError, match="duplicate"):
        write_dataset([s, s], tmp_path)


def test_benchmark_splits_and_roundtrip(tmp_path):
    bench = make_benchmark(4, n_source=10, n_target=20, n_test=5)
    assert bench.stats() == {"source": 10, "source_test": 5, "target": 18,
                             "target_val": 2, "target_test": 5}
    assert all(s.label is None for s in bench.target)
    assert all(s.label is not None for s in bench.target_val + bench.target_test)
    ids = {s.id for s in bench.target} | {s.id for s in bench.target_val}
    assert len(ids) == 20
    write_benchmark(bench, tmp_path)
    back = read_benchmark(tmp_path)
    for name, samples in bench.splits().items():
        assert sorted(back.splits()[name], key=lambda s: s.id) == sorted(samples, key=lambda s: s.id)
    again = make_benchmark(4, n_source=10, n_target=20, n_test=5)
    assert [s.id for s in again.target_val] == [s.id for s in bench.target_val]
