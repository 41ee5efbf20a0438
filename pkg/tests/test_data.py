import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from tokenunet.autodiff import Tensor
from tokenunet.data import (
    PhantomSpec,
    VolumeFormatError,
    VolumeSample,
    generate_phantoms,
    import_raw,
    load_dataset,
    load_volume,
    make_phantom,
    sample_patch,
    save_volume,
    sliding_window_infer,
    window_starts,
    zscore,
)
from tokenunet.models import ModelConfig, build_model, predict


# ---- TVOL ---------------------------------------------------------------------------------------


def test_tvol_round_trip_and_size(tmp_path, rng):
    v = rng.standard_normal((4, 16, 16, 16)).astype(np.float32)
    p = tmp_path / "v.tvol"
    save_volume(v, p)
    assert os.path.getsize(p) == 24 + 4 * v.size
    out = load_volume(p)
    assert out.dtype == np.float32 and np.array_equal(out, v)
    save_volume(out, tmp_path / "w.tvol")
    assert (tmp_path / "w.tvol").read_bytes() == p.read_bytes()


def test_tvol_header_layout(tmp_path):
    save_volume(np.zeros((2, 3, 4, 5), np.float32), tmp_path / "v.tvol")
    raw = (tmp_path / "v.tvol").read_bytes()
    assert raw[:4] == b"TVOL"
    assert np.frombuffer(raw[4:24], "<u4").tolist() == [1, 2, 3, 4, 5]


def test_tvol_errors(tmp_path, rng):
    p = tmp_path / "v.tvol"
    save_volume(rng.standard_normal((1, 2, 2, 2)), p)
    raw = p.read_bytes()
    cases = {
        "magic": b"TVOX" + raw[4:],
        "version": raw[:4] + (2).to_bytes(4, "little") + raw[8:],
        "payload": raw[:-4],
        "header": raw[:10],
        "overflow": raw[:8] + (1 << 20).to_bytes(4, "little") + raw[12:],
    }
    for what, blob in cases.items():
        q = tmp_path / f"{what}.tvol"
        q.write_bytes(blob)
        with pytest.raises(VolumeFormatError, match=what):
            load_volume(q)
    with pytest.raises(ValueError):
        save_volume(np.zeros((2, 2, 2)), tmp_path / "x.tvol")


def test_import_raw(tmp_path, rng):
    v = rng.standard_normal((3, 4, 5)).astype("<f4")
    v.tofile(tmp_path / "v.raw")
    out = import_raw(tmp_path / "v.raw", (3, 4, 5))
    assert out.shape == (1, 3, 4, 5) and np.array_equal(out[0], v)
    with pytest.raises(VolumeFormatError):
        import_raw(tmp_path / "v.raw", (3, 4, 6))


# ---- phantoms -----------------------------------------------------------------------------------


def test_phantom_determinism_and_nesting():
    spec = PhantomSpec(size=16, subjects=3, seed=11)
    for i in range(3):
        a, b = make_phantom(spec, i), make_phantom(spec, i)
        assert np.array_equal(a.image, b.image) and np.array_equal(a.label, b.label)
        assert a.image.shape == (4, 16, 16, 16) and a.label.shape == (3, 16, 16, 16)
        assert a.check_nesting()
        assert set(np.unique(a.label)) <= {0.0, 1.0}
        assert a.label[0].sum() > 0
        assert np.all(np.isfinite(a.image))
    assert not np.array_equal(make_phantom(spec, 0).image, make_phantom(spec, 1).image)


def test_phantom_generation_files_identical(tmp_path):
    spec = PhantomSpec(size=16, subjects=3, seed=5)
    m1 = generate_phantoms(spec, tmp_path / "a")
    m2 = generate_phantoms(spec, tmp_path / "b")
    assert m1 == m2
    for sid in m1["ids"]:
        for f in ("image.tvol", "label.tvol"):
            assert (tmp_path / "a" / sid / f).read_bytes() == (tmp_path / "b" / sid / f).read_bytes()
    assert len(load_dataset(tmp_path / "a")) == 3


def test_phantom_snr_floor():
    spec = PhantomSpec(size=32, subjects=5, seed=0)
    for i in range(spec.subjects):
        s = make_phantom(spec, i)
        brain = s.image[0] != 0
        for m in range(4):
            inside = s.image[m][brain].mean()
            outside = s.image[m][~brain].mean()
            assert abs(inside - outside) >= 3 * spec.noise


@pytest.mark.parametrize("kw", [{"size": 30}, {"subjects": 0}, {"tc_ratio": (0.6, 1.2)}, {"tumors": (2, 1)}])
def test_phantom_spec_validation(kw):
    with pytest.raises(ValueError):
        PhantomSpec(**kw).validate()


def test_zscore_over_nonzero_voxels(rng):
    img = np.zeros((2, 4, 4, 4), np.float32)
    img[:, 1:3, 1:3, 1:3] = rng.uniform(2, 5, (2, 2, 2, 2))
    z = zscore(img)
    mask = img[0] != 0
    assert np.all(z[:, ~mask] == 0)
    assert np.allclose(z[0][mask].mean(), 0, atol=1e-6) and np.allclose(z[0][mask].std(), 1, atol=1e-5)


# ---- patches ------------------------------------------------------------------------------------


def _sample(rng, n=16):
    spec = PhantomSpec(size=n, subjects=1, seed=int(rng.integers(1 << 30)))
    return make_phantom(spec, 0)


def test_full_size_patch_is_whole_volume(rng):
    s = _sample(rng)
    img, lab, corner = sample_patch(s, 16, rng)
    assert corner == (0, 0, 0)
    assert np.array_equal(img, s.image) and np.array_equal(lab, s.label)


def test_patch_too_large(rng):
    with pytest.raises(ValueError):
        sample_patch(_sample(rng), 24, rng)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([4, 8, 12]))
def test_patch_congruent_and_nested(seed, size):
    rng = np.random.default_rng(seed)
    s = _sample(rng)
    img, lab, (z, y, x) = sample_patch(s, size, rng)
    assert np.array_equal(img, s.image[:, z:z + size, y:y + size, x:x + size])
    assert np.array_equal(lab, s.label[:, z:z + size, y:y + size, x:x + size])
    assert VolumeSample(img, lab, "c").check_nesting()


def test_patch_corners_uniform():
    # a 4^3 grid of valid corners: volume 7, patch 4
    s = VolumeSample(np.zeros((1, 7, 7, 7)), None, "u")
    rng = np.random.default_rng(99)
    counts = np.zeros(64)
    for _ in range(10_000):
        _, _, (z, y, x) = sample_patch(s, 4, rng)
        counts[16 * z + 4 * y + x] += 1
    assert chisquare(counts).pvalue > 0.01


# ---- sliding window -----------------------------------------------------------------------------


@pytest.mark.parametrize("n,window,stride,want", [(48, 32, 16, [0, 16]), (40, 32, 16, [0, 8]), (32, 32, 16, [0]),
                                                  (50, 16, 8, [0, 8, 16, 24, 32, 34])])
def test_window_starts(n, window, stride, want):
    assert window_starts(n, window, stride) == want


def test_window_equal_volume_matches_direct(rng):
    model = build_model(ModelConfig.desk("token_unet_transformer"))
    image = rng.standard_normal((4, 16, 16, 16)).astype(np.float32)
    got = sliding_window_infer(model, image, 16, 0.5, 8)
    assert np.max(np.abs(got - predict(model, Tensor(image)))) <= 1e-6


def test_coverage_48_window_32():
    image = np.zeros((1, 48, 48, 48), np.float32)
    _, cov = sliding_window_infer(lambda t: t, image, 32, 0.5, return_coverage=True)
    assert cov.shape == (48, 48, 48) and cov.min() >= 1
    # oracle: count windows covering each voxel along one axis, take the product
    per_axis = np.zeros(48, int)
    for s in window_starts(48, 32, 16):
        per_axis[s:s + 32] += 1
    assert np.array_equal(cov, np.einsum("i,j,k->ijk", per_axis, per_axis, per_axis))


def test_constant_model_gives_constant_output(rng):
    def const(t):
        return Tensor(np.full((2,) + t.shape[1:], 0.7))

    out = sliding_window_infer(const, rng.standard_normal((1, 40, 24, 56)).astype(np.float32), 16, 0.5)
    assert out.shape == (2, 40, 24, 56) and np.allclose(out, 0.7)


def test_identity_model_reassembles_input(rng):
    image = rng.standard_normal((2, 20, 36, 28)).astype(np.float32)
    out = sliding_window_infer(lambda t: t, image, 16, 0.25)
    assert np.allclose(out, image, atol=1e-6)


def test_small_volume_is_padded_then_cropped(rng):
    image = rng.standard_normal((1, 8, 8, 8)).astype(np.float32)
    out = sliding_window_infer(lambda t: t * 2.0, image, 16, 0.5)
    assert out.shape == image.shape and np.allclose(out, 2 * image)


def test_visiting_order_does_not_matter(rng):
    # the result for a position-dependent model must equal an explicit reversed-order assembly
    image = rng.standard_normal((1, 24, 24, 24)).astype(np.float32)

    def f(t):
        return t * t.data.mean()

    out = sliding_window_infer(f, image, 16, 0.5)
    acc = np.zeros_like(image, dtype=np.float64)
    cnt = np.zeros(image.shape[1:])
    starts = window_starts(24, 16, 8)
    for z in reversed(starts):
        for y in reversed(starts):
            for x in reversed(starts):
                w = image[:, z:z + 16, y:y + 16, x:x + 16]
                acc[:, z:z + 16, y:y + 16, x:x + 16] += w * w.mean()
                cnt[z:z + 16, y:y + 16, x:x + 16] += 1
    assert np.allclose(out, acc / cnt, atol=1e-6)


def test_window_divisibility_and_overlap_errors(rng):
    image = np.zeros((1, 16, 16, 16), np.float32)
    with pytest.raises(ValueError):
        sliding_window_infer(lambda t: t, image, 12, 0.5, divisor=8)
    with pytest.raises(ValueError):
        sliding_window_infer(lambda t: t, image, 16, 1.0)
