import numpy as np
import pytest

from depthtransfer.align import (
    AlignParams,
    WarpField,
    align,
    warp_confidence,
    warp_depth,
    warp_energy,
    warp_scalar,
    zero_warp,
)
from depthtransfer.features import compute_dense_sift
from depthtransfer.imageops import DepthMap

from conftest import textured_rgb


def _grids(rng, h=64, w=80, shift=0):
    img = textured_rgb(rng, h, w, sigma=1.5)
    cand = np.roll(img, shift, axis=1) if shift else img
    return compute_dense_sift(img), compute_dense_sift(cand)


def test_self_alignment_returns_zero_warp(rng):
    qd, cd = _grids(rng)
    warp = align(qd, cd)
    assert (warp.u == 0).all() and (warp.v == 0).all()
    assert np.allclose(warp.residual, 0.0, atol=1e-6)
    assert warp.inside.all()


def test_translation_recovery_and_descriptor_oracle(rng):
    shift = 5
    qd, cd = _grids(rng, 64, 80, shift=shift)
    warp = align(qd, cd)
    inner_u = warp.u[12:-12, 12:-12]
    inner_v = warp.v[12:-12, 12:-12]
    assert abs(np.median(inner_u) - shift) <= 1.0
    assert abs(np.median(inner_v)) <= 1.0

    # exhaustive nearest-descriptor search oracle on a 32x32 crop
    crop = (slice(20, 52), slice(24, 56))
    best_u = np.zeros((32, 32))
    best_v = np.zeros((32, 32))
    for yy in range(32):
        for xx in range(32):
            y, x = 20 + yy, 24 + xx
            q = qd[y, x]
            best, bu, bv = np.inf, 0, 0
            for dv in range(-8, 9):
                for du in range(-8, 9):
                    cy, cx = y + dv, x + du
                    if not (0 <= cy < 64 and 0 <= cx < 80):
                        continue
                    d = float(np.abs(q - cd[cy, cx]).sum())
                    if d < best:
                        best, bu, bv = d, du, dv
            best_u[yy, xx] = bu
            best_v[yy, xx] = bv
    assert np.median(best_u) == pytest.approx(shift, abs=1.0)
    assert np.median(best_v) == pytest.approx(0.0, abs=1.0)

    # mean data residual far below the zero-warp residual on the crop
    res_aligned = warp.residual[crop].mean()
    res_zero = zero_warp(qd.shape[:2])
    zero_res = np.linalg.norm(qd - cd, axis=2)[crop].mean()
    assert res_aligned <= 0.1 * zero_res


def test_energy_never_exceeds_zero_warp(rng):
    params = AlignParams()
    for trial in range(6):
        qd = rng.random((24, 28, 32)).astype(np.float32) * 0.2
        cd = rng.random((24, 28, 32)).astype(np.float32) * 0.2
        warp = align(qd, cd, params)
        e = warp_energy(qd, cd, warp.u, warp.v, params)
        e0 = warp_energy(qd, cd, np.zeros((24, 28)), np.zeros((24, 28)), params)
        assert e <= e0 + 1e-6


def test_align_rejects_mismatched_grids(rng):
    qd, _ = _grids(rng, 32, 32)
    cd, _ = _grids(rng, 32, 48)
    with pytest.raises(ValueError):
        align(qd, cd)


def test_warp_scalar_zero_warp_identity(rng):
    field = rng.random((20, 24))
    out, valid = warp_scalar(field, zero_warp((20, 24)))
    assert valid.all()
    assert np.allclose(out, field, atol=1e-12)


def test_warp_scalar_constant_field(rng):
    field = np.full((16, 16), 3.3)
    u = rng.integers(-3, 4, (16, 16)).astype(float)
    v = rng.integers(-3, 4, (16, 16)).astype(float)
    warp = WarpField(u, v, np.zeros((16, 16)), np.ones((16, 16), bool))
    out, valid = warp_scalar(field, warp)
    assert np.allclose(out[valid], 3.3)


def test_warp_scalar_matches_sampling_oracle(rng):
    field = rng.random((16, 16))
    u = rng.uniform(-2, 2, (16, 16))
    v = rng.uniform(-2, 2, (16, 16))
    warp = WarpField(u, v, np.zeros((16, 16)), np.ones((16, 16), bool))
    out, valid = warp_scalar(field, warp)
    for y in range(16):
        for x in range(16):
            sx, sy = x + u[y, x], y + v[y, x]
            if not (0 <= sx <= 15 and 0 <= sy <= 15):
                assert not valid[y, x]
                continue
            x0, y0 = int(np.floor(sx)), int(np.floor(sy))
            x1, y1 = min(x0 + 1, 15), min(y0 + 1, 15)
            fx, fy = sx - x0, sy - y0
            top = field[y0, x0] * (1 - fx) + field[y0, x1] * fx
            bot = field[y1, x0] * (1 - fx) + field[y1, x1] * fx
            assert out[y, x] == pytest.approx(top * (1 - fy) + bot * fy,
                                              abs=1e-6)


def test_warp_depth_positivity(rng):
    vals = rng.uniform(0.5, 9.0, (20, 20))
    valid = rng.random((20, 20)) > 0.2
    valid[0, 0] = True
    depth = DepthMap(np.where(valid, vals, 1.0), valid)
    u = rng.integers(-2, 3, (20, 20)).astype(float)
    v = rng.integers(-2, 3, (20, 20)).astype(float)
    warp = WarpField(u, v, np.zeros((20, 20)), np.ones((20, 20), bool))
    out, out_valid = warp_depth(depth, warp)
    assert (out[out_valid] > 0).all()


def test_warp_confidence_exact_match(rng):
    qd, cd = _grids(rng, 32, 32)
    warp = align(qd, cd)
    conf = warp_confidence(qd, cd, warp)
    assert np.allclose(conf, 1.0)


def test_warp_confidence_formula(rng):
    # residual equal to the median residual gives weight exp(-1)
    qd = rng.random((8, 8, 4)).astype(np.float32)
    cd = qd.copy()
    delta = np.zeros((8, 8, 4), dtype=np.float32)
    delta[:, :, 0] = rng.random((8, 8)).astype(np.float32)
    cd = cd + delta
    warp = zero_warp((8, 8))
    conf = warp_confidence(qd, cd, warp)
    residual = np.abs(delta[:, :, 0]).astype(np.float64)
    sigma = max(np.median(residual), 1e-3)
    expected = np.exp(-(residual**2) / sigma**2)
    assert np.allclose(conf, expected, atol=1e-6)

    idx = np.unravel_index(np.argmin(np.abs(residual - sigma)), (8, 8))
    assert conf[idx] == pytest.approx(
        np.exp(-(residual[idx] ** 2) / sigma**2), abs=1e-6)
    # a pixel whose residual equals sigma weighs exp(-1)
    assert np.exp(-1.0) == pytest.approx(0.3679, abs=1e-4)
