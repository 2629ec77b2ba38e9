import numpy as np
import pytest

from depthtransfer.flow import (
    FlowField,
    estimate_flow,
    flow_confidence,
    flow_difference,
    zero_flow,
)

from conftest import fractal_gray, smooth_gray


def _translated_pair(rng, h, w, tx, ty):
    """b's content equals a's translated by (+tx, +ty)."""
    pad = 8
    big = fractal_gray(rng, h + 2 * pad, w + 2 * pad)
    a = big[pad:pad + h, pad:pad + w]
    b = big[pad - ty:pad - ty + h, pad - tx:pad - tx + w]
    return a, b


def test_flow_identical_frames(rng):
    a = smooth_gray(rng, 48, 64)
    flow = estimate_flow(a, a)
    assert np.abs(flow.u).max() <= 1e-3
    assert np.abs(flow.v).max() <= 1e-3


@pytest.mark.parametrize("tx,ty", [(2, 0), (0, -3)])
def test_flow_translation(rng, tx, ty):
    a, b = _translated_pair(rng, 96, 128, tx, ty)
    flow = estimate_flow(a, b)
    m = 10
    assert np.mean(flow.u[m:-m, m:-m]) == pytest.approx(tx, abs=0.25)
    assert np.mean(flow.v[m:-m, m:-m]) == pytest.approx(ty, abs=0.25)


def test_flow_antisymmetry(rng):
    a, b = _translated_pair(rng, 96, 96, 3, 1)
    fab = estimate_flow(a, b)
    fba = estimate_flow(b, a)
    m = 10
    du = np.median((fab.u + fba.u)[m:-m, m:-m])
    dv = np.median((fab.v + fba.v)[m:-m, m:-m])
    assert abs(du) <= 0.5
    assert abs(dv) <= 0.5


def test_flow_rejects_mismatch(rng):
    with pytest.raises(ValueError):
        estimate_flow(smooth_gray(rng, 32, 32), smooth_gray(rng, 32, 48))
    with pytest.raises(ValueError):
        estimate_flow(smooth_gray(rng, 8, 8), smooth_gray(rng, 8, 8))


def test_flow_difference_constant_fields(rng):
    fields = [np.full((20, 20), 2.5), np.full((20, 20), 2.5)]
    flow = FlowField(rng.uniform(-2, 2, (20, 20)),
                     rng.uniform(-2, 2, (20, 20)), None)
    diff, valid = flow_difference(fields, [flow], 0)
    assert np.allclose(diff[valid], 0.0, atol=1e-12)


def test_flow_difference_zero_flow(rng):
    f0 = rng.random((12, 14))
    f1 = rng.random((12, 14))
    diff, valid = flow_difference([f0, f1], [zero_flow((12, 14))], 0)
    assert valid.all()
    assert np.allclose(diff, f1 - f0, atol=1e-12)


def test_flow_difference_matches_sampling_oracle(rng):
    f0 = rng.random((16, 16))
    f1 = rng.random((16, 16))
    u = rng.uniform(-1.5, 1.5, (16, 16))
    v = rng.uniform(-1.5, 1.5, (16, 16))
    flow = FlowField(u, v, None)
    diff, valid = flow_difference([f0, f1], [flow], 0)
    for y in range(16):
        for x in range(16):
            sx, sy = x + u[y, x], y + v[y, x]
            if not (0 <= sx <= 15 and 0 <= sy <= 15):
                assert not valid[y, x]
                continue
            x0, y0 = int(np.floor(sx)), int(np.floor(sy))
            x1, y1 = min(x0 + 1, 15), min(y0 + 1, 15)
            fx, fy = sx - x0, sy - y0
            top = f1[y0, x0] * (1 - fx) + f1[y0, x1] * fx
            bot = f1[y1, x0] * (1 - fx) + f1[y1, x1] * fx
            expected = top * (1 - fy) + bot * fy - f0[y, x]
            assert diff[y, x] == pytest.approx(expected, abs=1e-6)


def test_flow_difference_linear_in_field(rng):
    a, b = 2.0, -0.7
    f0a, f1a = rng.random((10, 10)), rng.random((10, 10))
    f0b, f1b = rng.random((10, 10)), rng.random((10, 10))
    flow = FlowField(rng.uniform(-1, 1, (10, 10)),
                     rng.uniform(-1, 1, (10, 10)), None)
    d1, v1 = flow_difference([f0a, f1a], [flow], 0)
    d2, _ = flow_difference([f0b, f1b], [flow], 0)
    dc, _ = flow_difference([a * f0a + b * f0b, a * f1a + b * f1b], [flow], 0)
    assert np.allclose(dc[v1], (a * d1 + b * d2)[v1], atol=1e-9)


def test_flow_difference_index_errors(rng):
    fields = [rng.random((8, 8)), rng.random((8, 8))]
    with pytest.raises(IndexError):
        flow_difference(fields, [zero_flow((8, 8))], 1)


def test_flow_confidence_closed_forms():
    a = np.full((20, 20), 0.4)
    conf = flow_confidence(a, a, zero_flow((20, 20)))
    assert np.allclose(conf, 1.0 / (1 + np.exp(-5)), atol=1e-9)
    assert conf[0, 0] == pytest.approx(0.9933, abs=1e-4)

    conf = flow_confidence(a, np.full((20, 20), 0.45), zero_flow((20, 20)))
    assert np.allclose(conf, 0.5, atol=1e-9)

    conf = flow_confidence(a, np.full((20, 20), 0.5), zero_flow((20, 20)))
    assert np.allclose(conf, 1.0 / (1 + np.exp(5)), atol=1e-9)
    assert conf[0, 0] == pytest.approx(0.0067, abs=1e-4)


def test_flow_confidence_monotone():
    a = np.full((16, 16), 0.3)
    errors = np.linspace(0, 0.2, 9)
    confs = []
    for e in errors:
        b = np.full((16, 16), 0.3 + e)
        confs.append(float(flow_confidence(a, b, zero_flow(a.shape)).mean()))
    assert all(c1 >= c2 - 1e-9 for c1, c2 in zip(confs, confs[1:]))
    assert all(0 < c < 1 for c in confs)
