import numpy as np
import pytest

from depthtransfer.database import (
    Database,
    DatabaseEntry,
    DatabaseError,
    build_from_arrays,
    compute_prior,
    ingest,
    load_database,
)
from depthtransfer.features import Features, match_distance
from depthtransfer.fileio import write_depth_png, write_image
from depthtransfer.imageops import DepthMap

from conftest import textured_rgb

RES = (64, 48)  # small working resolution for test speed


def _write_still(root, name, img, depth):
    d = root / name
    d.mkdir(parents=True, exist_ok=True)
    write_image(d / "img_00000.png", img)
    write_depth_png(d / "depth_00000.png", depth)


def _make_still(rng, value=None):
    img = textured_rgb(rng, 48, 64)
    vals = np.full((48, 64), value) if value else rng.uniform(1.0, 9.0, (48, 64))
    return img, DepthMap(vals, None)


def test_ingest_two_stills_and_prior(tmp_path, rng):
    imgs, deps = [], []
    for i, val in enumerate([2.0, 4.0]):
        img, dep = _make_still(rng, val)
        _write_still(tmp_path, f"still{i}", img, dep)
        imgs.append(img)
        deps.append(dep)
    db = ingest(tmp_path, resolution=RES)
    assert len(db) == 2
    assert np.allclose(db.prior.values, 3.0, atol=1e-3)
    assert db.errors == []


def test_ingest_video_source_shares_source_id(tmp_path, rng):
    d = tmp_path / "clip"
    d.mkdir()
    base = textured_rgb(rng, 48, 64)
    for t in range(10):
        frame = np.clip(np.roll(base, t, axis=1), 0, 1)
        write_image(d / f"img_{t:05d}.png", frame)
        write_depth_png(d / f"depth_{t:05d}.png",
                        DepthMap(np.full((48, 64), 3.0), None))
    db = ingest(tmp_path, resolution=RES)
    assert len(db) == 10
    assert len({e.source_id for e in db.entries}) == 1
    assert all(e.flow_hist is not None for e in db.entries)


def test_ingest_collects_per_entry_errors(tmp_path, rng):
    for i in range(4):
        img, dep = _make_still(rng)
        _write_still(tmp_path, f"s{i}", img, dep)
    bad = tmp_path / "s_bad"
    bad.mkdir()
    img, _ = _make_still(rng)
    write_image(bad / "img_00000.png", img)
    (bad / "depth_00000.png").write_text("not a png")
    db = ingest(tmp_path, resolution=RES)
    assert len(db) == 4
    assert len(db.errors) == 1
    assert db.errors[0].source_id == "s_bad"


def test_ingest_empty_is_fatal(tmp_path):
    with pytest.raises(DatabaseError):
        ingest(tmp_path)


def test_prior_single_entry_and_holes(rng):
    vals = rng.uniform(1, 9, (12, 12))
    valid = rng.random((12, 12)) > 0.4
    valid[0, 0] = True
    d = DepthMap(np.where(valid, vals, 1.0), valid)
    prior = compute_prior([d])
    mean = d.values[d.valid].mean()
    assert np.allclose(prior.values[valid], d.values[valid])
    assert np.allclose(prior.values[~valid], mean)
    assert prior.valid.all()


def test_prior_matches_masked_mean_oracle(rng):
    depths = []
    for _ in range(5):
        vals = rng.uniform(1, 9, (10, 11))
        valid = rng.random((10, 11)) > 0.3
        depths.append(DepthMap(np.where(valid, vals, 1.0), valid))
    prior = compute_prior(depths)

    # brute-force per-pixel masked mean
    total_sum = sum(d.values[d.valid].sum() for d in depths)
    total_cnt = sum(d.valid.sum() for d in depths)
    gmean = total_sum / total_cnt
    for y in range(10):
        for x in range(11):
            vals = [d.values[y, x] for d in depths if d.valid[y, x]]
            expected = np.mean(vals) if vals else gmean
            assert prior.values[y, x] == pytest.approx(expected, abs=1e-6)


def test_prior_order_invariant(rng):
    depths = []
    for _ in range(4):
        vals = rng.uniform(1, 9, (8, 8))
        valid = rng.random((8, 8)) > 0.3
        depths.append(DepthMap(np.where(valid, vals, 1.0), valid))
    p1 = compute_prior(depths)
    p2 = compute_prior(depths[::-1])
    assert np.allclose(p1.values, p2.values, atol=1e-12)


def _toy_entry(entry_id, source, gist, rng):
    img = np.full((8, 8, 3), 0.5)
    dep = DepthMap(np.full((8, 8), 2.0), None)
    return DatabaseEntry(entry_id, source, 0, img, dep, gist, None)


def _toy_db(entries):
    prior = compute_prior([e.depth for e in entries])
    return Database(entries, (8, 8), prior)


def test_query_exact_match_first(rng):
    gists = [rng.random(512) for _ in range(5)]
    db = _toy_db([_toy_entry(i, f"s{i}", g, rng) for i, g in enumerate(gists)])
    picked = db.query_candidates(Features(gists[3]), 3)
    assert picked[0].entry_id == 3
    assert match_distance(Features(gists[3]), picked[0].features()) == 0.0


def test_query_one_per_source(rng):
    entries = []
    for i in range(9):
        entries.append(_toy_entry(i, f"video{i % 3}", rng.random(512), rng))
    db = _toy_db(entries)
    picked = db.query_candidates(Features(rng.random(512)), 7)
    assert len(picked) == 3
    assert len({e.source_id for e in picked}) == 3


def test_query_matches_bruteforce_oracle(rng):
    entries = []
    for i in range(20):
        entries.append(_toy_entry(i, f"src{i % 6}", rng.random(512), rng))
    db = _toy_db(entries)
    q = Features(rng.random(512))
    k = 4
    picked = db.query_candidates(q, k)

    # oracle: sort all, keep first per source, truncate
    ranked = sorted(entries,
                    key=lambda e: (match_distance(q, e.features()), e.entry_id))
    expect, seen = [], set()
    for e in ranked:
        if e.source_id in seen:
            continue
        seen.add(e.source_id)
        expect.append(e.entry_id)
    assert [e.entry_id for e in picked] == expect[:k]

    dists = [match_distance(q, e.features()) for e in picked]
    assert all(a <= b + 1e-12 for a, b in zip(dists, dists[1:]))


def test_query_empty_database_errors():
    db = Database([], (8, 8), DepthMap(np.ones((8, 8)), None))
    with pytest.raises(DatabaseError):
        db.query_candidates(Features(np.zeros(512)), 3)


def test_build_from_arrays_and_grid_cache(rng):
    imgs = [textured_rgb(rng, 48, 64) for _ in range(3)]
    deps = [DepthMap(rng.uniform(1, 9, (48, 64)), None) for _ in range(3)]
    db = build_from_arrays(imgs, deps, resolution=RES)
    assert len(db) == 3
    g1 = db.descriptor_grid(db.entries[0])
    g2 = db.descriptor_grid(db.entries[0])
    assert g1 is g2  # memoized


def test_warm_cache_is_byte_identical(tmp_path, rng):
    root = tmp_path / "data"
    for i in range(3):
        img, dep = _make_still(rng)
        _write_still(root, f"s{i}", img, dep)
    cache = tmp_path / "features.dtdb"
    ingest(root, cache=cache, resolution=RES)
    first = cache.read_bytes()
    assert first[:4] == b"DTDB"
    ingest(root, cache=cache, resolution=RES)
    assert cache.read_bytes() == first

    db = load_database(cache)
    assert len(db) == 3
    assert db.resolution == RES


def test_cache_invalidation_on_content_change(tmp_path, rng):
    root = tmp_path / "data"
    img, dep = _make_still(rng)
    _write_still(root, "s0", img, dep)
    cache = tmp_path / "features.dtdb"
    ingest(root, cache=cache, resolution=RES)
    first = cache.read_bytes()

    img2, dep2 = _make_still(rng)
    _write_still(root, "s0", img2, dep2)  # overwrite content
    ingest(root, cache=cache, resolution=RES)
    assert cache.read_bytes() != first
