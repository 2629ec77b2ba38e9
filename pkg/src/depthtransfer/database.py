"""RGBD example database: ingest image/depth pairs from disk (or arrays),
precompute retrieval features with an on-disk cache, hold the depth prior,
and answer top-K candidate queries with at most one frame per source."""

import hashlib
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .features import (
    FLOW_HIST_SIZE,
    GIST_SIZE,
    Features,
    compute_dense_sift,
    compute_flow_histogram,
    compute_gist,
    match_distance,
)
from .fileio import read_depth, read_image
from .flow import estimate_flow
from .imageops import DepthMap, resample_depth, resize, to_grayscale
from .validation import check_image_rgb

PORTRAIT_RESOLUTION = (345, 460)  # (width, height)
LANDSCAPE_RESOLUTION = (460, 345)

CACHE_MAGIC = b"DTDB"
CACHE_VERSION = 1


class DatabaseError(RuntimeError):
    pass


@dataclass
class IngestError:
    source_id: str
    frame_index: int
    message: str


@dataclass
class DatabaseEntry:
    entry_id: int
    source_id: str
    frame_index: int
    image: np.ndarray  # canonical-resolution RGB
    depth: DepthMap  # canonical resolution
    gist: np.ndarray
    flow_hist: Optional[np.ndarray] = None
    content_hash: bytes = b"\x00" * 32

    def features(self):
        return Features(self.gist, self.flow_hist)


@dataclass
class Database:
    entries: list
    resolution: tuple  # (width, height)
    prior: DepthMap
    root: str = ""
    errors: list = field(default_factory=list)
    _grid_cache: OrderedDict = field(default_factory=OrderedDict, repr=False)
    grid_cache_size: int = 8

    def __len__(self):
        return len(self.entries)

    def sources(self):
        return sorted({e.source_id for e in self.entries})

    def query_candidates(self, features, k):
        """Entries ranked by match distance, at most one per source, ties
        broken by entry id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if not self.entries:
            raise DatabaseError("cannot query an empty database")
        ranked = sorted(
            self.entries,
            key=lambda e: (match_distance(features, e.features()), e.entry_id))
        picked, seen = [], set()
        for e in ranked:
            if e.source_id in seen:
                continue
            seen.add(e.source_id)
            picked.append(e)
            if len(picked) == k:
                break
        return picked

    def descriptor_grid(self, entry):
        """Dense SIFT grid for an entry, memoized with a small LRU."""
        key = entry.entry_id
        if key in self._grid_cache:
            self._grid_cache.move_to_end(key)
            return self._grid_cache[key]
        grid = compute_dense_sift(entry.image)
        self._grid_cache[key] = grid
        while len(self._grid_cache) > self.grid_cache_size:
            self._grid_cache.popitem(last=False)
        return grid


def canonical_resolution(width, height):
    """345x460 for portrait inputs, 460x345 for landscape."""
    return PORTRAIT_RESOLUTION if height >= width else LANDSCAPE_RESOLUTION


def compute_prior(depths, resolution=None):
    """Pixelwise mean of valid depths; pixels never observed fall back to
    the global mean depth."""
    if len(depths) == 0:
        raise DatabaseError("prior needs at least one depth map")
    acc = np.zeros(depths[0].values.shape)
    cnt = np.zeros(depths[0].values.shape)
    total, count = 0.0, 0
    for d in depths:
        acc += np.where(d.valid, d.values, 0.0)
        cnt += d.valid
        total += d.values[d.valid].sum()
        count += int(d.valid.sum())
    if count == 0:
        raise DatabaseError("no valid depth pixels in the database")
    global_mean = total / count
    values = np.where(cnt > 0, acc / np.maximum(cnt, 1), global_mean)
    return DepthMap(np.maximum(values, 1e-6), None)


def _source_flow_hists(images):
    """Flow histograms for consecutive frames of one video source; the last
    frame reuses the final pair."""
    if len(images) < 2:
        return [None] * len(images)
    grays = [to_grayscale(img) for img in images]
    hists = []
    for t in range(len(images) - 1):
        fl = estimate_flow(grays[t], grays[t + 1])
        hists.append(compute_flow_histogram(fl))
    hists.append(hists[-1].copy())
    return hists


def build_from_arrays(images, depths, source_ids=None, resolution=None,
                      video_sources=()):
    """Assemble a database from in-memory rasters. `source_ids` groups
    frames into sources (defaults to one still per item); sources listed in
    `video_sources` also get motion features."""
    if len(images) == 0:
        raise DatabaseError("database must not be empty")
    if len(images) != len(depths):
        raise DatabaseError("one depth map per image required")
    if source_ids is None:
        source_ids = [f"still_{i:04d}" for i in range(len(images))]
    if resolution is None:
        img0 = check_image_rgb(images[0])
        resolution = canonical_resolution(img0.shape[1], img0.shape[0])

    by_source = OrderedDict()
    for img, dep, src in zip(images, depths, source_ids):
        by_source.setdefault(src, []).append((img, dep))

    entries = []
    entry_id = 0
    for src, items in by_source.items():
        canon_imgs = []
        canon_deps = []
        for img, dep in items:
            img = check_image_rgb(img)
            if not isinstance(dep, DepthMap):
                dep = DepthMap(np.asarray(dep, dtype=np.float64), None)
            if img.shape[:2] != dep.values.shape:
                raise DatabaseError(
                    f"image/depth dimensions differ for source {src}")
            canon_imgs.append(np.clip(resize(img, resolution), 0, 1))
            canon_deps.append(resample_depth(dep, resolution))
        hists = (_source_flow_hists(canon_imgs)
                 if src in video_sources and len(canon_imgs) > 1
                 else [None] * len(canon_imgs))
        for idx, (cimg, cdep) in enumerate(zip(canon_imgs, canon_deps)):
            entries.append(DatabaseEntry(
                entry_id, src, idx, cimg, cdep,
                compute_gist(cimg), hists[idx]))
            entry_id += 1

    prior = compute_prior([e.depth for e in entries])
    return Database(entries, resolution, prior)


# ---------------------------------------------------------------------------
# directory ingest


def _discover_sources(root):
    """Sources from manifest.txt if present, else inferred from the
    directory layout; returned in lexicographic order."""
    root = Path(root)
    manifest = root / "manifest.txt"
    sources = []
    if manifest.is_file():
        for line in manifest.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            kind, _, rel = line.partition(" ")
            if kind not in ("still", "video") or not rel:
                raise DatabaseError(f"bad manifest line: {line!r}")
            sources.append((rel.strip(), kind))
        return sorted(sources)
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        frames = sorted(sub.glob("img_*.png"))
        if not frames:
            continue
        kind = "video" if len(frames) > 1 else "still"
        sources.append((sub.name, kind))
    return sources


def _frame_paths(root, source):
    src_dir = Path(root) / source
    pairs = []
    for img_path in sorted(src_dir.glob("img_*.png")):
        idx = int(img_path.stem.split("_")[1])
        pairs.append((idx, img_path, src_dir / f"depth_{idx:05d}.png"))
    return pairs


def _content_hash(image_path, depth_path):
    h = hashlib.sha256()
    h.update(Path(image_path).read_bytes())
    h.update(Path(depth_path).read_bytes())
    return h.digest()


def ingest(root, cache=None, resolution=None):
    """Load every (image, depth) pair under `root`, resample to the
    canonical working resolution, compute features (reusing a warm cache
    when content hashes match) and the prior. Per-entry failures are
    collected; an empty result is fatal."""
    root = Path(root)
    if not root.is_dir():
        raise DatabaseError(f"database root is not a directory: {root}")
    sources = _discover_sources(root)

    cached = {}
    if cache is not None and Path(cache).is_file():
        try:
            cached = {
                (rec["source_id"], rec["frame_index"]): rec
                for rec in _read_cache_records(cache)[1]
            }
        except DatabaseError:
            cached = {}

    entries = []
    errors = []
    entry_id = 0
    for source, kind in sources:
        pairs = _frame_paths(root, source)
        canon = []
        for idx, img_path, dep_path in pairs:
            try:
                if not dep_path.is_file():
                    raise IOError(f"missing depth file {dep_path.name}")
                img = read_image(img_path)
                dep = read_depth(dep_path)
                if img.shape[:2] != dep.values.shape:
                    raise IOError(
                        f"image {img.shape[1]}x{img.shape[0]} vs depth "
                        f"{dep.values.shape[1]}x{dep.values.shape[0]}")
                if not dep.valid.any():
                    raise IOError("depth has no valid pixels")
                canon.append((idx, img, dep, _content_hash(img_path, dep_path)))
            except Exception as exc:  # per-entry error contract
                errors.append(IngestError(source, idx, str(exc)))
        if not canon:
            continue
        if resolution is None:
            first = canon[0][1]
            resolution = canonical_resolution(first.shape[1], first.shape[0])
        canon_imgs = [np.clip(resize(img, resolution), 0, 1)
                      for _, img, _, _ in canon]
        canon_deps = [resample_depth(dep, resolution)
                      for _, _, dep, _ in canon]

        want_flow = kind == "video" and len(canon) > 1
        have_all = all(
            (source, idx) in cached
            and cached[(source, idx)]["hash"] == chash
            and (cached[(source, idx)]["flow_hist"] is not None) == want_flow
            for (idx, _, _, chash) in canon)
        if have_all:
            gists = [cached[(source, idx)]["gist"] for idx, _, _, _ in canon]
            hists = [cached[(source, idx)]["flow_hist"]
                     for idx, _, _, _ in canon]
        else:
            gists = [compute_gist(img) for img in canon_imgs]
            hists = (_source_flow_hists(canon_imgs) if want_flow
                     else [None] * len(canon))
        for (idx, _, _, chash), cimg, cdep, g, fh in zip(
                canon, canon_imgs, canon_deps, gists, hists):
            entries.append(DatabaseEntry(entry_id, source, idx, cimg, cdep,
                                         g, fh, chash))
            entry_id += 1

    if not entries:
        raise DatabaseError(f"no usable entries under {root}")
    prior = compute_prior([e.depth for e in entries])
    db = Database(entries, resolution, prior, root=str(root), errors=errors)
    if cache is not None:
        write_cache(db, cache)
    return db


# ---------------------------------------------------------------------------
# feature cache (magic DTDB, version 1, little-endian)


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def write_cache(db, path):
    parts = [CACHE_MAGIC, struct.pack("<H", CACHE_VERSION)]
    parts.append(_pack_str(db.root))
    parts.append(struct.pack("<HHI", db.resolution[0], db.resolution[1],
                             len(db.entries)))
    for e in db.entries:
        parts.append(struct.pack("<I", e.entry_id))
        parts.append(_pack_str(e.source_id))
        parts.append(struct.pack("<I", e.frame_index))
        parts.append(np.asarray(e.gist, dtype="<f4").tobytes())
        if e.flow_hist is not None:
            parts.append(struct.pack("<B", 1))
            parts.append(np.asarray(e.flow_hist, dtype="<f4").tobytes())
        else:
            parts.append(struct.pack("<B", 0))
        parts.append(e.content_hash)
    Path(path).write_bytes(b"".join(parts))


def _read_cache_records(path):
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise DatabaseError(f"not a feature cache: {path}")
    off = 4
    (version,) = struct.unpack_from("<H", data, off)
    off += 2
    if version != CACHE_VERSION:
        raise DatabaseError(f"unsupported cache version {version}")
    (rlen,) = struct.unpack_from("<H", data, off)
    off += 2
    root = data[off:off + rlen].decode("utf-8")
    off += rlen
    w, h, count = struct.unpack_from("<HHI", data, off)
    off += 8
    records = []
    for _ in range(count):
        (entry_id,) = struct.unpack_from("<I", data, off)
        off += 4
        (slen,) = struct.unpack_from("<H", data, off)
        off += 2
        source = data[off:off + slen].decode("utf-8")
        off += slen
        (frame_index,) = struct.unpack_from("<I", data, off)
        off += 4
        gist = np.frombuffer(data, "<f4", GIST_SIZE, off).astype(np.float64)
        off += GIST_SIZE * 4
        (has_flow,) = struct.unpack_from("<B", data, off)
        off += 1
        flow_hist = None
        if has_flow:
            flow_hist = np.frombuffer(
                data, "<f4", FLOW_HIST_SIZE, off).astype(np.float64)
            off += FLOW_HIST_SIZE * 4
        chash = data[off:off + 32]
        off += 32
        records.append({
            "entry_id": entry_id, "source_id": source,
            "frame_index": frame_index, "gist": gist,
            "flow_hist": flow_hist, "hash": chash,
        })
    return {"root": root, "resolution": (w, h)}, records


def load_database(cache_path, root=None, resolution=None):
    """Rebuild a database from a feature cache, re-reading pixel data from
    the recorded ingest root (override with `root`)."""
    header, _records = _read_cache_records(cache_path)
    root = root or header["root"]
    resolution = resolution or header["resolution"]
    return ingest(root, cache=cache_path, resolution=resolution)
