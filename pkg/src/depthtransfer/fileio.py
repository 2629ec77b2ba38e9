"""File formats: 8-bit PNG/JPEG color, 16-bit millimeter PNG depth
(0 = invalid), little-endian PFM depth, and .flo flow dumps."""

import struct

import cv2
import numpy as np

from .imageops import DepthMap
from .validation import check_image_rgb


def read_image(path):
    """Load a color image as float RGB in [0, 1]."""
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise IOError(f"cannot read image: {path}")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0


def write_image(path, img):
    img = check_image_rgb(img)
    bgr = cv2.cvtColor((img * 255.0).round().astype(np.uint8), cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), bgr):
        raise IOError(f"cannot write image: {path}")


def read_depth_png(path):
    """16-bit single-channel PNG in millimeters; 0 marks invalid pixels."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"cannot read depth: {path}")
    if raw.ndim == 3:
        raw = raw[:, :, 0]
    if raw.dtype != np.uint16:
        raise IOError(f"depth PNG must be 16-bit, got {raw.dtype}: {path}")
    valid = raw > 0
    meters = raw.astype(np.float64) / 1000.0
    meters[~valid] = 1.0  # placeholder behind the mask
    return DepthMap(meters, valid)


def write_depth_png(path, depth):
    mm = np.zeros(depth.values.shape, dtype=np.uint16)
    vals = np.clip(depth.values * 1000.0, 1, 65535).round().astype(np.uint16)
    mm[depth.valid] = vals[depth.valid]
    if not cv2.imwrite(str(path), mm):
        raise IOError(f"cannot write depth: {path}")


def read_pfm(path):
    """Little-endian PFM; returns (H, W) or (H, W, 3) float array."""
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header == b"Pf":
            channels = 1
        elif header == b"PF":
            channels = 3
        else:
            raise IOError(f"not a PFM file: {path}")
        dims = f.readline().split()
        width, height = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        data = np.frombuffer(f.read(), "<f4" if scale < 0 else ">f4")
    data = data.reshape(height, width, channels)
    data = data[::-1]  # PFM rows are bottom-up
    return data[:, :, 0] if channels == 1 else data


def write_pfm(path, array):
    array = np.asarray(array, dtype=np.float32)
    if array.ndim == 2:
        header, data = b"Pf", array[:, :, None]
    elif array.ndim == 3 and array.shape[2] in (2, 3):
        if array.shape[2] == 2:  # pad 2-channel (flow/warp) with zeros
            array = np.dstack([array, np.zeros(array.shape[:2], np.float32)])
        header, data = b"PF", array
    else:
        raise ValueError(f"unsupported PFM shape {array.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(data[::-1].astype("<f4").tobytes())


def read_depth(path):
    """Depth from either 16-bit PNG (mm) or PFM (meters)."""
    path = str(path)
    if path.lower().endswith(".pfm"):
        meters = read_pfm(path)
        if meters.ndim != 2:
            raise IOError(f"depth PFM must be single-channel: {path}")
        valid = np.isfinite(meters) & (meters > 0)
        vals = np.where(valid, meters, 1.0)
        return DepthMap(vals, valid)
    return read_depth_png(path)


def write_flo(path, u, v):
    """Middlebury .flo dump (magic PIEH, interleaved f32 u, v)."""
    u = np.asarray(u, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    h, w = u.shape
    with open(path, "wb") as f:
        f.write(b"PIEH")
        f.write(struct.pack("<ii", w, h))
        f.write(np.stack([u, v], axis=-1).astype("<f4").tobytes())


def read_flo(path):
    with open(path, "rb") as f:
        if f.read(4) != b"PIEH":
            raise IOError(f"not a .flo file: {path}")
        w, h = struct.unpack("<ii", f.read(8))
        data = np.frombuffer(f.read(), "<f4").reshape(h, w, 2)
    return data[:, :, 0].astype(np.float64), data[:, :, 1].astype(np.float64)
