"""Input validation helpers shared across the package."""

import numpy as np


def check_image_rgb(img, name="image"):
    """Validate an RGB image: (H, W, 3) float array with values in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"{name} must be non-empty, got {img.shape}")
    if not np.isfinite(img).all():
        raise ValueError(f"{name} contains non-finite values")
    if img.min() < -1e-9 or img.max() > 1 + 1e-9:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return np.clip(img, 0.0, 1.0)


def check_gray(img, name="image"):
    """Validate a single-channel image: (H, W) float array in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"{name} must have shape (H, W), got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"{name} must be non-empty, got {img.shape}")
    if not np.isfinite(img).all():
        raise ValueError(f"{name} contains non-finite values")
    if img.min() < -1e-9 or img.max() > 1 + 1e-9:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return np.clip(img, 0.0, 1.0)


def check_scalar_field(field, name="field"):
    """Validate an unbounded scalar raster: (H, W) finite float array."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise ValueError(f"{name} must have shape (H, W), got {field.shape}")
    if not np.isfinite(field).all():
        raise ValueError(f"{name} contains non-finite values")
    return field


def check_same_shape(a, b, name_a="first", name_b="second"):
    if a.shape[:2] != b.shape[:2]:
        raise ValueError(
            f"{name_a} and {name_b} must share dimensions, "
            f"got {a.shape[:2]} vs {b.shape[:2]}"
        )


def check_homography(h, name="homography"):
    """Validate a 3x3 projective matrix, normalized so h[2, 2] == 1."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise ValueError(f"{name} must be 3x3, got {h.shape}")
    if not np.isfinite(h).all():
        raise ValueError(f"{name} contains non-finite values")
    if abs(h[2, 2]) < 1e-12:
        raise ValueError(f"{name} has a vanishing scale entry")
    h = h / h[2, 2]
    if abs(np.linalg.det(h)) < 1e-12 or np.linalg.cond(h) > 1e12:
        raise ValueError(f"{name} is singular or near-singular")
    return h


def check_positive_int(value, name):
    if not isinstance(value, (int, np.integer)) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
