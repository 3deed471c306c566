"""Binary PGM/PPM writers for quick visual inspection of maps and matrices.

Only the 8-bit binary variants (P5/P6) are emitted; every tool that can
display anything can display these.
"""

import numpy as np

from .errors import DimensionError


def to_uint8(values: np.ndarray, lo: float = None, hi: float = None) -> np.ndarray:
    """Affinely map values to 0..255. Defaults to the array's own range.

    A constant array maps to all zeros rather than dividing by zero.
    """
    arr = np.asarray(values, dtype=np.float64)
    lo = float(arr.min()) if lo is None else float(lo)
    hi = float(arr.max()) if hi is None else float(hi)
    if hi <= lo:
        return np.zeros(arr.shape, dtype=np.uint8)
    scaled = (arr - lo) / (hi - lo)
    return np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise DimensionError(f"PGM wants a 2-d array, got shape {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(gray.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DimensionError(f"PPM wants an (H, W, 3) array, got shape {rgb.shape}")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(rgb.tobytes())


def read_pgm(path) -> np.ndarray:
    """Reads back the P5 files this module writes (used by round-trip tests)."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise DimensionError(f"not a binary PGM: {path}")
    w, h = (int(tok) for tok in parts[1].split())
    pixels = np.frombuffer(parts[3][: w * h], dtype=np.uint8)
    return pixels.reshape(h, w).copy()


# Fixed palette for label maps: spaced hues so adjacent class ids differ
# visibly. Deterministic so exported images are byte-stable.
_PALETTE = np.array(
    [
        [230, 60, 60], [60, 170, 230], [90, 200, 90], [235, 200, 70],
        [170, 90, 220], [240, 140, 60], [70, 220, 200], [200, 110, 140],
        [120, 120, 240], [150, 210, 60], [220, 80, 200], [100, 160, 120],
        [240, 100, 100], [80, 120, 200], [180, 180, 90], [140, 100, 80],
    ],
    dtype=np.uint8,
)


def labels_to_rgb(labels: np.ndarray) -> np.ndarray:
    return _PALETTE[np.asarray(labels, dtype=np.int64) % len(_PALETTE)]


def normals_to_rgb(normal: np.ndarray) -> np.ndarray:
    """(3, H, W) unit normals to the usual (n + 1) / 2 color coding."""
    shifted = (np.transpose(normal, (1, 2, 0)) + 1.0) * 0.5
    return np.clip(np.rint(shifted * 255.0), 0, 255).astype(np.uint8)
