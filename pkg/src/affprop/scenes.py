"""Procedural piecewise-planar scenes with mutually consistent task targets.

Each scene partitions the image into convex cells by recursive straight
cuts (always splitting the currently largest cell), then assigns every
cell one 3D plane. Depth comes from ray/plane intersection, the normal
map is the plane normal (oriented so a fronto-parallel plane reads
(0, 0, 1)), and the label map gives every cell a distinct material class.
The image is a Lambertian shading of the normals under a random light,
tinted by a per-class albedo, plus Gaussian pixel noise.

The assignments are arranged so that task structure coincides across
tasks at pair level:

* distinct labels per cell make same-label equivalent to same-cell;
* per-cell depths sit on a geometric grid of slots, so depths of
  different cells differ by well over the 20% relative-difference
  threshold while depths inside one cell stay mostly within it (cells
  are sorted by size and larger cells receive flatter planes to keep
  their internal depth spread small);
* cell normals come from a fixed template set whose pairwise angles
  exceed the normal similarity threshold, with only small jitter.

Label boundaries, normal discontinuities and depth creases therefore all
fall on the same cell-boundary pixels by construction.

A spec with planes_min == planes_max == 1 is a degenerate inspection
mode: the single cell gets an exactly fronto-parallel plane (constant
depth, normal (0, 0, 1)).
"""

from dataclasses import dataclass
import colorsys
import struct
from typing import List, Optional, Tuple

import numpy as np

from .errors import ContractError, FormatError

# per-cell depth anchors: geometric spacing, adjacent slots differ by 28%
# relative so they sit clearly apart at the 20% matching threshold, while
# the full range stays inside [0.5, 10] even for tilted planes
DEPTH_SLOTS = 0.9 * 1.326 ** np.arange(8)

# (tilt deg, azimuth deg) of cell normals, sorted flat to steep; minimum
# pairwise angle is 28 deg, above the ~26 deg similarity threshold
NORMAL_TEMPLATES = [
    (0.0, 0.0),
    (28.0, 0.0), (28.0, 90.0), (28.0, 180.0), (28.0, 270.0),
    (50.0, 45.0), (50.0, 135.0), (50.0, 225.0), (50.0, 315.0),
]

DEPTH_MIN, DEPTH_MAX = 0.5, 10.0


@dataclass
class SceneSpec:
    height: int
    width: int
    classes: int
    planes_min: int
    planes_max: int
    noise_sigma: float
    fx: float
    fy: float
    cx: float
    cy: float
    seed: int

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ContractError(f"scene too small: {self.height}x{self.width}")
        if not 1 <= self.planes_min <= self.planes_max <= len(NORMAL_TEMPLATES) - 1:
            raise ContractError(
                f"plane count range must satisfy 1 <= min <= max <= 8, got "
                f"{self.planes_min}..{self.planes_max}")
        if self.classes < max(2, self.planes_max):
            raise ContractError(
                f"{self.classes} classes cannot label {self.planes_max} planes")
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError("focal lengths must be positive")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be non-negative")

    @classmethod
    def from_config(cls, cfg) -> "SceneSpec":
        return cls(height=cfg.height, width=cfg.width, classes=cfg.classes,
                   planes_min=cfg.planes_min, planes_max=cfg.planes_max,
                   noise_sigma=cfg.noise_sigma,
                   fx=cfg.focal_scale * cfg.width, fy=cfg.focal_scale * cfg.width,
                   cx=(cfg.width - 1) / 2.0, cy=(cfg.height - 1) / 2.0,
                   seed=cfg.seed)

    @property
    def intrinsics(self) -> Tuple[float, float, float, float]:
        return (self.fx, self.fy, self.cx, self.cy)


@dataclass
class SceneSample:
    image: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    labels: np.ndarray
    id: int


@dataclass
class Dataset:
    samples: List[SceneSample]
    height: int
    width: int
    classes: int

    def __len__(self):
        return len(self.samples)


def ray_directions(height: int, width: int,
                   intrinsics: Tuple[float, float, float, float]) -> np.ndarray:
    """(3, H, W) rays through pixel centers, z component fixed at 1."""
    fx, fy, cx, cy = intrinsics
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([(xx - cx) / fx, (yy - cy) / fy, np.ones_like(xx)])


def _partition(height: int, width: int, target: int,
               rng: np.random.Generator) -> np.ndarray:
    """Integer cell map from recursive straight cuts of the largest cell."""
    cells = np.zeros((height, width), dtype=np.int64)
    if target == 1:
        return cells
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    n_cells = 1
    attempts = 0
    min_pixels = max(16, (height * width) // 120)
    while n_cells < target and attempts < 200:
        attempts += 1
        sizes = np.bincount(cells.ravel(), minlength=n_cells)
        cid = int(np.argmax(sizes))
        ys, xs = np.nonzero(cells == cid)
        pick = int(rng.integers(len(ys)))
        theta = float(rng.uniform(0.0, np.pi))
        signed = (xx - xs[pick]) * np.cos(theta) + (yy - ys[pick]) * np.sin(theta)
        inside = cells == cid
        low = inside & (signed <= 0.0)
        high = inside & (signed > 0.0)
        if low.sum() < min_pixels or high.sum() < min_pixels:
            continue
        cells[high] = n_cells
        n_cells += 1
    return cells


def _template_normal(tilt_deg: float, az_deg: float) -> np.ndarray:
    t, a = np.radians(tilt_deg), np.radians(az_deg)
    return np.array([np.sin(t) * np.cos(a), np.sin(t) * np.sin(a), np.cos(t)])


def _cell_normals(n_cells: int, order_by_size: np.ndarray,
                  rng: np.random.Generator) -> np.ndarray:
    """One unit normal per cell; larger cells get flatter templates."""
    flat_group = [NORMAL_TEMPLATES[0]]
    mid_group = list(NORMAL_TEMPLATES[1:5])
    steep_group = list(NORMAL_TEMPLATES[5:])
    rng.shuffle(mid_group)
    rng.shuffle(steep_group)
    ordered = flat_group + mid_group + steep_group
    az_offset = float(rng.uniform(0.0, 360.0))
    normals = np.zeros((n_cells, 3))
    for rank, cid in enumerate(order_by_size):
        tilt, az = ordered[rank]
        tilt = max(0.0, tilt + float(rng.uniform(-1.0, 1.0)))
        az = az + az_offset + float(rng.uniform(-2.0, 2.0))
        normals[cid] = _template_normal(tilt, az)
    return normals


def _albedo_palette(classes: int) -> np.ndarray:
    """(classes, 3) distinct matte colors, fixed across runs."""
    colors = [colorsys.hsv_to_rgb((k * 0.61803) % 1.0, 0.55, 0.9)
              for k in range(classes)]
    return np.array(colors)


def generate_scene_fields(spec: SceneSpec, sample_id: int):
    """Full generation, also returning the integer cell map for analysis."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, sample_id]))
    h, w = spec.height, spec.width
    target = int(rng.integers(spec.planes_min, spec.planes_max + 1))
    cells = _partition(h, w, target, rng)
    n_cells = int(cells.max()) + 1
    sizes = np.bincount(cells.ravel(), minlength=n_cells)
    order_by_size = np.argsort(-sizes, kind="stable")

    if n_cells == 1:
        normals = np.array([[0.0, 0.0, 1.0]])
        slots = np.array([float(DEPTH_SLOTS[len(DEPTH_SLOTS) // 2])])
    else:
        normals = _cell_normals(n_cells, order_by_size, rng)
        slots = DEPTH_SLOTS[rng.permutation(len(DEPTH_SLOTS))[:n_cells]]

    rays = ray_directions(h, w, spec.intrinsics)
    flat_rays = rays.reshape(3, -1)
    depth = np.zeros(h * w)
    normal_map = np.zeros((3, h * w))
    flat_cells = cells.reshape(-1)
    for cid in range(n_cells):
        idx = np.flatnonzero(flat_cells == cid)
        n = normals[cid]
        nd = n @ flat_rays[:, idx]
        if nd.min() < 0.15:
            # ray nearly parallel to the plane; flatten the tilt until safe
            while nd.min() < 0.15:
                n = _unit(n + np.array([0.0, 0.0, 0.5]))
                nd = n @ flat_rays[:, idx]
            normals[cid] = n
        d0 = flat_rays[:, idx].mean(axis=1)
        rho = slots[cid] * float(n @ d0)
        z = rho / nd
        # plane slant can push extremes outside the depth budget; renormalize
        if z.max() > DEPTH_MAX * 0.99:
            z *= DEPTH_MAX * 0.99 / z.max()
        if z.min() < DEPTH_MIN * 1.02:
            z *= DEPTH_MIN * 1.02 / z.min()
        depth[idx] = z
        normal_map[:, idx] = n[:, None]

    label_of_cell = rng.permutation(spec.classes)[:n_cells]
    labels = label_of_cell[flat_cells].reshape(h, w).astype(np.int64)

    light = _unit(np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6),
                            rng.uniform(0.8, 1.6)]))
    shade = 0.3 + 0.7 * np.maximum(0.0, normal_map.T @ light)
    albedo = _albedo_palette(spec.classes)[label_of_cell[flat_cells]]
    image = (albedo * shade[:, None]).T.reshape(3, h, w)
    if spec.noise_sigma > 0:
        image = image + spec.noise_sigma * rng.standard_normal(image.shape)
    image = np.clip(image, 0.0, 1.0)

    sample = SceneSample(image=image, depth=depth.reshape(h, w),
                         normal=normal_map.reshape(3, h, w),
                         labels=labels, id=sample_id)
    return sample, cells


def generate_scene(spec: SceneSpec, sample_id: int) -> SceneSample:
    sample, _ = generate_scene_fields(spec, sample_id)
    return sample


def generate_dataset(spec: SceneSpec, count: int) -> Dataset:
    samples = [generate_scene(spec, sample_id) for sample_id in range(count)]
    return Dataset(samples=samples, height=spec.height, width=spec.width,
                   classes=spec.classes)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def derive_normals_from_depth(depth: np.ndarray,
                              intrinsics: Tuple[float, float, float, float]
                              ) -> np.ndarray:
    """Normals from a least-squares plane fit over 3x3 neighborhoods.

    Back-projects every pixel to 3D, fits a plane to each pixel's (edge-
    clamped) 3x3 patch via the smallest eigenvector of the point
    covariance, and orients the result to the same convention as the
    generator (fronto-parallel reads (0, 0, 1)).
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ContractError(f"depth must be 2-d, got shape {depth.shape}")
    if np.any(depth <= 0):
        raise ContractError("depth must be positive")
    h, w = depth.shape
    rays = ray_directions(h, w, intrinsics)
    points = rays * depth[None]
    padded = np.pad(points, ((0, 0), (1, 1), (1, 1)), mode="edge")
    shifts = [padded[:, dy:dy + h, dx:dx + w]
              for dy in range(3) for dx in range(3)]
    stack = np.stack(shifts)                     # (9, 3, H, W)
    mean = stack.mean(axis=0)
    centered = stack - mean[None]
    cov = np.einsum("kihw,kjhw->hwij", centered, centered) / 9.0
    eigvec = np.linalg.eigh(cov.reshape(-1, 3, 3))[1][:, :, 0]
    flat_rays = rays.reshape(3, -1).T
    flip = np.sign(np.sum(eigvec * flat_rays, axis=1))
    flip[flip == 0] = 1.0
    oriented = (eigvec * flip[:, None]).T.reshape(3, h, w)
    return oriented


# ---------------------------------------------------------------------------
# dataset file format

MAGIC = b"PAPD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
_SAMPLE_HEAD = struct.Struct("<Q")


def write_dataset(path, dataset: Dataset) -> None:
    h, w, k = dataset.height, dataset.width, dataset.classes
    for s in dataset.samples:
        if s.image.shape != (3, h, w) or s.depth.shape != (h, w) \
                or s.normal.shape != (3, h, w) or s.labels.shape != (h, w):
            raise ContractError(f"sample {s.id} shapes do not match dataset header")
        if s.labels.min() < 0 or s.labels.max() >= k:
            raise ContractError(f"sample {s.id} labels outside [0, {k})")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(dataset.samples), h, w, k))
        for s in dataset.samples:
            fh.write(_SAMPLE_HEAD.pack(s.id))
            fh.write(np.ascontiguousarray(s.image, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(s.depth, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(s.normal, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(s.labels, dtype="<u2").tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()

    def need(offset, size, what):
        if offset + size > len(blob):
            raise FormatError(f"truncated while reading {what}", offset=len(blob))
        return blob[offset:offset + size]

    head = need(0, _HEADER.size, "header")
    magic, version, count, h, w, k = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    offset = _HEADER.size
    image_bytes = 3 * h * w * 8
    plane_bytes = h * w * 8
    label_bytes = h * w * 2
    samples = []
    for _ in range(count):
        sid = _SAMPLE_HEAD.unpack(need(offset, 8, "sample id"))[0]
        offset += 8
        image = np.frombuffer(need(offset, image_bytes, f"sample {sid} image"),
                              dtype="<f8").reshape(3, h, w).copy()
        offset += image_bytes
        depth = np.frombuffer(need(offset, plane_bytes, f"sample {sid} depth"),
                              dtype="<f8").reshape(h, w).copy()
        offset += plane_bytes
        normal = np.frombuffer(need(offset, image_bytes, f"sample {sid} normals"),
                               dtype="<f8").reshape(3, h, w).copy()
        offset += image_bytes
        labels = np.frombuffer(need(offset, label_bytes, f"sample {sid} labels"),
                               dtype="<u2").reshape(h, w).astype(np.int64)
        offset += label_bytes
        samples.append(SceneSample(image=image, depth=depth, normal=normal,
                                   labels=labels, id=int(sid)))
    if offset != len(blob):
        raise FormatError(
            f"{len(blob) - offset} trailing bytes after {count} samples",
            offset=offset)
    return Dataset(samples=samples, height=h, width=w, classes=k)


def split(dataset: Dataset, train_frac: float, seed: int):
    """Deterministic shuffled split into (train, val) sample lists."""
    if not 0.0 < train_frac < 1.0:
        raise ContractError(f"train_frac must lie in (0, 1), got {train_frac}")
    n = len(dataset.samples)
    if n < 2:
        raise ContractError(f"cannot split {n} samples")
    order = np.random.default_rng(
        np.random.SeedSequence([seed, 0x5EED])).permutation(n)
    n_train = min(n - 1, max(1, int(round(train_frac * n))))
    train = [dataset.samples[i] for i in order[:n_train]]
    val = [dataset.samples[i] for i in order[n_train:]]
    return train, val


# ---------------------------------------------------------------------------
# visual exports


def export_previews(sample: SceneSample, out_dir) -> list:
    """PPM/PGM renderings of one sample's four maps; returns the paths."""
    import os

    from .imgio import labels_to_rgb, normals_to_rgb, to_uint8, write_pgm, write_ppm

    base = os.path.join(str(out_dir), f"scene_{sample.id:05d}")
    paths = []
    rgb = np.clip(np.transpose(sample.image, (1, 2, 0)) * 255.0, 0, 255)
    write_ppm(base + "_image.ppm", np.rint(rgb).astype(np.uint8))
    paths.append(base + "_image.ppm")
    write_pgm(base + "_depth.pgm", to_uint8(sample.depth))
    paths.append(base + "_depth.pgm")
    write_ppm(base + "_normal.ppm", normals_to_rgb(sample.normal))
    paths.append(base + "_normal.ppm")
    write_ppm(base + "_labels.ppm", labels_to_rgb(sample.labels))
    paths.append(base + "_labels.ppm")
    return paths
