"""Point clouds: file IO, normalization, augmentation, voxelization and batching."""
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Set

import numpy as np
from scipy.spatial.transform import Rotation

from .tensor import SparseTensor

log = logging.getLogger(__name__)

FEATURE_MODES = ("count", "mean", "mean+count")


class DataError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    features: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    category: Optional[int] = None
    name: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2:
            raise DataError(f"points must be an (N, d) array, got shape {self.points.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.points):
                raise DataError(f"{len(self.labels)} labels for {len(self.points)} points")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if len(self.features) != len(self.points):
                raise DataError("feature rows do not match points")

    def __len__(self):
        return len(self.points)

    @property
    def d(self):
        return self.points.shape[1]

    def replace(self, points):
        return PointCloud(points, self.features, self.labels, self.category, self.name)


@dataclass
class VoxelSample:
    tensor: SparseTensor
    voxel_labels: Optional[np.ndarray]
    point_to_voxel: np.ndarray
    category: Optional[int] = None
    point_labels: Optional[np.ndarray] = None
    offset: Optional[np.ndarray] = None
    name: str = ""

    @property
    def n_outside(self):
        return int((self.point_to_voxel < 0).sum())


def _data_lines(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if body:
                yield lineno, body


def load_point_cloud(points_path, labels_path=None, dims=3, category=None):
    """Read a points file (``d`` coordinates then optional features per line)."""
    rows = []
    width = None
    for lineno, body in _data_lines(points_path):
        try:
            vals = [float(v) for v in body.split()]
        except ValueError:
            raise DataError(f"{points_path}:{lineno}: malformed number in {body!r}") from None
        if len(vals) < dims:
            raise DataError(f"{points_path}:{lineno}: expected at least {dims} values")
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            raise DataError(f"{points_path}:{lineno}: expected {width} values, got {len(vals)}")
        rows.append(vals)
    arr = np.array(rows, dtype=np.float64).reshape(-1, width or dims)
    features = arr[:, dims:] if arr.shape[1] > dims else None
    labels = None
    if labels_path is not None:
        labels = []
        for lineno, body in _data_lines(labels_path):
            try:
                v = int(body)
            except ValueError:
                raise DataError(f"{labels_path}:{lineno}: not an integer label: {body!r}") from None
            if v < 0:
                raise DataError(f"{labels_path}:{lineno}: negative label {v}")
            labels.append(v)
        if len(labels) != len(arr):
            raise DataError(f"{labels_path}: {len(labels)} labels for {len(arr)} points")
        labels = np.array(labels, dtype=np.int64)
    return PointCloud(arr[:, :dims], features, labels, category, Path(points_path).stem)


def save_point_cloud(pc: PointCloud, points_path, labels_path=None):
    cols = pc.points if pc.features is None else np.hstack([pc.points, pc.features])
    np.savetxt(points_path, cols, fmt="%.17g")
    if labels_path is not None:
        if pc.labels is None:
            raise DataError("point cloud has no labels to save")
        np.savetxt(labels_path, pc.labels, fmt="%d")


def normalize_to_sphere(pc: PointCloud, S):
    """Center on the centroid and scale so the farthest point sits at radius S/2."""
    if len(pc) == 0:
        raise DataError("cannot normalize an empty point cloud")
    p = pc.points - pc.points.mean(axis=0)
    r = np.linalg.norm(p, axis=1).max()
    if r > 0:
        p = p * (S / 2.0 / r)
    else:
        p = np.zeros_like(p)
    return pc.replace(p)


def random_rotation(rng):
    """Uniformly distributed 3D rotation matrix."""
    return Rotation.random(random_state=rng).as_matrix()


def augment(pc: PointCloud, mode, rng, eps=0.1):
    """``rotation``: uniform random rotation.  ``affine``: ``(I + U(-eps, eps)) R``.

    ``none`` returns the cloud unchanged.
    """
    if mode == "none":
        return pc
    if pc.d != 3:
        raise DataError("rotation augmentation needs 3D points")
    m = random_rotation(rng)
    if mode == "affine":
        m = (np.eye(3) + rng.uniform(-eps, eps, (3, 3))) @ m
    elif mode != "rotation":
        raise DataError(f"unknown augmentation mode {mode!r}")
    return pc.replace(pc.points @ m.T)


def majority_labels(rows, labels, n_voxels):
    """Most frequent label per voxel; ties go to the smallest label id."""
    n_labels = int(labels.max()) + 1
    counts = np.zeros((n_voxels, n_labels), dtype=np.int64)
    np.add.at(counts, (rows, labels), 1)
    return counts.argmax(axis=1)


def voxelize(pc: PointCloud, S, grid_size, rng, feature_mode="count", offset=None):
    """Place a normalized cloud (radius <= S/2) at a random spot in a ``grid_size^d`` grid.

    Cells are half-open ``[k, k+1)``.  In ``count`` mode the feature is the
    number of points per voxel rescaled so active voxels average 1.  ``mean``
    averages the per-point features; ``mean+count`` appends the normalized
    count as an extra channel.
    """
    d = pc.d
    if grid_size < S:
        raise DataError(f"a sphere of diameter {S} does not fit a grid of size {grid_size}")
    if feature_mode not in FEATURE_MODES:
        raise DataError(f"unknown feature mode {feature_mode!r}")
    if feature_mode != "count" and pc.features is None:
        raise DataError(f"feature mode {feature_mode!r} needs per-point features")
    radius = np.linalg.norm(pc.points, axis=1).max() if len(pc) else 0.0
    if radius > S / 2.0 * (1 + 1e-9):
        raise DataError(f"cloud radius {radius:.6g} exceeds S/2 = {S / 2}; normalize first")
    if offset is None:
        lo, hi = S / 2.0, grid_size - S / 2.0
        offset = rng.uniform(lo, hi, d) if hi > lo else np.full(d, lo)
    offset = np.asarray(offset, dtype=np.float64)

    vox = np.floor(pc.points + offset).astype(np.int64)
    inside = np.all((vox >= 0) & (vox < grid_size), axis=1)
    t = SparseTensor(d, (grid_size,) * d, 1, 1)
    coords = np.concatenate([np.zeros((inside.sum(), 1), np.int64), vox[inside]], axis=1)
    rows = t.index.insert(t.pack(coords)) if len(coords) else np.empty(0, np.int64)
    a = len(t.index)
    point_to_voxel = np.full(len(pc), -1, dtype=np.int64)
    point_to_voxel[inside] = rows
    if (~inside).any():
        log.warning("%s: %d points fall outside the grid", pc.name, int((~inside).sum()))

    counts = np.bincount(rows, minlength=a).astype(np.float64)
    density = counts / counts.mean() if a else counts
    if feature_mode == "count":
        feats = density[:, None]
    else:
        sums = np.zeros((a, pc.features.shape[1]))
        np.add.at(sums, rows, pc.features[inside])
        feats = sums / np.maximum(counts, 1)[:, None]
        if feature_mode == "mean+count":
            feats = np.hstack([feats, density[:, None]])
    t.features = feats.astype(np.float32)

    voxel_labels = None
    if pc.labels is not None and a:
        voxel_labels = majority_labels(rows, pc.labels[inside], a)
    return VoxelSample(t, voxel_labels, point_to_voxel, pc.category, pc.labels, offset, pc.name)


def prepare(pc: PointCloud, S, grid_size, rng, augment_mode="rotation", eps=0.1,
            feature_mode="count"):
    """Augment, normalize into the sphere of diameter S, then voxelize."""
    pc = augment(pc, augment_mode, rng, eps)
    pc = normalize_to_sphere(pc, S)
    return voxelize(pc, S, grid_size, rng, feature_mode)


def split_by_hash(identifier):
    """``train`` or ``validation`` from the first bit of a SHA-256 digest."""
    digest = hashlib.sha256(str(identifier).encode("utf-8")).digest()
    return "train" if digest[0] >> 7 == 0 else "validation"


def project_predictions(sample: VoxelSample, voxel_probs):
    """Per-point class distributions: every point takes its voxel's row.

    Points outside the grid get a uniform distribution.  Returns
    ``(probs, outside_mask)``.
    """
    voxel_probs = np.asarray(voxel_probs)
    if voxel_probs.shape[0] != sample.tensor.a:
        raise DataError(f"{voxel_probs.shape[0]} probability rows for {sample.tensor.a} voxels")
    c = voxel_probs.shape[1]
    outside = sample.point_to_voxel < 0
    out = np.full((len(sample.point_to_voxel), c), 1.0 / c)
    out[~outside] = voxel_probs[sample.point_to_voxel[~outside]]
    if outside.any():
        log.warning("%s: %d points outside the grid get uniform predictions",
                    sample.name, int(outside.sum()))
    return out, outside


@dataclass
class Batch:
    tensor: SparseTensor
    labels: Optional[np.ndarray]
    row_offsets: np.ndarray
    samples: List[VoxelSample] = field(default_factory=list)

    def rows_of(self, i):
        return slice(int(self.row_offsets[i]), int(self.row_offsets[i + 1]))


def collate(samples: List[VoxelSample]):
    """Stack samples into one mini-batch tensor; sample ``i`` gets batch index ``i``."""
    first = samples[0].tensor
    t = SparseTensor(first.dims, first.spatial_size, len(samples), first.m)
    offsets = [0]
    coords, feats = [], []
    for i, s in enumerate(samples):
        c = s.tensor.coords.copy()
        c[:, 0] = i
        coords.append(c)
        feats.append(s.tensor.features)
        offsets.append(offsets[-1] + s.tensor.a)
    if offsets[-1]:
        t.set_sites(np.concatenate(coords), np.concatenate(feats))
    labels = None
    if all(s.voxel_labels is not None for s in samples):
        labels = np.concatenate([s.voxel_labels for s in samples])
    return Batch(t, labels, np.array(offsets), list(samples))


@dataclass
class Manifest:
    """Sample id -> category id, and category id -> allowed part labels."""
    sample_category: Dict[str, int] = field(default_factory=dict)
    category_parts: Dict[int, Set[int]] = field(default_factory=dict)

    def parts_of(self, category):
        return self.category_parts.get(category)


def load_manifest(path):
    """Lines ``category <id> <part> <part> ...`` and ``sample <name> <category>``."""
    man = Manifest()
    for lineno, body in _data_lines(path):
        tok = body.split()
        try:
            if tok[0] == "category":
                man.category_parts[int(tok[1])] = {int(x) for x in tok[2:]}
            elif tok[0] == "sample" and len(tok) == 3:
                man.sample_category[tok[1]] = int(tok[2])
            else:
                raise ValueError
        except (ValueError, IndexError):
            raise DataError(f"{path}:{lineno}: cannot parse manifest line {body!r}") from None
    return man


def save_manifest(man: Manifest, path):
    with open(path, "w") as fh:
        for cat in sorted(man.category_parts):
            parts = " ".join(str(p) for p in sorted(man.category_parts[cat]))
            fh.write(f"category {cat} {parts}\n")
        for name in sorted(man.sample_category):
            fh.write(f"sample {name} {man.sample_category[name]}\n")


def save_voxel_sample(sample: VoxelSample, path):
    t = sample.tensor
    np.savez(path, coords=t.coords, features=t.features, spatial_size=np.array(t.spatial_size),
             voxel_labels=(sample.voxel_labels if sample.voxel_labels is not None
                           else np.empty(0, np.int64)),
             point_to_voxel=sample.point_to_voxel,
             offset=sample.offset if sample.offset is not None else np.empty(0),
             category=-1 if sample.category is None else sample.category,
             name=sample.name)


def load_voxel_sample(path):
    with np.load(path) as z:
        t = SparseTensor(len(z["spatial_size"]), tuple(z["spatial_size"]), 1, z["features"].shape[1])
        if len(z["coords"]):
            t.set_sites(z["coords"], z["features"])
        labels = z["voxel_labels"] if len(z["voxel_labels"]) else None
        cat = int(z["category"])
        return VoxelSample(t, labels, z["point_to_voxel"], None if cat < 0 else cat,
                           None, z["offset"] if len(z["offset"]) else None, str(z["name"]))
