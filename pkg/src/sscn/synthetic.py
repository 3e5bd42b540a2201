"""Generated point clouds for desk-scale experiments.

``curve_sample`` builds a junction with three branches, one of each shape
class: straight segment (0), planar zigzag (1) and helix (2).  Branches start a
little way from the hub so no voxel mixes classes at the junction.  Every point is
labeled with the class of the branch it was sampled from.
"""
import numpy as np

from .data import Manifest, PointCloud

CURVE_CLASSES = ("straight", "zigzag", "helix")


def sphere_surface_cloud(n_points, rng, radius=1.0, name=""):
    v = rng.standard_normal((n_points, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return PointCloud(radius * v, name=name)


def _frame(u, rng):
    """Two unit vectors completing ``u`` to a random orthonormal frame."""
    a = rng.standard_normal(3)
    v = a - a.dot(u) * u
    v /= np.linalg.norm(v)
    return v, np.cross(u, v)


def _directions(rng, k=3, min_angle=np.deg2rad(70)):
    while True:
        dirs = rng.standard_normal((k, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        cos = dirs @ dirs.T
        if np.all(cos[np.triu_indices(k, 1)] < np.cos(min_angle)):
            return dirs


def _branch(kind, u, rng, density, gap=0.1):
    """Points of one branch along ``u``, starting ``gap`` away from the hub."""
    v, w = _frame(u, rng)
    length = rng.uniform(0.85, 1.0)
    if kind == 0:
        t = rng.uniform(gap, length, max(2, int(density * length)))
        return t[:, None] * u
    axial = length * 0.9
    if kind == 1:
        # planar zigzag (triangle wave)
        amp = rng.uniform(0.18, 0.22)
        period = rng.uniform(0.35, 0.45)
        t = rng.uniform(gap, axial, max(2, int(density * axial * 2)))
        phase = t / period
        tri = 4 * np.abs(phase - np.floor(phase + 0.5)) - 1
        return t[:, None] * u + amp * tri[:, None] * v
    r = rng.uniform(0.2, 0.25)
    pitch = rng.uniform(0.3, 0.4)
    omega = 2 * np.pi / pitch
    arc_len = axial * np.sqrt(1 + (r * omega) ** 2)
    t = rng.uniform(gap, axial, max(2, int(density * arc_len)))
    ring = np.cos(omega * t)[:, None] * v + np.sin(omega * t)[:, None] * w
    return t[:, None] * u + r * (ring - v)


def curve_sample(rng, name="", density=250.0, noise=0.01):
    """Three-branch junction, one branch per class, in random directions."""
    dirs = _directions(rng)
    kinds = rng.permutation(3)
    pts, labels = [], []
    for kind, u in zip(kinds, dirs):
        p = _branch(int(kind), u, rng, density)
        pts.append(p)
        labels.append(np.full(len(p), kind, dtype=np.int64))
    pts = np.concatenate(pts)
    pts += rng.normal(0, noise, pts.shape)
    return PointCloud(pts, labels=np.concatenate(labels), category=0, name=name)


def curve_dataset(n, seed=0):
    rng = np.random.default_rng(seed)
    return [curve_sample(rng, name=f"curve_{i:04d}") for i in range(n)]


def curve_manifest(samples):
    man = Manifest(category_parts={0: {0, 1, 2}})
    for s in samples:
        man.sample_category[s.name] = 0
    return man
