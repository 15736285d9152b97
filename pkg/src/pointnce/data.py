"""Dataset ingestion: OFF meshes, surface sampling, point files, synthetic shapes.

Real datasets arrive as OFF meshes or point files; desk-scale experiments
use the synthetic generator, which samples analytic surfaces (sphere,
cube, cylinder, cone, torus) with per-instance anisotropic scale jitter
and light coordinate noise. A dataset on disk is a directory of binary
point files plus ``index.csv`` (id,label), ``classes.txt`` and ``meta.txt``.
"""

from __future__ import annotations

import csv
import os
import struct
import sys
from dataclasses import dataclass, field

import numpy as np

from .geometry import as_cloud, normalize_bounding_sphere, random_unit_quaternion, rotate

POINTS_MAGIC = b"i3dp"
POINTS_VERSION = 1

SHAPE_CLASSES = ("sphere", "cube", "cylinder", "cone", "torus")
COORD_NOISE_SIGMA = 0.01


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (v, 3) float64
    faces: np.ndarray  # (f, 3) int vertex indices


@dataclass
class Instance:
    name: str
    points: np.ndarray
    label: int | None = None


@dataclass
class Dataset:
    instances: list
    classes: list = field(default_factory=list)
    split: str = "train"

    def __len__(self) -> int:
        return len(self.instances)

    def labels(self) -> np.ndarray:
        return np.array([inst.label for inst in self.instances])


class ParseError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


def _significant_lines(text: str):
    """Yield (lineno, tokens) for non-blank lines, '#' comments stripped."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def load_off(path) -> TriangleMesh:
    """Parse an OFF mesh; polygons are fan-triangulated, zero-area faces dropped."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = list(_significant_lines(fh.read()))
    if not lines:
        raise ParseError(path, 1, "empty OFF file")
    pos = 0
    lineno, tokens = lines[pos]
    if tokens[0].upper() == "OFF":
        tokens = tokens[1:]
        if not tokens:  # counts on the next line
            pos += 1
            if pos >= len(lines):
                raise ParseError(path, lineno, "missing counts line")
            lineno, tokens = lines[pos]
    if len(tokens) != 3:
        raise ParseError(path, lineno, f"expected 3 counts (v f e), got {len(tokens)}")
    try:
        n_vertices, n_faces, _ = (int(t) for t in tokens)
    except ValueError:
        raise ParseError(path, lineno, f"non-numeric counts: {' '.join(tokens)}") from None
    if n_vertices < 0 or n_faces < 0:
        raise ParseError(path, lineno, "negative counts")
    pos += 1
    if len(lines) - pos < n_vertices + n_faces:
        last = lines[-1][0] if lines else 1
        raise ParseError(path, last, "file ends before all vertices and faces are read")

    vertices = np.empty((n_vertices, 3))
    for i in range(n_vertices):
        lineno, tokens = lines[pos + i]
        if len(tokens) != 3:
            raise ParseError(path, lineno, f"expected 3 coordinates, got {len(tokens)}")
        try:
            vertices[i] = [float(t) for t in tokens]
        except ValueError:
            raise ParseError(path, lineno, f"non-numeric coordinate in {' '.join(tokens)}") from None
    pos += n_vertices

    triangles = []
    for i in range(n_faces):
        lineno, tokens = lines[pos + i]
        try:
            values = [int(t) for t in tokens]
        except ValueError:
            raise ParseError(path, lineno, f"non-numeric face token in {' '.join(tokens)}") from None
        if not values or values[0] < 3 or len(values) != values[0] + 1:
            raise ParseError(path, lineno, "malformed face line")
        idx = values[1:]
        for v in idx:
            if not 0 <= v < n_vertices:
                raise ParseError(path, lineno, f"vertex index {v} out of range")
        for a in range(1, len(idx) - 1):  # fan triangulation
            triangles.append((idx[0], idx[a], idx[a + 1]))

    faces = np.array(triangles, dtype=np.int64).reshape(-1, 3)
    if len(faces):
        areas = _face_areas(vertices, faces)
        faces = faces[areas > 0.0]
    return TriangleMesh(vertices=vertices, faces=faces)


def write_off(path, mesh: TriangleMesh) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("OFF\n")
        fh.write(f"{len(mesh.vertices)} {len(mesh.faces)} 0\n")
        for v in mesh.vertices:
            # repr of a Python float is its shortest exact decimal form
            fh.write(f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for f in mesh.faces:
            fh.write(f"3 {int(f[0])} {int(f[1])} {int(f[2])}\n")


def _face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    cross = np.cross(b - a, c - a)
    return 0.5 * np.sqrt((cross * cross).sum(axis=1))


def sample_surface_raw(mesh: TriangleMesh, n_points: int, rng: np.random.Generator):
    """Area-weighted surface samples before normalization: (points, face_idx)."""
    if len(mesh.faces) == 0:
        raise ValueError("mesh has no faces to sample")
    areas = _face_areas(mesh.vertices, mesh.faces)
    total = float(areas.sum())
    if total == 0.0:
        raise ValueError("mesh has zero total surface area")
    face_idx = rng.choice(len(mesh.faces), size=n_points, p=areas / total)
    a = mesh.vertices[mesh.faces[face_idx, 0]]
    b = mesh.vertices[mesh.faces[face_idx, 1]]
    c = mesh.vertices[mesh.faces[face_idx, 2]]
    u = rng.random(n_points)
    v = rng.random(n_points)
    fold = u + v > 1.0
    u[fold], v[fold] = 1.0 - u[fold], 1.0 - v[fold]
    points = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return points, face_idx


def sample_surface(mesh: TriangleMesh, n_points: int, rng: np.random.Generator) -> np.ndarray:
    """``n_points`` area-weighted surface samples, bounding-sphere normalized."""
    points, _ = sample_surface_raw(mesh, n_points, rng)
    return normalize_bounding_sphere(points)


# --- analytic surface samplers for the synthetic generator ----------------


def _sample_sphere(n: int, rng) -> np.ndarray:
    p = rng.standard_normal((n, 3))
    return p / np.sqrt((p * p).sum(axis=1))[:, None]


def _sample_cube(n: int, rng) -> np.ndarray:
    face = rng.integers(6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    points = np.empty((n, 3))
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    rows = np.arange(n)
    points[rows, axis] = sign
    points[rows, (axis + 1) % 3] = uv[:, 0]
    points[rows, (axis + 2) % 3] = uv[:, 1]
    return points


def _sample_cylinder(n: int, rng) -> np.ndarray:
    # radius 1, z in [-1, 1]; lateral area 4*pi vs 2*pi for both caps
    lateral = rng.random(n) < (2.0 / 3.0)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    points = np.empty((n, 3))
    z = rng.uniform(-1.0, 1.0, size=n)
    r_cap = np.sqrt(rng.random(n))
    cap_side = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    points[:, 0] = np.where(lateral, np.cos(theta), r_cap * np.cos(theta))
    points[:, 1] = np.where(lateral, np.sin(theta), r_cap * np.sin(theta))
    points[:, 2] = np.where(lateral, z, cap_side)
    return points


def _sample_cone(n: int, rng) -> np.ndarray:
    # apex (0,0,1), unit-radius base disk at z=-1; lateral vs base by area
    slant_area = np.pi * np.sqrt(5.0)
    p_lateral = slant_area / (slant_area + np.pi)
    lateral = rng.random(n) < p_lateral
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    t = np.sqrt(rng.random(n))  # area grows linearly with distance from apex
    r_base = np.sqrt(rng.random(n))
    radius = np.where(lateral, t, r_base)
    points = np.empty((n, 3))
    points[:, 0] = radius * np.cos(theta)
    points[:, 1] = radius * np.sin(theta)
    points[:, 2] = np.where(lateral, 1.0 - 2.0 * t, -1.0)
    return points


def _sample_torus(n: int, rng) -> np.ndarray:
    # ring radius 1, tube radius 0.4; rejection on the tube angle keeps
    # the sampling uniform over the actual surface area
    big_r, small_r = 1.0, 0.4
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    theta = np.empty(n)
    filled = 0
    while filled < n:
        cand = rng.uniform(0.0, 2.0 * np.pi, size=n - filled)
        accept = rng.random(n - filled) < (big_r + small_r * np.cos(cand)) / (big_r + small_r)
        kept = cand[accept]
        theta[filled : filled + len(kept)] = kept
        filled += len(kept)
    ring = big_r + small_r * np.cos(theta)
    return np.stack([ring * np.cos(phi), ring * np.sin(phi), small_r * np.sin(theta)], axis=1)


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
    "torus": _sample_torus,
}


def synth_dataset(
    classes,
    per_class: int,
    n_points: int,
    jitter: float,
    aligned: bool,
    rng: np.random.Generator,
    split: str = "train",
) -> Dataset:
    """Synthetic labeled dataset of analytic shapes.

    Each instance gets independent per-axis scale factors in
    [1-jitter, 1+jitter] and gaussian coordinate noise (sigma 0.01). With
    ``aligned=False`` each instance additionally receives one fixed random
    rotation, drawn at generation time, so re-reading the dataset always
    yields the same pose.
    """
    classes = list(classes)
    if not classes or per_class < 1:
        raise ValueError("need at least one class and one instance per class")
    for cls in classes:
        if cls not in _SAMPLERS:
            raise ValueError(f"unknown shape class {cls!r}; choose from {SHAPE_CLASSES}")
    instances = []
    for label, cls in enumerate(classes):
        for i in range(per_class):
            points = _SAMPLERS[cls](n_points, rng)
            points = points * rng.uniform(1.0 - jitter, 1.0 + jitter, size=3)
            points = points + rng.normal(0.0, COORD_NOISE_SIGMA, size=points.shape)
            if not aligned:
                points = rotate(points, random_unit_quaternion(rng))
            points = normalize_bounding_sphere(points)
            instances.append(Instance(name=f"{cls}_{i:03d}", points=points, label=label))
    return Dataset(instances=instances, classes=classes, split=split)


# --- point files and dataset directories -----------------------------------


def load_points(path) -> np.ndarray:
    """Read a point cloud: binary ``i3dp`` or text with one x y z per line."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == POINTS_MAGIC:
        return _load_points_binary(path)
    return _load_points_text(path)


def _load_points_text(path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, tokens in _significant_lines(fh.read()):
            if len(tokens) != 3:
                raise ParseError(path, lineno, f"expected 3 coordinates, got {len(tokens)}")
            try:
                rows.append([float(t) for t in tokens])
            except ValueError:
                raise ParseError(path, lineno, f"non-numeric value in {' '.join(tokens)}") from None
    if not rows:
        raise ValueError(f"{path}: empty cloud")
    return np.array(rows, dtype=np.float64)


def _load_points_binary(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    tokens = header.decode("utf-8").split()
    if len(tokens) != 3 or tokens[0] != "i3dp":
        raise ValueError(f"{path}: malformed point-file header")
    version, count = int(tokens[1]), int(tokens[2])
    if version != POINTS_VERSION:
        raise ValueError(f"{path}: unsupported point-file version {version}")
    if count < 1:
        raise ValueError(f"{path}: empty cloud")
    expected = count * 3 * 8
    if len(payload) != expected:
        raise ValueError(f"{path}: truncated point payload ({len(payload)} of {expected} bytes)")
    return np.frombuffer(payload, dtype="<f8").reshape(count, 3).copy()


def write_points(path, cloud, binary: bool = True) -> None:
    cloud = as_cloud(cloud)
    if binary:
        with open(path, "wb") as fh:
            fh.write(f"i3dp {POINTS_VERSION} {cloud.shape[0]}\n".encode("utf-8"))
            data = np.ascontiguousarray(cloud, dtype=np.float64)
            if sys.byteorder != "little":  # pragma: no cover - big-endian host
                data = data.byteswap()
            fh.write(data.tobytes())
    else:
        with open(path, "w", encoding="utf-8") as fh:
            for p in cloud:
                fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")


def save_dataset(directory, dataset: Dataset) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "classes.txt"), "w", encoding="utf-8") as fh:
        for cls in dataset.classes:
            fh.write(cls + "\n")
    with open(os.path.join(directory, "meta.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"split = {dataset.split}\n")
    with open(os.path.join(directory, "index.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"])
        for inst in dataset.instances:
            writer.writerow([inst.name, "" if inst.label is None else inst.label])
    for inst in dataset.instances:
        write_points(os.path.join(directory, inst.name + ".i3dp"), inst.points)


def load_dataset(directory) -> Dataset:
    classes_path = os.path.join(directory, "classes.txt")
    classes = []
    if os.path.exists(classes_path):
        with open(classes_path, "r", encoding="utf-8") as fh:
            classes = [line.strip() for line in fh if line.strip()]
    split = "train"
    meta_path = os.path.join(directory, "meta.txt")
    if os.path.exists(meta_path):
        with open(meta_path, "r", encoding="utf-8") as fh:
            for line in fh:
                if "=" in line:
                    key, value = (part.strip() for part in line.split("=", 1))
                    if key == "split":
                        split = value
    instances = []
    index_path = os.path.join(directory, "index.csv")
    with open(index_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["id", "label"]:
            raise ValueError(f"{index_path}: expected 'id,label' header")
        for row in reader:
            if not row:
                continue
            name = row[0]
            label = int(row[1]) if len(row) > 1 and row[1] != "" else None
            points = load_points(os.path.join(directory, name + ".i3dp"))
            instances.append(Instance(name=name, points=points, label=label))
    if not instances:
        raise ValueError(f"{directory}: dataset has no instances")
    return Dataset(instances=instances, classes=classes, split=split)
