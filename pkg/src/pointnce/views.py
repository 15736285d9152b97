"""Second-view generation: local chunks and geometric transformations.

A view recipe is an ordered tuple of primitive steps applied with fresh
randomness on every call. Chunks select a local subset of a cloud (the m
nearest points to a random center under a metric, or an axis-aligned cut)
and renormalize it; transforms rotate, translate, or scale the whole
cloud. Recipes have a compact text form for config files, e.g.
``rotate_so3 + translate(-0.2,0.2)`` or ``chunk(cosine,512)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    as_cloud,
    axis_angle_quaternion,
    distances_to,
    normalize_bounding_sphere,
    random_unit_quaternion,
    rotate,
)

CHUNK_METHODS = ("euclidean", "cosine", "chebyshev", "axis_chop")
STEP_KINDS = ("rotate_so3", "rotate_z", "translate", "scale_uniform", "scale_per_axis", "chunk")

_AXIS_CHOP_RETRIES = 16

# Named recipes: cosine chunks cluster best on aligned data, axis-chopped
# chunks transfer best, and SO(3) rotation plus translation is the recipe
# for unaligned (randomly posed) data.
PRESETS = {
    "aligned-clustering": "chunk(cosine,512)",
    "aligned-transfer": "chunk(axis_chop)",
    "unaligned": "rotate_so3 + translate(-0.2,0.2)",
}


@dataclass(frozen=True)
class ChunkSpec:
    """Recipe for one chunk extraction.

    ``size`` is the number of points retained before renormalization
    (metric methods only); ``min_points`` is the smallest surviving chunk
    an axis chop accepts before redrawing.
    """

    method: str
    size: int = 512
    min_points: int = 8

    def __post_init__(self):
        if self.method not in CHUNK_METHODS:
            raise ValueError(f"unknown chunk method {self.method!r}")
        if self.size < 1:
            raise ValueError("chunk size must be positive")
        if self.min_points < 8:
            raise ValueError("min_points must be at least 8")


@dataclass(frozen=True)
class ViewStep:
    """One primitive of a view recipe."""

    kind: str
    lo: float = 0.0
    hi: float = 0.0
    chunk: ChunkSpec | None = None

    def __post_init__(self):
        if self.kind not in STEP_KINDS:
            raise ValueError(f"unknown view primitive {self.kind!r}")
        if self.kind in ("translate", "scale_uniform", "scale_per_axis") and self.lo > self.hi:
            raise ValueError(f"{self.kind}: range must satisfy lo <= hi")
        if self.kind == "chunk" and self.chunk is None:
            raise ValueError("chunk step requires a ChunkSpec")


ViewSpec = tuple  # tuple[ViewStep, ...]


def validate_view_spec(spec) -> tuple:
    spec = tuple(spec)
    if not spec:
        raise ValueError("view spec must contain at least one step")
    for step in spec:
        if not isinstance(step, ViewStep):
            raise ValueError(f"not a view step: {step!r}")
    return spec


def parse_view_spec(text: str) -> tuple:
    """Parse a view recipe from its text form (or a preset name)."""
    text = text.strip()
    if text in PRESETS:
        text = PRESETS[text]
    steps = []
    for part in text.split("+"):
        part = part.strip()
        if not part:
            raise ValueError("empty step in view spec")
        name, args = part, []
        if "(" in part:
            if not part.endswith(")"):
                raise ValueError(f"malformed view step {part!r}")
            name, arg_text = part[: part.index("(")], part[part.index("(") + 1 : -1]
            name = name.strip()
            args = [a.strip() for a in arg_text.split(",")] if arg_text.strip() else []
        if name in ("rotate_so3", "rotate_z"):
            if args:
                raise ValueError(f"{name} takes no arguments")
            steps.append(ViewStep(name))
        elif name in ("translate", "scale_uniform", "scale_per_axis"):
            if len(args) != 2:
                raise ValueError(f"{name} takes (lo,hi)")
            steps.append(ViewStep(name, lo=float(args[0]), hi=float(args[1])))
        elif name == "chunk":
            if not args:
                raise ValueError("chunk takes (method[,size[,min_points]])")
            method = args[0]
            size = int(args[1]) if len(args) > 1 else 512
            min_points = int(args[2]) if len(args) > 2 else 8
            if len(args) > 3:
                raise ValueError("chunk takes at most 3 arguments")
            steps.append(ViewStep("chunk", chunk=ChunkSpec(method, size, min_points)))
        else:
            raise ValueError(f"unknown view primitive {name!r}")
    return validate_view_spec(steps)


def format_view_spec(spec) -> str:
    """Canonical text form of a view recipe (inverse of ``parse_view_spec``)."""
    parts = []
    for step in validate_view_spec(spec):
        if step.kind in ("rotate_so3", "rotate_z"):
            parts.append(step.kind)
        elif step.kind == "chunk":
            c = step.chunk
            parts.append(f"chunk({c.method},{c.size},{c.min_points})")
        else:
            parts.append(f"{step.kind}({step.lo:g},{step.hi:g})")
    return " + ".join(parts)


def extract_chunk_metric(cloud, metric: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """The ``size`` points nearest a random center point, renormalized.

    Ties on distance are broken in favor of the lower original point
    index. For the cosine metric the center is redrawn until nonzero.
    """
    cloud = as_cloud(cloud)
    n = cloud.shape[0]
    if size > n:
        raise ValueError(f"chunk size {size} exceeds cloud size {n}")
    if size < 1:
        raise ValueError("chunk size must be positive")
    center_idx = int(rng.integers(n))
    if metric == "cosine":
        while float(np.linalg.norm(cloud[center_idx])) == 0.0:
            center_idx = int(rng.integers(n))
    dists = distances_to(metric, cloud, cloud[center_idx])
    keep = np.sort(np.argsort(dists, kind="stable")[:size])
    return normalize_bounding_sphere(cloud[keep])


def extract_chunk_axis(cloud, min_points: int, rng: np.random.Generator) -> np.ndarray:
    """Points on a random side of a random axis-aligned cut, renormalized.

    The cut value is drawn uniformly between the 25th and 75th percentile
    of the chosen axis. If fewer than ``min_points`` points survive, the
    (axis, cut, side) triple is redrawn up to 16 times before falling back
    to the full cloud.
    """
    cloud = as_cloud(cloud)
    n = cloud.shape[0]
    if n < min_points:
        raise ValueError(f"cloud has {n} points, need at least {min_points}")
    for _ in range(_AXIS_CHOP_RETRIES):
        axis = int(rng.integers(3))
        lo, hi = np.percentile(cloud[:, axis], [25.0, 75.0])
        cut = float(rng.uniform(lo, hi))
        side = int(rng.integers(2))
        mask = cloud[:, axis] <= cut if side == 0 else cloud[:, axis] > cut
        if int(mask.sum()) >= min_points:
            return normalize_bounding_sphere(cloud[mask])
    return normalize_bounding_sphere(cloud)


def extract_chunk(cloud, spec: ChunkSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.method == "axis_chop":
        return extract_chunk_axis(cloud, spec.min_points, rng)
    return extract_chunk_metric(cloud, spec.method, spec.size, rng)


def apply_view(spec, cloud, rng: np.random.Generator) -> np.ndarray:
    """Apply every step of a view recipe in order with fresh randomness."""
    cloud = as_cloud(cloud)
    for step in validate_view_spec(spec):
        if step.kind == "rotate_so3":
            cloud = rotate(cloud, random_unit_quaternion(rng))
        elif step.kind == "rotate_z":
            angle = float(rng.uniform(0.0, 2.0 * np.pi))
            cloud = rotate(cloud, axis_angle_quaternion((0.0, 0.0, 1.0), angle))
        elif step.kind == "translate":
            cloud = cloud + rng.uniform(step.lo, step.hi, size=3)
        elif step.kind == "scale_uniform":
            cloud = cloud * float(rng.uniform(step.lo, step.hi))
        elif step.kind == "scale_per_axis":
            cloud = cloud * rng.uniform(step.lo, step.hi, size=3)
        else:
            cloud = extract_chunk(cloud, step.chunk, rng)
    return cloud


def resample_to(cloud, n_target: int, rng: np.random.Generator) -> np.ndarray:
    """Resample a cloud to exactly ``n_target`` points, order randomized.

    Downsampling is uniform without replacement; upsampling keeps every
    original point and pads with replacement.
    """
    cloud = as_cloud(cloud)
    n = cloud.shape[0]
    if n_target < 1:
        raise ValueError("n_target must be positive")
    if n >= n_target:
        idx = rng.choice(n, size=n_target, replace=False)
    else:
        pad = rng.integers(0, n, size=n_target - n)
        idx = rng.permutation(np.concatenate([np.arange(n), pad]))
    return cloud[idx]
