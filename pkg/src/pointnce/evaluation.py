"""Downstream evaluation: k-means + AMI, linear probe, retrieval, invariance.

Embeddings are evaluated without ever touching the training pipeline:
k-means clustering scored by adjusted mutual information, a one-vs-rest
hinge-loss linear probe, euclidean nearest-neighbor retrieval, and a
rotation-invariance diagnostic that embeds many random poses per shape.

Embedding tables are stored as a UTF-8 header line ``i3de <version> <M>
<d>`` followed by little-endian float64 rows; ids and labels live in a
sidecar CSV (``id,label``).
"""

from __future__ import annotations

import csv
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from .geometry import random_unit_quaternion, rotate

EMBEDDINGS_MAGIC = "i3de"
EMBEDDINGS_VERSION = 1

_INERTIA_SLACK = 1e-9


@dataclass
class EmbeddingTable:
    ids: list
    vectors: np.ndarray  # (M, d) float64
    labels: np.ndarray | None = None

    def __post_init__(self):
        if len(self.ids) != self.vectors.shape[0]:
            raise ValueError("ids and vectors disagree on row count")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("embedding ids must be unique")

    def row_of(self, query_id: str) -> int:
        try:
            return self.ids.index(query_id)
        except ValueError:
            raise ValueError(f"unknown embedding id {query_id!r}") from None


def save_embeddings(path, table: EmbeddingTable, labels_path=None) -> None:
    m, d = table.vectors.shape
    with open(path, "wb") as fh:
        fh.write(f"{EMBEDDINGS_MAGIC} {EMBEDDINGS_VERSION} {m} {d}\n".encode("utf-8"))
        data = np.ascontiguousarray(table.vectors, dtype=np.float64)
        if sys.byteorder != "little":  # pragma: no cover - big-endian host
            data = data.byteswap()
        fh.write(data.tobytes())
    if labels_path is None:
        labels_path = str(path) + ".labels.csv"
    with open(labels_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"])
        for i, name in enumerate(table.ids):
            label = "" if table.labels is None else table.labels[i]
            writer.writerow([name, label])


def load_embeddings(path, labels_path=None) -> EmbeddingTable:
    with open(path, "rb") as fh:
        header = fh.readline().decode("utf-8").split()
        payload = fh.read()
    if len(header) != 4 or header[0] != EMBEDDINGS_MAGIC:
        raise ValueError(f"{path}: not an embedding table")
    version, m, d = (int(t) for t in header[1:])
    if version != EMBEDDINGS_VERSION:
        raise ValueError(f"{path}: unsupported embedding-table version {version}")
    if len(payload) != m * d * 8:
        raise ValueError(f"{path}: truncated embedding payload")
    vectors = np.frombuffer(payload, dtype="<f8").reshape(m, d).copy()
    ids = [str(i) for i in range(m)]
    labels = None
    if labels_path is None:
        candidate = str(path) + ".labels.csv"
        labels_path = candidate if os.path.exists(candidate) else None
    if labels_path is not None:
        ids, labels = _load_labels_csv(labels_path, m)
    return EmbeddingTable(ids=ids, vectors=vectors, labels=labels)


def _load_labels_csv(path, expected_rows: int):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["id", "label"]:
            raise ValueError(f"{path}: expected 'id,label' header")
        ids, labels, any_label = [], [], False
        for row in reader:
            if not row:
                continue
            ids.append(row[0])
            if len(row) > 1 and row[1] != "":
                labels.append(int(row[1]))
                any_label = True
            else:
                labels.append(-1)
    if len(ids) != expected_rows:
        raise ValueError(f"{path}: {len(ids)} label rows for {expected_rows} embeddings")
    return ids, (np.array(labels) if any_label else None)


# --- k-means ---------------------------------------------------------------


@dataclass
class ClusteringResult:
    assignments: np.ndarray
    inertia: float


_EXACT_D2_BUDGET = 1 << 22  # elements of the (M, k, d) difference tensor


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(M, k) squared euclidean distances.

    Small problems use the exact difference form (coincident points give
    exactly zero); large ones fall back to the expanded form, which is one
    BLAS call but carries ~1e-16 cancellation noise.
    """
    if points.shape[0] * centers.shape[0] * points.shape[1] <= _EXACT_D2_BUDGET:
        diff = points[:, None, :] - centers[None, :, :]
        return (diff * diff).sum(axis=2)
    p2 = (points * points).sum(axis=1)[:, None]
    c2 = (centers * centers).sum(axis=1)[None, :]
    d2 = p2 + c2 - 2.0 * points @ centers.T
    np.maximum(d2, 0.0, out=d2)
    return d2


def _kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(rng.integers(m))]
    closest = _squared_distances(points, centers[:1])[:, 0]
    for i in range(1, k):
        total = float(closest.sum())
        if total == 0.0:
            centers[i] = points[int(rng.integers(m))]
        else:
            centers[i] = points[int(rng.choice(m, p=closest / total))]
        closest = np.minimum(closest, _squared_distances(points, centers[i : i + 1])[:, 0])
    return centers


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int):
    m, k = points.shape[0], centers.shape[0]
    prev_assign = None
    prev_inertia = math.inf
    for _ in range(max_iter):
        d2 = _squared_distances(points, centers)
        assign = d2.argmin(axis=1)
        inertia = float(d2[np.arange(m), assign].sum())
        # Reseed empty clusters from the farthest point; each move can
        # only lower the objective.
        counts = np.bincount(assign, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            far = int(d2[np.arange(m), assign].argmax())
            inertia -= float(d2[far, assign[far]])
            counts[assign[far]] -= 1
            assign[far] = empty
            counts[empty] = 1
            centers[empty] = points[far]
            d2[:, empty] = _squared_distances(points, centers[empty : empty + 1])[:, 0]
        if inertia > prev_inertia + _INERTIA_SLACK * max(1.0, prev_inertia):
            raise RuntimeError("k-means inertia increased across an iteration")
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign, prev_inertia = assign, inertia
        for c in range(k):
            members = points[assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    d2 = _squared_distances(points, centers)
    assign = d2.argmin(axis=1)
    inertia = float(d2[np.arange(m), assign].sum())
    return assign, inertia


def kmeans(
    vectors: np.ndarray,
    k_clusters: int,
    n_init: int = 10,
    max_iter: int = 300,
    rng: np.random.Generator | None = None,
) -> ClusteringResult:
    """Best-of-``n_init`` k-means with k-means++ seeding and Lloyd iterations.

    The objective is checked to be non-increasing across iterations on
    every run; ties between restarts keep the earliest restart.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    m = vectors.shape[0]
    if k_clusters < 1 or k_clusters > m:
        raise ValueError(f"need 1 <= k <= {m}, got k={k_clusters}")
    rng = rng if rng is not None else np.random.default_rng(0)
    best = None
    for child in rng.spawn(n_init):
        centers = _kmeans_plus_plus(vectors, k_clusters, child)
        assign, inertia = _lloyd(vectors, centers, max_iter)
        if best is None or inertia < best[1]:
            best = (assign, inertia)
    return ClusteringResult(assignments=best[0], inertia=best[1])


# --- adjusted mutual information --------------------------------------------


def _contingency(labels_a: np.ndarray, labels_b: np.ndarray):
    _, a_idx = np.unique(labels_a, return_inverse=True)
    _, b_idx = np.unique(labels_b, return_inverse=True)
    r, c = a_idx.max() + 1, b_idx.max() + 1
    table = np.zeros((r, c), dtype=np.int64)
    np.add.at(table, (a_idx, b_idx), 1)
    return table


def mutual_information(table: np.ndarray) -> float:
    """MI (natural log) of the joint distribution given by a contingency table."""
    n = table.sum()
    a = table.sum(axis=1)
    b = table.sum(axis=0)
    mi = 0.0
    for i in range(table.shape[0]):
        for j in range(table.shape[1]):
            nij = table[i, j]
            if nij > 0:
                mi += (nij / n) * math.log(n * nij / (a[i] * b[j]))
    return mi


def _entropy(counts: np.ndarray) -> float:
    n = counts.sum()
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def expected_mutual_information(a_counts: np.ndarray, b_counts: np.ndarray, n: int) -> float:
    """Exact E[MI] under the hypergeometric permutation model."""
    lg = math.lgamma
    total = 0.0
    for ai in a_counts:
        for bj in b_counts:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            for nij in range(lo, hi + 1):
                log_p = (
                    lg(ai + 1)
                    + lg(bj + 1)
                    + lg(n - ai + 1)
                    + lg(n - bj + 1)
                    - lg(n + 1)
                    - lg(nij + 1)
                    - lg(ai - nij + 1)
                    - lg(bj - nij + 1)
                    - lg(n - ai - bj + nij + 1)
                )
                total += (nij / n) * math.log(n * nij / (ai * bj)) * math.exp(log_p)
    return total


def _canonical_partition(labels: np.ndarray) -> tuple:
    first_seen = {}
    out = []
    for v in labels.tolist():
        if v not in first_seen:
            first_seen[v] = len(first_seen)
        out.append(first_seen[v])
    return tuple(out)


def ami(labels_a, labels_b) -> float:
    """Adjusted mutual information with the exact expected-MI correction.

    Normalized by the arithmetic mean of the two entropies. Identical
    partitions score exactly 1.0; when the denominator vanishes without
    identity (e.g. one side is a single cluster) the score is 0.0.
    """
    labels_a = np.asarray(labels_a).ravel()
    labels_b = np.asarray(labels_b).ravel()
    if labels_a.shape != labels_b.shape:
        raise ValueError("labelings must have equal length")
    if labels_a.size < 1:
        raise ValueError("labelings must be nonempty")
    if _canonical_partition(labels_a) == _canonical_partition(labels_b):
        return 1.0
    table = _contingency(labels_a, labels_b)
    n = int(labels_a.size)
    a_counts = table.sum(axis=1)
    b_counts = table.sum(axis=0)
    mi = mutual_information(table)
    emi = expected_mutual_information(a_counts, b_counts, n)
    mean_h = 0.5 * (_entropy(a_counts) + _entropy(b_counts))
    denom = mean_h - emi
    if abs(denom) < 1e-15 * max(1.0, mean_h):
        return 0.0
    return (mi - emi) / denom


# --- linear probe ------------------------------------------------------------


@dataclass
class ProbeConfig:
    reg: float = 1e-3
    iters: int = 500
    lr: float = 0.1
    lr_decay: float = 0.5
    decay_every: int = 100


def _fit_hinge_ovr(x: np.ndarray, y: np.ndarray, classes: np.ndarray, cfg: ProbeConfig):
    m, d = x.shape
    w = np.zeros((len(classes), d))
    b = np.zeros(len(classes))
    for ci, cls in enumerate(classes):
        target = np.where(y == cls, 1.0, -1.0)
        lr = cfg.lr
        for it in range(cfg.iters):
            if it > 0 and it % cfg.decay_every == 0:
                lr *= cfg.lr_decay
            margin = target * (x @ w[ci] + b[ci])
            active = margin < 1.0
            grad_w = 2.0 * cfg.reg * w[ci] - (target[active, None] * x[active]).sum(axis=0) / m
            grad_b = -target[active].sum() / m
            w[ci] -= lr * grad_w
            b[ci] -= lr * grad_b
    return w, b


def linear_probe(
    train: EmbeddingTable, test: EmbeddingTable, cfg: ProbeConfig | None = None
) -> float:
    """Test accuracy of one-vs-rest hinge-loss linear classifiers.

    Trained by full-batch gradient descent on the frozen train embeddings;
    deterministic (zero init, fixed schedule).
    """
    if train.labels is None or test.labels is None:
        raise ValueError("linear probe requires labeled embeddings")
    classes = np.unique(train.labels)
    if len(classes) < 2:
        raise ValueError("linear probe needs at least two classes in the train set")
    cfg = cfg if cfg is not None else ProbeConfig()
    w, b = _fit_hinge_ovr(train.vectors, train.labels, classes, cfg)
    scores = test.vectors @ w.T + b
    predicted = classes[scores.argmax(axis=1)]
    return float((predicted == test.labels).mean())


# --- retrieval ---------------------------------------------------------------


def retrieve(table: EmbeddingTable, query_id: str, n_neighbors: int):
    """The ``n_neighbors`` nearest ids to the query by euclidean distance.

    The query itself is excluded; exact distance ties are broken by
    ascending id. Returns a list of (id, distance) pairs.
    """
    row = table.row_of(query_id)
    if not 1 <= n_neighbors < len(table.ids):
        raise ValueError(f"n_neighbors must lie in [1, {len(table.ids) - 1}]")
    diff = table.vectors - table.vectors[row]
    dists = np.sqrt((diff * diff).sum(axis=1))
    candidates = [(float(dists[i]), table.ids[i]) for i in range(len(table.ids)) if i != row]
    candidates.sort()
    return [(name, dist) for dist, name in candidates[:n_neighbors]]


# --- rotation-invariance diagnostic ------------------------------------------


@dataclass
class InvarianceReport:
    ami: float
    intra_cosine: float
    inter_cosine: float
    shape_index: np.ndarray  # (S*R,) which shape each embedding came from
    projection: np.ndarray  # (S*R, 2) PCA coordinates for plotting


def pca_2d(vectors: np.ndarray) -> np.ndarray:
    """Deterministic 2-component PCA projection (signs fixed by max loading)."""
    centered = vectors - vectors.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    for i in range(comps.shape[0]):
        j = int(np.abs(comps[i]).argmax())
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T


def invariance_report(
    shapes,
    n_rotations: int,
    rng: np.random.Generator,
    embed_fn,
) -> InvarianceReport:
    """Embed ``n_rotations`` random poses of every shape and score invariance.

    Reports k-means AMI (k = number of shapes) against shape identity, the
    mean cosine similarity within a shape's poses and across shapes, and a
    2D PCA projection of all embeddings.
    """
    shapes = list(shapes)
    if len(shapes) < 2 or n_rotations < 2:
        raise ValueError("need at least two shapes and two rotations")
    embeddings = []
    shape_index = []
    for s, shape in enumerate(shapes):
        for _ in range(n_rotations):
            posed = rotate(shape, random_unit_quaternion(rng))
            embeddings.append(np.asarray(embed_fn(posed), dtype=np.float64))
            shape_index.append(s)
    vectors = np.stack(embeddings)
    shape_index = np.array(shape_index)

    result = kmeans(vectors, len(shapes), rng=rng.spawn(1)[0])
    score = ami(shape_index, result.assignments)

    sims = vectors @ vectors.T
    same = shape_index[:, None] == shape_index[None, :]
    off_diag = ~np.eye(len(vectors), dtype=bool)
    intra = float(sims[same & off_diag].mean())
    inter = float(sims[~same].mean())
    return InvarianceReport(
        ami=score,
        intra_cosine=intra,
        inter_cosine=inter,
        shape_index=shape_index,
        projection=pca_2d(vectors),
    )
