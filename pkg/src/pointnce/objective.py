"""Contrastive objectives: bilinear critic, softmax and NCE losses, memory bank.

The critic scores a pair of unit embeddings as ``exp(z_a' W z_b / tau)``.
Two losses consume it:

* ``info_nce_loss`` - the in-batch softmax form: each anchor classifies
  its own second view against the other views in the batch.
* ``nce_loss`` - the binary noise-contrastive form against a memory bank:
  per anchor, one positive (its own stored row) and k uniformly sampled
  bank rows as noise, with noise density Pn = 1/M and posterior
  s / (s + k*Pn), where s is the critic score divided by a partition
  constant Z frozen after the first batch.

Both are computed in log space so temperature 0.07 on unit embeddings
never overflows, and both return exact analytic gradients (the bank rows
receive none; they track view embeddings by momentum instead).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LossGrads:
    """Gradients of a loss with respect to its direct inputs."""

    z_a: np.ndarray
    critic_w: np.ndarray
    z_b: np.ndarray | None = None


@dataclass
class MemoryBank:
    """Per-instance store of unit-norm view embeddings.

    ``z`` is the NCE partition constant, unset until calibrated from the
    first batch and frozen afterwards. One writer at a time: updates are
    serialized by the trainer.
    """

    rows: np.ndarray  # (M, d), unit rows
    momentum: float = 0.5
    z: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("bank momentum must lie in [0, 1)")

    @property
    def size(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def calibrate_z(self, raw_scores) -> None:
        """Freeze Z as bank size times the mean raw critic score."""
        if self.z is not None:
            raise ValueError("partition constant already calibrated")
        raw = np.asarray(raw_scores, dtype=np.float64)
        if raw.size < 1:
            raise ValueError("need at least one raw score to calibrate")
        self.z = float(self.size * raw.mean())

    def update(self, index: int, embedding: np.ndarray) -> None:
        """Blend a fresh view embedding into one row and renormalize."""
        if not 0 <= index < self.size:
            raise ValueError(f"bank index {index} out of range [0, {self.size})")
        mixed = self.momentum * self.rows[index] + (1.0 - self.momentum) * np.asarray(embedding)
        norm = float(np.linalg.norm(mixed))
        if norm == 0.0:
            raise ValueError("bank update produced a zero row")
        self.rows[index] = mixed / norm


def bank_init(size: int, dim: int, rng: np.random.Generator, momentum: float = 0.5) -> MemoryBank:
    """Bank with rows drawn uniformly on the unit sphere; Z unset."""
    if size < 1 or dim < 1:
        raise ValueError("bank size and dim must be positive")
    rows = rng.standard_normal((size, dim))
    rows /= np.sqrt((rows * rows).sum(axis=1))[:, None]
    return MemoryBank(rows=rows, momentum=momentum)


def sample_negative_indices(
    size: int, k: int, exclude: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """(N, k) uniform bank indices, redrawing collisions with each row's own index."""
    if k < 1:
        raise ValueError("need at least one negative sample")
    exclude = np.asarray(exclude)
    if size < 2:
        raise ValueError("cannot sample negatives from a single-row bank")
    idx = rng.integers(0, size, size=(exclude.shape[0], k))
    clash = idx == exclude[:, None]
    while np.any(clash):
        idx[clash] = rng.integers(0, size, size=int(clash.sum()))
        clash = idx == exclude[:, None]
    return idx


def critic(z_a, z_b, critic_w, tau: float) -> float:
    """exp(z_a' W z_b / tau) for a single pair of embeddings."""
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    return float(np.exp(z_a @ critic_w @ z_b / tau))


def raw_critic_scores(z_a: np.ndarray, rows: np.ndarray, critic_w, tau: float) -> np.ndarray:
    """Critic scores of each anchor against its own (k,) rows: (N, k)."""
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    wa = z_a @ critic_w  # (N, d)
    return np.exp(np.einsum("nd,nkd->nk", wa, rows) / tau)


def info_nce_loss(z_a, z_b, critic_w, tau: float):
    """In-batch softmax contrastive loss and its analytic gradients.

    Mean over anchors i of -log softmax_i over scores s_ij = z_a_i' W
    z_b_j / tau; the batch itself supplies the negatives. Stabilized with
    log-sum-exp. Returns ``(loss, LossGrads)``.
    """
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    z_a = np.atleast_2d(np.asarray(z_a, dtype=np.float64))
    z_b = np.atleast_2d(np.asarray(z_b, dtype=np.float64))
    n = z_a.shape[0]
    if n < 2:
        raise ValueError("in-batch loss needs at least two instances")
    if z_b.shape != z_a.shape:
        raise ValueError("mismatched embedding batches")

    scores = (z_a @ critic_w @ z_b.T) / tau  # (N, N)
    row_max = scores.max(axis=1, keepdims=True)
    shifted = np.exp(scores - row_max)
    denom = shifted.sum(axis=1, keepdims=True)
    log_softmax_diag = scores.diagonal() - (row_max[:, 0] + np.log(denom[:, 0]))
    loss = float(-log_softmax_diag.mean())

    d_scores = shifted / denom
    d_scores[np.arange(n), np.arange(n)] -= 1.0
    d_scores /= n
    d_z_a = (d_scores @ z_b) @ critic_w.T / tau
    d_z_b = (d_scores.T @ z_a) @ critic_w / tau
    d_w = z_a.T @ d_scores @ z_b / tau
    return loss, LossGrads(z_a=d_z_a, critic_w=d_w, z_b=d_z_b)


def nce_loss(z_a, indices, negatives, bank: MemoryBank, critic_w, tau: float):
    """Binary NCE loss against the memory bank, with analytic gradients.

    Per anchor i: positive score from its own bank row, k negative scores
    from the sampled rows, all divided by the frozen partition constant Z;
    posterior p(real | s) = s / (s + k*Pn) with Pn = 1/M. Loss is the mean
    of -log p(positive) - sum_j log(1 - p(negative_j)). Gradients flow to
    the anchors and the critic only. Returns ``(loss, LossGrads)``.
    """
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    if bank.z is None:
        raise ValueError("memory bank not calibrated: partition constant unset")
    z_a = np.atleast_2d(np.asarray(z_a, dtype=np.float64))
    indices = np.asarray(indices)
    negatives = np.asarray(negatives)
    n = z_a.shape[0]
    if negatives.ndim != 2 or negatives.shape[0] != n:
        raise ValueError("negatives must be an (N, k) index array")
    k = negatives.shape[1]
    if k < 1:
        raise ValueError("need at least one negative sample")
    m = bank.size
    for arr in (indices, negatives):
        if np.any(arr < 0) or np.any(arr >= m):
            raise ValueError("bank index out of range")

    log_kpn = np.log(k / m)
    log_z = np.log(bank.z)
    wa = z_a @ critic_w  # (N, d)

    log_s_pos = (wa * bank.rows[indices]).sum(axis=1) / tau - log_z  # (N,)
    log_denom_pos = np.logaddexp(log_s_pos, log_kpn)
    pos_terms = log_denom_pos - log_s_pos  # -log p

    neg_rows = bank.rows[negatives]  # (N, k, d)
    log_s_neg = np.einsum("nd,nkd->nk", wa, neg_rows) / tau - log_z
    log_denom_neg = np.logaddexp(log_s_neg, log_kpn)
    neg_terms = log_denom_neg - log_kpn  # -log(1 - p)

    loss = float((pos_terms + neg_terms.sum(axis=1)).mean())

    # d loss / d raw-exponent: -k*Pn/(s+k*Pn) for positives, s/(s+k*Pn)
    # for negatives, each divided by N for the batch mean.
    coeff_pos = -np.exp(log_kpn - log_denom_pos) / n  # (N,)
    coeff_neg = np.exp(log_s_neg - log_denom_neg) / n  # (N, k)

    d_wa = coeff_pos[:, None] * bank.rows[indices] + np.einsum(
        "nk,nkd->nd", coeff_neg, neg_rows
    )
    d_z_a = d_wa @ critic_w.T / tau
    d_w = z_a.T @ d_wa / tau
    return loss, LossGrads(z_a=d_z_a, critic_w=d_w)
