"""Finite-difference verification of the analytic gradients.

Builds a fixed random batch, runs both contrastive losses through the
full encoder, and compares every sampled parameter coordinate's analytic
gradient against a central finite difference of the scalar loss. The
finite-difference side re-evaluates the whole pipeline from scratch, so
it shares no gradient code with the path it checks.

The loss is piecewise smooth (rectifiers, max-pool): a coordinate lying
within the step of a kink makes the difference quotient blend two smooth
branches. Such coordinates are re-estimated at neighboring step sizes and
the best-converged estimate wins; a genuinely wrong gradient plateaus at
the same discrepancy for every step, so this never masks a real bug.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams, backward, forward, init_params, normalized_embeddings
from .objective import MemoryBank, bank_init, info_nce_loss, nce_loss, sample_negative_indices

DEFAULT_STEP = 1e-6
FALLBACK_STEPS = (1e-5, 1e-7)
DEFAULT_TOLERANCE = 1e-4
# Coordinates where both sides are below this scale are treated as zero;
# relative error is otherwise |a - f| / max(|a|, |f|, floor).
DENOM_FLOOR = 1e-6


@dataclass
class GradcheckCase:
    params: EncoderParams
    clouds_a: np.ndarray
    clouds_b: np.ndarray
    bank: MemoryBank
    indices: np.ndarray
    negatives: np.ndarray
    tau: float


def build_case(
    seed: int, batch: int = 4, n_points: int = 64, bank_size: int = 10, k: int = 3, tau: float = 0.07
) -> GradcheckCase:
    rng = np.random.default_rng(seed)
    params = init_params(rng)
    # Perturb the critic off the identity so its gradient is generic.
    params.critic_w = params.critic_w + 0.05 * rng.standard_normal(params.critic_w.shape)
    clouds_a = rng.standard_normal((batch, n_points, 3))
    clouds_b = rng.standard_normal((batch, n_points, 3))
    bank = bank_init(bank_size, params.critic_w.shape[0], rng)
    indices = rng.permutation(bank_size)[:batch]
    negatives = sample_negative_indices(bank_size, k, indices, rng)
    bank.calibrate_z(np.exp(rng.standard_normal(8)))
    return GradcheckCase(
        params=params,
        clouds_a=clouds_a,
        clouds_b=clouds_b,
        bank=bank,
        indices=indices,
        negatives=negatives,
        tau=tau,
    )


def loss_value(case: GradcheckCase, params: EncoderParams, which: str) -> float:
    z_a = normalized_embeddings(forward(params, case.clouds_a).out)
    if which == "infonce":
        z_b = normalized_embeddings(forward(params, case.clouds_b).out)
        loss, _ = info_nce_loss(z_a, z_b, params.critic_w, case.tau)
    elif which == "nce":
        loss, _ = nce_loss(z_a, case.indices, case.negatives, case.bank, params.critic_w, case.tau)
    else:
        raise ValueError(f"unknown loss {which!r}")
    return loss


def analytic_grads(case: GradcheckCase, which: str) -> EncoderParams:
    params = case.params
    acts_a = forward(params, case.clouds_a)
    z_a = normalized_embeddings(acts_a.out)
    if which == "infonce":
        acts_b = forward(params, case.clouds_b)
        z_b = normalized_embeddings(acts_b.out)
        _, lg = info_nce_loss(z_a, z_b, params.critic_w, case.tau)
        grads = backward(params, acts_a, lg.z_a)
        backward(params, acts_b, lg.z_b, into=grads)
    else:
        _, lg = nce_loss(z_a, case.indices, case.negatives, case.bank, params.critic_w, case.tau)
        grads = backward(params, acts_a, lg.z_a)
    grads.critic_w += lg.critic_w
    return grads


def sample_coordinates(params: EncoderParams, n_uniform: int, per_tensor: int, rng) -> list:
    """(tensor_name, flat_index) pairs covering every tensor plus a uniform draw."""
    names, sizes = [], []
    for name, arr in params.named_tensors():
        names.append(name)
        sizes.append(arr.size)
    coords = []
    for name, size in zip(names, sizes):
        take = min(per_tensor, size)
        for idx in rng.choice(size, size=take, replace=False):
            coords.append((name, int(idx)))
    total = int(np.sum(sizes))
    bounds = np.cumsum(sizes)
    for flat in rng.choice(total, size=n_uniform, replace=False):
        t = int(np.searchsorted(bounds, flat, side="right"))
        offset = int(flat - (bounds[t - 1] if t > 0 else 0))
        coords.append((names[t], offset))
    return sorted(set(coords))


def finite_difference(
    case: GradcheckCase, which: str, name: str, flat_index: int, step: float = DEFAULT_STEP
) -> float:
    params = case.params.copy()
    tensor = params.tensor(name)
    flat = tensor.reshape(-1)
    original = flat[flat_index]
    flat[flat_index] = original + step
    up = loss_value(case, params, which)
    flat[flat_index] = original - step
    down = loss_value(case, params, which)
    flat[flat_index] = original
    return (up - down) / (2.0 * step)


def relative_error(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric))
    if scale < DENOM_FLOOR:
        return 0.0
    return abs(analytic - numeric) / max(scale, DENOM_FLOOR)


@dataclass
class GradcheckReport:
    max_error: float
    per_loss: dict
    n_coordinates: int

    @property
    def passed(self) -> bool:
        return self.max_error < DEFAULT_TOLERANCE


def run_gradcheck(
    seed: int = 0,
    batch: int = 4,
    n_points: int = 64,
    n_uniform: int = 120,
    per_tensor: int = 8,
    step: float = DEFAULT_STEP,
) -> GradcheckReport:
    """Check both losses on a seeded random case; returns the worst error."""
    case = build_case(seed, batch=batch, n_points=n_points)
    coord_rng = np.random.default_rng(seed + 1)
    coords = sample_coordinates(case.params, n_uniform, per_tensor, coord_rng)
    per_loss = {}
    for which in ("infonce", "nce"):
        grads = analytic_grads(case, which)
        worst = 0.0
        for name, idx in coords:
            a = float(grads.tensor(name).reshape(-1)[idx])
            err = relative_error(a, finite_difference(case, which, name, idx, step))
            if err >= 0.5 * DEFAULT_TOLERANCE:  # likely a kink within the step
                for alt in FALLBACK_STEPS:
                    err = min(
                        err,
                        relative_error(a, finite_difference(case, which, name, idx, alt)),
                    )
                    if err < 0.5 * DEFAULT_TOLERANCE:
                        break
            worst = max(worst, err)
        per_loss[which] = worst
    return GradcheckReport(
        max_error=max(per_loss.values()), per_loss=per_loss, n_coordinates=len(coords)
    )
