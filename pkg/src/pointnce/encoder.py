"""Permutation-invariant point-cloud encoder with exact gradients.

Seven layers: five shared per-point affine+rectifier stages
(3 -> 64 -> 64 -> 64 -> 128 -> 1024), a coordinatewise max over points
that pools per-point features into one 1024-vector, then two global
stages (1024 -> 512 with a rectifier, 512 -> 128 purely linear). The
embedding is a layer tap (6 or 7) scaled to unit euclidean norm.

Everything runs in double precision. ``forward`` retains all activations
so ``backward`` can produce exact reverse-mode gradients, routing the
max-pool subgradient to the argmax point (lowest index on ties) and
differentiating through the final unit normalization. The bilinear critic
matrix used by the contrastive losses is stored here too so one optimizer
step updates every trainable tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import as_cloud

PER_POINT_WIDTHS = (3, 64, 64, 64, 128, 1024)
GLOBAL_WIDTHS = (1024, 512, 128)
EMBED_DIM = GLOBAL_WIDTHS[-1]
N_LAYERS = 7
LAYER_TAPS = (6, 7)


def _layer_dims() -> list[tuple[int, int]]:
    dims = [(PER_POINT_WIDTHS[i], PER_POINT_WIDTHS[i + 1]) for i in range(5)]
    dims += [(GLOBAL_WIDTHS[0], GLOBAL_WIDTHS[1]), (GLOBAL_WIDTHS[1], GLOBAL_WIDTHS[2])]
    return dims


@dataclass
class EncoderParams:
    """All trainable tensors: 7 affine layers plus the critic matrix.

    Gradient accumulators and Adam moments reuse this container via
    ``zeros_like``; ``named_tensors`` fixes the canonical tensor order
    used by the optimizer, checkpoints, and gradient checks.
    """

    weights: list = field(default_factory=list)  # w1..w7
    biases: list = field(default_factory=list)  # b1..b7
    critic_w: np.ndarray = None

    def named_tensors(self):
        for i in range(N_LAYERS):
            yield f"w{i + 1}", self.weights[i]
        for i in range(N_LAYERS):
            yield f"b{i + 1}", self.biases[i]
        yield "critic_w", self.critic_w

    def tensor(self, name: str) -> np.ndarray:
        if name == "critic_w":
            return self.critic_w
        idx = int(name[1:]) - 1
        return self.weights[idx] if name[0] == "w" else self.biases[idx]

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        if name == "critic_w":
            self.critic_w = value
        elif name[0] == "w":
            self.weights[int(name[1:]) - 1] = value
        else:
            self.biases[int(name[1:]) - 1] = value

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            critic_w=self.critic_w.copy(),
        )

    def zeros_like(self) -> "EncoderParams":
        return EncoderParams(
            weights=[np.zeros_like(w) for w in self.weights],
            biases=[np.zeros_like(b) for b in self.biases],
            critic_w=np.zeros_like(self.critic_w),
        )

    def add_(self, other: "EncoderParams") -> "EncoderParams":
        for i in range(N_LAYERS):
            self.weights[i] += other.weights[i]
            self.biases[i] += other.biases[i]
        self.critic_w += other.critic_w
        return self


def init_params(rng: np.random.Generator) -> EncoderParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, identity critic."""
    weights, biases = [], []
    for fan_in, fan_out in _layer_dims():
        scale = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-scale, scale, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return EncoderParams(weights=weights, biases=biases, critic_w=np.eye(EMBED_DIM))


@dataclass
class Activations:
    """Every intermediate of a batched forward pass, kept for backward.

    Per-point activations of layers 1-4 are stored flattened as
    (B*n, width) so each layer is one large matrix product; layer 5 is
    kept transposed as (1024, B*n), which makes the per-channel max over
    points a contiguous scan. ``pool_index`` records, per channel, which
    point won the max. ``out`` is the raw (pre-normalization) layer-7
    output.
    """

    points: np.ndarray  # (B, n, 3)
    hidden: list  # h1..h4, each (B*n, w) post-rectifier
    h5t: np.ndarray  # (1024, B*n) post-rectifier, transposed
    pooled: np.ndarray  # (B, 1024)
    pool_index: np.ndarray  # (B, 1024) int
    h6: np.ndarray  # (B, 512) post-rectifier
    out: np.ndarray  # (B, 128) raw affine

    @property
    def batch_size(self) -> int:
        return self.points.shape[0]

    def layer(self, i: int, sample: int = 0) -> np.ndarray:
        """Activation of layer ``i`` for one sample (per-point for 1-5)."""
        b, n = self.points.shape[:2]
        if 1 <= i <= 4:
            return self.hidden[i - 1].reshape(b, n, -1)[sample]
        if i == 5:
            return np.ascontiguousarray(self.h5t.reshape(-1, b, n)[:, sample, :].T)
        if i == 6:
            return self.h6[sample]
        if i == 7:
            return self.out[sample]
        raise ValueError(f"layer index out of range: {i}")


def _as_batch(clouds) -> np.ndarray:
    arr = np.asarray(clouds, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[1] < 1:
        raise ValueError(f"expected (B, n, 3) clouds, got shape {arr.shape}")
    return arr


def _affine_relu(h: np.ndarray, w: np.ndarray, bias: np.ndarray) -> np.ndarray:
    out = np.empty((h.shape[0], w.shape[1]))
    np.matmul(h, w, out=out)
    out += bias
    np.maximum(out, 0.0, out=out)
    return out


def forward(params: EncoderParams, clouds) -> Activations:
    """Run the encoder over a batch (or a single (n, 3) cloud)."""
    x = _as_batch(clouds)
    if params.weights[0].shape[0] != x.shape[2]:
        raise ValueError("shape mismatch between cloud and encoder input width")
    b, n, _ = x.shape
    hidden = []
    h = x.reshape(b * n, 3)
    for i in range(4):
        h = _affine_relu(h, params.weights[i], params.biases[i])
        hidden.append(h)
    # Layer 5 is built transposed: the channel-major layout makes the
    # max over points of every (sample, channel) pair a contiguous scan.
    h5t = np.empty((params.weights[4].shape[1], b * n))
    np.matmul(params.weights[4].T, h.T, out=h5t)
    h5t += params.biases[4][:, None]
    np.maximum(h5t, 0.0, out=h5t)
    per_sample = h5t.reshape(-1, b, n)
    pool_index = np.ascontiguousarray(per_sample.argmax(axis=2).T)  # (B, 1024)
    pooled = np.ascontiguousarray(
        np.take_along_axis(per_sample, pool_index.T[:, :, None], axis=2)[:, :, 0].T
    )
    h6 = _affine_relu(pooled, params.weights[5], params.biases[5])
    out = h6 @ params.weights[6] + params.biases[6]
    return Activations(
        points=x,
        hidden=hidden,
        h5t=h5t,
        pooled=pooled,
        pool_index=pool_index,
        h6=h6,
        out=out,
    )


def normalized_embeddings(raw: np.ndarray) -> np.ndarray:
    """Scale each row to unit norm; a zero row is a degenerate embedding."""
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    norms = np.sqrt((raw * raw).sum(axis=1))
    if np.any(norms == 0.0):
        raise ValueError("degenerate embedding: zero activation vector")
    return raw / norms[:, None]


def embed(params: EncoderParams, cloud, layer_tap: int = 7) -> np.ndarray:
    """Unit-norm embedding of one cloud from the chosen layer tap."""
    if layer_tap not in LAYER_TAPS:
        raise ValueError(f"layer_tap must be one of {LAYER_TAPS}, got {layer_tap}")
    acts = forward(params, as_cloud(cloud))
    raw = acts.h6 if layer_tap == 6 else acts.out
    return normalized_embeddings(raw)[0]


def embed_many(
    params: EncoderParams, clouds, layer_tap: int = 7, batch_size: int = 64
) -> np.ndarray:
    """Unit-norm embeddings for a stack of same-size clouds, in batches."""
    if layer_tap not in LAYER_TAPS:
        raise ValueError(f"layer_tap must be one of {LAYER_TAPS}, got {layer_tap}")
    stack = _as_batch(np.stack([as_cloud(c) for c in clouds]) if isinstance(clouds, (list, tuple)) else clouds)
    rows = []
    for start in range(0, stack.shape[0], batch_size):
        acts = forward(params, stack[start : start + batch_size])
        raw = acts.h6 if layer_tap == 6 else acts.out
        rows.append(normalized_embeddings(raw))
    return np.concatenate(rows, axis=0)


def backward(
    params: EncoderParams,
    acts: Activations,
    d_embeddings: np.ndarray,
    into: EncoderParams | None = None,
) -> EncoderParams:
    """Exact gradients of a scalar loss given its gradient on the embeddings.

    ``d_embeddings`` (B, 128) is the upstream gradient with respect to the
    unit-normalized layer-7 embeddings of ``acts``. Gradients accumulate
    into ``into`` when given (critic_w receives nothing here; the losses
    produce its gradient directly). Returns the accumulator.
    """
    if acts is None:
        raise ValueError("missing activations for backward pass")
    d_emb = np.atleast_2d(np.asarray(d_embeddings, dtype=np.float64))
    if d_emb.shape != acts.out.shape:
        raise ValueError(
            f"upstream gradient shape {d_emb.shape} does not match activations {acts.out.shape}"
        )
    grads = into if into is not None else params.zeros_like()

    norms = np.sqrt((acts.out * acts.out).sum(axis=1))
    if np.any(norms == 0.0):
        raise ValueError("degenerate embedding: zero activation vector")
    emb = acts.out / norms[:, None]
    # d/dv of v/|v|: project out the radial component, then rescale.
    d_out = (d_emb - emb * (emb * d_emb).sum(axis=1)[:, None]) / norms[:, None]

    grads.weights[6] += acts.h6.T @ d_out
    grads.biases[6] += d_out.sum(axis=0)
    d_h6 = d_out @ params.weights[6].T
    d_a6 = d_h6 * (acts.h6 > 0.0)

    grads.weights[5] += acts.pooled.T @ d_a6
    grads.biases[5] += d_a6.sum(axis=0)
    d_pooled = d_a6 @ params.weights[5].T

    b, n, _ = acts.points.shape
    channels = d_pooled.shape[1]
    # The max-pool routes each channel's gradient to its argmax point
    # only; masking the (B, 1024) pooled values covers the rectifier, so
    # the full (B*n, 1024) mask is never materialized. Rows repeat when
    # one point wins several channels, but the (channel, row) slots are
    # distinct, so fancy assignment cannot collide.
    d_a5t = np.zeros_like(acts.h5t)  # (1024, B*n)
    rows = acts.pool_index + (np.arange(b) * n)[:, None]
    d_a5t[np.arange(channels), rows] = d_pooled * (acts.pooled > 0.0)
    d_a5 = d_a5t.T

    grads.weights[4] += acts.hidden[3].T @ d_a5
    grads.biases[4] += d_a5.sum(axis=0)
    d_h = np.empty((b * n, params.weights[4].shape[0]))
    np.matmul(d_a5, params.weights[4].T, out=d_h)

    flat_points = acts.points.reshape(b * n, 3)
    for i in range(3, -1, -1):
        d_h *= acts.hidden[i] > 0.0
        below = acts.hidden[i - 1] if i > 0 else flat_points
        grads.weights[i] += below.T @ d_h
        grads.biases[i] += d_h.sum(axis=0)
        if i > 0:
            nxt = np.empty((b * n, params.weights[i].shape[0]))
            np.matmul(d_h, params.weights[i].T, out=nxt)
            d_h = nxt
    return grads
