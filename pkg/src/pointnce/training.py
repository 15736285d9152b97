"""Training loop: Adam over (encoder, critic), view regeneration, checkpoints.

Every run is a deterministic function of (dataset, config): randomness is
split into named streams (parameter init, epoch shuffling, view
generation, negative sampling) whose states are checkpointed, so a resumed
run reproduces an uninterrupted one bit for bit.

The run configuration is a flat ``key = value`` text file with ``#``
comments; CLI flags override file values and the effective config is
echoed into every checkpoint. Checkpoints are little-endian binary with
magic ``I3DC``, a version word, and a section table of named payloads.
"""

from __future__ import annotations

import io
import json
import struct
import sys
from dataclasses import dataclass, fields, replace

import numpy as np

from .data import Dataset
from .encoder import (
    EMBED_DIM,
    EncoderParams,
    backward,
    forward,
    init_params,
    normalized_embeddings,
)
from .geometry import random_unit_quaternion, rotate
from .objective import (
    MemoryBank,
    bank_init,
    info_nce_loss,
    nce_loss,
    raw_critic_scores,
    sample_negative_indices,
)
from .views import apply_view, format_view_spec, parse_view_spec, resample_to

CHECKPOINT_MAGIC = b"I3DC"
CHECKPOINT_VERSION = 1

LOSSES = ("nce", "infonce")


@dataclass
class RunConfig:
    """Every hyperparameter of a training run."""

    dataset: str = ""
    epochs: int = 100
    batch_size: int = 32
    points_per_cloud: int = 2048
    lr: float = 1e-4
    tau: float = 0.07
    negatives: int = 512
    loss: str = "nce"
    view: str = "unaligned"
    layer_tap: int = 7
    bank_momentum: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    early_stop_patience: int = 50
    rotate_anchor: bool = False

    def validate(self) -> "RunConfig":
        if self.epochs < 1 or self.batch_size < 1 or self.points_per_cloud < 1:
            raise ValueError("epochs, batch_size and points_per_cloud must be positive")
        if self.lr <= 0 or self.tau <= 0 or self.adam_eps <= 0:
            raise ValueError("lr, tau and adam_eps must be positive")
        if self.negatives < 1:
            raise ValueError("need at least one negative sample")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.layer_tap not in (6, 7):
            raise ValueError("layer_tap must be 6 or 7")
        if not 0.0 <= self.bank_momentum < 1.0:
            raise ValueError("bank_momentum must lie in [0, 1)")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be positive")
        parse_view_spec(self.view)
        return self


def default_rotate_anchor(view_text: str) -> bool:
    """Anchors get a fresh random pose whenever the view recipe rotates."""
    return any(step.kind == "rotate_so3" for step in parse_view_spec(view_text))


_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def parse_run_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines (# comments) into a RunConfig."""
    config = base if base is not None else RunConfig()
    by_name = {f.name: f for f in fields(RunConfig)}
    seen_rotate_anchor = False
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in by_name:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        ftype = by_name[key].type
        try:
            if ftype == "bool":
                parsed = _BOOL_WORDS[value.lower()]
            elif ftype == "int":
                parsed = int(value)
            elif ftype == "float":
                parsed = float(value)
            else:
                parsed = value
        except (ValueError, KeyError):
            raise ValueError(f"config line {lineno}: bad value {value!r} for {key}") from None
        if key == "rotate_anchor":
            seen_rotate_anchor = True
        config = replace(config, **{key: parsed})
    if not seen_rotate_anchor and base is None:
        config = replace(config, rotate_anchor=default_rotate_anchor(config.view))
    return config.validate()


def format_run_config(config: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(config, f.name)
        if f.type == "bool":
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


@dataclass
class AdamState:
    """First/second-moment accumulators and the shared step counter."""

    m: EncoderParams
    v: EncoderParams
    step: int = 0

    @classmethod
    def zeros(cls, params: EncoderParams) -> "AdamState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), step=0)


def adam_step(
    params: EncoderParams,
    grads: EncoderParams,
    state: AdamState,
    lr: float,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
):
    """One bias-corrected Adam update, in place, over every tensor."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for name, g in grads.named_tensors():
        if not np.all(np.isfinite(g)):
            raise RuntimeError("diverged: non-finite gradient")
        m = state.m.tensor(name)
        v = state.v.tensor(name)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + eps)
        params.tensor(name)[...] -= lr * update
    return params, state


@dataclass
class RngStreams:
    """Purpose-split random streams so e.g. changing k leaves views untouched."""

    init: np.random.Generator
    shuffle: np.random.Generator
    view: np.random.Generator
    negative: np.random.Generator

    NAMES = ("init", "shuffle", "view", "negative")

    @classmethod
    def from_seed(cls, seed: int) -> "RngStreams":
        children = np.random.SeedSequence(seed).spawn(4)
        return cls(*(np.random.Generator(np.random.PCG64(c)) for c in children))

    def state(self) -> dict:
        return {name: getattr(self, name).bit_generator.state for name in self.NAMES}

    def set_state(self, state: dict) -> None:
        for name in self.NAMES:
            getattr(self, name).bit_generator.state = state[name]


@dataclass
class Checkpoint:
    config: RunConfig
    params: EncoderParams
    adam: AdamState
    bank: MemoryBank | None
    epoch: int
    rng_state: dict
    best_loss: float = float("inf")
    stale_epochs: int = 0


def _array_blob(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    head = struct.pack("<I", arr.ndim) + b"".join(struct.pack("<Q", d) for d in arr.shape)
    if sys.byteorder == "little":
        payload = arr.tobytes()
    else:  # pragma: no cover - big-endian host
        payload = arr.byteswap().tobytes()
    return head + payload


def _read_array(blob: bytes, name: str) -> np.ndarray:
    if len(blob) < 4:
        raise ValueError(f"truncated section {name!r}")
    (ndim,) = struct.unpack_from("<I", blob, 0)
    head = 4 + 8 * ndim
    if len(blob) < head:
        raise ValueError(f"truncated section {name!r}")
    shape = struct.unpack_from("<" + "Q" * ndim, blob, 4)
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    if len(blob) != head + 8 * count:
        raise ValueError(f"truncated section {name!r}")
    arr = np.frombuffer(blob, dtype="<f8", offset=head, count=count)
    return arr.reshape(shape).copy()


def _checkpoint_sections(ckpt: Checkpoint) -> list:
    sections = [("config", format_run_config(ckpt.config).encode("utf-8"))]
    sections.append(("epoch", struct.pack("<Q", ckpt.epoch)))
    for name, arr in ckpt.params.named_tensors():
        sections.append((f"param:{name}", _array_blob(arr)))
    sections.append(("adam:step", struct.pack("<Q", ckpt.adam.step)))
    for name, arr in ckpt.adam.m.named_tensors():
        sections.append((f"adam:m:{name}", _array_blob(arr)))
    for name, arr in ckpt.adam.v.named_tensors():
        sections.append((f"adam:v:{name}", _array_blob(arr)))
    bank = ckpt.bank
    if bank is not None:
        sections.append(("bank:rows", _array_blob(bank.rows)))
        z_set = bank.z is not None
        sections.append(
            ("bank:meta", struct.pack("<ddB", bank.momentum, bank.z if z_set else 0.0, z_set))
        )
    sections.append(("rng", json.dumps(ckpt.rng_state, sort_keys=True).encode("utf-8")))
    sections.append(("early", struct.pack("<dQ", ckpt.best_loss, ckpt.stale_epochs)))
    return sections


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    sections = _checkpoint_sections(ckpt)
    table_size = sum(4 + len(name.encode()) + 16 for name, _ in sections)
    offset = 4 + 4 + 4 + table_size
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", CHECKPOINT_VERSION))
    out.write(struct.pack("<I", len(sections)))
    for name, blob in sections:
        encoded = name.encode()
        out.write(struct.pack("<I", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<QQ", offset, len(blob)))
        offset += len(blob)
    for _, blob in sections:
        out.write(blob)
    with open(path, "wb") as fh:
        fh.write(out.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint: bad magic")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", data, 8)
    pos = 12
    sections = {}
    for _ in range(count):
        if pos + 4 > len(data):
            raise ValueError("truncated section table")
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + name_len + 16 > len(data):
            raise ValueError("truncated section table")
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        offset, length = struct.unpack_from("<QQ", data, pos)
        pos += 16
        if offset + length > len(data):
            raise ValueError(f"truncated section {name!r}")
        sections[name] = data[offset : offset + length]

    def need(name: str) -> bytes:
        if name not in sections:
            raise ValueError(f"missing checkpoint section {name!r}")
        return sections[name]

    config = parse_run_config(need("config").decode("utf-8"))
    (epoch,) = struct.unpack("<Q", need("epoch"))
    params = init_params(np.random.default_rng(0))  # shapes only; overwritten below
    for name, _ in params.named_tensors():
        params.set_tensor(name, _read_array(need(f"param:{name}"), f"param:{name}"))
    adam = AdamState.zeros(params)
    (adam.step,) = struct.unpack("<Q", need("adam:step"))
    for name, _ in params.named_tensors():
        adam.m.set_tensor(name, _read_array(need(f"adam:m:{name}"), f"adam:m:{name}"))
        adam.v.set_tensor(name, _read_array(need(f"adam:v:{name}"), f"adam:v:{name}"))
    bank = None
    if "bank:rows" in sections:
        rows = _read_array(sections["bank:rows"], "bank:rows")
        blob = need("bank:meta")
        if len(blob) != 17:
            raise ValueError("truncated section 'bank:meta'")
        momentum, z_value, z_set = struct.unpack("<ddB", blob)
        bank = MemoryBank(rows=rows, momentum=momentum, z=z_value if z_set else None)
    rng_state = json.loads(need("rng").decode("utf-8"))
    best_loss, stale = struct.unpack("<dQ", need("early"))
    return Checkpoint(
        config=config,
        params=params,
        adam=adam,
        bank=bank,
        epoch=int(epoch),
        rng_state=rng_state,
        best_loss=float(best_loss),
        stale_epochs=int(stale),
    )


def _dataset_points(dataset: Dataset, points_per_cloud: int) -> np.ndarray:
    clouds = [inst.points for inst in dataset.instances]
    for inst in dataset.instances:
        if inst.points.shape[0] != points_per_cloud:
            raise ValueError(
                f"instance {inst.name!r} has {inst.points.shape[0]} points, "
                f"config expects {points_per_cloud}"
            )
    return np.stack(clouds)


def train_epoch(
    clouds: np.ndarray,
    params: EncoderParams,
    bank: MemoryBank | None,
    adam: AdamState,
    config: RunConfig,
    view_spec,
    streams: RngStreams,
) -> float:
    """One pass over the dataset; returns the mean batch loss.

    Views are regenerated with fresh randomness, so every epoch shows the
    encoder new poses/chunks of the same instances. Partial trailing
    batches are dropped to keep the loss denominator constant.
    """
    m_total, n_pts = clouds.shape[0], clouds.shape[1]
    batch = config.batch_size
    if config.loss == "infonce" and batch < 2:
        raise ValueError("in-batch loss needs at least two instances per batch")
    n_batches = m_total // batch
    if n_batches == 0:
        raise ValueError(f"dataset of {m_total} instances is smaller than one batch ({batch})")
    order = streams.shuffle.permutation(m_total)
    betas = (config.beta1, config.beta2)
    losses = []
    for b in range(n_batches):
        ids = order[b * batch : (b + 1) * batch]
        anchors = np.empty((batch, n_pts, 3))
        view_clouds = np.empty((batch, n_pts, 3))
        for j, i in enumerate(ids):
            src = clouds[i]
            if config.rotate_anchor:
                anchors[j] = rotate(src, random_unit_quaternion(streams.view))
            else:
                anchors[j] = src
            v = apply_view(view_spec, src, streams.view)
            if v.shape[0] != n_pts:
                v = resample_to(v, n_pts, streams.view)
            view_clouds[j] = v

        acts_a = forward(params, anchors)
        z_a = normalized_embeddings(acts_a.out)
        if config.loss == "nce":
            z_b = normalized_embeddings(forward(params, view_clouds).out)
            negs = sample_negative_indices(bank.size, config.negatives, ids, streams.negative)
            if bank.z is None:
                bank.calibrate_z(
                    raw_critic_scores(z_a, bank.rows[negs], params.critic_w, config.tau)
                )
            loss, lg = nce_loss(z_a, ids, negs, bank, params.critic_w, config.tau)
            grads = backward(params, acts_a, lg.z_a)
        else:
            acts_b = forward(params, view_clouds)
            z_b = normalized_embeddings(acts_b.out)
            loss, lg = info_nce_loss(z_a, z_b, params.critic_w, config.tau)
            grads = backward(params, acts_a, lg.z_a)
            backward(params, acts_b, lg.z_b, into=grads)
        grads.critic_w += lg.critic_w
        adam_step(params, grads, adam, config.lr, betas, config.adam_eps)
        if bank is not None:
            for i, emb in zip(ids, z_b):
                bank.update(int(i), emb)
        losses.append(loss)
    return float(np.mean(losses))


@dataclass
class TrainResult:
    params: EncoderParams
    bank: MemoryBank | None
    adam: AdamState
    epoch_losses: list
    stopped_early: bool


def train(
    dataset: Dataset,
    config: RunConfig,
    out_path=None,
    resume: Checkpoint | None = None,
    log=None,
) -> TrainResult:
    """Full training run with per-epoch checkpointing and early stopping."""
    config.validate()
    streams = RngStreams.from_seed(config.seed)
    if resume is not None:
        config = resume.config
        params, adam, bank = resume.params, resume.adam, resume.bank
        streams.set_state(resume.rng_state)
        start_epoch = resume.epoch
        best_loss, stale = resume.best_loss, resume.stale_epochs
    else:
        params = init_params(streams.init)
        bank = (
            bank_init(len(dataset.instances), EMBED_DIM, streams.init, config.bank_momentum)
            if config.loss == "nce"
            else None
        )
        adam = AdamState.zeros(params)
        start_epoch = 0
        best_loss, stale = float("inf"), 0

    clouds = _dataset_points(dataset, config.points_per_cloud)
    view_spec = parse_view_spec(config.view)
    losses = []
    stopped_early = False
    for epoch in range(start_epoch, config.epochs):
        mean_loss = train_epoch(clouds, params, bank, adam, config, view_spec, streams)
        losses.append(mean_loss)
        if log is not None:
            log(epoch, mean_loss)
        if mean_loss < best_loss:
            best_loss, stale = mean_loss, 0
        else:
            stale += 1
        if out_path is not None:
            save_checkpoint(
                out_path,
                Checkpoint(
                    config=config,
                    params=params,
                    adam=adam,
                    bank=bank,
                    epoch=epoch + 1,
                    rng_state=streams.state(),
                    best_loss=best_loss,
                    stale_epochs=stale,
                ),
            )
        if stale >= config.early_stop_patience:
            stopped_early = True
            break
    return TrainResult(
        params=params, bank=bank, adam=adam, epoch_losses=losses, stopped_early=stopped_early
    )
