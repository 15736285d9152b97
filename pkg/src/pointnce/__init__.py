"""Contrastive point-cloud representation learning, decoder-free.

Embeddings are trained by pulling a shape toward a second view of itself
(a local chunk or a geometric transform) and pushing away every other
instance, then evaluated by clustering, linear probing, retrieval, and a
rotation-invariance diagnostic.
"""

from .data import Dataset, Instance, TriangleMesh, load_dataset, save_dataset, synth_dataset
from .encoder import EncoderParams, embed, embed_many, forward, init_params
from .evaluation import EmbeddingTable, ami, invariance_report, kmeans, linear_probe, retrieve
from .geometry import normalize_bounding_sphere, random_unit_quaternion, rotate
from .objective import MemoryBank, bank_init, critic, info_nce_loss, nce_loss
from .training import RunConfig, load_checkpoint, save_checkpoint, train
from .views import ChunkSpec, ViewStep, apply_view, extract_chunk, parse_view_spec, resample_to

__version__ = "0.1.0"

__all__ = [
    "ChunkSpec",
    "Dataset",
    "EmbeddingTable",
    "EncoderParams",
    "Instance",
    "MemoryBank",
    "RunConfig",
    "TriangleMesh",
    "ViewStep",
    "ami",
    "apply_view",
    "bank_init",
    "critic",
    "embed",
    "embed_many",
    "extract_chunk",
    "forward",
    "info_nce_loss",
    "init_params",
    "invariance_report",
    "kmeans",
    "linear_probe",
    "load_checkpoint",
    "load_dataset",
    "nce_loss",
    "normalize_bounding_sphere",
    "parse_view_spec",
    "random_unit_quaternion",
    "resample_to",
    "retrieve",
    "rotate",
    "save_checkpoint",
    "save_dataset",
    "synth_dataset",
    "train",
]
