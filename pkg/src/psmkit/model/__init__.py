"""Transformer scorer, spectrum heads and length-conditioned de novo decoder."""

from .api import (
    PeptideRepr,
    SpectrumHeads,
    SpectrumRepr,
    embed_peptide,
    embed_spectrum,
    joint_score,
    joint_scores,
    listwise_rank,
    predict_spectrum,
    spectrum_cosine,
    spectrum_heads,
)
from .batch import TrainingBatch, TrainingItem
from .decode import DecodedPeptide, combo_vocab, pla_decode, pla_decode_lengths
from .features import ComboVocab
from .io import ModelFormatError, load_params, save_params
from .network import ModelConfig, PsmModel
from .train import (
    DEFAULT_LOSS_WEIGHTS,
    LOSS_NAMES,
    NonFiniteLossError,
    compute_losses,
    flush_denormals,
    make_optimizer,
    train_step,
)

__all__ = [
    "ComboVocab", "DEFAULT_LOSS_WEIGHTS", "DecodedPeptide", "LOSS_NAMES", "ModelConfig",
    "ModelFormatError", "NonFiniteLossError", "PeptideRepr", "PsmModel", "SpectrumHeads",
    "SpectrumRepr", "TrainingBatch", "TrainingItem", "combo_vocab", "compute_losses",
    "embed_peptide", "embed_spectrum", "flush_denormals", "joint_score", "joint_scores", "listwise_rank",
    "load_params", "make_optimizer", "pla_decode", "pla_decode_lengths", "predict_spectrum",
    "save_params", "spectrum_cosine", "spectrum_heads", "train_step",
]
