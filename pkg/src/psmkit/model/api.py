"""Inference helpers operating on single spectra and peptides."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from ..chem import Peptide
from .batch import encode_peptides, encode_spectra, experimental_matrix, pair_evidence
from .network import PsmModel
from .train import normalized_intensity


@dataclass(eq=False)
class SpectrumRepr:
    spectrum: object
    per_peak: torch.Tensor
    pooled: torch.Tensor
    peak_mask: torch.Tensor


@dataclass(eq=False)
class PeptideRepr:
    peptide: Peptide
    per_token: torch.Tensor
    pooled: torch.Tensor


@dataclass(frozen=True, eq=False)
class SpectrumHeads:
    aa_count: np.ndarray  # (P, l_max + 1)
    ion_type: np.ndarray  # (P, 7)
    length: np.ndarray  # (l_max,), index k is length k + 1

    @property
    def predicted_length(self) -> int:
        return int(np.argmax(self.length)) + 1


@torch.no_grad()
def embed_spectrum(spectrum, model: PsmModel) -> SpectrumRepr:
    if len(spectrum.mz) == 0:
        raise ValueError(f"spectrum {spectrum.title!r} has no peaks")
    c = model.config
    sb = encode_spectra([spectrum], c.d_model, c.max_charge)
    per_peak, pooled = model.encode_spectra(sb)
    return SpectrumRepr(spectrum, per_peak, pooled, torch.as_tensor(sb.peak_mask))


def _check_length(peptides: Sequence[Peptide], model: PsmModel) -> None:
    for p in peptides:
        if len(p) > model.config.l_max:
            raise ValueError(f"peptide {p.residues} longer than l_max={model.config.l_max}")


@torch.no_grad()
def embed_peptide(peptide: Peptide, model: PsmModel) -> PeptideRepr:
    _check_length([peptide], model)
    pb = encode_peptides([peptide], model.config.d_model, model.mod_index)
    per_token, pooled = model.encode_peptides(pb)
    return PeptideRepr(peptide, per_token, pooled)


@torch.no_grad()
def spectrum_heads(rs: SpectrumRepr, model: PsmModel) -> SpectrumHeads:
    aa, ion, length = model.spectrum_heads(rs.per_peak, rs.pooled)
    n = int(rs.peak_mask.sum()) if len(rs.spectrum.mz) else 0
    return SpectrumHeads(
        torch.softmax(aa[0, :n].double(), -1).numpy(),
        torch.softmax(ion[0, :n].double(), -1).numpy(),
        torch.softmax(length[0].double(), -1).numpy(),
    )


@torch.no_grad()
def predict_spectrum(rp: PeptideRepr, charge: int, model: PsmModel) -> np.ndarray:
    """Predicted intensity matrix ``(L-1, 6)`` with unit L2 norm."""
    L = len(rp.peptide)
    if L < 2:
        return np.zeros((0, 6))
    z = torch.as_tensor([min(max(int(charge), 1), model.config.max_charge)])
    logits = model.predict_logits(rp.per_token, z)
    mask = torch.zeros(logits.shape[:2], dtype=torch.bool)
    mask[:, 1:L] = True
    return normalized_intensity(logits, mask)[0, 1:L].double().numpy()


def spectrum_cosine(spectrum, peptide: Peptide, model: PsmModel, rp: PeptideRepr | None = None) -> float:
    """Cosine between predicted and observed fragment intensities."""
    rp = rp if rp is not None else embed_peptide(peptide, model)
    pred = predict_spectrum(rp, spectrum.charge, model)
    obs = experimental_matrix(spectrum, peptide)
    denom = np.linalg.norm(pred) * np.linalg.norm(obs)
    return float((pred * obs).sum() / denom) if denom > 0 else 0.0


@torch.no_grad()
def joint_scores(
    spectrum, peptides: Sequence[Peptide], model: PsmModel, rs: SpectrumRepr | None = None
) -> tuple[np.ndarray, torch.Tensor]:
    """Scores and fused states for many candidates against one spectrum."""
    if not peptides:
        return np.zeros(0), torch.zeros(0, model.config.d_model)
    _check_length(peptides, model)
    rs = rs if rs is not None else embed_spectrum(spectrum, model)
    pb = encode_peptides(list(peptides), model.config.d_model, model.mod_index)
    per_token, _ = model.encode_peptides(pb)
    n = len(peptides)
    ev = pair_evidence([spectrum] * n, peptides, pb.tokens.shape[1], model.config.fragment_tol_ppm)
    scores, fused = model.joint(
        per_token, pb.mask, rs.per_peak, rs.peak_mask, ev, torch.zeros(n, dtype=torch.long)
    )
    return scores.double().numpy(), fused


def joint_score(rs: SpectrumRepr, rp: PeptideRepr, model: PsmModel) -> float:
    return float(joint_scores(rs.spectrum, [rp.peptide], model, rs)[0][0])


@torch.no_grad()
def listwise_rank(states: torch.Tensor, model: PsmModel) -> np.ndarray:
    """Probability distribution over candidate fused states ``(K, d)``."""
    states = torch.as_tensor(states, dtype=model.dtype)
    if states.shape[0] == 0:
        return np.zeros(0)
    mask = torch.ones(1, states.shape[0], dtype=torch.bool)
    logits = model.listwise_logits(states.unsqueeze(0), mask)[0]
    return torch.softmax(logits.double(), -1).numpy()
