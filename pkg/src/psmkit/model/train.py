"""Multi-task losses and the optimisation step."""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .batch import TrainingBatch, collate
from .features import ComboVocab
from .network import PsmModel

LOSS_NAMES = ("aa_count", "ion_type", "length", "spectrum", "joint", "listwise", "denovo")
DEFAULT_LOSS_WEIGHTS = {name: 1.0 for name in LOSS_NAMES}


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss or gradient is NaN/Inf; parameters are left untouched."""


@contextmanager
def flush_denormals() -> Iterator[None]:
    """Flush subnormal floats to zero inside the block; they slow CPU arithmetic several-fold.

    The setting is process-wide, so it is switched off again on exit.
    """
    # numpy caches machine limits lazily and warns if they are probed after flushing
    for dt in (np.float16, np.float32, np.float64):
        np.finfo(dt).smallest_subnormal
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(False)


def make_optimizer(model: PsmModel, lr: float = 1e-3, momentum: float = 0.9) -> torch.optim.Optimizer:
    return torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum)


def _masked_ce(logits, target):
    valid = target != -100
    if not bool(valid.any()):
        return logits.sum() * 0.0
    return F.cross_entropy(logits[valid], target[valid])


def normalized_intensity(logits, site_mask):
    """Softplus intensities, zeroed outside ``site_mask`` and L2-normalised per row."""
    inten = F.softplus(logits) * site_mask.unsqueeze(-1).to(logits.dtype)
    norm = inten.flatten(1).norm(dim=1).clamp_min(1e-12)
    return inten / norm[:, None, None]


def compute_losses(
    model: PsmModel,
    batch: TrainingBatch,
    vocab: ComboVocab,
    loss_weights: Mapping[str, float] | None = None,
) -> dict[str, torch.Tensor]:
    """Every weighted loss term plus their sum under ``"total"``."""
    w = dict(DEFAULT_LOSS_WEIGHTS)
    if loss_weights:
        unknown = set(loss_weights) - set(LOSS_NAMES)
        if unknown:
            raise KeyError(f"unknown loss terms: {sorted(unknown)}")
        w.update(loss_weights)
    items = batch.items if isinstance(batch, TrainingBatch) else list(batch)
    cb = collate(items, model, vocab)
    c = model.config
    per_peak, pooled = model.encode_spectra(cb.spectra)
    peak_mask = torch.as_tensor(cb.spectra.peak_mask)
    zero = pooled.sum() * 0.0
    out: dict[str, torch.Tensor] = {}

    if w["aa_count"] or w["ion_type"] or w["length"]:
        aa_logits, ion_logits, len_logits = model.spectrum_heads(per_peak, pooled)
        out["aa_count"] = _masked_ce(aa_logits.flatten(0, 1), torch.as_tensor(cb.aa_count).flatten())
        out["ion_type"] = _masked_ce(ion_logits.flatten(0, 1), torch.as_tensor(cb.ion_label).flatten())
        out["length"] = F.cross_entropy(len_logits, torch.as_tensor(cb.length))

    if w["spectrum"] or w["joint"] or w["listwise"]:
        per_token, _ = model.encode_peptides(cb.peptides)
        spec_idx = torch.as_tensor(cb.pair_spectrum)
        if w["spectrum"]:
            rows = torch.as_tensor(cb.pos_rows)
            charge = torch.as_tensor(cb.spectra.charge)
            logits = model.predict_logits(per_token[rows], charge)
            smask = torch.as_tensor(cb.target_mask)
            pred = normalized_intensity(logits, smask)
            tgt = model._t(cb.target_matrix)
            tgt = tgt / tgt.flatten(1).norm(dim=1).clamp_min(1e-12)[:, None, None]
            cos = (pred * tgt).flatten(1).sum(1)
            has = torch.as_tensor(cb.has_target)
            out["spectrum"] = (1.0 - cos[has]).mean() if bool(has.any()) else zero
        if w["joint"] or w["listwise"]:
            scores, fused = model.joint(
                per_token, cb.peptides.mask, per_peak, peak_mask, cb.evidence, spec_idx
            )
            idx = torch.as_tensor(cb.cand_index)
            cmask = torch.as_tensor(cb.cand_mask)
            own = torch.as_tensor(cb.own_mask)
            s = scores[idx].masked_fill(~cmask, -1e9)
            target = torch.zeros(len(items), dtype=torch.long)
            contrast = F.cross_entropy(s / c.temperature, target)
            labels = torch.zeros_like(s)
            labels[:, 0] = 1.0
            bce = F.binary_cross_entropy_with_logits(s, labels, reduction="none")
            bce = (bce * own.to(s.dtype)).sum() / own.sum().clamp_min(1)
            out["joint"] = contrast + bce
            if w["listwise"]:
                states = fused[idx]
                lw = model.listwise_logits(states, own)
                out["listwise"] = F.cross_entropy(lw, target)

    if w["denovo"]:
        dec = cb.decoder
        if dec is None:
            out["denovo"] = zero
        else:
            rows = torch.as_tensor(dec.rows)
            states = model.decoder_states(per_peak[rows], peak_mask[rows], pooled[rows], dec)
            logits = model.combo_logits(states, vocab, dec.evidence)
            logits = logits.masked_fill(~torch.as_tensor(dec.site_mask), -1e9)
            out["denovo"] = _masked_ce(logits.flatten(0, 1), torch.as_tensor(dec.targets).flatten())

    total = zero
    for name in LOSS_NAMES:
        if w[name] and name in out:
            total = total + w[name] * out[name]
    out["total"] = total
    return out


def train_step(
    batch: TrainingBatch,
    model: PsmModel,
    optimizer: torch.optim.Optimizer,
    vocab: ComboVocab,
    loss_weights: Mapping[str, float] | None = None,
) -> dict[str, float]:
    """One optimisation step; returns the scalar loss components.

    Raises ``NonFiniteLossError`` before touching parameters if the loss or
    any gradient is not finite.
    """
    model.train()
    optimizer.zero_grad(set_to_none=True)
    losses = compute_losses(model, batch, vocab, loss_weights)
    for name, value in losses.items():
        if name != "total" and not torch.isfinite(value):
            raise NonFiniteLossError(f"non-finite {name} loss ({float(value.detach())})")
    total = losses["total"]
    if not torch.isfinite(total):
        raise NonFiniteLossError(f"non-finite total loss ({float(total.detach())})")
    total.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            optimizer.zero_grad(set_to_none=True)
            raise NonFiniteLossError(f"non-finite gradient in {name}")
    optimizer.step()
    return {k: float(v.detach()) for k, v in losses.items()}
