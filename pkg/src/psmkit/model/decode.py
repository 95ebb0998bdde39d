"""Length-conditioned beam search with precursor-mass pruning."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from ..chem import Peptide
from ..constants import H2O
from ..index import PRECURSOR_TOL_PPM
from .batch import decoder_inputs, encode_spectra
from .features import ComboVocab, decoder_evidence
from .network import PsmModel


@dataclass(frozen=True)
class DecodedPeptide:
    peptide: Peptide
    log_prob: float
    length: int


@dataclass
class _Beam:
    log_prob: float
    ids: tuple[int, ...]
    mass: float
    n_mods: int


def combo_vocab(model: PsmModel, table=None) -> ComboVocab:
    """Decoding vocabulary for ``table`` (default: the model's own table)."""
    table = model.config.mod_table if table is None else table
    missing = [n for n in table.token_names if n not in model.mod_index]
    if missing:
        raise ValueError(f"modification token {missing[0]!r} not in model vocabulary")
    return ComboVocab(table, model.mod_index)


@torch.no_grad()
def pla_decode_lengths(
    model: PsmModel,
    spectrum,
    lengths: Sequence[int],
    beam: int = 5,
    vocab: ComboVocab | None = None,
    precursor_neutral_mass: float | None = None,
    tol_ppm: float = PRECURSOR_TOL_PPM,
    max_mods: int = 2,
    encoded=None,
) -> dict[int, list[DecodedPeptide]]:
    """Beam search for several target lengths in one pass.

    Every beam is scored by the model's log-probability over site-legal
    tokens; extensions that cannot reach the precursor mass within
    ``tol_ppm`` are pruned and the final token must close the mass exactly.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    model.eval()
    vocab = vocab if vocab is not None else combo_vocab(model)
    c = model.config
    lengths = sorted({int(L) for L in lengths if 1 <= int(L) <= c.l_max})
    mass = spectrum.precursor_neutral_mass if precursor_neutral_mass is None else precursor_neutral_mass
    target = mass - H2O
    tol = abs(mass) * tol_ppm * 1e-6
    if encoded is None:
        sb = encode_spectra([spectrum], c.d_model, c.max_charge)
        encoded = model.encode_spectra(sb) + (torch.as_tensor(sb.peak_mask),)
    per_peak, pooled, peak_mask = encoded

    beams = {L: [_Beam(0.0, (), 0.0, 0)] for L in lengths}
    for step in range(max(lengths, default=0)):
        active = [(L, b) for L in lengths if step < L for b in beams[L]]
        if not active:
            break
        n = len(active)
        db = decoder_inputs(
            [spectrum] * n, [np.array(b.ids, dtype=np.int64) for _, b in active],
            [L for L, _ in active], vocab, c.d_model, evidence="none",
        )
        prefix = np.array([b.mass for _, b in active])
        ev = decoder_evidence(spectrum, prefix, vocab, c.fragment_tol_ppm)[:, None]
        states = model.decoder_states(
            per_peak.expand(n, -1, -1), peak_mask.expand(n, -1), pooled.expand(n, -1), db
        )[:, -1:]
        logits = model.combo_logits(states, vocab, ev)[:, 0].double()

        scores = np.full((n, len(vocab)), -np.inf)
        for r, (L, b) in enumerate(active):
            legal = vocab.site_mask(step, L)
            lp = torch.log_softmax(logits[r].masked_fill(~torch.as_tensor(legal), -np.inf), -1).numpy()
            new_mass = b.mass + vocab.masses
            budget = max_mods - b.n_mods - vocab.has_mod.astype(np.int64)
            ok = legal & (budget >= 0) & vocab.can_complete(target - new_mass, L - step - 1, tol, budget)
            scores[r, ok] = b.log_prob + lp[ok]

        new_beams = {}
        for L in lengths:
            rows = [r for r, (LL, _) in enumerate(active) if LL == L]
            if not rows:
                new_beams[L] = beams[L]
                continue
            flat = scores[rows].ravel()
            order = np.argsort(-flat, kind="stable")
            kept = []
            for k in order[:beam]:
                if not np.isfinite(flat[k]):
                    break
                r, cid = rows[k // len(vocab)], int(k % len(vocab))
                b = active[r][1]
                kept.append(_Beam(
                    float(flat[k]), b.ids + (cid,), b.mass + float(vocab.masses[cid]),
                    b.n_mods + int(vocab.has_mod[cid]),
                ))
            new_beams[L] = kept
        beams = new_beams

    out = {}
    for L in lengths:
        done = [b for b in beams[L] if len(b.ids) == L]
        done.sort(key=lambda b: -b.log_prob)
        out[L] = [DecodedPeptide(vocab.decode(b.ids), b.log_prob, L) for b in done]
    return out


def pla_decode(
    model: PsmModel,
    spectrum,
    target_length: int,
    beam: int = 5,
    vocab: ComboVocab | None = None,
    precursor_neutral_mass: float | None = None,
    tol_ppm: float = PRECURSOR_TOL_PPM,
    max_mods: int = 2,
) -> list[DecodedPeptide]:
    """Decode exactly ``target_length`` residues; empty if no sequence fits."""
    if not 1 <= int(target_length) <= model.config.l_max:
        raise ValueError(f"target length {target_length} outside [1, {model.config.l_max}]")
    return pla_decode_lengths(
        model, spectrum, [target_length], beam, vocab, precursor_neutral_mass, tol_ppm, max_mods
    ).get(int(target_length), [])
