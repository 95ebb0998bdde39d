"""Padding and collation of spectra, peptides and training items into arrays."""

from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Sequence

import numpy as np

from ..chem import Peptide, position_masses
from ..constants import H2O, PROTON
from ..index import FRAGMENT_TOL_PPM, annotate_peaks
from .features import (
    BOS,
    N_EVIDENCE,
    ComboVocab,
    decoder_evidence,
    peptide_evidence,
    peptide_tokens,
    sinusoid,
)


def position_encoding(n: int, d: int) -> np.ndarray:
    return sinusoid(np.arange(n), d, 1.0, 1e4)


def encode_spectra(spectra: Sequence, d_model: int, max_charge: int) -> SimpleNamespace:
    """Padded peak encodings for a list of processed spectra."""
    B = len(spectra)
    P = max(1, max(len(s.mz) for s in spectra))
    mz_enc = np.zeros((B, P, d_model))
    intensity = np.zeros((B, P))
    mask = np.zeros((B, P), dtype=bool)
    for i, s in enumerate(spectra):
        n = len(s.mz)
        mz_enc[i, :n] = sinusoid(s.mz, d_model)
        intensity[i, :n] = s.intensity
        mask[i, :n] = True
        if n == 0:
            mask[i, 0] = True  # keep attention defined for empty spectra
    mass = np.array([s.precursor_neutral_mass for s in spectra])
    return SimpleNamespace(
        spectra=list(spectra),
        mz_enc=mz_enc,
        intensity=intensity,
        peak_mask=mask,
        precursor_enc=sinusoid(mass, d_model),
        precursor_scaled=mass / 1000.0,
        charge=np.clip([s.charge for s in spectra], 1, max_charge).astype(np.int64),
    )


def encode_peptides(peptides: Sequence[Peptide], d_model: int, mod_index: dict[str, int]) -> SimpleNamespace:
    """Padded ``[BOS] residues [EOS]`` token arrays with mass encodings."""
    N = len(peptides)
    T = max(len(p) for p in peptides) + 2
    tokens = np.zeros((N, T), dtype=np.int64)
    mods = np.zeros((N, T), dtype=np.int64)
    mask = np.zeros((N, T), dtype=bool)
    b_enc = np.zeros((N, T, d_model))
    y_enc = np.zeros((N, T, d_model))
    for i, p in enumerate(peptides):
        L = len(p)
        tok, mod = peptide_tokens(p, mod_index)
        tokens[i, : L + 2] = tok
        mods[i, : L + 2] = mod
        mask[i, : L + 2] = True
        prefix = np.concatenate([[0.0], np.cumsum(position_masses(p))])
        total = prefix[-1] + H2O
        prefix = np.concatenate([prefix, [total]])
        b_enc[i, : L + 2] = sinusoid(prefix + PROTON, d_model)
        y_enc[i, : L + 2] = sinusoid(total - prefix + PROTON, d_model)
    pos = np.broadcast_to(position_encoding(T, d_model), (N, T, d_model))
    return SimpleNamespace(
        peptides=list(peptides), tokens=tokens, mod_tokens=mods, mask=mask,
        pos_enc=pos, b_enc=b_enc, y_enc=y_enc,
        lengths=np.array([len(p) for p in peptides], dtype=np.int64),
    )


def pair_evidence(spectra: Sequence, peptides: Sequence[Peptide], T: int, tol_ppm: float) -> np.ndarray:
    """Evidence rows ``(N, T, 12)`` for aligned spectrum/peptide pairs."""
    out = np.zeros((len(peptides), T, N_EVIDENCE))
    for i, (s, p) in enumerate(zip(spectra, peptides)):
        ev = peptide_evidence(s, p, tol_ppm)
        out[i, : len(ev)] = ev
    return out


def decoder_inputs(
    spectra: Sequence,
    histories: Sequence[np.ndarray],
    target_lengths: Sequence[int],
    vocab: ComboVocab,
    d_model: int,
    tol_ppm: float = FRAGMENT_TOL_PPM,
    evidence: str = "all",
) -> SimpleNamespace:
    """Decoder step inputs; step ``s`` of row ``i`` sees ``histories[i][:s]``.

    ``evidence`` is ``"all"`` (every step), ``"last"`` (final step only) or
    ``"none"`` when the caller supplies it.
    """
    B = len(histories)
    S = max(len(h) for h in histories) + 1
    prev_tok = np.zeros((B, S), dtype=np.int64)
    prev_mod = np.zeros((B, S), dtype=np.int64)
    remaining = np.zeros((B, S), dtype=np.int64)
    mask = np.zeros((B, S), dtype=bool)
    prefix_enc = np.zeros((B, S, d_model))
    remain_enc = np.zeros((B, S, d_model))
    remain_scaled = np.zeros((B, S))
    n_ev = {"all": S, "last": 1, "none": 0}[evidence]
    ev = np.zeros((B, n_ev, len(vocab), N_EVIDENCE))
    for i, (s, h, L) in enumerate(zip(spectra, histories, target_lengths)):
        n = len(h) + 1
        h = np.asarray(h, dtype=np.int64)
        prev_tok[i, 0] = BOS
        prev_tok[i, 1:n] = vocab.residue_tokens[h]
        prev_mod[i, 1:n] = vocab.mod_tokens[h]
        remaining[i, :n] = np.maximum(L - np.arange(n), 0)
        mask[i, :n] = True
        prefix = np.concatenate([[0.0], np.cumsum(vocab.masses[h])])
        rem = s.precursor_neutral_mass - H2O - prefix
        prefix_enc[i, :n] = sinusoid(prefix + PROTON, d_model)
        remain_enc[i, :n] = sinusoid(rem, d_model)
        remain_scaled[i, :n] = rem / 1000.0
        if evidence == "all":
            ev[i, :n] = decoder_evidence(s, prefix, vocab, tol_ppm)
        elif evidence == "last":
            ev[i, 0] = decoder_evidence(s, prefix[-1:], vocab, tol_ppm)[0]
    return SimpleNamespace(
        prev_tokens=prev_tok, prev_mods=prev_mod, remaining_len=remaining, mask=mask,
        pos_enc=np.broadcast_to(position_encoding(S, d_model), (B, S, d_model)),
        prefix_enc=prefix_enc, remain_enc=remain_enc, remain_scaled=remain_scaled,
        evidence=ev,
    )


# --------------------------------------------------------------------------
# Training items


@dataclass(eq=False)
class TrainingItem:
    """One spectrum with its positive peptide and optional negatives."""

    spectrum: object
    positive: Peptide
    negatives: list[Peptide] = field(default_factory=list)
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def true_length(self) -> int:
        return len(self.positive)


def experimental_matrix(spectrum, peptide: Peptide, ann=None) -> np.ndarray:
    """Observed intensity per cleavage site and ion type, ``(L-1, 6)``."""
    ann = ann if ann is not None else annotate_peaks(spectrum, peptide)
    L = len(peptide)
    out = np.zeros((max(L - 1, 0), 6))
    for j in np.flatnonzero(ann.ion_label < 6):
        lab = int(ann.ion_label[j])
        k = int(ann.aa_count[j])
        site = k if lab % 2 == 0 else L - k
        if 1 <= site <= L - 1:
            out[site - 1, lab] += spectrum.intensity[j]
    return out


def _item_cache(item: TrainingItem, vocab: ComboVocab, d_model: int, l_max: int, tol: float) -> dict:
    c = item.cache
    key = (vocab.uid, d_model)
    if c.get("key") == key:
        return c
    s, p = item.spectrum, item.positive
    ann = annotate_peaks(s, p, tol)
    c.clear()
    c["key"] = key
    c["aa_count"] = np.minimum(ann.aa_count, l_max)
    c["ion_label"] = ann.ion_label
    c["target"] = experimental_matrix(s, p, ann)
    ids = vocab.encode(p) if len(p) <= l_max else None
    c["combo_ids"] = ids
    if ids is not None:
        c["dec"] = decoder_inputs([s], [ids[:-1]], [len(p)], vocab, d_model, tol)
        c["site_mask"] = np.stack([vocab.site_mask(t, len(p)) for t in range(len(p))])
    return c


@dataclass
class TrainingBatch:
    items: list[TrainingItem]

    def __len__(self) -> int:
        return len(self.items)


def collate(items: Sequence[TrainingItem], model, vocab: ComboVocab) -> SimpleNamespace:
    """Arrays for every loss term of one mini-batch."""
    config = model.config
    d, l_max, tol = config.d_model, config.l_max, config.fragment_tol_ppm
    caches = [_item_cache(it, vocab, d, l_max, tol) for it in items]
    spectra = [it.spectrum for it in items]
    sb = encode_spectra(spectra, d, config.max_charge)
    B, P = sb.peak_mask.shape

    aa = np.full((B, P), -100, dtype=np.int64)
    ion = np.full((B, P), -100, dtype=np.int64)
    for i, c in enumerate(caches):
        n = len(c["ion_label"])
        aa[i, :n] = c["aa_count"]
        ion[i, :n] = c["ion_label"]
    length = np.array([min(it.true_length, l_max) - 1 for it in items], dtype=np.int64)

    # candidate lists: positive, own negatives, then other positives
    pair_spec, pair_pep, groups = [], [], []
    for i, it in enumerate(items):
        own = [it.positive] + list(it.negatives)
        others = [o.positive for j, o in enumerate(items) if j != i and o.positive.key != it.positive.key]
        start = len(pair_pep)
        pair_pep.extend(own + others)
        pair_spec.extend([i] * (len(own) + len(others)))
        groups.append((start, len(own), len(others)))
    pb = encode_peptides(pair_pep, d, model.mod_index)
    T = pb.tokens.shape[1]
    ev = pair_evidence([spectra[i] for i in pair_spec], pair_pep, T, tol)

    K = max(g[1] + g[2] for g in groups)
    cand_index = np.zeros((B, K), dtype=np.int64)
    cand_mask = np.zeros((B, K), dtype=bool)
    own_mask = np.zeros((B, K), dtype=bool)
    for i, (start, n_own, n_other) in enumerate(groups):
        n = n_own + n_other
        cand_index[i, :n] = np.arange(start, start + n)
        cand_mask[i, :n] = True
        own_mask[i, :n_own] = True

    pos_rows = np.array([g[0] for g in groups], dtype=np.int64)
    target = [c["target"] for c in caches]
    tmat = np.zeros((B, T - 1, 6))
    tmask = np.zeros((B, T - 1), dtype=bool)
    for i, t in enumerate(target):
        tmat[i, 1 : 1 + len(t)] = t
        tmask[i, 1 : 1 + len(t)] = True
    has_target = tmat.reshape(B, -1).sum(1) > 0

    dec_rows = [i for i, c in enumerate(caches) if c["combo_ids"] is not None]
    dec = None
    if dec_rows:
        S = max(len(caches[i]["combo_ids"]) for i in dec_rows)
        parts = [caches[i]["dec"] for i in dec_rows]
        dec = _stack_decoder(parts, S, len(vocab), d)
        dec.targets = np.full((len(dec_rows), S), -100, dtype=np.int64)
        dec.site_mask = np.ones((len(dec_rows), S, len(vocab)), dtype=bool)
        for r, i in enumerate(dec_rows):
            ids = caches[i]["combo_ids"]
            dec.targets[r, : len(ids)] = ids
            dec.site_mask[r, : len(ids)] = caches[i]["site_mask"]
        dec.rows = np.array(dec_rows, dtype=np.int64)

    return SimpleNamespace(
        spectra=sb, aa_count=aa, ion_label=ion, length=length,
        peptides=pb, pair_spectrum=np.array(pair_spec, dtype=np.int64), evidence=ev,
        cand_index=cand_index, cand_mask=cand_mask, own_mask=own_mask,
        pos_rows=pos_rows, target_matrix=tmat, target_mask=tmask, has_target=has_target,
        decoder=dec,
    )


def _stack_decoder(parts, S: int, C: int, d: int) -> SimpleNamespace:
    B = len(parts)

    def pad(name, shape, dtype):
        out = np.zeros((B,) + shape, dtype=dtype)
        for i, p in enumerate(parts):
            a = getattr(p, name)[0]
            out[i, : a.shape[0]] = a
        return out

    return SimpleNamespace(
        prev_tokens=pad("prev_tokens", (S,), np.int64),
        prev_mods=pad("prev_mods", (S,), np.int64),
        remaining_len=pad("remaining_len", (S,), np.int64),
        mask=pad("mask", (S,), bool),
        pos_enc=np.broadcast_to(position_encoding(S, d), (B, S, d)),
        prefix_enc=pad("prefix_enc", (S, d), np.float64),
        remain_enc=pad("remain_enc", (S, d), np.float64),
        remain_scaled=pad("remain_scaled", (S,), np.float64),
        evidence=pad("evidence", (S, C, N_EVIDENCE), np.float64),
    )

