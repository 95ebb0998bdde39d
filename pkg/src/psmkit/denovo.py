"""Length-aware de novo sequencing, modification-enriched re-search and QC filtering."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .chem import N_TERM, ModTable, Peptide, expand_variable_mods
from .index import (
    FRAGMENT_TOL_PPM,
    PRECURSOR_TOL_PPM,
    build_index,
    fragment_coverage,
    query_restricted,
)
from .model import (
    PsmModel,
    combo_vocab,
    embed_spectrum,
    joint_scores,
    pla_decode_lengths,
    spectrum_cosine,
    spectrum_heads,
)
from .msio import ProteinEntry

__all__ = [
    "DenovoConfig", "DenovoPool", "DenovoRecord", "EnrichedResult", "FilterConfig",
    "denovo_pools", "denovo_spectrum", "enriched_denovo", "fragment_coverage",
    "predict_length", "qc_filter", "regular_denovo", "shuffled_null_threshold",
]


@dataclass(frozen=True)
class DenovoConfig:
    beam: int = 8
    length_window: int = 2
    precursor_tol_ppm: float = PRECURSOR_TOL_PPM
    fragment_tol_ppm: float = FRAGMENT_TOL_PPM
    max_mods: int = 2
    top_mods: int = 4


@dataclass(frozen=True)
class DenovoRecord:
    spectrum_title: str
    peptide: Peptide
    predicted_length: int
    length_used: int
    neural_score: float
    cosine_similarity: float
    fragment_coverage: float
    high_confidence: bool


@dataclass(frozen=True)
class FilterConfig:
    """Threshold conjunction; ``max_rt_error`` only applies when RT features are given."""

    min_neural_score: float = -math.inf
    min_cosine: float = 0.7
    require_full_coverage: bool = False
    max_rt_error: Optional[float] = None

    def __post_init__(self):
        for v in (self.min_neural_score, self.min_cosine):
            if math.isnan(v) or v == math.inf:
                raise ValueError("filter thresholds must be finite or -inf")


@dataclass
class DenovoPool:
    """Every decoded survivor for one spectrum, sorted by neural score."""

    spectrum: object
    predicted_length: int
    candidates: list[tuple[Peptide, float, int]] = field(default_factory=list)


def predict_length(spectrum, model: PsmModel, rs=None) -> int:
    rs = rs if rs is not None else embed_spectrum(spectrum, model)
    return spectrum_heads(rs, model).predicted_length


def denovo_spectrum(
    spectrum, model: PsmModel, cfg: DenovoConfig = DenovoConfig(), vocab=None
) -> DenovoPool:
    """Decode lengths ``L0 +- window`` and score every survivor with the joint scorer."""
    vocab = vocab if vocab is not None else combo_vocab(model)
    rs = embed_spectrum(spectrum, model)
    L0 = predict_length(spectrum, model, rs)
    w = cfg.length_window
    lengths = [L for L in range(L0 - w, L0 + w + 1) if 1 <= L <= model.config.l_max]
    decoded = pla_decode_lengths(
        model, spectrum, lengths, cfg.beam, vocab, tol_ppm=cfg.precursor_tol_ppm,
        max_mods=cfg.max_mods, encoded=(rs.per_peak, rs.pooled, rs.peak_mask),
    )
    seen = {}
    for L in lengths:
        for d in decoded[L]:
            seen.setdefault(d.peptide.key, (d.peptide, L))
    peps = [v[0] for v in seen.values()]
    scores, _ = joint_scores(spectrum, peps, model, rs)
    cands = [(p, float(s), L) for (p, L), s in zip(seen.values(), scores)]
    cands.sort(key=lambda t: (-t[1], str(t[0])))
    return DenovoPool(spectrum, L0, cands)


def denovo_pools(spectra: Sequence, model: PsmModel, cfg: DenovoConfig = DenovoConfig(), vocab=None) -> list[DenovoPool]:
    vocab = vocab if vocab is not None else combo_vocab(model)
    return [denovo_spectrum(s, model, cfg, vocab) for s in spectra]


def _make_record(spectrum, pep, score, L0, L, model, tol) -> DenovoRecord:
    cov = fragment_coverage(spectrum, pep, tol) if len(pep) >= 2 else 0.0
    return DenovoRecord(
        spectrum.title, pep, L0, L, score, spectrum_cosine(spectrum, pep, model), cov, cov == 1.0
    )


def regular_denovo(
    spectra: Sequence,
    model: PsmModel,
    cfg: DenovoConfig = DenovoConfig(),
    pools: Sequence[DenovoPool] | None = None,
) -> list[DenovoRecord]:
    """Highest joint-score candidate per spectrum; empty pools yield no record."""
    pools = pools if pools is not None else denovo_pools(spectra, model, cfg)
    out = []
    for pool in pools:
        if not pool.candidates:
            continue
        pep, score, L = pool.candidates[0]
        out.append(_make_record(pool.spectrum, pep, score, pool.predicted_length, L, model, cfg.fragment_tol_ppm))
    return out


@dataclass
class EnrichedResult:
    records: list[DenovoRecord]
    fasta: list[ProteinEntry]
    mod_ranking: list[tuple[str, int]]
    variable_mods: list[str]


def rank_modifications(pools: Sequence[DenovoPool]) -> list[tuple[str, int]]:
    """Modification names by number of pooled candidates carrying them."""
    counts: Counter = Counter()
    for pool in pools:
        for pep, _, _ in pool.candidates:
            for name in {rec.name for _, rec in pep.mods}:
                counts[name] += 1
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


def enriched_denovo(
    spectra: Sequence,
    model: PsmModel,
    user_mods: Sequence[str] = (),
    cfg: DenovoConfig = DenovoConfig(),
    pools: Sequence[DenovoPool] | None = None,
    table: ModTable | None = None,
) -> EnrichedResult:
    """Compile candidates into a FASTA and re-search it with the top modifications.

    Each FASTA entry is one full-length candidate; the variable modification
    set is the ``top_mods`` most frequent plus ``user_mods``. The best joint
    score within the predicted length window wins per spectrum.
    """
    table = table if table is not None else model.config.mod_table
    unknown = [m for m in user_mods if m not in table.by_name]
    if unknown:
        raise ValueError(f"unknown user modification(s): {', '.join(unknown)}")
    pools = pools if pools is not None else denovo_pools(spectra, model, cfg)
    seqs = sorted({pep.residues for pool in pools for pep, _, _ in pool.candidates})
    if not seqs:
        raise ValueError("nothing to compile: no de novo candidates in this run")
    fasta = [ProteinEntry(f"DN{i:06d}", "de novo candidate", s) for i, s in enumerate(seqs)]
    ranking = rank_modifications(pools)
    var_names = list(dict.fromkeys([n for n, _ in ranking[: cfg.top_mods]] + list(user_mods)))
    var_table = table.subset(var_names) if var_names else ModTable()
    items = []
    for entry in fasta:
        for form in expand_variable_mods(Peptide(entry.sequence), var_table, cfg.max_mods):
            items.append((form, entry.accession, False, True))
    index = build_index(items, var_table)

    records = []
    for pool in pools:
        s = pool.spectrum
        w = cfg.length_window
        cands = [
            c.peptide for c in query_restricted(index, s.precursor_neutral_mass, cfg.precursor_tol_ppm)
            if abs(len(c.peptide) - pool.predicted_length) <= w
        ]
        if not cands:
            continue
        scores, _ = joint_scores(s, cands, model)
        best = min(range(len(cands)), key=lambda i: (-scores[i], str(cands[i])))
        pep = cands[best]
        records.append(
            _make_record(s, pep, float(scores[best]), pool.predicted_length, len(pep), model, cfg.fragment_tol_ppm)
        )
    return EnrichedResult(records, fasta, ranking, var_names)


def shuffled_null_threshold(
    spectra: Mapping[str, object],
    records: Sequence[DenovoRecord],
    model: PsmModel,
    quantile: float = 0.95,
    seed: int = 0,
) -> float:
    """Upper quantile of joint scores for residue-shuffled record peptides.

    The C-terminal residue stays in place, as does the first one when a
    residue-specific N-terminal modification needs it. Modifications travel
    with their residues.
    """
    rng = np.random.default_rng(seed)
    scores = []
    for rec in records:
        pep = rec.peptide
        L = len(pep)
        head = int(any(p == N_TERM and r.residue for p, r in pep.mods))
        if L - head < 3:
            continue
        perm = np.concatenate([np.arange(head), head + rng.permutation(L - 1 - head), [L - 1]])
        where = {int(old): new for new, old in enumerate(perm)}
        residues = "".join(pep.residues[i] for i in perm)
        mods = tuple((where[p] if isinstance(p, int) else p, r) for p, r in pep.mods)
        decoy = Peptide(residues, mods)
        scores.append(joint_scores(spectra[rec.spectrum_title], [decoy], model)[0][0])
    if not scores:
        return -math.inf
    return float(np.quantile(scores, quantile))


def qc_filter(
    records: Sequence[DenovoRecord],
    cfg: FilterConfig = FilterConfig(),
    rt_error: Mapping[str, float] | None = None,
) -> tuple[list[DenovoRecord], list[DenovoRecord]]:
    """Keep records passing score and cosine thresholds; return (kept, high-confidence)."""
    kept = []
    for r in records:
        if r.neural_score < cfg.min_neural_score or r.cosine_similarity < cfg.min_cosine:
            continue
        if cfg.require_full_coverage and r.fragment_coverage != 1.0:
            continue
        if rt_error is not None and cfg.max_rt_error is not None:
            err = rt_error.get(r.spectrum_title)
            if err is None or abs(err) > cfg.max_rt_error:
                continue
        kept.append(r)
    return kept, [r for r in kept if r.fragment_coverage == 1.0]
