"""Kernel search, target-decoy q-values, neural rescoring and fine-tuning."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .chem import ModTable, Peptide, fragment_array, fragment_charges
from .index import (
    FRAGMENT_TOL_PPM,
    PRECURSOR_TOL_PPM,
    CandidatePeptide,
    PrecursorIndex,
    fragment_coverage,
    match_fragments,
    query_open,
    query_restricted,
)
from .model import (
    PsmModel,
    TrainingBatch,
    TrainingItem,
    combo_vocab,
    flush_denormals,
    joint_scores,
    make_optimizer,
    spectrum_cosine,
    train_step,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchConfig:
    mode: str = "restricted"
    enzyme: str = "trypsin"
    top_k: Optional[int] = None
    q_gate: float = 0.1
    fdr_target: float = 0.01
    precursor_tol_ppm: float = PRECURSOR_TOL_PPM
    fragment_tol_ppm: float = FRAGMENT_TOL_PPM
    keep_failed_gate: bool = False

    def __post_init__(self):
        if self.mode not in ("restricted", "open"):
            raise ValueError(f"unknown search mode {self.mode!r}")
        if not 0 < self.q_gate <= 1:
            raise ValueError("q_gate must be in (0, 1]")
        if not 0 < self.fdr_target <= 1:
            raise ValueError("fdr_target must be in (0, 1]")
        if self.top_k is not None and self.top_k < 2:
            raise ValueError("top_k must be >= 2")

    @property
    def k(self) -> int:
        """Candidates kept per spectrum: 10, or 20 for non-specific digestion."""
        if self.top_k is not None:
            return self.top_k
        return 20 if self.enzyme == "nonspecific" else 10


@dataclass(frozen=True)
class PSMRecord:
    spectrum_title: str
    peptide: Peptide
    charge: int
    precursor_mz: float
    mass_error_ppm: float
    kernel_score: float
    rank: int
    is_decoy: bool
    proteins: tuple[str, ...] = ()
    neural_score: Optional[float] = None
    q_value: Optional[float] = None
    cosine_similarity: Optional[float] = None
    fragment_coverage: Optional[float] = None


def kernel_score(spectrum, peptide: Peptide, tol_ppm: float = FRAGMENT_TOL_PPM) -> float:
    """Hyperscore: ``log(1 + sum(I_matched) * Nb! * Ny!)`` over b/y fragments.

    Fragments are unmodified-loss b and y ions at charges up to the fragment
    charge cap; each fragment matches its nearest peak within ``tol_ppm``.
    """
    frags = fragment_array(peptide, fragment_charges(spectrum.charge))
    hit = match_fragments(spectrum.mz, frags["mz"], tol_ppm)
    ok = hit >= 0
    if not ok.any():
        return 0.0
    total = float(np.asarray(spectrum.intensity)[hit[ok]].sum())
    nb = int(np.count_nonzero(ok & (frags["series"] == 0)))
    ny = int(np.count_nonzero(ok & (frags["series"] == 1)))
    log_term = math.log(total) + math.lgamma(nb + 1) + math.lgamma(ny + 1)
    return float(np.logaddexp(0.0, log_term))


def search_spectrum(
    spectrum,
    index: PrecursorIndex,
    mods: ModTable | None,
    cfg: SearchConfig,
) -> list[PSMRecord]:
    """Top-k kernel-ranked candidates for one spectrum."""
    mass = spectrum.precursor_neutral_mass
    if cfg.mode == "open":
        cands = query_open(index, mass, cfg.precursor_tol_ppm, mods)
    else:
        cands = query_restricted(index, mass, cfg.precursor_tol_ppm)
    scored = [(kernel_score(spectrum, c.peptide, cfg.fragment_tol_ppm), c) for c in cands]
    scored.sort(key=lambda t: (-t[0], t[1].is_decoy, str(t[1].peptide)))
    out = []
    for rank, (score, c) in enumerate(scored[: cfg.k], start=1):
        out.append(_record(spectrum, c, score, rank))
    return out


def _record(spectrum, c: CandidatePeptide, score: float, rank: int) -> PSMRecord:
    mass = spectrum.precursor_neutral_mass
    return PSMRecord(
        spectrum.title, c.peptide, spectrum.charge, spectrum.precursor_mz,
        (mass - c.mass) / c.mass * 1e6, score, rank, c.is_decoy, c.proteins,
    )


def search_run(spectra: Sequence, index: PrecursorIndex, mods: ModTable | None, cfg: SearchConfig) -> list[list[PSMRecord]]:
    return [search_spectrum(s, index, mods, cfg) for s in spectra]


def compute_qvalues(records: Sequence[PSMRecord], score_field: str = "kernel_score") -> list[PSMRecord]:
    """Target-decoy q-values over one best record per spectrum.

    Records are ordered by descending score; on ties targets come before
    decoys and then titles ascend. FDR of a prefix is decoys / targets
    (1 when only decoys, 0 when empty), capped at 1, and q is its running
    minimum from the bottom. Returns records in that order.
    """
    ordered = sorted(records, key=lambda r: (-getattr(r, score_field), r.is_decoy, r.spectrum_title))
    fdr = np.empty(len(ordered))
    targets = decoys = 0
    for i, r in enumerate(ordered):
        if r.is_decoy:
            decoys += 1
        else:
            targets += 1
        fdr[i] = min(decoys / targets, 1.0) if targets else (1.0 if decoys else 0.0)
    q = np.minimum.accumulate(fdr[::-1])[::-1] if len(fdr) else fdr
    return [replace(r, q_value=float(v)) for r, v in zip(ordered, q)]


def accepted_targets(records: Sequence[PSMRecord], fdr: float) -> list[PSMRecord]:
    return [r for r in records if not r.is_decoy and r.q_value is not None and r.q_value <= fdr]


@dataclass
class RescoreResult:
    accepted: list[PSMRecord]
    rank1: list[PSMRecord]
    kernel_rank1: list[PSMRecord]
    n_spectra: int
    n_gated: int
    kernel_accepted: int

    @property
    def n_accepted(self) -> int:
        return sum(1 for r in self.accepted if not r.is_decoy)

    def summary(self) -> dict[str, int]:
        return {
            "spectra": self.n_spectra,
            "searched_with_candidates": len(self.kernel_rank1),
            "passed_gate": self.n_gated,
            "kernel_accepted_targets": self.kernel_accepted,
            "accepted_targets": self.n_accepted,
        }


def _check_vocab(model: PsmModel, mods: ModTable | None) -> None:
    if mods is None:
        return
    missing = [n for n in mods.token_names if n not in model.mod_index]
    if missing:
        raise ValueError(f"modification token {missing[0]!r} not in model vocabulary")


def rescore_run(
    run: Sequence[Sequence[PSMRecord]],
    spectra: Mapping[str, object],
    model: PsmModel,
    cfg: SearchConfig,
    mods: ModTable | None = None,
) -> RescoreResult:
    """Gate by kernel q-value, rerank by joint score, then filter by FDR.

    Survivors carry predicted-vs-observed cosine and fragment coverage.
    """
    _check_vocab(model, mods)
    for recs in run:
        for r in recs:
            if r.peptide.mods:
                for _, rec in r.peptide.mods:
                    if rec.name not in model.mod_index:
                        raise ValueError(f"modification token {rec.name!r} not in model vocabulary")
    lists = {recs[0].spectrum_title: list(recs) for recs in run if recs}
    kernel_rank1 = compute_qvalues([recs[0] for recs in lists.values()], "kernel_score")
    kernel_acc = len(accepted_targets(kernel_rank1, cfg.fdr_target))
    model.eval()
    new_rank1 = []
    n_gated = 0
    for r1 in kernel_rank1:
        if r1.q_value >= cfg.q_gate:
            if cfg.keep_failed_gate:
                new_rank1.append(replace(r1, neural_score=-math.inf, q_value=None))
            continue
        n_gated += 1
        recs = lists[r1.spectrum_title]
        s = spectra[r1.spectrum_title]
        scores, _ = joint_scores(s, [r.peptide for r in recs], model)
        order = sorted(range(len(recs)), key=lambda i: (-scores[i], recs[i].rank))
        best = recs[order[0]]
        new_rank1.append(replace(best, rank=1, neural_score=float(scores[order[0]]), q_value=None))
    scored = compute_qvalues(new_rank1, "neural_score")
    accepted = []
    for r in scored:
        if r.q_value <= cfg.fdr_target and math.isfinite(r.neural_score):
            s = spectra[r.spectrum_title]
            accepted.append(replace(
                r,
                cosine_similarity=spectrum_cosine(s, r.peptide, model),
                fragment_coverage=fragment_coverage(s, r.peptide, cfg.fragment_tol_ppm),
            ))
    return RescoreResult(accepted, scored, kernel_rank1, len(spectra), n_gated, kernel_acc)


# --------------------------------------------------------------------------
# Fine-tuning


class FinetuneError(RuntimeError):
    pass


@dataclass
class FinetuneResult:
    model: PsmModel
    before: int
    after: int
    n_batches: int
    losses: list[dict] = field(default_factory=list)


def training_items(
    run: Sequence[Sequence[PSMRecord]],
    spectra: Mapping[str, object],
    positives: Mapping[str, Peptide] | None = None,
    max_negatives: int = 8,
) -> list[TrainingItem]:
    """Items with rank-1 (or supplied) positives and rank 3..10 target negatives."""
    items = []
    for recs in run:
        if not recs:
            continue
        title = recs[0].spectrum_title
        pos = positives.get(title) if positives is not None else recs[0].peptide
        if pos is None:
            continue
        negs = [
            r.peptide for r in recs
            if 3 <= r.rank <= 10 and not r.is_decoy and r.peptide.key != pos.key
        ][:max_negatives]
        items.append(TrainingItem(spectra[title], pos, negs))
    return items


def split_titles(titles: Sequence[str], holdout_fraction: float) -> tuple[list[str], list[str]]:
    """Deterministic hash split into (train, held-out)."""
    train, held = [], []
    for t in titles:
        h = int(hashlib.sha1(t.encode("utf-8")).hexdigest()[:8], 16) / 0xFFFFFFFF
        (held if h < holdout_fraction else train).append(t)
    return train, held


def run_epochs(
    model: PsmModel,
    items: Sequence[TrainingItem],
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
    loss_weights=None,
    vocab=None,
    on_step=None,
) -> list[dict]:
    """Shuffled mini-batch passes; every batch visited once per epoch."""
    vocab = vocab if vocab is not None else combo_vocab(model)
    opt = make_optimizer(model, lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    with flush_denormals():
        for epoch in range(epochs):
            order = rng.permutation(len(items))
            for b, start in enumerate(range(0, len(order), batch_size)):
                batch = TrainingBatch([items[i] for i in order[start : start + batch_size]])
                losses = train_step(batch, model, opt, vocab, loss_weights)
                losses.update(epoch=epoch, batch=b)
                history.append(losses)
                if on_step is not None:
                    on_step(losses)
            recent = [h["total"] for h in history if h["epoch"] == epoch]
            logger.info("epoch %d: %d steps, mean loss %.4f", epoch, len(recent), float(np.mean(recent)))
    return history


def finetune(
    model: PsmModel,
    run: Sequence[Sequence[PSMRecord]],
    spectra: Mapping[str, object],
    cfg: SearchConfig = SearchConfig(),
    epochs: int = 1,
    batch_size: int = 16,
    lr: float = 1e-3,
    min_batches: int = 16,
    holdout_fraction: float = 0.2,
    seed: int = 0,
    mods: ModTable | None = None,
) -> FinetuneResult:
    """Adapt ``model`` to a new run using its own kernel identifications.

    Positives are rank-1 candidates (decoys included) of spectra passing the
    kernel q-value gate; negatives are target candidates ranked 3rd-10th.
    Identification counts before and after are measured on a held-out split.
    """
    lists = [list(r) for r in run if r]
    titles = [r[0].spectrum_title for r in lists]
    train_t, held_t = split_titles(titles, holdout_fraction)
    train_set = set(train_t)
    kernel = compute_qvalues([r[0] for r in lists if r[0].spectrum_title in train_set], "kernel_score")
    gated = {r.spectrum_title for r in kernel if r.q_value < cfg.q_gate}
    items = training_items([r for r in lists if r[0].spectrum_title in gated], spectra)
    n_batches = math.ceil(len(items) / batch_size) if items else 0
    if n_batches < min_batches:
        raise FinetuneError(
            f"only {n_batches} training batches ({len(items)} items); at least {min_batches} required"
        )
    held = set(held_t)
    held_run = [r for r in lists if r[0].spectrum_title in held]
    before = rescore_run(held_run, spectra, model, cfg, mods).n_accepted
    losses = run_epochs(model, items, epochs, batch_size, lr, seed)
    after = rescore_run(held_run, spectra, model, cfg, mods).n_accepted
    model.eval()
    return FinetuneResult(model, before, after, n_batches, losses)
