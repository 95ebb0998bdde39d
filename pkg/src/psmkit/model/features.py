"""Parameter-free inputs for the network: mass encodings, ion evidence, vocabularies."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..chem import (
    C_TERM,
    N_TERM,
    ModificationRecord,
    ModTable,
    Peptide,
    fragment_charges,
    position_masses,
)
from ..constants import AMINO_ACIDS, DEFAULT_FIXED_MODS, H2O, NH3, PROTON, RESIDUE_MASSES

PAD, BOS, EOS = 0, 1, 2
N_SPECIAL = 3
RESIDUE_TOKEN = {aa: N_SPECIAL + i for i, aa in enumerate(AMINO_ACIDS)}
N_RESIDUE_TOKENS = N_SPECIAL + len(AMINO_ACIDS)

# (series, loss mass) for the six ion labels, ordered b, y, b-H2O, y-H2O, b-NH3, y-NH3
ION_LAYOUT = ((0, 0.0), (1, 0.0), (0, H2O), (1, H2O), (0, NH3), (1, NH3))
N_EVIDENCE = 2 * len(ION_LAYOUT)


def sinusoid(values, dim: int, lam_min: float = 1e-3, lam_max: float = 1e4) -> np.ndarray:
    """Sin/cos features of ``values`` over geometric wavelengths, float64."""
    values = np.asarray(values, dtype=np.float64)
    half = dim // 2
    if half > 1:
        lam = lam_min * (lam_max / lam_min) ** (np.arange(half) / (half - 1))
    else:
        lam = np.array([lam_max])
    phase = values[..., None] * (2 * np.pi / lam)
    out = np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)
    if out.shape[-1] < dim:
        out = np.concatenate([out, np.zeros(values.shape + (dim - out.shape[-1],))], axis=-1)
    return out


def ion_evidence(
    peak_mz: np.ndarray,
    peak_intensity: np.ndarray,
    b_neutral: np.ndarray,
    y_neutral: np.ndarray,
    max_charge: int,
    tol_ppm: float,
) -> np.ndarray:
    """Matched intensity for the six ion labels at charges 1 and 2.

    Each feature is the best peak intensity within ``tol_ppm`` damped by a
    Gaussian on the ppm error. Output shape is ``b_neutral.shape + (12,)``.
    """
    b_neutral = np.asarray(b_neutral, dtype=np.float64)
    y_neutral = np.asarray(y_neutral, dtype=np.float64)
    out = np.zeros(b_neutral.shape + (N_EVIDENCE,))
    if len(peak_mz) == 0:
        return out
    sigma = tol_ppm / 2.0
    col = 0
    for z in (1, 2):
        for series, loss in ION_LAYOUT:
            if z <= max_charge:
                neutral = (b_neutral if series == 0 else y_neutral) - loss
                mz = (neutral + z * PROTON) / z
                pos = np.searchsorted(peak_mz, mz)
                lo = np.clip(pos - 1, 0, len(peak_mz) - 1)
                hi = np.clip(pos, 0, len(peak_mz) - 1)
                valid = mz > 0
                best = np.zeros(mz.shape)
                for idx in (lo, hi):
                    ppm = np.abs(peak_mz[idx] - mz) / np.where(valid, mz, 1.0) * 1e6
                    val = peak_intensity[idx] * np.exp(-0.5 * (ppm / sigma) ** 2)
                    val = np.where((ppm <= tol_ppm) & valid, val, 0.0)
                    best = np.maximum(best, val)
                out[..., col] = best
            col += 1
    return out


def peptide_evidence(spectrum, peptide: Peptide, tol_ppm: float) -> np.ndarray:
    """Evidence per cleavage site; row ``t`` covers the cut after residue ``t``.

    Shape ``(len + 2, 12)`` aligned with the peptide token rows (BOS, residues,
    EOS); rows without a cleavage site are zero.
    """
    masses = position_masses(peptide)
    L = len(masses)
    out = np.zeros((L + 2, N_EVIDENCE))
    if L < 2:
        return out
    prefix = np.cumsum(masses)[:-1]
    total = masses.sum() + H2O
    ev = ion_evidence(
        spectrum.mz, spectrum.intensity, prefix, total - prefix,
        fragment_charges(spectrum.charge), tol_ppm,
    )
    out[1:L] = ev
    return out


def peptide_tokens(peptide: Peptide, mod_index: dict[str, int]) -> tuple[np.ndarray, np.ndarray]:
    """Token and modification ids for ``[BOS] residues [EOS]``.

    Terminal modifications are added to the first/last residue row.
    """
    L = len(peptide)
    tok = np.empty(L + 2, dtype=np.int64)
    tok[0], tok[-1] = BOS, EOS
    tok[1:-1] = [RESIDUE_TOKEN[aa] for aa in peptide.residues]
    mod = np.zeros(L + 2, dtype=np.int64)
    for pos, rec in peptide.mods:
        try:
            mid = mod_index[rec.name]
        except KeyError:
            raise ValueError(f"modification token {rec.name!r} not in model vocabulary") from None
        row = 1 if pos == N_TERM else L if pos == C_TERM else pos + 1
        mod[row] = mid
    return tok, mod


# --------------------------------------------------------------------------
# Decoding vocabulary


@dataclass(frozen=True)
class Combo:
    """One decoding token: a residue with at most one modification."""

    residue: str
    record: ModificationRecord | None
    mass: float

    @property
    def terminus(self) -> str | None:
        return None if self.record is None else self.record.terminus


_vocab_ids = itertools.count()


class ComboVocab:
    """All legal residue/modification tokens for an active modification table."""

    def __init__(self, table: ModTable, mod_index: dict[str, int], fixed_mods=DEFAULT_FIXED_MODS):
        combos: list[Combo] = []
        for aa in AMINO_ACIDS:
            base = RESIDUE_MASSES[aa] + fixed_mods.get(aa, 0.0)
            combos.append(Combo(aa, None, base))
            for rec in table:
                if rec.terminus is None and rec.site_rule != aa:
                    continue
                if rec.terminus is not None and rec.residue and rec.residue != aa:
                    continue
                if rec.site_rule in ("ProteinC-term",):
                    continue
                combos.append(Combo(aa, rec, base + rec.delta_mass))
        self.uid = next(_vocab_ids)
        self.table = table
        self.combos = tuple(combos)
        self.masses = np.array([c.mass for c in combos])
        self.residue_tokens = np.array([RESIDUE_TOKEN[c.residue] for c in combos], dtype=np.int64)
        self.mod_tokens = np.array(
            [0 if c.record is None else mod_index[c.record.name] for c in combos], dtype=np.int64
        )
        self.has_mod = self.mod_tokens > 0
        term = [c.terminus for c in combos]
        self.nterm = np.array([t == N_TERM for t in term])
        self.cterm = np.array([t == C_TERM for t in term])
        self.sorted_masses = np.sort(self.masses)
        self._tails: dict[int, tuple[np.ndarray, np.ndarray] | None] = {}
        self._inner_level: tuple[int, dict[int, np.ndarray]] | None = None
        self._grid_budget = 0
        self._tail_by_budget: dict[tuple[int, int], np.ndarray] = {}
        self._tail_grid: dict[tuple[int, int], np.ndarray] = {}
        self._lookup = {(c.residue, None if c.record is None else c.record.label): i for i, c in enumerate(combos)}

    def __len__(self) -> int:
        return len(self.combos)

    def site_mask(self, step: int, length: int) -> np.ndarray:
        """Combos allowed at ``step`` of a peptide of ``length`` residues."""
        mask = np.ones(len(self.combos), dtype=bool)
        if step != 0:
            mask &= ~self.nterm
        if step != length - 1:
            mask &= ~self.cterm
        return mask

    def encode(self, peptide: Peptide) -> np.ndarray | None:
        """Combo ids for each residue, or ``None`` if not representable."""
        per_pos: dict[int, ModificationRecord] = {}
        L = len(peptide)
        for pos, rec in peptide.mods:
            row = 0 if pos == N_TERM else L - 1 if pos == C_TERM else pos
            if row in per_pos:
                return None
            per_pos[row] = rec
        ids = []
        for i, aa in enumerate(peptide.residues):
            rec = per_pos.get(i)
            key = (aa, None if rec is None else rec.label)
            if key not in self._lookup:
                return None
            ids.append(self._lookup[key])
        return np.array(ids, dtype=np.int64)

    def decode(self, ids) -> Peptide:
        mods = []
        residues = []
        for i, cid in enumerate(ids):
            c = self.combos[int(cid)]
            residues.append(c.residue)
            if c.record is not None:
                pos = N_TERM if c.record.terminus == N_TERM else C_TERM if c.record.terminus == C_TERM else i
                mods.append((pos, c.record))
        return Peptide("".join(residues), tuple(mods))

    # exact sum tables up to six tokens; a mass grid beyond that
    EXACT_TAIL = 6
    MAX_TAIL_PRODUCT = 4_000_000
    GRID_RES = 0.002
    GRID_MAX_MASS = 2500.0

    def _token_groups(self, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Distinct ``(mass, has_mod)`` pairs among the masked combos."""
        pairs = np.unique(np.stack([np.round(self.masses[mask], 6), self.has_mod[mask]], 1), axis=0)
        return pairs[:, 0], pairs[:, 1].astype(np.int64)

    def _tail_table(self, count: int) -> tuple[np.ndarray, np.ndarray] | None:
        """Distinct masses of the last ``count`` tokens with their fewest mods.

        Tail tokens never sit first; only the final one may carry a C-terminal
        mod. ``None`` when the table would be too large to build.
        """
        if count not in self._tails:
            if count == 1:
                sums, mods = self._token_groups(~self.nterm)
            else:
                masses, has_mod = self._token_groups(~self.nterm & ~self.cterm)
                prev = self._tail_table(count - 1)
                if prev is None or len(prev[0]) * len(masses) > self.MAX_TAIL_PRODUCT:
                    self._tails[count] = None
                    return None
                prev, prev_mods = prev
                sums = (prev[:, None] + masses[None, :]).ravel()
                mods = (prev_mods[:, None] + has_mod[None, :]).ravel()
            sums = np.round(sums, 6)
            order = np.lexsort((mods, sums))
            sums, first = np.unique(sums[order], return_index=True)
            self._tails[count] = (sums, mods[order][first])
        return self._tails[count]

    def _grid_step(self, prev: dict, mask: np.ndarray, budget: int) -> np.ndarray:
        """Bins reachable by one more masked token after ``prev[b]`` sums."""
        masses, has_mod = self._token_groups(mask)
        shifts = np.rint(masses / self.GRID_RES).astype(np.int64)
        out = np.zeros_like(prev[0])
        for shift, m in zip(shifts, has_mod):
            if budget - m < 0 or shift >= len(out):
                continue
            out[shift:] |= prev[budget - m][: len(out) - shift]
        return out

    def _grid(self, count: int, budget: int) -> np.ndarray:
        """Bit-packed reachable mass bins for ``count`` tail tokens with ``<= budget`` mods.

        Rounding each token to the grid moves a sum by at most half a bin
        per token, so queries widen their window by that much. Inner levels
        are built once and only the latest is kept.
        """
        budget = min(budget, count)
        if (count, budget) in self._tail_grid:
            return self._tail_grid[count, budget]
        if budget > self._grid_budget:
            self._grid_budget = budget
            self._inner_level = None
            self._tail_grid.clear()
        if self._inner_level is None:
            zero = np.zeros(int(self.GRID_MAX_MASS / self.GRID_RES) + 1, dtype=bool)
            zero[0] = True
            self._inner_level = (0, {b: zero for b in range(self._grid_budget + 1)})
        inner_mask = ~self.nterm & ~self.cterm
        level, grids = self._inner_level
        while level < count:
            top = min(self._grid_budget, level + 1)
            for b in range(top + 1):
                prev = {bb: grids[min(bb, level)] for bb in range(b + 1)}
                self._tail_grid[level + 1, b] = np.packbits(self._grid_step(prev, ~self.nterm, b))
            grids = {
                b: self._grid_step({bb: grids[min(bb, level)] for bb in range(b + 1)}, inner_mask, b)
                for b in range(top + 1)
            }
            level += 1
        self._inner_level = (level, grids)
        return self._tail_grid[count, budget]

    def _tail_sums(self, count: int, budget: int) -> np.ndarray:
        key = (count, min(budget, count))
        if key not in self._tail_by_budget:
            sums, mods = self._tail_table(count)
            self._tail_by_budget[key] = sums[mods <= budget]
        return self._tail_by_budget[key]

    def can_complete(
        self, remaining_mass: np.ndarray, remaining_count: int, tol: float, mod_budget=None
    ) -> np.ndarray:
        """Whether ``remaining_count`` further tokens can reach ``remaining_mass``.

        Exact for short tails, a conservative mass grid for longer ones, and
        mass bounds past the grid. Site legality and ``mod_budget`` are
        respected except by the bounds.
        """
        rem = np.asarray(remaining_mass, dtype=np.float64)
        if remaining_count == 0:
            return np.abs(rem) <= tol
        lo = remaining_count * self.sorted_masses[0] - tol
        hi = remaining_count * self.sorted_masses[-1] + tol
        bounds = (rem >= lo) & (rem <= hi)
        exact = remaining_count <= self.EXACT_TAIL and self._tail_table(remaining_count) is not None
        if not exact and np.max(rem, initial=-np.inf) > self.GRID_MAX_MASS - 1.0:
            return bounds
        cap = remaining_count
        budget = np.full(rem.shape, cap) if mod_budget is None else np.clip(np.broadcast_to(mod_budget, rem.shape), -1, cap)
        out = np.zeros(rem.shape, dtype=bool)
        for b in np.unique(budget):
            sel = (budget == b) & bounds
            if b < 0 or not sel.any():
                continue
            r = rem[sel]
            if exact:
                sums = self._tail_sums(remaining_count, int(b))
                if not len(sums):
                    continue
                pos = np.clip(np.searchsorted(sums, r - tol), 0, len(sums) - 1)
                out[sel] = np.abs(sums[pos] - r) <= tol
            else:
                grid = self._grid(remaining_count, int(b))
                n_bins = len(grid) * 8
                slack = tol + remaining_count * self.GRID_RES / 2
                first = np.clip(np.floor((r - slack) / self.GRID_RES).astype(np.int64), 0, n_bins - 1)
                last = np.clip(np.ceil((r + slack) / self.GRID_RES).astype(np.int64), 0, n_bins - 1)
                hit = np.zeros(len(r), dtype=bool)
                for j in range(int((last - first).max()) + 1):
                    i = np.minimum(first + j, last)
                    hit |= ((grid[i >> 3] >> (7 - (i & 7))) & 1).astype(bool)
                out[sel] = hit
        return out


def decoder_evidence(spectrum, prefix_masses: np.ndarray, vocab: ComboVocab, tol_ppm: float) -> np.ndarray:
    """Evidence for each candidate next token after each prefix: ``(S, C, 12)``."""
    new_prefix = np.asarray(prefix_masses)[:, None] + vocab.masses[None, :]
    total = spectrum.precursor_neutral_mass
    return ion_evidence(
        spectrum.mz, spectrum.intensity, new_prefix, total - new_prefix,
        fragment_charges(spectrum.charge), tol_ppm,
    )
