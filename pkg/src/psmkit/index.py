"""Precursor-mass index, restricted/open candidate retrieval and peak annotation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .chem import (
    ModificationRecord,
    ModTable,
    Peptide,
    digest,
    expand_variable_mods,
    fragment_array,
    fragment_charges,
    generate_decoy,
    parse_mod_string,
    parse_modification_table,
    peptide_neutral_mass,
)

PRECURSOR_TOL_PPM = 10.0
FRAGMENT_TOL_PPM = 20.0

NONE_LABEL = 6
ION_TYPE_LABELS = ("b", "y", "b-H2O", "y-H2O", "b-NH3", "y-NH3", "none")


@dataclass(frozen=True)
class IndexEntry:
    mass: float
    peptide: Peptide
    proteins: tuple[str, ...]
    is_decoy: bool
    protein_nterm: bool = False


@dataclass(frozen=True)
class CandidatePeptide:
    peptide: Peptide
    mass: float
    proteins: tuple[str, ...]
    is_decoy: bool
    open_mod: Optional[ModificationRecord] = None


class PrecursorIndex:
    """Peptides sorted by neutral mass; targets and decoys co-indexed."""

    def __init__(self, entries: Sequence[IndexEntry], mod_table: ModTable | None = None):
        self.entries = tuple(sorted(entries, key=lambda e: (e.mass, e.peptide.residues, e.peptide.mod_string())))
        self.masses = np.array([e.mass for e in self.entries], dtype=np.float64)
        self.masses.setflags(write=False)
        self.mod_table = mod_table or ModTable()

    def __len__(self) -> int:
        return len(self.entries)

    def window(self, lo: float, hi: float) -> range:
        a = int(np.searchsorted(self.masses, lo, side="left"))
        b = int(np.searchsorted(self.masses, hi, side="right"))
        return range(a, b)


def build_index(peptides: Iterable[tuple], mod_table: ModTable | None = None) -> PrecursorIndex:
    """Build an index from ``(peptide, protein_ref, is_decoy[, protein_nterm])`` tuples.

    Duplicate peptides are merged; an entry is a decoy only if every source is.
    """
    merged: dict[tuple, list] = {}
    for item in peptides:
        pep, ref, is_decoy = item[:3]
        nterm = bool(item[3]) if len(item) > 3 else False
        slot = merged.get(pep.key)
        if slot is None:
            merged[pep.key] = [pep, [ref], is_decoy, nterm]
        else:
            if ref not in slot[1]:
                slot[1].append(ref)
            slot[2] = slot[2] and is_decoy
            slot[3] = slot[3] or nterm
    entries = [
        IndexEntry(peptide_neutral_mass(pep), pep, tuple(refs), dec, nterm)
        for pep, refs, dec, nterm in merged.values()
    ]
    return PrecursorIndex(entries, mod_table)


def index_proteins(
    proteins: Iterable,
    enzyme: str = "trypsin",
    missed: int = 2,
    len_range: tuple[int, int] = (6, 45),
    decoy_mode: str | None = "tryptic_reverse",
    variable_mods: ModTable | None = None,
    max_variable_mods: int = 1,
    mod_table: ModTable | None = None,
) -> PrecursorIndex:
    """Digest proteins (plus decoys) and index the products."""
    items = []
    proteins = list(proteins)
    sources = [(p, False) for p in proteins]
    if decoy_mode:
        sources += [(generate_decoy(p, decoy_mode), True) for p in proteins]
    for prot, is_decoy in sources:
        for pep in digest(prot, enzyme, missed, len_range):
            nterm = prot.sequence.startswith(pep.residues)
            forms = [pep]
            if variable_mods is not None and len(variable_mods):
                forms = expand_variable_mods(pep, variable_mods, max_variable_mods, protein_nterm=nterm)
            for form in forms:
                items.append((form, prot.accession, is_decoy, nterm))
    table = mod_table if mod_table is not None else variable_mods
    return build_index(items, table)


def _to_candidate(entry: IndexEntry) -> CandidatePeptide:
    return CandidatePeptide(entry.peptide, entry.mass, entry.proteins, entry.is_decoy)


def query_restricted(
    index: PrecursorIndex, precursor_neutral_mass: float, tol_ppm: float = PRECURSOR_TOL_PPM
) -> list[CandidatePeptide]:
    if tol_ppm <= 0:
        raise ValueError("tol_ppm must be positive")
    q = precursor_neutral_mass
    limit = q * tol_ppm * 1e-6
    return [
        _to_candidate(index.entries[i])
        for i in index.window(q - limit, q + limit)
        if abs(index.masses[i] - q) / q <= tol_ppm * 1e-6
    ]


def query_open(
    index: PrecursorIndex,
    precursor_neutral_mass: float,
    tol_ppm: float = PRECURSOR_TOL_PPM,
    mods: ModTable | None = None,
) -> list[CandidatePeptide]:
    """Restricted matches plus unmodified peptides explained by one table delta.

    Each delta-explained peptide yields one candidate per legal site.
    """
    out = query_restricted(index, precursor_neutral_mass, tol_ppm)
    if not mods:
        return out
    seen = {c.peptide.key for c in out}
    q = precursor_neutral_mass
    limit = q * tol_ppm * 1e-6
    for rec in mods:
        target = q - rec.delta_mass
        for i in index.window(target - limit, target + limit):
            entry = index.entries[i]
            if entry.peptide.has_mods:
                continue
            mass = entry.mass + rec.delta_mass
            if abs(mass - q) / q > tol_ppm * 1e-6:
                continue
            for pos in rec.sites(entry.peptide.residues, protein_nterm=entry.protein_nterm):
                pep = entry.peptide.with_mod(pos, rec)
                if pep.key in seen:
                    continue
                seen.add(pep.key)
                out.append(CandidatePeptide(pep, mass, entry.proteins, entry.is_decoy, rec))
    return out


# --------------------------------------------------------------------------
# Peak annotation


@dataclass(frozen=True, eq=False)
class PeakAnnotations:
    """Per-peak ion label index (into ``ION_TYPE_LABELS``), residue count and error."""

    ion_label: np.ndarray
    aa_count: np.ndarray
    error_ppm: np.ndarray

    @property
    def labels(self) -> list[str]:
        return [ION_TYPE_LABELS[i] for i in self.ion_label]


def theoretical_ions(peptide: Peptide, charge: int) -> np.ndarray:
    """All b/y fragments with losses up to the fragment charge for ``charge``."""
    return fragment_array(peptide, fragment_charges(charge), ("H2O", "NH3"))


def _ppm_matrix(peak_mz: np.ndarray, frag_mz: np.ndarray) -> np.ndarray:
    return np.abs(peak_mz[:, None] - frag_mz[None, :]) / frag_mz[None, :] * 1e6


def annotate_peaks(spectrum, peptide: Peptide, tol_ppm: float = FRAGMENT_TOL_PPM) -> PeakAnnotations:
    """Label each peak with its nearest theoretical fragment within ``tol_ppm``.

    Ties resolve by smaller ppm error, then b before y, then no loss before
    losses, then lower charge.
    """
    frags = theoretical_ions(peptide, spectrum.charge)
    n = len(spectrum.mz)
    labels = np.full(n, NONE_LABEL, dtype=np.int64)
    counts = np.zeros(n, dtype=np.int64)
    errors = np.full(n, np.nan)
    if len(frags) == 0 or n == 0:
        return PeakAnnotations(labels, counts, errors)
    ppm = _ppm_matrix(np.asarray(spectrum.mz), frags["mz"])
    rounded = np.round(ppm, 6)
    order = np.lexsort((frags["charge"], frags["loss"], frags["series"]))
    rank = np.empty(len(frags), dtype=np.int64)
    rank[order] = np.arange(len(frags))
    for i in range(n):
        hits = np.flatnonzero(ppm[i] <= tol_ppm)
        if len(hits) == 0:
            continue
        best = hits[np.lexsort((rank[hits], rounded[i, hits]))[0]]
        f = frags[best]
        labels[i] = int(f["series"]) + 2 * int(f["loss"])
        counts[i] = int(f["index"])
        errors[i] = (spectrum.mz[i] - f["mz"]) / f["mz"] * 1e6
    return PeakAnnotations(labels, counts, errors)


def match_fragments(peak_mz: np.ndarray, frag_mz: np.ndarray, tol_ppm: float) -> np.ndarray:
    """Index of the closest peak within tolerance for each fragment, or -1."""
    out = np.full(len(frag_mz), -1, dtype=np.int64)
    if len(peak_mz) == 0 or len(frag_mz) == 0:
        return out
    pos = np.searchsorted(peak_mz, frag_mz)
    left = np.clip(pos - 1, 0, len(peak_mz) - 1)
    right = np.clip(pos, 0, len(peak_mz) - 1)
    dl = np.abs(peak_mz[left] - frag_mz)
    dr = np.abs(peak_mz[right] - frag_mz)
    nearest = np.where(dr < dl, right, left)
    err = np.minimum(dl, dr) / frag_mz * 1e6
    ok = err <= tol_ppm
    out[ok] = nearest[ok]
    return out


# --------------------------------------------------------------------------
# On-disk cache

INDEX_MAGIC = b"PUFIDX1"
_HEADER = struct.Struct("<7sQQII")
_RECORD = np.dtype(
    [("mass", "<f8"), ("pep_off", "<u4"), ("pep_len", "<u4"), ("prot_off", "<u4"),
     ("prot_len", "<u4"), ("is_decoy", "u1"), ("nterm", "u1")]
)


class IndexFormatError(ValueError):
    pass


def save_index(index: PrecursorIndex, path: str | Path) -> None:
    strtab = bytearray()

    def put(text: str) -> tuple[int, int]:
        data = text.encode("utf-8")
        off = len(strtab)
        strtab.extend(data)
        return off, len(data)

    table_off, table_len = put(index.mod_table.to_tsv())
    recs = np.zeros(len(index), dtype=_RECORD)
    for i, e in enumerate(index.entries):
        po, pl = put(f"{e.peptide.residues}|{e.peptide.mod_string()}")
        ro, rl = put("\x1f".join(e.proteins))
        recs[i] = (e.mass, po, pl, ro, rl, e.is_decoy, e.protein_nterm)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(INDEX_MAGIC, len(index), len(strtab), table_off, table_len))
        fh.write(recs.tobytes())
        fh.write(bytes(strtab))


def load_index(path: str | Path) -> PrecursorIndex:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise IndexFormatError("truncated index file")
    magic, count, strlen, table_off, table_len = _HEADER.unpack_from(raw)
    if magic != INDEX_MAGIC:
        raise IndexFormatError(f"bad magic {magic!r}")
    rec_end = _HEADER.size + count * _RECORD.itemsize
    if len(raw) != rec_end + strlen:
        raise IndexFormatError("truncated index file")
    recs = np.frombuffer(raw, dtype=_RECORD, count=count, offset=_HEADER.size)
    strtab = raw[rec_end:]
    text = lambda off, n: strtab[off : off + n].decode("utf-8")
    table = parse_modification_table(text(table_off, table_len))
    entries = []
    for r in recs:
        residues, mods = text(int(r["pep_off"]), int(r["pep_len"])).split("|", 1)
        proteins = tuple(text(int(r["prot_off"]), int(r["prot_len"])).split("\x1f"))
        pep = parse_mod_string(residues, mods, table)
        entries.append(IndexEntry(float(r["mass"]), pep, proteins, bool(r["is_decoy"]), bool(r["nterm"])))
    return PrecursorIndex(entries, table)


def fragment_coverage(spectrum, peptide: Peptide, tol_ppm: float = FRAGMENT_TOL_PPM) -> float:
    """Fraction of the ``L-1`` cleavage sites witnessed by a matched b or y ion.

    Any neutral loss and charge state counts as a witness.
    """
    L = len(peptide)
    if L < 2:
        raise ValueError("fragment coverage needs a peptide of length >= 2")
    frags = theoretical_ions(peptide, spectrum.charge)
    hit = match_fragments(np.asarray(spectrum.mz), frags["mz"], tol_ppm) >= 0
    idx = frags["index"][hit].astype(np.int64)
    sites = np.where(frags["series"][hit] == 0, idx, L - idx)
    return len(set(sites.tolist()) & set(range(1, L))) / (L - 1)
