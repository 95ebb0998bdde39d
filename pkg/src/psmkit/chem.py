"""Peptide chemistry: masses, modifications, digestion, decoys and fragments."""

from __future__ import annotations

import csv
import io
import itertools
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Union

import numpy as np

from .constants import (
    AMINO_ACIDS,
    DEFAULT_FIXED_MODS,
    H2O,
    H2O_LOSS_RESIDUES,
    NH3,
    NH3_LOSS_RESIDUES,
    PROTON,
    RESIDUE_MASSES,
)

logger = logging.getLogger(__name__)

N_TERM = "N"
C_TERM = "C"
Position = Union[int, str]

TERMINAL_RULES = ("AnyN-term", "ProteinN-term", "AnyC-term", "ProteinC-term")
LOSSES = ("none", "H2O", "NH3")
ION_LABELS = ("b", "y", "b-H2O", "y-H2O", "b-NH3", "y-NH3")
ENZYMES = ("trypsin", "nonspecific")


class ChemistryError(ValueError):
    """Raised for invalid residues, peptides or modification tables."""


def residue_mass(aa: str) -> float:
    """Monoisotopic residue mass of a single amino acid letter."""
    try:
        return RESIDUE_MASSES[aa]
    except KeyError:
        raise ChemistryError(f"unknown residue {aa!r}") from None


@dataclass(frozen=True)
class ModificationRecord:
    """A named mass delta with the site it may occupy.

    ``site_rule`` is a residue letter or one of the terminal rules. Terminal
    records may additionally be restricted to a residue via ``residue``.
    """

    name: str
    site_rule: str
    delta_mass: float
    token_id: int = 0
    residue: str | None = None

    @property
    def terminus(self) -> str | None:
        if self.site_rule.endswith("N-term"):
            return N_TERM
        if self.site_rule.endswith("C-term"):
            return C_TERM
        return None

    @property
    def label(self) -> str:
        if self.terminus is None:
            return f"{self.name}[{self.site_rule}]"
        if self.residue:
            return f"{self.name}[{self.site_rule}{self.residue}]"
        return f"{self.name}[{self.site_rule}]"

    def allows(
        self,
        residues: str,
        position: Position,
        protein_nterm: bool = True,
        protein_cterm: bool = True,
    ) -> bool:
        """Whether this record may sit at ``position`` of ``residues``."""
        term = self.terminus
        if term is None:
            return (
                isinstance(position, int)
                and 0 <= position < len(residues)
                and residues[position] == self.site_rule
            )
        if position != term:
            return False
        if self.site_rule == "ProteinN-term" and not protein_nterm:
            return False
        if self.site_rule == "ProteinC-term" and not protein_cterm:
            return False
        if self.residue:
            aa = residues[0] if term == N_TERM else residues[-1]
            return aa == self.residue
        return True

    def sites(
        self, residues: str, protein_nterm: bool = True, protein_cterm: bool = True
    ) -> list[Position]:
        """Every legal position of this record on ``residues``."""
        if self.terminus is None:
            return [i for i, aa in enumerate(residues) if aa == self.site_rule]
        pos = self.terminus
        if self.allows(residues, pos, protein_nterm, protein_cterm):
            return [pos]
        return []


def _position_order(position: Position, length: int) -> int:
    if position == N_TERM:
        return -1
    if position == C_TERM:
        return length
    return int(position)


@dataclass(frozen=True)
class Peptide:
    """A residue sequence with positioned modifications.

    Positions are 0-based residue indices or the ``N``/``C`` terminus markers.
    Fixed modifications are not listed; they are applied by the mass functions.
    """

    residues: str
    mods: tuple[tuple[Position, ModificationRecord], ...] = field(default=())

    def __post_init__(self):
        mods = tuple(
            sorted(self.mods, key=lambda m: (_position_order(m[0], len(self.residues)), m[1].name))
        )
        object.__setattr__(self, "mods", mods)
        seen = set()
        for pos, rec in mods:
            if pos in seen:
                raise ChemistryError(f"two modifications at position {pos} of {self.residues}")
            seen.add(pos)
            if not rec.allows(self.residues, pos):
                raise ChemistryError(f"{rec.label} not allowed at {pos} of {self.residues}")

    def __len__(self) -> int:
        return len(self.residues)

    def __str__(self) -> str:
        nterm = "".join(f"[{r.name}]-" for p, r in self.mods if p == N_TERM)
        cterm = "".join(f"-[{r.name}]" for p, r in self.mods if p == C_TERM)
        at = {p: r for p, r in self.mods if isinstance(p, int)}
        body = "".join(aa + (f"[{at[i].name}]" if i in at else "") for i, aa in enumerate(self.residues))
        return nterm + body + cterm

    @property
    def key(self) -> tuple:
        return (self.residues, tuple((p, r.name, r.site_rule) for p, r in self.mods))

    @property
    def has_mods(self) -> bool:
        return bool(self.mods)

    def with_mod(self, position: Position, record: ModificationRecord) -> "Peptide":
        return Peptide(self.residues, self.mods + ((position, record),))

    def stripped(self) -> "Peptide":
        return Peptide(self.residues)

    def mod_string(self) -> str:
        """pFind-style ``pos,Name[Site];`` list; 0 is N-term, L+1 is C-term."""
        out = []
        for pos, rec in self.mods:
            if pos == N_TERM:
                idx = 0
            elif pos == C_TERM:
                idx = len(self.residues) + 1
            else:
                idx = pos + 1
            out.append(f"{idx},{rec.label};")
        return "".join(out)


def position_masses(p: Peptide, fixed_mods: Mapping[str, float] = DEFAULT_FIXED_MODS) -> np.ndarray:
    """Per-residue masses with fixed, residue and terminal mods folded in."""
    masses = np.array(
        [residue_mass(aa) + fixed_mods.get(aa, 0.0) for aa in p.residues], dtype=np.float64
    )
    for pos, rec in p.mods:
        if pos == N_TERM:
            masses[0] += rec.delta_mass
        elif pos == C_TERM:
            masses[-1] += rec.delta_mass
        else:
            masses[pos] += rec.delta_mass
    return masses


def peptide_neutral_mass(p: Peptide, fixed_mods: Mapping[str, float] = DEFAULT_FIXED_MODS) -> float:
    total = sum(residue_mass(aa) + fixed_mods.get(aa, 0.0) for aa in p.residues)
    total += sum(rec.delta_mass for _, rec in p.mods)
    return total + H2O


def mz_from_neutral(mass: float, charge: int) -> float:
    return (mass + charge * PROTON) / charge


# --------------------------------------------------------------------------
# Modification tables


class ModTable:
    """Modification records indexed by delta mass and by name.

    Token ids are assigned by first appearance of each name, so records that
    share a name share a token regardless of site.
    """

    def __init__(self, records: Iterable[ModificationRecord] = ()):
        token_ids: dict[str, int] = {}
        recs = []
        for rec in records:
            tid = token_ids.setdefault(rec.name, len(token_ids))
            recs.append(
                ModificationRecord(rec.name, rec.site_rule, rec.delta_mass, tid, rec.residue)
            )
        self.token_names: tuple[str, ...] = tuple(token_ids)
        self.records: tuple[ModificationRecord, ...] = tuple(
            sorted(recs, key=lambda r: (r.delta_mass, r.name, r.site_rule))
        )
        self.deltas = np.array([r.delta_mass for r in self.records], dtype=np.float64)
        self.by_name: dict[str, list[ModificationRecord]] = {}
        self.by_label: dict[str, ModificationRecord] = {}
        for rec in self.records:
            self.by_name.setdefault(rec.name, []).append(rec)
            self.by_label[rec.label] = rec

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ModificationRecord]:
        return iter(self.records)

    def __repr__(self) -> str:
        return f"ModTable({len(self.records)} records, {len(self.token_names)} tokens)"

    def subset(self, names: Iterable[str]) -> "ModTable":
        wanted = set(names)
        missing = wanted - set(self.by_name)
        if missing:
            raise ChemistryError(f"unknown modification(s): {', '.join(sorted(missing))}")
        return ModTable(r for r in self._appearance_order() if r.name in wanted)

    def _appearance_order(self) -> list[ModificationRecord]:
        return sorted(self.records, key=lambda r: (r.token_id, r.delta_mass, r.site_rule))

    def to_tsv(self) -> str:
        buf = io.StringIO()
        buf.write("name\tsite\tposition\tdelta_mass\n")
        for rec in self._appearance_order():
            if rec.terminus is None:
                site, position = rec.site_rule, "Anywhere"
            else:
                site = rec.residue or f"{rec.terminus}-term"
                position = rec.site_rule
            buf.write(f"{rec.name}\t{site}\t{position}\t{rec.delta_mass:.6f}\n")
        return buf.getvalue()


def parse_modification_table(text: str) -> ModTable:
    """Parse a ``name, site, position, delta_mass`` TSV."""
    reader = csv.DictReader(io.StringIO(text), delimiter="\t")
    required = {"name", "site", "position", "delta_mass"}
    if reader.fieldnames is None:
        return ModTable()
    if not required <= set(reader.fieldnames):
        raise ChemistryError(f"modification table needs columns {sorted(required)}")
    records = []
    seen = set()
    for lineno, row in enumerate(reader, start=2):
        name, site, position = row["name"].strip(), row["site"].strip(), row["position"].strip()
        try:
            delta = float(row["delta_mass"])
        except (TypeError, ValueError):
            raise ChemistryError(f"line {lineno}: non-numeric delta_mass {row['delta_mass']!r}") from None
        if not np.isfinite(delta) or abs(delta) >= 1000:
            raise ChemistryError(f"line {lineno}: delta_mass {delta} out of range")
        if (name, site, position) in seen:
            raise ChemistryError(f"line {lineno}: duplicate row {name} {site} {position}")
        seen.add((name, site, position))
        if position == "Anywhere":
            if site not in RESIDUE_MASSES:
                raise ChemistryError(f"line {lineno}: bad site {site!r}")
            records.append(ModificationRecord(name, site, delta))
        elif position in TERMINAL_RULES:
            residue = site if site in RESIDUE_MASSES else None
            records.append(ModificationRecord(name, position, delta, residue=residue))
        else:
            raise ChemistryError(f"line {lineno}: bad position {position!r}")
    return ModTable(records)


def load_modification_table(path: str | Path) -> ModTable:
    return parse_modification_table(Path(path).read_text())


def default_mod_table() -> ModTable:
    """The bundled UniMod-derived modification subset."""
    text = resources.files("psmkit.data").joinpath("modifications.tsv").read_text()
    return parse_modification_table(text)


def expand_variable_mods(
    p: Peptide,
    mods: ModTable,
    max_mods: int = 1,
    protein_nterm: bool = True,
) -> list[Peptide]:
    """``p`` plus every variant carrying up to ``max_mods`` extra modifications."""
    sites: list[tuple[Position, ModificationRecord]] = []
    for rec in mods:
        for pos in rec.sites(p.residues, protein_nterm=protein_nterm):
            sites.append((pos, rec))
    taken = {pos for pos, _ in p.mods}
    out = [p]
    for n in range(1, max_mods + 1):
        for combo in itertools.combinations(sites, n):
            positions = [pos for pos, _ in combo]
            if len(set(positions)) < n or taken & set(positions):
                continue
            out.append(Peptide(p.residues, p.mods + combo))
    return out


# --------------------------------------------------------------------------
# Digestion and decoys


def _tryptic_sites(seq: str) -> list[int]:
    """Cleavage boundaries (exclusive end indices), always including len(seq)."""
    cuts = [
        i + 1
        for i, aa in enumerate(seq[:-1])
        if aa in "KR" and seq[i + 1] != "P"
    ]
    return cuts + [len(seq)]


def digest_spans(
    sequence: str, enzyme: str = "trypsin", missed: int = 2, len_range: tuple[int, int] = (6, 45)
) -> list[tuple[int, int]]:
    """(start, end) spans of digestion products, ordered by start then length."""
    lo, hi = len_range
    if enzyme in ("nonspecific", "non-specific"):
        spans = [
            (i, j)
            for i in range(len(sequence))
            for j in range(i + lo, min(i + hi, len(sequence)) + 1)
        ]
    elif enzyme == "trypsin":
        if not 0 <= missed <= 3:
            raise ChemistryError("missed cleavages must be within 0..3")
        bounds = [0] + _tryptic_sites(sequence)
        spans = []
        for a in range(len(bounds) - 1):
            for b in range(a + 1, min(a + missed + 2, len(bounds))):
                start, end = bounds[a], bounds[b]
                if lo <= end - start <= hi:
                    spans.append((start, end))
    else:
        raise ChemistryError(f"unknown enzyme {enzyme!r}")
    return sorted(spans, key=lambda s: (s[0], s[1] - s[0]))


def digest(
    entry, enzyme: str = "trypsin", missed: int = 2, len_range: tuple[int, int] = (6, 45)
) -> list[Peptide]:
    """Digest a protein; products containing ``X`` are dropped."""
    seq = entry.sequence
    seen = set()
    out = []
    for start, end in digest_spans(seq, enzyme, missed, len_range):
        pep = seq[start:end]
        if "X" in pep or pep in seen:
            continue
        seen.add(pep)
        out.append(Peptide(pep))
    return out


def _reverse_tryptic_body(body: str, after_cleavage: bool) -> str:
    # K/R inside a segment body are always followed by P; keep those pairs
    # together so no new cleavage sites appear.
    units = []
    i = 0
    while i < len(body):
        if body[i] in "KR" and i + 1 < len(body) and body[i + 1] == "P":
            units.append(body[i : i + 2])
            i += 2
        else:
            units.append(body[i])
            i += 1
    units.reverse()
    if after_cleavage and units and units[0] == "P":
        j = next((k for k, u in enumerate(units) if u != "P"), None)
        if j is not None:
            units.insert(0, units.pop(j))
    return "".join(units)


def generate_decoy(entry, mode: str = "tryptic_reverse"):
    """Reversed decoy of a protein entry, accession prefixed ``DECOY_``."""
    from .msio import ProteinEntry

    seq = entry.sequence
    if mode == "full_reverse":
        decoy = seq[::-1]
    elif mode == "tryptic_reverse":
        cuts = [0] + _tryptic_sites(seq)
        parts = []
        for a, b in zip(cuts[:-1], cuts[1:]):
            seg = seq[a:b]
            if seg[-1] in "KR":
                parts.append(_reverse_tryptic_body(seg[:-1], a > 0) + seg[-1])
            else:
                parts.append(_reverse_tryptic_body(seg, a > 0))
        decoy = "".join(parts)
    else:
        raise ChemistryError(f"unknown decoy mode {mode!r}")
    return ProteinEntry("DECOY_" + entry.accession, entry.description, decoy)


# --------------------------------------------------------------------------
# Fragments


@dataclass(frozen=True)
class TheoreticalFragment:
    ion_series: str
    index: int
    loss: str
    charge: int
    mz: float
    aa_count: int

    @property
    def label(self) -> str:
        return self.ion_series if self.loss == "none" else f"{self.ion_series}-{self.loss}"


FRAGMENT_DTYPE = np.dtype(
    [
        ("series", np.int8),  # 0 = b, 1 = y
        ("index", np.int16),
        ("loss", np.int8),  # 0 none, 1 H2O, 2 NH3
        ("charge", np.int8),
        ("mz", np.float64),
    ]
)

_LOSS_MASS = (0.0, H2O, NH3)


def fragment_array(
    p: Peptide,
    max_charge: int = 1,
    losses: Iterable[str] = (),
    fixed_mods: Mapping[str, float] = DEFAULT_FIXED_MODS,
) -> np.ndarray:
    """Structured array of theoretical b/y fragments in canonical order."""
    losses = set(losses)
    masses = position_masses(p, fixed_mods)
    n = len(masses)
    if n < 2:
        return np.zeros(0, dtype=FRAGMENT_DTYPE)
    prefix = np.cumsum(masses)[:-1]
    suffix = np.cumsum(masses[::-1])[:-1] + H2O
    seq = p.residues
    rows = []
    for series, neutral in ((0, prefix), (1, suffix)):
        for i in range(1, n):
            frag = seq[:i] if series == 0 else seq[n - i :]
            for loss_id, loss in enumerate(LOSSES):
                if loss == "H2O" and ("H2O" not in losses or not H2O_LOSS_RESIDUES.intersection(frag)):
                    continue
                if loss == "NH3" and ("NH3" not in losses or not NH3_LOSS_RESIDUES.intersection(frag)):
                    continue
                m = neutral[i - 1] - _LOSS_MASS[loss_id]
                for z in range(1, max_charge + 1):
                    rows.append((series, i, loss_id, z, (m + z * PROTON) / z))
    return np.array(rows, dtype=FRAGMENT_DTYPE)


def generate_fragments(
    p: Peptide,
    max_charge: int = 1,
    losses: Iterable[str] = (),
    fixed_mods: Mapping[str, float] = DEFAULT_FIXED_MODS,
) -> list[TheoreticalFragment]:
    arr = fragment_array(p, max_charge, losses, fixed_mods)
    return [
        TheoreticalFragment(
            "by"[int(r["series"])], int(r["index"]), LOSSES[int(r["loss"])], int(r["charge"]),
            float(r["mz"]), int(r["index"]),
        )
        for r in arr
    ]


def fragment_charges(precursor_charge: int) -> int:
    """Highest fragment charge considered for a precursor charge state."""
    return max(1, min(2, precursor_charge - 1))


def parse_mod_string(residues: str, text: str, table: ModTable) -> Peptide:
    """Inverse of :meth:`Peptide.mod_string`."""
    mods = []
    for item in filter(None, (s.strip() for s in text.split(";"))):
        idx_text, label = item.split(",", 1)
        idx = int(idx_text)
        try:
            rec = table.by_label[label]
        except KeyError:
            raise ChemistryError(f"modification {label!r} not in table") from None
        if idx == 0:
            pos: Position = N_TERM
        elif idx == len(residues) + 1:
            pos = C_TERM
        else:
            pos = idx - 1
        mods.append((pos, rec))
    return Peptide(residues, tuple(mods))


__all__ = [
    "AMINO_ACIDS",
    "C_TERM",
    "ChemistryError",
    "ION_LABELS",
    "ModTable",
    "ModificationRecord",
    "N_TERM",
    "Peptide",
    "TheoreticalFragment",
    "default_mod_table",
    "digest",
    "expand_variable_mods",
    "fragment_array",
    "fragment_charges",
    "generate_decoy",
    "generate_fragments",
    "load_modification_table",
    "parse_mod_string",
    "parse_modification_table",
    "peptide_neutral_mass",
    "position_masses",
    "residue_mass",
]
