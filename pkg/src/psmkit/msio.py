"""MGF/FASTA parsing, spectrum preprocessing and TSV reports."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from .constants import PROTON

logger = logging.getLogger(__name__)

FASTA_ALPHABET = frozenset("ACDEFGHIKLMNPQRSTVWY")

PSM_COLUMNS = (
    "title", "rank", "peptide", "modifications", "charge", "precursor_mz",
    "mass_error_ppm", "kernel_score", "neural_score", "cosine_similarity",
    "fragment_coverage", "is_decoy", "q_value",
)
DENOVO_COLUMNS = (
    "title", "peptide", "modifications", "predicted_length", "length_used",
    "neural_score", "cosine_similarity", "fragment_coverage", "high_confidence",
)
REPORT_COLUMNS = {"psm": PSM_COLUMNS, "denovo": DENOVO_COLUMNS}


class ParseError(ValueError):
    """Malformed MGF or FASTA input; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _frozen(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Spectrum:
    title: str
    precursor_mz: float
    charge: int
    mz: np.ndarray
    intensity: np.ndarray
    retention_time_sec: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "mz", _frozen(self.mz))
        object.__setattr__(self, "intensity", _frozen(self.intensity))
        if self.charge < 1:
            raise ValueError(f"{self.title}: charge must be >= 1")
        if not self.precursor_mz > 0:
            raise ValueError(f"{self.title}: precursor m/z must be positive")
        if len(self.mz) != len(self.intensity):
            raise ValueError(f"{self.title}: m/z and intensity lengths differ")
        if np.any(self.intensity < 0):
            raise ValueError(f"{self.title}: negative intensity")

    @property
    def peaks(self) -> list[tuple[float, float]]:
        return list(zip(self.mz.tolist(), self.intensity.tolist()))

    @property
    def precursor_neutral_mass(self) -> float:
        return self.precursor_mz * self.charge - self.charge * PROTON


@dataclass(frozen=True, eq=False)
class ProcessedSpectrum:
    """Top-N peaks with transformed intensities scaled to a maximum of 1."""

    source: Spectrum
    mz: np.ndarray
    intensity: np.ndarray
    precursor_neutral_mass: float
    n_max: int = 256
    intensity_transform: str = "sqrt"

    def __post_init__(self):
        object.__setattr__(self, "mz", _frozen(self.mz))
        object.__setattr__(self, "intensity", _frozen(self.intensity))

    @property
    def title(self) -> str:
        return self.source.title

    @property
    def charge(self) -> int:
        return self.source.charge

    @property
    def precursor_mz(self) -> float:
        return self.source.precursor_mz

    @property
    def peaks(self) -> list[tuple[float, float]]:
        return list(zip(self.mz.tolist(), self.intensity.tolist()))

    def __len__(self) -> int:
        return len(self.mz)


@dataclass(frozen=True)
class ProteinEntry:
    accession: str
    description: str
    sequence: str

    def __post_init__(self):
        if not self.sequence:
            raise ValueError(f"{self.accession}: empty sequence")
        if any(c.isspace() for c in self.sequence):
            raise ValueError(f"{self.accession}: whitespace in sequence")


# --------------------------------------------------------------------------
# MGF


def _as_text(data: Union[bytes, str]) -> str:
    return data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data


def _parse_charge(value: str, lineno: int) -> int:
    text = value.strip().split()[0].split(",")[0].strip()
    sign = 1
    if text.endswith("+"):
        text = text[:-1]
    elif text.endswith("-"):
        text, sign = text[:-1], -1
    try:
        z = int(text) * sign
    except ValueError:
        raise ParseError(f"bad CHARGE {value!r}", lineno) from None
    if z < 1:
        raise ParseError(f"unsupported charge {value!r}", lineno)
    return z


def _merge_peaks(mz: list[float], inten: list[float]) -> tuple[np.ndarray, np.ndarray]:
    mz_arr = np.asarray(mz, dtype=np.float64)
    in_arr = np.asarray(inten, dtype=np.float64)
    keep = in_arr > 0
    mz_arr, in_arr = mz_arr[keep], in_arr[keep]
    uniq, inverse = np.unique(mz_arr, return_inverse=True)
    summed = np.zeros(len(uniq))
    np.add.at(summed, inverse, in_arr)
    return uniq, summed


def parse_mgf(data: Union[bytes, str], stats: dict | None = None) -> list[Spectrum]:
    """Parse MGF text into spectra.

    Records without any positive-intensity peak are skipped and counted in
    ``stats["skipped_empty"]`` when a dict is supplied.
    """
    text = _as_text(data)
    spectra: list[Spectrum] = []
    skipped = 0
    in_record = False
    start = 0
    headers: dict[str, tuple[str, int]] = {}
    mz: list[float] = []
    inten: list[float] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;!/":
            continue
        if line == "BEGIN IONS":
            if in_record:
                raise ParseError("BEGIN IONS inside an open record", lineno)
            in_record, start = True, lineno
            headers, mz, inten = {}, [], []
            continue
        if not in_record:
            if "=" in line:
                continue  # global parameters
            raise ParseError(f"unexpected content outside a record: {line!r}", lineno)
        if line == "END IONS":
            in_record = False
            if not mz or not any(i > 0 for i in inten):
                skipped += 1
                continue
            spectra.append(_build_spectrum(headers, mz, inten, start))
            continue
        if line[0].isdigit():
            parts = line.replace("\t", " ").split()
            try:
                mz.append(float(parts[0]))
                inten.append(float(parts[1]) if len(parts) > 1 else 0.0)
            except (ValueError, IndexError):
                raise ParseError(f"bad peak line {line!r}", lineno) from None
            if inten[-1] < 0 or not math.isfinite(inten[-1]) or not math.isfinite(mz[-1]):
                raise ParseError(f"bad peak line {line!r}", lineno)
            continue
        if "=" not in line:
            raise ParseError(f"malformed header line {line!r}", lineno)
        key, value = line.split("=", 1)
        headers[key.strip().upper()] = (value.strip(), lineno)
    if in_record:
        raise ParseError(f"record starting at line {start} is not terminated")
    if skipped:
        logger.warning("skipped %d MGF record(s) without peaks", skipped)
    if stats is not None:
        stats["skipped_empty"] = stats.get("skipped_empty", 0) + skipped
    return spectra


def _build_spectrum(headers, mz, inten, start) -> Spectrum:
    if "PEPMASS" not in headers:
        raise ParseError("record without PEPMASS", start)
    if "CHARGE" not in headers:
        raise ParseError("record without CHARGE", start)
    value, lineno = headers["PEPMASS"]
    try:
        precursor_mz = float(value.split()[0])
    except (ValueError, IndexError):
        raise ParseError(f"bad PEPMASS {value!r}", lineno) from None
    charge = _parse_charge(*headers["CHARGE"])
    rt = None
    if "RTINSECONDS" in headers:
        value, lineno = headers["RTINSECONDS"]
        try:
            rt = float(value)
        except ValueError:
            raise ParseError(f"bad RTINSECONDS {value!r}", lineno) from None
    title = headers.get("TITLE", (f"record_{start}", start))[0]
    mz_arr, in_arr = _merge_peaks(mz, inten)
    try:
        return Spectrum(title, precursor_mz, charge, mz_arr, in_arr, rt)
    except ValueError as exc:
        raise ParseError(str(exc), start) from None


def read_mgf(path: str | Path, stats: dict | None = None) -> list[Spectrum]:
    return parse_mgf(Path(path).read_bytes(), stats)


def format_mgf(spectra: Iterable[Spectrum]) -> str:
    out = io.StringIO()
    for s in spectra:
        out.write("BEGIN IONS\n")
        out.write(f"TITLE={s.title}\n")
        out.write(f"PEPMASS={s.precursor_mz!r}\n")
        out.write(f"CHARGE={s.charge}+\n")
        if s.retention_time_sec is not None:
            out.write(f"RTINSECONDS={s.retention_time_sec!r}\n")
        for m, i in zip(s.mz.tolist(), s.intensity.tolist()):
            out.write(f"{m!r} {i!r}\n")
        out.write("END IONS\n\n")
    return out.getvalue()


def write_mgf(spectra: Iterable[Spectrum], path: str | Path) -> None:
    Path(path).write_text(format_mgf(spectra))


def preprocess(
    spectrum: Union[Spectrum, ProcessedSpectrum],
    n_max: int = 256,
    intensity_transform: str = "sqrt",
) -> ProcessedSpectrum:
    """Keep the ``n_max`` most intense peaks and scale intensities to max 1."""
    if intensity_transform not in ("sqrt", "linear"):
        raise ValueError(f"unknown intensity transform {intensity_transform!r}")
    if isinstance(spectrum, ProcessedSpectrum):
        if spectrum.intensity_transform == intensity_transform and len(spectrum) <= n_max:
            return spectrum
        spectrum = spectrum.source
    mz, inten = spectrum.mz, spectrum.intensity
    if len(mz) > n_max:
        order = np.lexsort((mz, -inten))[:n_max]
        order.sort()
        mz, inten = mz[order], inten[order]
    if intensity_transform == "sqrt":
        inten = np.sqrt(inten)
    if len(inten):
        inten = inten / inten.max()
    return ProcessedSpectrum(
        spectrum, mz, inten, spectrum.precursor_neutral_mass, n_max, intensity_transform
    )


# --------------------------------------------------------------------------
# FASTA


def parse_fasta(data: Union[bytes, str], stats: dict | None = None) -> list[ProteinEntry]:
    """Parse FASTA text; residues outside the 20-letter alphabet become ``X``."""
    text = _as_text(data)
    entries: list[ProteinEntry] = []
    header: str | None = None
    chunks: list[str] = []
    mapped = 0

    def flush():
        nonlocal mapped
        if header is None:
            return
        seq = "".join(chunks).upper()
        clean = "".join(c if c in FASTA_ALPHABET else "X" for c in seq)
        mapped += sum(1 for a, b in zip(seq, clean) if a != b and a != "X")
        parts = header.split(None, 1)
        accession = parts[0] if parts else ""
        description = parts[1] if len(parts) > 1 else ""
        if not clean:
            logger.warning("FASTA entry %s has no sequence; skipped", accession)
            return
        entries.append(ProteinEntry(accession, description, clean))

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(">"):
            flush()
            header, chunks = line[1:].strip(), []
        elif header is None:
            raise ParseError("sequence data before the first header", lineno)
        else:
            chunks.append("".join(line.split()))
    flush()
    if mapped:
        logger.warning("mapped %d non-standard residue(s) to X", mapped)
    if stats is not None:
        stats["mapped_to_x"] = stats.get("mapped_to_x", 0) + mapped
    return entries


def read_fasta(path: str | Path, stats: dict | None = None) -> list[ProteinEntry]:
    return parse_fasta(Path(path).read_bytes(), stats)


def format_fasta(entries: Iterable[ProteinEntry], width: int = 60) -> str:
    out = io.StringIO()
    for e in entries:
        head = f"{e.accession} {e.description}".rstrip()
        out.write(f">{head}\n")
        for i in range(0, len(e.sequence), width):
            out.write(e.sequence[i : i + width] + "\n")
    return out.getvalue()


def write_fasta(entries: Iterable[ProteinEntry], path: str | Path, width: int = 60) -> None:
    Path(path).write_text(format_fasta(entries, width))


# --------------------------------------------------------------------------
# Reports


def _cell(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6f}"
    return str(value)


def _record_row(record, columns) -> list[str]:
    row = []
    for col in columns:
        if col == "peptide":
            row.append(record.peptide.residues)
        elif col == "modifications":
            row.append(record.peptide.mod_string())
        elif col == "title":
            row.append(record.spectrum_title)
        else:
            row.append(_cell(getattr(record, col)))
    return row


def format_report(records: Iterable, kind: str) -> str:
    try:
        columns = REPORT_COLUMNS[kind]
    except KeyError:
        raise ValueError(f"unknown report kind {kind!r}") from None
    ordered = sorted(records, key=lambda r: (r.spectrum_title, getattr(r, "rank", 0)))
    out = io.StringIO()
    out.write("\t".join(columns) + "\n")
    for rec in ordered:
        out.write("\t".join(_record_row(rec, columns)) + "\n")
    return out.getvalue()


def write_report(records: Iterable, kind: str, path: str | Path) -> None:
    """Write a PSM or de novo TSV report, sorted by title then rank."""
    Path(path).write_text(format_report(records, kind))


def read_table(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))
