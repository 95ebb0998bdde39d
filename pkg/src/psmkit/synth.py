"""Synthetic benchmark generator: proteins, peptides and parametric spectra."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .chem import (
    ModTable,
    Peptide,
    default_mod_table,
    digest,
    fragment_array,
    fragment_charges,
    parse_mod_string,
    peptide_neutral_mass,
)
from .constants import AMINO_ACIDS, PROTON
from .msio import ProteinEntry, Spectrum, format_fasta, format_mgf

SYNTH_MODS = ("Oxidation", "Phospho", "Acetyl", "Crotonyl", "Methyl", "Nitro")
TRUTH_COLUMNS = ("title", "peptide", "modifications", "charge", "protein")

# rough natural residue frequencies (percent)
_FREQ = dict(
    A=8.3, C=1.4, D=5.5, E=6.7, F=3.9, G=7.1, H=2.3, I=5.9, K=5.8, L=9.7,
    M=2.4, N=4.1, P=4.7, Q=3.9, R=5.5, S=6.6, T=5.3, V=6.9, W=1.1, Y=2.9,
)


@dataclass
class SynthConfig:
    """Parameters of a synthetic run.

    ``noise_peaks`` uniform noise peaks are added per spectrum, ``missing_rate``
    of fragment peaks are dropped and m/z values are jittered by a Gaussian
    of ``mz_jitter_ppm`` (clipped to twice that). ``instrument_shift`` in
    [0, 1] moves intensity from y to b ions, boosts neutral losses and adds
    a systematic 3 ppm calibration offset per unit.
    """

    n_spectra: int = 2000
    n_proteins: int = 300
    protein_length: tuple[int, int] = (150, 450)
    length_range: tuple[int, int] = (7, 16)
    missed_cleavages: int = 1
    mods: tuple[str, ...] = SYNTH_MODS
    mod_fraction: float = 0.2
    single_ptm: Optional[str] = None
    single_ptm_fraction: float = 0.3
    charges: tuple[int, ...] = (2, 2, 2, 3)
    noise_peaks: int = 0
    missing_rate: float = 0.0
    mz_jitter_ppm: float = 0.0
    instrument_shift: float = 0.0
    pure_noise: bool = False
    title_prefix: str = "synth"
    seed: int = 0


@dataclass
class SyntheticRun:
    spectra: list[Spectrum]
    truth: list[Optional[Peptide]]
    charges: list[int]
    proteins: list[ProteinEntry]
    protein_of: list[str] = field(default_factory=list)

    def mgf(self) -> str:
        return format_mgf(self.spectra)

    def fasta(self) -> str:
        return format_fasta(self.proteins)

    def truth_tsv(self) -> str:
        buf = io.StringIO()
        buf.write("\t".join(TRUTH_COLUMNS) + "\n")
        for s, p, prot in zip(self.spectra, self.truth, self.protein_of):
            if p is None:
                buf.write(f"{s.title}\tNA\t\t{s.charge}\tNA\n")
            else:
                buf.write(f"{s.title}\t{p.residues}\t{p.mod_string()}\t{s.charge}\t{prot}\n")
        return buf.getvalue()

    def write(self, out_dir: str | Path, stem: str = "synth") -> dict[str, Path]:
        out = Path(out_dir)
        paths = {
            "mgf": out / f"{stem}.mgf",
            "truth": out / f"{stem}_truth.tsv",
            "fasta": out / f"{stem}.fasta",
        }
        paths["mgf"].write_text(self.mgf())
        paths["truth"].write_text(self.truth_tsv())
        paths["fasta"].write_text(self.fasta())
        return paths


def random_proteins(n: int, length: tuple[int, int], rng: np.random.Generator, prefix: str = "SYN") -> list[ProteinEntry]:
    letters = np.array(list(AMINO_ACIDS))
    p = np.array([_FREQ[a] for a in AMINO_ACIDS])
    p = p / p.sum()
    out = []
    for i in range(n):
        L = int(rng.integers(length[0], length[1] + 1))
        seq = "M" + "".join(rng.choice(letters, size=L - 1, p=p))
        out.append(ProteinEntry(f"{prefix}{i:05d}", "synthetic protein", seq))
    return out


def _add_random_mod(pep: Peptide, table: ModTable, names: Sequence[str], rng, nterm: bool) -> Peptide:
    options = []
    for name in names:
        for rec in table.by_name[name]:
            for pos in rec.sites(pep.residues, protein_nterm=nterm):
                options.append((pos, rec))
    if not options:
        return pep
    by_name: dict[str, list] = {}
    for pos, rec in options:
        by_name.setdefault(rec.name, []).append((pos, rec))
    names_avail = sorted(by_name)
    pick = by_name[names_avail[int(rng.integers(len(names_avail)))]]
    pos, rec = pick[int(rng.integers(len(pick)))]
    return pep.with_mod(pos, rec)


def fragment_intensities(pep: Peptide, frags: np.ndarray, shift: float, rng) -> np.ndarray:
    """Position-dependent b/y intensities with residue effects and loss damping."""
    L = len(pep)
    idx = frags["index"].astype(np.float64)
    series = frags["series"]
    loss = frags["loss"]
    charge = frags["charge"]
    rel = idx / L
    y_w = (1.0 - 0.5 * shift) * np.exp(-((rel - 0.55) ** 2) / 0.08)
    b_w = (0.45 + 0.5 * shift) * np.exp(-((rel - 0.35) ** 2) / 0.06)
    base = np.where(series == 1, y_w, b_w) + 0.05
    # cleavage N-terminal to proline and C-terminal to acidic residues
    cut = np.where(series == 0, frags["index"], L - frags["index"])
    nxt = np.array([pep.residues[c] if 0 <= c < L else "" for c in cut])
    prv = np.array([pep.residues[c - 1] if 0 < c <= L else "" for c in cut])
    base = base * np.where(nxt == "P", 2.5, 1.0) * np.where(np.isin(prv, ["D", "E"]), 1.5, 1.0)
    base = base * np.where(loss > 0, 0.12 + 0.2 * shift, 1.0)
    big = idx > 0.5 * L
    base = base * np.where(charge == 2, np.where(big, 0.6, 0.2), 1.0)
    return base * rng.lognormal(0.0, 0.25, size=len(base))


def synth_spectrum(
    pep: Peptide, charge: int, title: str, cfg: SynthConfig, rng: np.random.Generator
) -> Spectrum:
    frags = fragment_array(pep, fragment_charges(charge), ("H2O", "NH3"))
    mz = frags["mz"].astype(np.float64)
    inten = fragment_intensities(pep, frags, cfg.instrument_shift, rng)
    if cfg.missing_rate > 0:
        keep = rng.random(len(mz)) >= cfg.missing_rate
        mz, inten = mz[keep], inten[keep]
    if cfg.mz_jitter_ppm > 0:
        err = np.clip(rng.normal(0, cfg.mz_jitter_ppm, len(mz)), -2 * cfg.mz_jitter_ppm, 2 * cfg.mz_jitter_ppm)
        mz = mz * (1 + err * 1e-6)
    mass = peptide_neutral_mass(pep)
    if cfg.instrument_shift:
        mz = mz * (1 + 3.0 * cfg.instrument_shift * 1e-6)
    if cfg.noise_peaks > 0:
        n = int(cfg.noise_peaks)
        mz = np.concatenate([mz, rng.uniform(100.0, max(mass, 150.0), n)])
        inten = np.concatenate([inten, rng.uniform(0.01, 0.3, n) * inten.max(initial=1.0)])
    mz = np.round(mz, 6)
    order = np.argsort(mz, kind="stable")
    mz, inten = mz[order], np.round(inten[order] * 1e4, 3)
    mz, first = np.unique(mz, return_index=True)
    inten = np.add.reduceat(inten, first) if len(mz) else inten
    keep = inten > 0
    precursor_mz = (mass + charge * PROTON) / charge
    return Spectrum(title, float(precursor_mz), charge, mz[keep], inten[keep])


def noise_spectrum(title: str, rng: np.random.Generator, mass_range=(800.0, 2400.0)) -> Spectrum:
    charge = int(rng.choice([2, 2, 3]))
    mass = float(rng.uniform(*mass_range))
    n = int(rng.integers(20, 60))
    mz = np.unique(np.round(rng.uniform(100.0, mass, n), 6))
    inten = np.round(rng.uniform(1.0, 1e4, len(mz)), 3)
    return Spectrum(title, (mass + charge * PROTON) / charge, charge, mz, inten)


def candidate_peptides(proteins: Iterable[ProteinEntry], cfg: SynthConfig) -> list[tuple[Peptide, str, bool]]:
    """Unique unmodified tryptic peptides with their first protein."""
    seen = {}
    for prot in proteins:
        for pep in digest(prot, "trypsin", cfg.missed_cleavages, cfg.length_range):
            if pep.residues not in seen:
                seen[pep.residues] = (pep, prot.accession, prot.sequence.startswith(pep.residues))
    return [seen[k] for k in sorted(seen)]


def make_synthetic(
    cfg: SynthConfig,
    proteins: Sequence[ProteinEntry] | None = None,
    exclude: Iterable[str] = (),
    table: ModTable | None = None,
) -> SyntheticRun:
    """Generate spectra, truth labels and the source proteins.

    Peptides whose residues appear in ``exclude`` are never drawn, which
    gives peptide-disjoint train/test splits over one protein set.
    """
    rng = np.random.default_rng(cfg.seed)
    table = table if table is not None else default_mod_table()
    if proteins is None:
        proteins = random_proteins(cfg.n_proteins, cfg.protein_length, np.random.default_rng(cfg.seed + 7919))
    proteins = list(proteins)
    spectra, truth, charges, origin = [], [], [], []
    if cfg.pure_noise:
        for i in range(cfg.n_spectra):
            spectra.append(noise_spectrum(f"{cfg.title_prefix}.{i}", rng))
            truth.append(None)
            charges.append(spectra[-1].charge)
            origin.append("NA")
        return SyntheticRun(spectra, truth, charges, proteins, origin)
    excluded = set(exclude)
    pool = [c for c in candidate_peptides(proteins, cfg) if c[0].residues not in excluded]
    if cfg.single_ptm:
        site_ok = [c for c in pool if any(r.sites(c[0].residues, protein_nterm=c[2]) for r in table.by_name[cfg.single_ptm])]
    if not pool:
        raise ValueError("no peptides available for synthesis")
    order = rng.permutation(len(pool))
    for i in range(cfg.n_spectra):
        pep, acc, nterm = pool[order[i % len(pool)]]
        if cfg.single_ptm:
            if rng.random() < cfg.single_ptm_fraction and site_ok:
                pep, acc, nterm = site_ok[int(rng.integers(len(site_ok)))]
                pep = _add_random_mod(pep, table, [cfg.single_ptm], rng, nterm)
        elif rng.random() < cfg.mod_fraction:
            pep = _add_random_mod(pep, table, cfg.mods, rng, nterm)
        charge = int(rng.choice(cfg.charges))
        spectra.append(synth_spectrum(pep, charge, f"{cfg.title_prefix}.{i}", cfg, rng))
        truth.append(pep)
        charges.append(charge)
        origin.append(acc)
    return SyntheticRun(spectra, truth, charges, proteins, origin)


def read_truth(path: str | Path, table: ModTable | None = None) -> dict[str, Optional[Peptide]]:
    """Map spectrum title to its true peptide (``None`` for noise spectra)."""
    table = table if table is not None else default_mod_table()
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            pep = row["peptide"]
            out[row["title"]] = None if pep in ("", "NA") else parse_mod_string(pep, row["modifications"] or "", table)
    return out
