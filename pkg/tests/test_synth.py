import numpy as np
import pytest

from psmkit.chem import Peptide, default_mod_table, peptide_neutral_mass
from psmkit.index import fragment_coverage
from psmkit.msio import parse_fasta, parse_mgf, preprocess
from psmkit.synth import SynthConfig, make_synthetic, read_truth


def test_noiseless_spectra_have_full_coverage():
    run = make_synthetic(SynthConfig(n_spectra=60, n_proteins=20, seed=3))
    for s, pep in zip(run.spectra, run.truth):
        assert fragment_coverage(preprocess(s), pep) == 1.0
        assert s.precursor_neutral_mass == pytest.approx(peptide_neutral_mass(pep), abs=1e-6)


def test_fixed_seed_gives_identical_bytes(tmp_path):
    cfg = SynthConfig(n_spectra=40, n_proteins=10, noise_peaks=5, missing_rate=0.1, mz_jitter_ppm=3, seed=11)
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a = make_synthetic(cfg).write(tmp_path / "a")
    b = make_synthetic(cfg).write(tmp_path / "b")
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes()
    other = make_synthetic(SynthConfig(n_spectra=40, n_proteins=10, seed=12))
    assert other.mgf() != make_synthetic(cfg).mgf()


def test_mod_fraction_and_types():
    cfg = SynthConfig(n_spectra=1000, n_proteins=200, seed=5)
    run = make_synthetic(cfg)
    modded = [p for p in run.truth if p.mods]
    assert 0.15 < len(modded) / len(run.truth) < 0.25
    names = {rec.name for p in modded for _, rec in p.mods}
    assert names <= set(cfg.mods)
    assert len(names) == 6


def test_single_ptm_run():
    run = make_synthetic(SynthConfig(n_spectra=300, n_proteins=50, single_ptm="Crotonyl", seed=2))
    names = {rec.name for p in run.truth for _, rec in p.mods}
    assert names == {"Crotonyl"}
    frac = sum(bool(p.mods) for p in run.truth) / len(run.truth)
    assert 0.2 < frac < 0.4


def test_exclusion_gives_disjoint_peptides():
    train = make_synthetic(SynthConfig(n_spectra=200, n_proteins=30, seed=1))
    test = make_synthetic(
        SynthConfig(n_spectra=100, seed=2), train.proteins, {p.residues for p in train.truth}
    )
    assert not {p.residues for p in train.truth} & {p.residues for p in test.truth}


def test_pure_noise_has_no_truth():
    run = make_synthetic(SynthConfig(n_spectra=30, pure_noise=True, seed=0))
    assert all(t is None for t in run.truth)
    assert "NA" in run.truth_tsv()


def test_written_files_parse_back(tmp_path):
    run = make_synthetic(SynthConfig(n_spectra=50, n_proteins=10, mod_fraction=0.5, seed=9))
    paths = run.write(tmp_path)
    spectra = parse_mgf(paths["mgf"].read_text())
    assert [s.title for s in spectra] == [s.title for s in run.spectra]
    for a, b in zip(spectra, run.spectra):
        np.testing.assert_allclose(a.mz, b.mz)
        assert a.charge == b.charge
    assert len(parse_fasta(paths["fasta"].read_text())) == 10
    truth = read_truth(paths["truth"], default_mod_table())
    assert [truth[s.title] for s in run.spectra] == run.truth


def test_instrument_shift_moves_calibration():
    pep = Peptide("PEPTIDEK")
    from psmkit.synth import synth_spectrum

    a = synth_spectrum(pep, 2, "a", SynthConfig(), np.random.default_rng(0))
    b = synth_spectrum(pep, 2, "b", SynthConfig(instrument_shift=1.0), np.random.default_rng(0))
    shift = (b.mz - a.mz) / a.mz * 1e6
    np.testing.assert_allclose(shift, 3.0, atol=0.01)
