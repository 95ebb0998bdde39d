import math

import numpy as np
import pytest

from conftest import clean_spectrum, mod
from psmkit.chem import Peptide, fragment_array, peptide_neutral_mass
from psmkit.denovo import (
    DenovoConfig,
    DenovoPool,
    DenovoRecord,
    FilterConfig,
    denovo_pools,
    denovo_spectrum,
    enriched_denovo,
    qc_filter,
    rank_modifications,
    regular_denovo,
    shuffled_null_threshold,
)
from psmkit.index import fragment_coverage
from psmkit.model import ModelConfig, PsmModel
from psmkit.msio import Spectrum, preprocess


def ion_spectrum(pep, ions):
    """Spectrum holding only the named singly charged ``(series, index)`` ions."""
    frags = fragment_array(pep, 1)
    mz = []
    for series, i in ions:
        sel = (frags["series"] == {"b": 0, "y": 1}[series]) & (frags["index"] == i) & (frags["loss"] == 0)
        mz.append(frags["mz"][sel][0])
    mz = np.sort(np.array(mz))
    mass = peptide_neutral_mass(pep)
    return preprocess(Spectrum("t", (mass + 2 * 1.007276466) / 2, 2, mz, np.ones(len(mz))))


# --------------------------------------------------------------------------
# coverage


def test_coverage_examples():
    pep = Peptide("GAK")
    assert fragment_coverage(ion_spectrum(pep, [("b", 1)]), pep) == 0.5
    assert fragment_coverage(ion_spectrum(pep, [("b", 1), ("y", 1)]), pep) == 1.0
    # y2 witnesses the same site as b1
    assert fragment_coverage(ion_spectrum(pep, [("b", 1), ("y", 2)]), pep) == 0.5
    long = Peptide("PEPTIDEK")
    assert fragment_coverage(ion_spectrum(long, [("b", 2), ("y", 3)]), long) == pytest.approx(2 / 7)
    assert fragment_coverage(clean_spectrum(long), long) == 1.0


def test_coverage_needs_two_residues():
    with pytest.raises(ValueError):
        fragment_coverage(clean_spectrum(Peptide("GAK")), Peptide("G"))


# --------------------------------------------------------------------------
# QC filter


def record(title, score, cos, cov):
    return DenovoRecord(title, Peptide("GAK"), 3, 3, score, cos, cov, cov == 1.0)


def test_qc_filter_conjunction():
    recs = [
        record("a", 5.0, 0.9, 1.0),
        record("b", 5.0, 0.6, 1.0),
        record("c", 1.0, 0.9, 1.0),
        record("d", 5.0, 0.8, 0.5),
    ]
    kept, hc = qc_filter(recs, FilterConfig(min_neural_score=2.0, min_cosine=0.7))
    assert [r.spectrum_title for r in kept] == ["a", "d"]
    assert [r.spectrum_title for r in hc] == ["a"]
    kept, _ = qc_filter(recs, FilterConfig(min_neural_score=2.0, require_full_coverage=True))
    assert [r.spectrum_title for r in kept] == ["a"]
    # the retention-time test only applies when errors are supplied
    cfg = FilterConfig(min_cosine=0.0, max_rt_error=1.0)
    assert len(qc_filter(recs, cfg)[0]) == 4
    kept, _ = qc_filter(recs, cfg, {"a": 0.5, "b": 3.0, "c": -0.2})
    assert [r.spectrum_title for r in kept] == ["a", "c"]


def test_qc_filter_threshold_validation():
    with pytest.raises(ValueError):
        FilterConfig(min_cosine=math.nan)
    with pytest.raises(ValueError):
        FilterConfig(min_neural_score=math.inf)


def test_qc_filter_empty():
    assert qc_filter([]) == ([], [])


# --------------------------------------------------------------------------
# decoding pipelines with an untrained model


@pytest.fixture(scope="module")
def model(small_table):
    cfg = ModelConfig(d_model=16, n_heads=2, d_ff=32, l_max=20, mod_table_tsv=small_table.to_tsv())
    return PsmModel(cfg)


@pytest.fixture
def spectra(small_table, monkeypatch):
    ox = mod(small_table, "Oxidation[M]")
    peps = [Peptide("GALSTYK"), Peptide("PEPTMDEK", ((4, ox),)), Peptide("AVLLKR")]
    out = [clean_spectrum(p, title=f"s{i}") for i, p in enumerate(peps)]
    # an untrained length head is arbitrary; pin it so decoding has work to do
    lengths = {s.title: len(p) for s, p in zip(out, peps)}
    import psmkit.denovo as dn

    monkeypatch.setattr(dn, "predict_length", lambda s, m, rs=None: lengths[s.title])
    return out


def test_pool_respects_constraints(model, spectra):
    cfg = DenovoConfig(beam=4)
    pools = [denovo_spectrum(s, model, cfg) for s in spectra]
    assert all(pool.candidates for pool in pools)
    for s, pool in zip(spectra, pools):
        scores = [sc for _, sc, _ in pool.candidates]
        assert scores == sorted(scores, reverse=True)
        mass = s.precursor_neutral_mass
        for pep, _, L in pool.candidates:
            assert len(pep) == L
            assert abs(L - pool.predicted_length) <= cfg.length_window
            assert abs(peptide_neutral_mass(pep) - mass) <= mass * cfg.precursor_tol_ppm * 1e-6


def test_regular_denovo_records(model, spectra):
    cfg = DenovoConfig(beam=4)
    pools = denovo_pools(spectra, model, cfg)
    recs = regular_denovo(spectra, model, cfg, pools)
    assert len(recs) == sum(1 for p in pools if p.candidates)
    for r, pool in zip(recs, [p for p in pools if p.candidates]):
        assert r.peptide == pool.candidates[0][0]
        assert r.high_confidence == (r.fragment_coverage == 1.0)
        assert -1.0 <= r.cosine_similarity <= 1.0


def test_rank_modifications_counts_candidates(small_table):
    ox, ph = mod(small_table, "Oxidation[M]"), mod(small_table, "Phospho[S]")
    pool = DenovoPool(None, 5, [
        (Peptide("MSK", ((0, ox), (1, ph))), 1.0, 3),
        (Peptide("MGK", ((0, ox),)), 0.5, 3),
        (Peptide("GGK"), 0.1, 3),
    ])
    assert rank_modifications([pool]) == [("Oxidation", 2), ("Phospho", 1)]
    assert rank_modifications([]) == []


def test_enriched_denovo(model, spectra, small_table):
    cfg = DenovoConfig(beam=4)
    pools = denovo_pools(spectra, model, cfg)
    res = enriched_denovo(spectra, model, ["Acetyl"], cfg, pools, small_table)
    assert "Acetyl" in res.variable_mods
    assert len(res.variable_mods) <= cfg.top_mods + 1
    seqs = {e.sequence for e in res.fasta}
    for r in res.records:
        assert r.peptide.residues in seqs
        assert abs(len(r.peptide) - r.predicted_length) <= cfg.length_window
    with pytest.raises(ValueError, match="unknown user"):
        enriched_denovo(spectra, model, ["Nitro"], cfg, pools, small_table)
    empty = [DenovoPool(s, 7, []) for s in spectra]
    with pytest.raises(ValueError, match="nothing to compile"):
        enriched_denovo(spectra, model, [], cfg, empty, small_table)


def test_shuffled_null_keeps_c_terminus(model, spectra, monkeypatch):
    import psmkit.denovo as dn

    seen = []
    real = dn.joint_scores

    def spy(spectrum, peps, m, rs=None):
        seen.extend(peps)
        return real(spectrum, peps, m, rs)

    monkeypatch.setattr(dn, "joint_scores", spy)
    recs = [DenovoRecord(s.title, Peptide("GALSTYK"), 7, 7, 0.0, 0.0, 0.0, False) for s in spectra]
    t1 = shuffled_null_threshold({s.title: s for s in spectra}, recs, model, 0.95, seed=4)
    assert all(p.residues[-1] == "K" and sorted(p.residues) == sorted("GALSTYK") for p in seen)
    t2 = shuffled_null_threshold({s.title: s for s in spectra}, recs, model, 0.95, seed=4)
    assert t1 == t2
    assert shuffled_null_threshold({}, [], model) == -math.inf


def test_shuffled_null_keeps_residue_specific_n_terminus(model, spectra, monkeypatch):
    import psmkit.denovo as dn
    from psmkit.chem import ModificationRecord

    pyro = ModificationRecord("Gln->pyro-Glu", "AnyN-term", -17.026549, 1, "Q")
    seen = []
    monkeypatch.setattr(dn, "joint_scores", lambda s, peps, m, rs=None: (seen.extend(peps) or [[0.0]], None))
    pep = Peptide("QGALSTYK", (("N", pyro),))
    recs = [DenovoRecord(spectra[0].title, pep, 8, 8, 0.0, 0.0, 0.0, False)] * 20
    shuffled_null_threshold({spectra[0].title: spectra[0]}, recs, model, 0.95, seed=2)
    assert len(seen) == 20
    assert all(p.residues[0] == "Q" and p.residues[-1] == "K" for p in seen)
    assert len({p.residues for p in seen}) > 1
