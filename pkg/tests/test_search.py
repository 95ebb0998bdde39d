import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import clean_spectrum
from psmkit.chem import Peptide, default_mod_table, fragment_array, fragment_charges
from psmkit.index import index_proteins
from psmkit.model import ModelConfig, PsmModel
from psmkit.msio import ProteinEntry, Spectrum, preprocess
from psmkit.search import (
    FinetuneError,
    PSMRecord,
    SearchConfig,
    accepted_targets,
    compute_qvalues,
    finetune,
    kernel_score,
    rescore_run,
    search_run,
    search_spectrum,
    split_titles,
    training_items,
)


def rec(title, score, decoy=False, pep="PEPTIDEK", rank=1):
    return PSMRecord(title, Peptide(pep), 2, 500.0, 0.0, score, rank, decoy)


# --------------------------------------------------------------------------
# kernel score


def brute_kernel(spectrum, peptide, tol_ppm=20.0):
    frags = fragment_array(peptide, fragment_charges(spectrum.charge))
    total, nb, ny = 0.0, 0, 0
    for f in frags:
        best, best_err = None, None
        for j, mz in enumerate(spectrum.mz):
            err = abs(mz - f["mz"]) / f["mz"] * 1e6
            if err <= tol_ppm and (best_err is None or err < best_err):
                best, best_err = j, err
        if best is None:
            continue
        total += spectrum.intensity[best]
        nb += f["series"] == 0
        ny += f["series"] == 1
    if nb + ny == 0:
        return 0.0
    return math.log(1 + total * math.factorial(nb) * math.factorial(ny))


def test_kernel_score_example():
    pep = Peptide("GAK")
    frags = fragment_array(pep, 1)
    b1 = frags["mz"][(frags["series"] == 0) & (frags["index"] == 1)][0]
    y1 = frags["mz"][(frags["series"] == 1) & (frags["index"] == 1)][0]
    s = preprocess(Spectrum("x", 300.0, 2, np.array([b1, y1]), np.array([1.0, 1.0])), intensity_transform="linear")
    assert kernel_score(s, pep) == pytest.approx(math.log(1 + 2.0))
    empty = preprocess(Spectrum("y", 300.0, 2, np.array([50.0]), np.array([1.0])))
    assert kernel_score(empty, pep) == 0.0


@settings(max_examples=30, deadline=None)
@given(
    seq=st.text(alphabet="ACDEFGHKLMNPQRSTVWY", min_size=4, max_size=14),
    other=st.text(alphabet="ACDEFGHKLMNPQRSTVWY", min_size=4, max_size=14),
    seed=st.integers(0, 1000),
)
def test_kernel_score_matches_brute_force(seq, other, seed):
    s = clean_spectrum(Peptide(seq), seed=seed, noise_peaks=20, mz_jitter_ppm=8)
    for pep in (Peptide(seq), Peptide(other)):
        assert kernel_score(s, pep) == pytest.approx(brute_kernel(s, pep), rel=1e-9, abs=1e-12)


# --------------------------------------------------------------------------
# q-values


def test_qvalues_worked_example():
    recs = [rec("a", 10), rec("b", 9), rec("c", 8, True), rec("d", 7), rec("e", 6, True)]
    q = {r.spectrum_title: r.q_value for r in compute_qvalues(recs)}
    assert q == pytest.approx({"a": 0, "b": 0, "c": 1 / 3, "d": 1 / 3, "e": 2 / 3})


def test_qvalues_ties_favour_targets_and_all_decoys():
    q = compute_qvalues([rec("d", 5, True), rec("t", 5)])
    assert [r.spectrum_title for r in q] == ["t", "d"]
    assert q[0].q_value == 0.0
    only = compute_qvalues([rec("a", 3, True), rec("b", 2, True)])
    assert [r.q_value for r in only] == [1.0, 1.0]
    assert compute_qvalues([]) == []


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 50, allow_nan=False), st.booleans()), max_size=60))
def test_qvalues_monotone_and_bounded(pairs):
    recs = [rec(f"s{i}", sc, d) for i, (sc, d) in enumerate(pairs)]
    out = compute_qvalues(recs)
    qs = [r.q_value for r in out]
    assert all(0 <= q <= 1 for q in qs)
    assert all(a <= b for a, b in zip(qs, qs[1:]))
    # q is the minimal FDR over thresholds at or below each record
    for i in range(len(out)):
        fdrs = []
        for j in range(i, len(out)):
            t = sum(not r.is_decoy for r in out[: j + 1])
            d = j + 1 - t
            fdrs.append(min(d / t, 1.0) if t else 1.0)
        assert qs[i] == pytest.approx(min(fdrs))


def test_accepted_targets():
    recs = compute_qvalues([rec("a", 10), rec("b", 9, True), rec("c", 1)])
    assert [r.spectrum_title for r in accepted_targets(recs, 0.01)] == ["a"]


# --------------------------------------------------------------------------
# configuration and candidate lists


def test_top_k_defaults():
    assert SearchConfig().k == 10
    assert SearchConfig(enzyme="trypsin").k == 10
    assert SearchConfig(enzyme="nonspecific").k == 20
    assert SearchConfig(enzyme="nonspecific", top_k=5).k == 5
    for bad in (dict(mode="wild"), dict(q_gate=0), dict(fdr_target=1.5), dict(top_k=1)):
        with pytest.raises(ValueError):
            SearchConfig(**bad)


@pytest.fixture(scope="module")
def proteins():
    rng = np.random.default_rng(3)
    aa = np.array(list("ACDEFGHKLMNPQRSTVWY"))
    return [ProteinEntry(f"P{i}", "", "".join(rng.choice(aa, 120))) for i in range(6)]


def test_search_spectrum_is_sorted_top_k(proteins):
    idx = index_proteins(proteins, "nonspecific", 0, (7, 9))
    pep = idx.entries[len(idx) // 2].peptide
    s = clean_spectrum(pep)
    for enzyme, k in (("trypsin", 10), ("nonspecific", 20)):
        out = search_spectrum(s, idx, None, SearchConfig(enzyme=enzyme, precursor_tol_ppm=5000))
        assert len(out) == k
        assert [r.rank for r in out] == list(range(1, k + 1))
        scores = [r.kernel_score for r in out]
        assert scores == sorted(scores, reverse=True)
    assert search_spectrum(s, idx, None, SearchConfig())[0].peptide == pep


def test_open_search_finds_modified(proteins):
    table = default_mod_table()
    idx = index_proteins(proteins, "trypsin", 1, (7, 20))
    target = next(e.peptide for e in idx.entries if "M" in e.peptide.residues and not e.is_decoy)
    ox = table.by_label["Oxidation[M]"]
    modded = target.with_mod(target.residues.index("M"), ox)
    out = search_spectrum(clean_spectrum(modded), idx, table, SearchConfig(mode="open"))
    assert out[0].peptide == modded


# --------------------------------------------------------------------------
# rescoring gate and fine-tuning


@pytest.fixture(scope="module")
def tiny_model():
    table = default_mod_table().subset(["Oxidation"])
    return PsmModel(ModelConfig(d_model=16, n_heads=2, d_ff=32, l_max=20, mod_table_tsv=table.to_tsv()))


def gate_run():
    """Ten confident targets followed by decoys and weak targets."""
    seqs = ["GALSTYK", "AVLLKR", "PEPTIDEK", "WWMNQER", "SSTTYYK", "LLGGAAR", "DFGHIKR", "QQNMEVK"]
    run, spectra = [], {}
    for i in range(40):
        title = f"s{i:02d}"
        seq = seqs[i % len(seqs)]
        decoy = i >= 10 and i % 2 == 0
        score = 100.0 - i
        recs = [rec(title, score, decoy, seq, 1), rec(title, score - 50, False, seqs[(i + 1) % 8], 2)]
        run.append(recs)
        spectra[title] = clean_spectrum(Peptide(seq), title=title)
    return run, spectra


def test_gate_excludes_low_confidence(tiny_model):
    run, spectra = gate_run()
    kernel = {r.spectrum_title: r.q_value for r in compute_qvalues([r[0] for r in run])}
    res = rescore_run(run, spectra, tiny_model, SearchConfig(fdr_target=1.0))
    passing = {t for t, q in kernel.items() if q < 0.1}
    assert 0 < len(passing) < len(run)
    assert res.n_gated == len(passing)
    assert {r.spectrum_title for r in res.rank1} == passing
    assert {r.spectrum_title for r in res.accepted} <= passing
    kept = rescore_run(run, spectra, tiny_model, SearchConfig(fdr_target=1.0, keep_failed_gate=True))
    failed = [r for r in kept.rank1 if r.spectrum_title not in passing]
    assert len(failed) == len(run) - len(passing)
    assert all(r.neural_score == -math.inf for r in failed)
    assert all(r.spectrum_title in passing for r in kept.accepted)


def test_rescore_reranks_within_candidates(tiny_model):
    run, spectra = gate_run()
    res = rescore_run(run, spectra, tiny_model, SearchConfig(fdr_target=1.0))
    cands = {recs[0].spectrum_title: {r.peptide for r in recs} for recs in run}
    for r in res.rank1:
        assert r.peptide in cands[r.spectrum_title]
        assert r.rank == 1 and r.neural_score is not None
    for r in res.accepted:
        assert -1.0 <= r.cosine_similarity <= 1.0
        assert 0.0 <= r.fragment_coverage <= 1.0
    qs = [r.q_value for r in res.rank1]
    assert qs == sorted(qs)


def test_rescore_rejects_unknown_token(tiny_model):
    run, spectra = gate_run()
    with pytest.raises(ValueError, match="Phospho"):
        rescore_run(run, spectra, tiny_model, SearchConfig(), default_mod_table().subset(["Phospho"]))


def test_finetune_refuses_small_runs(tiny_model):
    run, spectra = gate_run()
    with pytest.raises(FinetuneError, match="batches"):
        finetune(tiny_model, run, spectra, SearchConfig(), min_batches=16)


def test_training_items_negatives():
    run, spectra = gate_run()
    run = [recs + [rec(recs[0].spectrum_title, 1.0, False, "KLMNPQR", r) for r in range(3, 12)] for recs in run]
    items = training_items(run, spectra)
    assert len(items) == len(run)
    for it in items:
        assert 1 <= len(it.negatives) <= 8
        assert all(n != it.positive for n in it.negatives)


def test_split_titles_deterministic():
    titles = [f"t{i}" for i in range(500)]
    a, b = split_titles(titles, 0.2)
    assert (a, b) == split_titles(titles, 0.2)
    assert sorted(a + b) == sorted(titles)
    assert 50 < len(b) < 150


def test_search_run_shape(proteins):
    idx = index_proteins(proteins, "trypsin", 1, (7, 20))
    specs = [clean_spectrum(e.peptide, title=f"x{i}") for i, e in enumerate(idx.entries[:5])]
    out = search_run(specs, idx, None, SearchConfig())
    assert len(out) == 5
    assert all(r and r[0].spectrum_title == s.title for r, s in zip(out, specs))
