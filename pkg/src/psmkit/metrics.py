"""Evaluation statistics: recall, modification/site accuracy, entrapment, run overlap."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from html import escape
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .chem import Peptide


@dataclass(frozen=True)
class EvalPair:
    predicted: Optional[Peptide]
    truth: Peptide
    spectrum_title: str = ""


def _seq(p: Peptide, il_equiv: bool) -> str:
    return p.residues.replace("I", "L") if il_equiv else p.residues


def _mod_names(p: Peptide) -> Counter:
    return Counter(rec.name for _, rec in p.mods)


def _mod_sites(p: Peptide) -> Counter:
    # terminal modifications compare by terminus marker, not residue index
    return Counter((rec.name, pos) for pos, rec in p.mods)


def peptides_match(pred: Optional[Peptide], truth: Peptide, il_equiv: bool = True) -> bool:
    if pred is None:
        return False
    return _seq(pred, il_equiv) == _seq(truth, il_equiv) and _mod_sites(pred) == _mod_sites(truth)


def peptide_recall(pairs: Sequence[EvalPair], il_equiv: bool = True) -> float:
    """Fraction of pairs whose prediction matches sequence, mods and sites."""
    if not pairs:
        return 0.0
    return sum(peptides_match(p.predicted, p.truth, il_equiv) for p in pairs) / len(pairs)


def _modified(pairs: Sequence[EvalPair]) -> list[EvalPair]:
    # fixed carbamidomethylation is never listed, so any mod qualifies
    return [p for p in pairs if p.truth.mods]


def modification_accuracy(pairs: Sequence[EvalPair]) -> Optional[float]:
    """Fraction of modified-truth pairs with the same modification multiset.

    ``None`` when no truth peptide carries a modification.
    """
    scope = _modified(pairs)
    if not scope:
        return None
    ok = sum(p.predicted is not None and _mod_names(p.predicted) == _mod_names(p.truth) for p in scope)
    return ok / len(scope)


def site_accuracy(pairs: Sequence[EvalPair]) -> Optional[float]:
    """Like ``modification_accuracy`` but (name, position) must also agree."""
    scope = _modified(pairs)
    if not scope:
        return None
    ok = sum(p.predicted is not None and _mod_sites(p.predicted) == _mod_sites(p.truth) for p in scope)
    return ok / len(scope)


def expected_entrapment_ratio(fdr: float, ratio: float) -> float:
    """``fdr / (1 + r)``: expected entrapment share of accepted identifications."""
    if ratio <= 0:
        raise ValueError("database size ratio must be positive")
    return fdr / (1.0 + ratio)


def entrapment_analysis(
    ids: Sequence[tuple[object, str]], ratio: float, fdr: float = 0.01
) -> tuple[Optional[float], Optional[float]]:
    """Observed entrapment share and its expectation, ``(None, None)`` if empty.

    Species tags are ``"target_db"`` or ``"entrapment_db"``.
    """
    if ratio <= 0:
        raise ValueError("database size ratio must be positive")
    if not ids:
        return None, None
    bad = [tag for _, tag in ids if tag not in ("target_db", "entrapment_db")]
    if bad:
        raise ValueError(f"unknown species tag {bad[0]!r}")
    observed = sum(1 for _, tag in ids if tag == "entrapment_db") / len(ids)
    return observed, expected_entrapment_ratio(fdr, ratio)


def entrapment_report(observed: Optional[float], expected: Optional[float], fdr: float, ratio: float) -> str:
    """Plain-text report stating both readings of the expected ratio."""
    if observed is None:
        return "no identifications: entrapment ratios undefined\n"
    all_ids = expected
    false_only = 1.0 / (1.0 + ratio)
    return (
        f"observed_entrapment_ratio\t{observed:.6f}\n"
        f"expected_ratio_all_ids\t{all_ids:.6f}\t(fdr {fdr:g} x 1/(1+{ratio:g}))\n"
        f"expected_ratio_false_subset\t{false_only:.6f}\t(1/(1+{ratio:g}) of false matches)\n"
    )


def compare_runs(a: Iterable, b: Iterable) -> dict[str, float]:
    """Overlap of two peptide sets (strings, peptides or records)."""
    sa, sb = {_key(x) for x in a}, {_key(x) for x in b}
    shared = len(sa & sb)
    union = len(sa | sb)
    return {
        "shared": shared,
        "only_a": len(sa - sb),
        "only_b": len(sb - sa),
        "jaccard": shared / union if union else 1.0,
        "coverage_a_by_b": 100.0 * shared / len(sa) if sa else 100.0,
        "coverage_b_by_a": 100.0 * shared / len(sb) if sb else 100.0,
    }


def _key(x) -> str:
    if isinstance(x, str):
        return x
    pep = getattr(x, "peptide", x)
    return f"{pep.residues}|{pep.mod_string()}"


def evaluate(
    predictions: Mapping[str, Optional[Peptide]],
    truth: Mapping[str, Optional[Peptide]],
    il_equiv: bool = True,
) -> dict[str, Optional[float]]:
    """Metrics over spectra present in ``truth``; others are counted as excluded."""
    excluded = sum(1 for t in predictions if t not in truth or truth[t] is None)
    pairs = [EvalPair(predictions.get(t), p, t) for t, p in sorted(truth.items()) if p is not None]
    return {
        "n_truth": len(pairs),
        "n_predicted": sum(1 for p in pairs if p.predicted is not None),
        "n_excluded": excluded,
        "peptide_recall": peptide_recall(pairs, il_equiv),
        "modification_accuracy": modification_accuracy(pairs),
        "site_accuracy": site_accuracy(pairs),
    }


def format_metrics(metrics: Mapping[str, Optional[float]]) -> str:
    lines = ["metric\tvalue"]
    for k, v in metrics.items():
        if v is None:
            lines.append(f"{k}\tNA")
        elif isinstance(v, int):
            lines.append(f"{k}\t{v}")
        else:
            lines.append(f"{k}\t{v:.6f}")
    return "\n".join(lines) + "\n"


def summary_svg(values: Mapping[str, Optional[float]], title: str = "summary") -> str:
    """Horizontal bar chart for fractions in [0, 1]; absent values are labelled NA."""
    rows = list(values.items())
    width, bar_w, row_h, left = 520, 300, 26, 180
    height = 40 + row_h * len(rows)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">',
        f'<text x="10" y="20" font-size="14">{escape(title)}</text>',
    ]
    for i, (name, v) in enumerate(rows):
        y = 32 + i * row_h
        parts.append(f'<text x="10" y="{y + 14}">{escape(name)}</text>')
        if v is None:
            parts.append(f'<text x="{left}" y="{y + 14}">NA</text>')
            continue
        w = max(0.0, min(1.0, float(v))) * bar_w
        parts.append(f'<rect x="{left}" y="{y}" width="{w:.1f}" height="18" fill="#4a7ab5"/>')
        parts.append(f'<text x="{left + w + 6:.1f}" y="{y + 14}">{float(v):.3f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_summary_svg(values: Mapping[str, Optional[float]], path: str | Path, title: str = "summary") -> None:
    Path(path).write_text(summary_svg(values, title))
