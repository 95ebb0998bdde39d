import numpy as np
import pytest
import torch

from psmkit.chem import Peptide, default_mod_table
from psmkit.msio import preprocess
from psmkit.synth import SynthConfig, synth_spectrum


def clean_spectrum(pep: Peptide, charge: int = 2, seed: int = 0, title: str | None = None, **kw):
    """Preprocessed noiseless synthetic spectrum of ``pep``."""
    rng = np.random.default_rng(seed)
    raw = synth_spectrum(pep, charge, title or f"{pep}.{charge}", SynthConfig(**kw), rng)
    return preprocess(raw)


@pytest.fixture(scope="session")
def small_table():
    return default_mod_table().subset(["Oxidation", "Phospho", "Acetyl"])


def mod(table, label):
    return table.by_label[label]


def gradient_errors(model, total, eps: float = 1e-3, seed: int = 0) -> dict[str, float]:
    """Relative analytic vs numeric directional-derivative error per parameter.

    ``total`` recomputes the scalar loss. The numeric derivative is a
    five-point central stencil along a random unit direction.
    """
    model.zero_grad()
    total().backward()
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in model.named_parameters():
        v = torch.as_tensor(rng.standard_normal(p.shape), dtype=p.dtype)
        v /= v.norm()
        analytic = float((p.grad * v).sum()) if p.grad is not None else 0.0
        base = p.data.clone()

        def f(h):
            with torch.no_grad():
                p.data.copy_(base + h * v)
                return float(total())

        numeric = (f(-2 * eps) - 8 * f(-eps) + 8 * f(eps) - f(2 * eps)) / (12 * eps)
        p.data.copy_(base)
        # some groups have exactly zero gradient (softmax shift invariance); the
        # floor turns their round-off into an absolute bound of 1e-10
        errors[name] = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)
    return errors


# criterion number -> (passed, detail), filled by the acceptance suite
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
