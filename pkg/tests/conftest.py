from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp

from laplace_gmrf.engine import LatentGaussianModel
from laplace_gmrf.gmrf import SparsePrecision
from laplace_gmrf.modelio import load_data, parse_model_spec

DATA = Path(__file__).parent / "data"

_ACCEPTANCE = []


def random_spd(n, rng, density=0.2, dense=False):
    """Random sparse symmetric positive definite matrix (diagonally dominated)."""
    M = sp.random(n, n, density=density, random_state=rng, data_rvs=lambda k: rng.normal(size=k))
    M = (M + M.T).toarray()
    M += np.diag(np.abs(M).sum(axis=1) + rng.uniform(0.5, 2.0, size=n))
    return M if dense else SparsePrecision.from_matrix(M)


def load_model(model_path, data_path=None):
    model_path = Path(model_path)
    data_path = Path(data_path) if data_path else model_path.with_suffix(".csv")
    parsed = parse_model_spec(model_path.read_text(), base_dir=model_path.parent)
    data = load_data(data_path, parsed)
    return parsed, data, LatentGaussianModel(parsed.latent, data.obs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance():
    """Record one pass/fail line per criterion; printed in the terminal summary."""

    def check(number, title, passed, detail=""):
        _ACCEPTANCE.append((number, title, bool(passed), detail))
        assert passed, f"criterion {number} ({title}) failed: {detail}"

    return check


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}")
