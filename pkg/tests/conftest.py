import numpy as np
import pytest
from scipy.special import expit

from narsmc.data import Dataset, Measurement, Role, VariableSpec


def var(name, role, kind):
    return VariableSpec(name, Role[role.upper()], Measurement[kind.upper()])


def toy_mnar_dataset(n=200, seed=0, binary_y=False, miss_y=0.2, miss_x=0.15, miss_c2=0.15):
    """Small dataset with missingness in y, x and one confounder.

    Generation is deliberately simple; engine tests exercise mechanics, not
    statistical performance.
    """
    rng = np.random.default_rng(seed)
    c1 = rng.binomial(1, 0.5, n).astype(float)
    c2 = rng.binomial(1, expit(-0.4 + 0.6 * c1)).astype(float)
    x = rng.binomial(1, expit(-0.2 + 0.5 * c1 + 0.4 * c2)).astype(float)
    eta = -0.3 + 0.6 * x + 0.5 * c1 + 0.4 * c2
    if binary_y:
        y = rng.binomial(1, expit(eta)).astype(float)
    else:
        y = eta + rng.normal(size=n)
    values = np.column_stack([y, x, c1, c2])
    mask = np.zeros_like(values, dtype=bool)
    mask[:, 0] = rng.random(n) < miss_y
    mask[:, 1] = rng.random(n) < miss_x
    mask[:, 3] = rng.random(n) < miss_c2
    cols = [
        var("y", "outcome", "binary" if binary_y else "continuous"),
        var("x", "exposure", "binary"),
        var("c1", "complete_confounder", "binary"),
        var("c2", "incomplete_confounder", "binary"),
    ]
    return Dataset(cols, values, mask)


@pytest.fixture
def mnar_data():
    return toy_mnar_dataset()
