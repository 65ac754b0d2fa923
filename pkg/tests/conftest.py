import numpy as np
import pytest

from boostlmm import ingest_csv, make_dataset
from boostlmm.datasets import orthodont_path


@pytest.fixture(scope="session")
def orthodont():
    """Bundled growth-study fixture with the female dummy precoded."""
    return ingest_csv(
        orthodont_path(), response="distance", cluster="subject",
        fixed=["female", "age"],
    )


@pytest.fixture()
def small_mixed():
    """3 clusters x 4 observations, q = 2 (intercept + slope on x2)."""
    rng = np.random.Generator(np.random.Philox(101))
    n, n_i = 3, 4
    N = n * n_i
    X = rng.standard_normal((N, 3))
    data = make_dataset(
        rng.standard_normal(N) + 2.0,
        np.repeat(["a", "b", "c"], n_i),
        X, ["x1", "x2", "x3"], slope_cols=("x2",),
    )
    return data


def random_state(data, seed=0, sigma2=0.7):
    """A generic valid parameter state for likelihood tests."""
    from boostlmm import ParamState

    rng = np.random.Generator(np.random.Philox(seed))
    q = data.n_random
    A = rng.standard_normal((q, q))
    Q = A @ A.T + 0.5 * np.eye(q)
    return ParamState(
        beta0=rng.standard_normal(),
        beta=rng.standard_normal(data.n_fixed),
        gamma=rng.standard_normal((data.n_clusters, q)),
        sigma2=sigma2,
        Q=Q,
    )
