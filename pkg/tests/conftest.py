import numpy as np
import pytest

from obdguard.mixture import HyperParams, PosteriorSamples


def build_posterior(
    coefs,
    variances,
    weights=None,
    n_draws=1,
    concentration=1.0,
    n_records=100,
):
    """Hand-built PosteriorSamples: every draw repeats the given mixture."""
    coefs = np.atleast_2d(np.asarray(coefs, dtype=float))
    j = coefs.shape[0]
    variances = np.broadcast_to(np.asarray(variances, dtype=float), (j,))
    if weights is None:
        weights = np.full(j, 1.0 / j)
    weights = np.asarray(weights, dtype=float)
    weights = weights / weights.sum()
    params = HyperParams(seed=0, max_components=j, n_iter=2, burn_in=1, thin=1)
    return PosteriorSamples(
        params=params,
        n_records_fitted=n_records,
        concentration=np.full(n_draws, float(concentration)),
        weights=np.tile(weights, (n_draws, 1)),
        coefs=np.tile(coefs, (n_draws, 1, 1)),
        variances=np.tile(variances, (n_draws, 1)),
    )


@pytest.fixture
def make_posterior():
    return build_posterior
