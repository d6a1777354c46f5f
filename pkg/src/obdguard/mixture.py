"""Dirichlet-process mixture of Gaussian linear regressions (blocked Gibbs).

The detector's reference model for honest driving:

    y_i | x_i  ~  sum_j  w_j * Normal(x_i' b_j, v_j)

with weights from a truncated stick-breaking construction, w_j =
u_j * prod_{k<j}(1 - u_k), u_j ~ Beta(1, concentration), and a fully
conjugate hierarchy on the rest:

    concentration     ~ Gamma(alpha_shape, rate=alpha_rate)
    b_j | v_j         ~ Normal(coef_mean, v_j * coef_scale * I)
    v_j               ~ InverseGamma(var_shape, var_scale)

There is deliberately no intercept: the vertical accelerometer axis
reads gravity almost constantly, so it plays the intercept's role while
staying physically meaningful.

Fitting uses the blocked Gibbs sampler for truncated stick-breaking
priors (Ishwaran & James 2001): sweep the indicators, then every
component's regression parameters (empty components draw from the
prior, which is what lets new clusters open up), then the sticks, then
the concentration. All conditionals are standard conjugate forms.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .trace import AlignedRecord, records_to_arrays

POSTERIOR_VERSION = 1
MIN_RECORDS = 10
_N_AXES = 3


class NumericalError(RuntimeError):
    """A linear-algebra or sampling step lost positive definiteness."""


class SchemaVersionError(ValueError):
    """Posterior file has a version this code does not speak."""


class PosteriorFormatError(ValueError):
    """Posterior file is structurally broken (truncated, wrong types...)."""


@dataclass(frozen=True)
class HyperParams:
    """Prior and sampler settings.

    alpha_shape/alpha_rate: Gamma prior on the stick-breaking
    concentration (mean alpha_shape/alpha_rate; the defaults put it at
    10, which keeps the model permissive about opening components).
    coef_mean/coef_scale: Normal prior on regression coefficients,
    covariance = variance * coef_scale * I.
    var_shape/var_scale: Inverse-Gamma prior on component variances.
    max_components: stick-breaking truncation level (capped at the
    record count when fitting).
    """

    alpha_shape: float = 10.0
    alpha_rate: float = 1.0
    coef_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    coef_scale: float = 5.0
    var_shape: float = 2.0
    var_scale: float = 0.5
    max_components: int = 30
    n_iter: int = 30000
    burn_in: int = 15000
    thin: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("alpha_shape", "alpha_rate", "coef_scale", "var_shape", "var_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if len(self.coef_mean) != _N_AXES:
            raise ValueError("coef_mean must have 3 entries")
        if self.max_components < 1:
            raise ValueError("max_components must be >= 1")
        if not (0 <= self.burn_in < self.n_iter):
            raise ValueError("need 0 <= burn_in < n_iter")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass(frozen=True)
class MixtureComponent:
    """One component of one posterior draw."""

    weight: float
    coef: tuple[float, float, float]
    variance: float


@dataclass(frozen=True)
class PosteriorDraw:
    concentration: float
    components: tuple[MixtureComponent, ...]


@dataclass(frozen=True, eq=False)
class PosteriorSamples:
    """Retained Gibbs draws, stored as arrays (draw-major).

    weights: (M, J); coefs: (M, J, 3); variances: (M, J);
    concentration: (M,). Use draw(i) for a structured view.
    """

    params: HyperParams
    n_records_fitted: int
    concentration: np.ndarray
    weights: np.ndarray
    coefs: np.ndarray
    variances: np.ndarray

    def __post_init__(self) -> None:
        m = self.concentration.shape[0]
        j = self.weights.shape[1] if self.weights.ndim == 2 else -1
        if m < 1:
            raise ValueError("need at least one retained draw")
        if self.weights.shape != (m, j) or self.variances.shape != (m, j) or self.coefs.shape != (m, j, _N_AXES):
            raise ValueError("draw arrays have inconsistent shapes")
        if not (
            np.all(np.isfinite(self.concentration))
            and np.all(np.isfinite(self.weights))
            and np.all(np.isfinite(self.coefs))
            and np.all(np.isfinite(self.variances))
        ):
            raise ValueError("non-finite values in posterior draws")
        if np.any(self.concentration <= 0) or np.any(self.variances <= 0):
            raise ValueError("concentration and variances must be positive")
        if np.any(self.weights < 0) or np.any(np.abs(self.weights.sum(axis=1) - 1.0) > 1e-10):
            raise ValueError("component weights must be a distribution per draw")

    @property
    def n_draws(self) -> int:
        return int(self.concentration.shape[0])

    @property
    def n_components(self) -> int:
        return int(self.weights.shape[1])

    def draw(self, i: int) -> PosteriorDraw:
        comps = tuple(
            MixtureComponent(
                float(self.weights[i, j]),
                tuple(float(c) for c in self.coefs[i, j]),
                float(self.variances[i, j]),
            )
            for j in range(self.n_components)
        )
        return PosteriorDraw(float(self.concentration[i]), comps)


# ---------------------------------------------------------------------------
# Conditional samplers


def stick_weights(fractions: np.ndarray) -> np.ndarray:
    """Weights from stick fractions; length len(fractions)+1, sums to 1.

    The last weight is the unbroken remainder prod(1 - u), which is what
    truncation means: the tail mass all sits on the final component.
    """
    u = np.asarray(fractions, dtype=float)
    if u.size and (np.any(u <= 0.0) or np.any(u >= 1.0)):
        raise ValueError("stick fractions must lie strictly inside (0, 1)")
    remainder = np.concatenate(([1.0], np.cumprod(1.0 - u)))
    return np.concatenate((u, [1.0])) * remainder


def sample_indicators(
    y: np.ndarray,
    x: np.ndarray,
    weights: np.ndarray,
    coefs: np.ndarray,
    variances: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw one component assignment per record.

    Mass for record i, component j is w_j * N(y_i | x_i'b_j, v_j),
    computed in log space and normalized after subtracting the row max.
    If a row still underflows to all-zero mass (only possible when every
    log density is -inf/NaN) the record falls back to the max-log-density
    component.
    """
    mu = x @ coefs.T  # (n, J)
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    logp = logw - 0.5 * np.log(2.0 * np.pi * variances) - 0.5 * (y[:, None] - mu) ** 2 / variances
    m = logp.max(axis=1)
    safe = np.isfinite(m)
    p = np.exp(logp - np.where(safe, m, 0.0)[:, None])
    totals = p.sum(axis=1)
    targets = rng.random(y.size) * totals
    z = (np.cumsum(p, axis=1) < targets[:, None]).sum(axis=1)
    bad = ~safe | (totals == 0.0)
    if np.any(bad):
        z[bad] = np.nanargmax(np.where(np.isnan(logp[bad]), -np.inf, logp[bad]), axis=1)
    return z.astype(np.int64)


def sample_regression_params(
    y_j: np.ndarray, x_j: np.ndarray, prior: HyperParams, rng: np.random.Generator
) -> tuple[np.ndarray, float]:
    """Conjugate Normal/Inverse-Gamma draw for one component.

    Posterior precision V*^-1 = I/coef_scale + X'X, mean m* = V* (m0 /
    coef_scale + X'y), shape a + n/2, scale b + (y'y + m0'm0/coef_scale
    - m*'V*^-1 m*)/2. With no assigned records this reduces exactly to
    the prior, which keeps empty components live for the mixture to grow
    into.
    """
    n = y_j.size
    m0 = np.asarray(prior.coef_mean, dtype=float)
    prior_prec = 1.0 / prior.coef_scale
    if n:
        prec = prior_prec * np.eye(_N_AXES) + x_j.T @ x_j
        rhs = prior_prec * m0 + x_j.T @ y_j
        yty = float(y_j @ y_j)
    else:
        prec = prior_prec * np.eye(_N_AXES)
        rhs = prior_prec * m0
        yty = 0.0
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"posterior precision not positive definite (cond={np.linalg.cond(prec):.3e})"
        ) from exc
    mean = np.linalg.solve(prec, rhs)
    quad = yty + prior_prec * float(m0 @ m0) - float(rhs @ mean)
    if quad < -1e-8 * max(1.0, yty):
        raise NumericalError(f"negative residual quadratic form ({quad:.3e})")
    shape = prior.var_shape + 0.5 * n
    scale = prior.var_scale + 0.5 * max(quad, 0.0)
    variance = 1.0 / rng.gamma(shape, 1.0 / scale)
    coef = mean + np.sqrt(variance) * np.linalg.solve(chol.T, rng.standard_normal(_N_AXES))
    return coef, float(variance)


def sample_sticks(
    counts: np.ndarray, concentration: float, rng: np.random.Generator
) -> np.ndarray:
    """Stick fractions given assignment counts: Beta(1+n_j, a+sum_{k>j} n_k).

    Returns len(counts)-1 fractions (the last component is the
    remainder). Values are nudged off the closed endpoints so downstream
    logs stay finite.
    """
    counts = np.asarray(counts, dtype=float)
    if counts.size <= 1:
        return np.empty(0)
    tails = counts[::-1].cumsum()[::-1][1:]
    u = rng.beta(1.0 + counts[:-1], concentration + tails)
    return np.clip(u, np.finfo(float).tiny, np.nextafter(1.0, 0.0))


def sample_concentration(
    fractions: np.ndarray, prior: HyperParams, rng: np.random.Generator
) -> float:
    """Conjugate concentration draw given the sticks:
    Gamma(alpha_shape + #fractions, rate alpha_rate - sum log(1-u))."""
    shape = prior.alpha_shape + fractions.size
    rate = prior.alpha_rate - float(np.log1p(-fractions).sum()) if fractions.size else prior.alpha_rate
    return float(rng.gamma(shape, 1.0 / rate))


# ---------------------------------------------------------------------------
# The chain


def fit(records: Sequence[AlignedRecord], params: HyperParams | None = None) -> PosteriorSamples:
    """Fit the mixture to aligned records; returns retained draws.

    Requires at least 10 records (fewer cannot support the 3-coefficient
    regression in any useful way). The truncation level is capped at the
    record count. Deterministic in params.seed.
    """
    params = params or HyperParams()
    y, x, _ = records_to_arrays(records)
    if y.size < MIN_RECORDS:
        raise ValueError(f"need at least {MIN_RECORDS} records, got {y.size}")
    j_eff = min(params.max_components, y.size)
    rng = np.random.default_rng(params.seed)
    concentration, weights, coefs, variances = _run_chain(y, x, params, j_eff, rng)
    return PosteriorSamples(params, int(y.size), concentration, weights, coefs, variances)


def _run_chain(
    y: np.ndarray,
    x: np.ndarray,
    params: HyperParams,
    j_eff: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Blocked Gibbs; returns (concentration, weights, coefs, variances).

    Initialization draws every unknown from its prior. Each sweep runs
    indicators -> per-component regression params -> sticks ->
    concentration; draws are retained after burn_in, keeping every
    thin-th sweep.
    """
    n = y.size
    alpha = float(rng.gamma(params.alpha_shape, 1.0 / params.alpha_rate))
    # Beta(1, alpha) prior == the stick conditional at zero counts
    u = sample_sticks(np.zeros(j_eff), alpha, rng)
    weights = stick_weights(u)
    variances = 1.0 / rng.gamma(params.var_shape, 1.0 / params.var_scale, size=j_eff)
    coefs = np.asarray(params.coef_mean) + (
        np.sqrt(params.coef_scale * variances)[:, None] * rng.standard_normal((j_eff, _N_AXES))
    )

    n_kept = (params.n_iter - params.burn_in + params.thin - 1) // params.thin
    out_alpha = np.empty(n_kept)
    out_w = np.empty((n_kept, j_eff))
    out_b = np.empty((n_kept, j_eff, _N_AXES))
    out_v = np.empty((n_kept, j_eff))

    kept = 0
    for it in range(params.n_iter):
        try:
            if n:
                z = sample_indicators(y, x, weights, coefs, variances, rng)
                counts = np.bincount(z, minlength=j_eff)
            else:
                z = np.empty(0, dtype=np.int64)
                counts = np.zeros(j_eff, dtype=np.int64)
            for j in range(j_eff):
                mask = z == j
                coefs[j], variances[j] = sample_regression_params(y[mask], x[mask], params, rng)
            u = sample_sticks(counts, alpha, rng)
            weights = stick_weights(u)
            alpha = sample_concentration(u, params, rng)
        except NumericalError as exc:
            raise NumericalError(f"sweep {it}: {exc}") from exc
        if it >= params.burn_in and (it - params.burn_in) % params.thin == 0:
            out_alpha[kept] = alpha
            out_w[kept] = weights
            out_b[kept] = coefs
            out_v[kept] = variances
            kept += 1
    return out_alpha, out_w, out_b, out_v


# ---------------------------------------------------------------------------
# Posterior summaries


@dataclass(frozen=True, eq=False)
class ComponentSummary:
    """Named weights: (component index, mean weight) sorted descending,
    plus how many components cleared the threshold in each draw."""

    mean_weights: tuple[tuple[int, float], ...]
    per_draw_counts: np.ndarray

    @property
    def count(self) -> int:
        return len(self.mean_weights)


def nonempty_components(samples: PosteriorSamples, threshold: float = 1e-5) -> ComponentSummary:
    """Components whose posterior-mean weight clears the threshold."""
    mean_w = samples.weights.mean(axis=0)
    order = np.argsort(-mean_w, kind="stable")
    kept = tuple((int(j), float(mean_w[j])) for j in order if mean_w[j] >= threshold)
    per_draw = (samples.weights >= threshold).sum(axis=1)
    return ComponentSummary(kept, per_draw)


# ---------------------------------------------------------------------------
# Posterior persistence (JSON)
#
# Wire keys follow the established file format: {"version", "hyperparams",
# "n_records_fitted", "draws": [{"alpha": a, "components": [{"pi": w,
# "beta": [b1, b2, b3], "sigma2": v}, ...]}, ...]}.


def save_posterior(samples: PosteriorSamples, path: str) -> None:
    hp = asdict(samples.params)
    hp["coef_mean"] = list(hp["coef_mean"])
    with open(path, "w") as fh:
        fh.write('{"version": %d, "hyperparams": %s, "n_records_fitted": %d, "draws": [' % (
            POSTERIOR_VERSION, json.dumps(hp), samples.n_records_fitted,
        ))
        for i in range(samples.n_draws):
            comps = ", ".join(
                '{"pi": %s, "beta": [%s, %s, %s], "sigma2": %s}'
                % (
                    json.dumps(float(samples.weights[i, j])),
                    json.dumps(float(samples.coefs[i, j, 0])),
                    json.dumps(float(samples.coefs[i, j, 1])),
                    json.dumps(float(samples.coefs[i, j, 2])),
                    json.dumps(float(samples.variances[i, j])),
                )
                for j in range(samples.n_components)
            )
            head = "" if i == 0 else ", "
            fh.write('%s{"alpha": %s, "components": [%s]}' % (head, json.dumps(float(samples.concentration[i])), comps))
        fh.write("]}\n")


def load_posterior(path: str) -> PosteriorSamples:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise PosteriorFormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(obj, dict) or "version" not in obj:
        raise PosteriorFormatError(f"{path}: missing version field")
    if obj["version"] != POSTERIOR_VERSION:
        raise SchemaVersionError(
            f"{path}: posterior version {obj['version']!r}, this code speaks {POSTERIOR_VERSION}"
        )
    try:
        hp_dict = dict(obj["hyperparams"])
        hp_dict["coef_mean"] = tuple(hp_dict["coef_mean"])
        params = HyperParams(**hp_dict)
        draws = obj["draws"]
        m = len(draws)
        j = len(draws[0]["components"]) if m else 0
        concentration = np.empty(m)
        weights = np.empty((m, j))
        coefs = np.empty((m, j, _N_AXES))
        variances = np.empty((m, j))
        for i, d in enumerate(draws):
            concentration[i] = d["alpha"]
            comps = d["components"]
            if len(comps) != j:
                raise PosteriorFormatError(f"{path}: draw {i} has {len(comps)} components, expected {j}")
            for k, c in enumerate(comps):
                weights[i, k] = c["pi"]
                coefs[i, k] = c["beta"]
                variances[i, k] = c["sigma2"]
        return PosteriorSamples(params, int(obj["n_records_fitted"]), concentration, weights, coefs, variances)
    except PosteriorFormatError:
        raise
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise PosteriorFormatError(f"{path}: bad posterior structure: {exc}") from exc
