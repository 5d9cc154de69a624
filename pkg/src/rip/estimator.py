"""Robust action estimator: Student's t-regression over normalized time.

Two small feed-forward networks map a normalized timestep t in [0, 1] to a
per-channel mean and raw variance; the likelihood of an observed action
value under the heavy-tailed t-distribution (or its Gaussian limit) drives
seeded minibatch Adam. Heavy tails are the whole point: a candidate
trajectory far from the consensus contributes a bounded pull on the mean
instead of the unbounded pull least squares would give it, so the fitted
mean tracks the consistent majority of a bundle.

All array math is float64 numpy with hand-derived gradients; the finite-
difference check in the bench CLI and tests guards the derivation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import GRIPPER_CHANNEL, Trajectory, TrajectoryBundle
from .errors import NumericalError, TrainingError

LOG_2PI = math.log(2.0 * math.pi)

# Sinusoidal expansion of the scalar time input; a raw scalar into a 2x64
# tanh network fits these curves far too slowly. The top frequencies let
# the mean head track one-grid-step structure such as a grasp dwell.
FEATURE_FREQS = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0)
FEATURE_DIM = 1 + 2 * len(FEATURE_FREQS)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Lanczos approximation, g = 7, 9 coefficients.
_LANCZOS_G = 7.0
_LANCZOS_COEFFS = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def log_gamma(x):
    """Natural log of the gamma function for positive real input.

    Lanczos approximation with reflection below 0.5; absolute error is
    well under 1e-10 across [0.5, 100]. Accepts scalars or arrays.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("log_gamma is defined for positive arguments only")
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)

    small = x < 0.5
    if np.any(small):
        xs = x[small]
        out[small] = (
            math.log(math.pi)
            - np.log(np.sin(math.pi * xs))
            - log_gamma(1.0 - xs)
        )
    if np.any(~small):
        z = x[~small] - 1.0
        series = np.full_like(z, _LANCZOS_COEFFS[0])
        for i, c in enumerate(_LANCZOS_COEFFS[1:], start=1):
            series += c / (z + i)
        t = z + _LANCZOS_G + 0.5
        out[~small] = _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(series)
    return float(out[0]) if scalar else out


def t_log_pdf(x, mu, var, nu: float):
    """Elementwise log-density of the location-scale Student's t.

    ``var`` is the squared scale. ``nu = inf`` selects the Gaussian with
    the same mean and variance. Inputs broadcast; output is float64.
    """
    x = np.asarray(x, dtype=float)
    r2 = (x - mu) ** 2
    if math.isinf(nu):
        return -0.5 * (LOG_2PI + np.log(var)) - r2 / (2.0 * var)
    c = log_gamma((nu + 1.0) / 2.0) - log_gamma(nu / 2.0) - 0.5 * math.log(nu * math.pi)
    return c - 0.5 * np.log(var) - ((nu + 1.0) / 2.0) * np.log1p(r2 / (nu * var))


def _nll_partials(x, mu, var, nu: float):
    """d(-log pdf)/d mu and d(-log pdf)/d var, elementwise."""
    r = x - mu
    if math.isinf(nu):
        dmu = -r / var
        dvar = 0.5 / var - r * r / (2.0 * var * var)
    else:
        denom = nu * var + r * r
        dmu = -(nu + 1.0) * r / denom
        dvar = 0.5 / var - ((nu + 1.0) / 2.0) * r * r / (var * denom)
    return dmu, dvar


def time_features(t) -> np.ndarray:
    """Expand normalized timesteps (N,) to the fixed feature matrix (N, 9)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    cols = [t]
    for f in FEATURE_FREQS:
        cols.append(np.sin(math.pi * f * t))
        cols.append(np.cos(math.pi * f * t))
    return np.stack(cols, axis=1)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus_inv(y):
    # Inverse of log(1 + e^x); y must be positive.
    y = np.asarray(y, dtype=float)
    return y + np.log1p(-np.exp(-y))


# Parameter keys in a fixed order so flattening is deterministic.
PARAM_KEYS = (
    "mu_W1", "mu_b1", "mu_W2", "mu_b2", "mu_W3", "mu_b3",
    "s_W1", "s_b1", "s_W2", "s_b2", "s_W3", "s_b3",
)


@dataclass
class FitConfig:
    """Training hyperparameters for the action estimator.

    Defaults follow the published settings where they exist (hidden sizes
    64x64, nu 1.5, batch 64, Adam, learning rate 1e-2); the step count
    defaults to a desk-scale 4000, which converges on bundles of a handful
    of trajectories, and can be raised to the full 4e4.
    """

    hidden: tuple[int, int] = (64, 64)
    nu: float = 1.5
    batch_size: int = 64
    steps: int = 4000
    learning_rate: float = 1e-2
    seed: int = 0
    var_floor: float = 1e-6
    log_gamma_tol: float = 1e-10

    def __post_init__(self):
        if len(self.hidden) != 2 or any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden must be two positive sizes, got {self.hidden}")
        if self.nu <= 0:
            raise ValueError(f"nu must be positive (or inf), got {self.nu}")
        if self.batch_size < 1 or self.steps < 1 or self.learning_rate <= 0:
            raise ValueError("batch size, steps, and learning rate must be positive")
        if self.var_floor <= 0:
            raise ValueError("variance floor must be positive")

    def gaussian(self) -> "FitConfig":
        return replace(self, nu=math.inf)


@dataclass
class StudentTEstimator:
    """Fitted mean/variance networks plus the degrees of freedom.

    Immutable after fitting; evaluation is pure and thread-safe. ``nu``
    is a positive float, or ``inf`` for the Gaussian ablation. The
    networks operate on per-channel standardized values (shift/scale);
    evaluation maps back to raw units, so the likelihood channels with
    very different spreads stay equally well conditioned during training.
    """

    params: dict
    nu: float
    hidden: tuple[int, int]
    n_channels: int
    var_floor: float = 1e-6
    channel_shift: np.ndarray | None = None
    channel_scale: np.ndarray | None = None

    SCHEMA_VERSION = 1

    def affine(self) -> tuple:
        shift = 0.0 if self.channel_shift is None else self.channel_shift
        scale = 1.0 if self.channel_scale is None else self.channel_scale
        return shift, scale

    def mean_and_variance(self, tgrid) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate mu(t) and var(t) on a grid, raw units; both (T, D)."""
        X = time_features(tgrid)
        mu_net, s_raw, _ = _forward(self.params, X)
        shift, scale = self.affine()
        return mu_net * scale + shift, _softplus(s_raw) * scale**2 + self.var_floor

    def to_dict(self) -> dict:
        shift, scale = self.affine()
        return {
            "schema_version": self.SCHEMA_VERSION,
            "nu": str(self.nu),
            "hidden": list(self.hidden),
            "n_channels": self.n_channels,
            "var_floor": self.var_floor,
            "channel_shift": np.broadcast_to(shift, (self.n_channels,)).tolist(),
            "channel_scale": np.broadcast_to(scale, (self.n_channels,)).tolist(),
            "params": {k: self.params[k].tolist() for k in PARAM_KEYS},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "StudentTEstimator":
        if obj.get("schema_version") != cls.SCHEMA_VERSION:
            raise ValueError(f"unsupported estimator schema: {obj.get('schema_version')!r}")
        params = {k: np.asarray(obj["params"][k], dtype=float) for k in PARAM_KEYS}
        return cls(
            params=params,
            nu=float(obj["nu"]),
            hidden=tuple(obj["hidden"]),
            n_channels=int(obj["n_channels"]),
            var_floor=float(obj["var_floor"]),
            channel_shift=np.asarray(obj["channel_shift"], dtype=float),
            channel_scale=np.asarray(obj["channel_scale"], dtype=float),
        )


def _forward(params, X):
    """Both heads on a feature batch; returns (mu, s_raw, cache)."""
    cache = {}
    outs = {}
    for head in ("mu", "s"):
        h1 = np.tanh(X @ params[f"{head}_W1"] + params[f"{head}_b1"])
        h2 = np.tanh(h1 @ params[f"{head}_W2"] + params[f"{head}_b2"])
        outs[head] = h2 @ params[f"{head}_W3"] + params[f"{head}_b3"]
        cache[head] = (h1, h2)
    cache["X"] = X
    return outs["mu"], outs["s"], cache


def _backward(params, cache, dmu, ds_raw):
    """Backprop both heads; dmu/ds_raw are (B, D) output gradients."""
    grads = {}
    X = cache["X"]
    for head, dout in (("mu", dmu), ("s", ds_raw)):
        h1, h2 = cache[head]
        grads[f"{head}_W3"] = h2.T @ dout
        grads[f"{head}_b3"] = dout.sum(axis=0)
        dh2 = (dout @ params[f"{head}_W3"].T) * (1.0 - h2 * h2)
        grads[f"{head}_W2"] = h1.T @ dh2
        grads[f"{head}_b2"] = dh2.sum(axis=0)
        dh1 = (dh2 @ params[f"{head}_W2"].T) * (1.0 - h1 * h1)
        grads[f"{head}_W1"] = X.T @ dh1
        grads[f"{head}_b1"] = dh1.sum(axis=0)
    return grads


def _param_shapes(hidden, n_channels):
    h1, h2 = hidden
    shapes = {}
    for head in ("mu", "s"):
        shapes[f"{head}_W1"] = (FEATURE_DIM, h1)
        shapes[f"{head}_b1"] = (h1,)
        shapes[f"{head}_W2"] = (h1, h2)
        shapes[f"{head}_b2"] = (h2,)
        shapes[f"{head}_W3"] = (h2, n_channels)
        shapes[f"{head}_b3"] = (n_channels,)
    return shapes


def _flat_params(hidden, n_channels):
    """One flat buffer with per-parameter views, so the optimizer can act
    on a single vector."""
    shapes = _param_shapes(hidden, n_channels)
    total = sum(int(np.prod(s)) for s in shapes.values())
    theta = np.zeros(total)
    params = {}
    offset = 0
    for k in PARAM_KEYS:
        size = int(np.prod(shapes[k]))
        params[k] = theta[offset:offset + size].reshape(shapes[k])
        offset += size
    return theta, params


def _init_params(rng, hidden, n_channels, data, var_floor, nu=1.5):
    theta, params = _flat_params(hidden, n_channels)
    h1, _ = hidden
    for head in ("mu", "s"):
        params[f"{head}_W1"][...] = rng.normal(0.0, 1.0 / math.sqrt(FEATURE_DIM),
                                               params[f"{head}_W1"].shape)
        params[f"{head}_W2"][...] = rng.normal(0.0, 1.0 / math.sqrt(h1),
                                               params[f"{head}_W2"].shape)
        # Output weights start at zero so both heads begin flat at their
        # biases; the curves move off those seeds only where the data asks.
    flat = data.reshape(-1, data.shape[-1])
    # Median, not mean: seeding the location on an outlier would hand the
    # hallucination a head start.
    med = np.median(flat, axis=0)
    params["mu_b3"][...] = med
    if math.isinf(nu):
        # The Gaussian objective punishes an undersized starting scale with
        # enormous variance gradients; seed it at the sample variance.
        spread = np.var(flat, axis=0)
    else:
        spread = (1.4826 * np.median(np.abs(flat - med), axis=0)) ** 2
    # The lower clip keeps the starting likelihood from being so stiff that
    # the mean head cannot move (binary channels have zero robust spread).
    params["s_b3"][...] = _softplus_inv(np.clip(spread, 1e-2, 25.0) + var_floor)
    return theta, params


def _flatten_grads(grads):
    return np.concatenate([grads[k].ravel() for k in PARAM_KEYS])


def nll_loss_array(data: np.ndarray, grid: np.ndarray, estimator: StudentTEstimator) -> float:
    """Total negative log-likelihood of a (Q, T, D) array under the estimator."""
    mu, var = estimator.mean_and_variance(grid)
    lp = t_log_pdf(data, mu[None, :, :], var[None, :, :], estimator.nu)
    total = -float(np.sum(lp))
    if not math.isfinite(total):
        bad = int(np.count_nonzero(~np.isfinite(lp)))
        raise NumericalError(f"negative log-likelihood is non-finite ({bad} bad terms)")
    return total


def nll_loss(bundle: TrajectoryBundle, estimator: StudentTEstimator) -> float:
    """Sum over samples, steps, and channels of the negative log-density."""
    return nll_loss_array(bundle.to_array(), bundle.grid(), estimator)


def log_density(a, t: float, estimator: StudentTEstimator) -> np.ndarray:
    """Per-channel log-density of action value(s) ``a`` at normalized time t.

    ``a`` broadcasts against the estimator's channels: a scalar is scored
    under every channel, a (D,) vector channelwise.
    """
    mu, var = estimator.mean_and_variance([float(t)])
    out = t_log_pdf(a, mu[0], var[0], estimator.nu)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"log-density non-finite at t={t}")
    return out


def loss_gradient_array(data: np.ndarray, grid: np.ndarray,
                        estimator: StudentTEstimator) -> dict:
    """Analytic gradient of the total NLL with respect to every parameter."""
    X = time_features(grid)
    mu_net, s_raw, cache = _forward(estimator.params, X)
    shift, scale = estimator.affine()
    mu = mu_net * scale + shift
    var = _softplus(s_raw) * np.asarray(scale) ** 2 + estimator.var_floor
    dmu_e, dvar_e = _nll_partials(data, mu[None, :, :], var[None, :, :], estimator.nu)
    dmu_net = dmu_e.sum(axis=0) * scale
    ds_raw = dvar_e.sum(axis=0) * np.asarray(scale) ** 2 * _sigmoid(s_raw)
    return _backward(estimator.params, cache, dmu_net, ds_raw)


def loss_gradient(bundle: TrajectoryBundle, estimator: StudentTEstimator) -> dict:
    return loss_gradient_array(bundle.to_array(), bundle.grid(), estimator)


@dataclass
class FitTrace:
    """Training diagnostics kept alongside a fitted estimator."""

    steps: int
    final_loss: float
    loss_curve: list = field(default_factory=list)  # (step, full-bundle NLL) pairs

    def curve_tail(self, n: int = 20) -> list:
        return self.loss_curve[-n:]


_log_gamma_checked = False


def _check_log_gamma(tol: float):
    """One-time guard that the special-function core meets its tolerance."""
    global _log_gamma_checked
    if _log_gamma_checked:
        return
    known = [(1.0, 0.0), (0.5, 0.5 * math.log(math.pi)), (10.0, math.log(362880.0))]
    for x, expect in known:
        if abs(log_gamma(x) - expect) > tol:
            raise NumericalError(f"log_gamma({x}) off by more than {tol}")
    _log_gamma_checked = True


def fit_array(data: np.ndarray, grid: np.ndarray, config: FitConfig) -> tuple[StudentTEstimator, FitTrace]:
    """Seeded minibatch Adam on the NLL of a (Q, T, D) array over grid (T,)."""
    data = np.asarray(data, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if data.ndim != 3:
        raise ValueError(f"expected (Q, T, D) data, got shape {data.shape}")
    n_q, n_t, n_d = data.shape
    if grid.shape != (n_t,):
        raise ValueError(f"grid shape {grid.shape} does not match T={n_t}")
    _check_log_gamma(config.log_gamma_tol)

    rng = np.random.default_rng(config.seed)
    flat_raw = data.reshape(n_q * n_t, n_d)
    # Per-channel standardization keeps the likelihood equally conditioned
    # across channels whose spreads differ by orders of magnitude (meters
    # of position next to a 0/1 gripper flag). The variance floor stays
    # absolute in raw units.
    shift = np.median(flat_raw, axis=0)
    scale = np.maximum(np.std(flat_raw, axis=0), 1e-3)
    data_std = (data - shift) / scale
    floor_std = config.var_floor / scale**2

    theta, params = _init_params(rng, config.hidden, n_d, data_std, config.var_floor, config.nu)
    features = time_features(grid)
    flat = data_std.reshape(n_q * n_t, n_d)
    t_of_pair = np.tile(np.arange(n_t), n_q)

    est = StudentTEstimator(params=params, nu=config.nu, hidden=tuple(config.hidden),
                            n_channels=n_d, var_floor=config.var_floor,
                            channel_shift=shift, channel_scale=scale)

    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    full_batch = n_q * n_t <= config.batch_size
    log_every = max(1, config.steps // 200)
    curve = []

    all_pairs = np.arange(n_q * n_t)
    batch_chunk = None
    chunk_size = 512

    # Variance-floor warmup: while the floor is high, every channel sees
    # gradients of comparable size, so the mean head fits all structure
    # before tight channels turn stiff and dominate the shared trunk. The
    # floor then decays to its configured value (standardized units).
    warm_start, warm_end, warm_frac = 0.09, 1e-5, 0.7

    for step in range(1, config.steps + 1):
        if full_batch:
            pairs = all_pairs
        else:
            pos = (step - 1) % chunk_size
            if pos == 0:
                batch_chunk = rng.integers(0, n_q * n_t,
                                           size=(chunk_size, config.batch_size))
            pairs = batch_chunk[pos]
        X = features[t_of_pair[pairs]]
        a = flat[pairs]

        progress = min(1.0, step / (warm_frac * config.steps))
        warm = warm_start * (warm_end / warm_start) ** progress
        mu, s_raw, cache = _forward(params, X)
        var = _softplus(s_raw) + np.maximum(floor_std, warm)
        dmu_e, dvar_e = _nll_partials(a, mu, var, config.nu)
        w = 1.0 / len(pairs)
        g = _flatten_grads(
            _backward(params, cache, dmu_e * w, dvar_e * _sigmoid(s_raw) * w)
        )
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"gradient became non-finite at step {step}", step=step)

        # Cosine decay to 1% of the base rate: a constant rate leaves the
        # optimizer rattling around the collapsed-variance optimum and the
        # late loss non-monotone.
        lr = config.learning_rate * (0.01 + 0.99 * 0.5 * (1.0 + math.cos(math.pi * step / config.steps)))
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        bc1 = 1.0 - ADAM_BETA1 ** step
        bc2 = 1.0 - ADAM_BETA2 ** step
        theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)

        if step % log_every == 0 or step == config.steps:
            full = nll_loss_array(data, grid, est)
            if not math.isfinite(full):
                raise TrainingError(f"loss became non-finite at step {step}", step=step)
            curve.append((step, full))

    losses = [l for _, l in curve]
    tail_n = max(1, len(losses) // 10)
    if len(losses) >= 3 * tail_n:
        tail = sum(losses[-tail_n:]) / tail_n
        prev = sum(losses[-2 * tail_n:-tail_n]) / tail_n
        if tail > prev + 1e-3 * max(1.0, abs(prev)):
            logging.getLogger(__name__).warning(
                "training loss still moving at the end of the run (%.6g -> %.6g); "
                "consider more steps", prev, tail,
            )

    trace = FitTrace(steps=config.steps, final_loss=curve[-1][1], loss_curve=curve)
    return est, trace


def fit_with_trace(bundle: TrajectoryBundle, config: FitConfig) -> tuple[StudentTEstimator, FitTrace]:
    return fit_array(bundle.to_array(), bundle.grid(), config)


def fit(bundle: TrajectoryBundle, config: FitConfig) -> StudentTEstimator:
    """Fit the estimator to an aligned bundle; see FitConfig for knobs."""
    return fit_with_trace(bundle, config)[0]


def mean_curve(estimator: StudentTEstimator, grid) -> np.ndarray:
    """The fitted mean evaluated on a grid, shape (T, D)."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise ValueError("grid must be a 1-D array of at least two timesteps")
    if np.any(grid < 0.0) or np.any(grid > 1.0):
        raise ValueError("grid values must lie in [0, 1]")
    mu, _ = estimator.mean_and_variance(grid)
    return mu


def extract_mean(estimator: StudentTEstimator, grid) -> Trajectory:
    """Read off the aggregated trajectory: mean per channel, gripper
    thresholded at 0.5 back onto {0, 1}."""
    mu = mean_curve(estimator, grid)
    if estimator.n_channels != 10:
        raise ValueError("trajectory extraction needs a 10-channel estimator")
    out = mu.copy()
    out[:, GRIPPER_CHANNEL] = (mu[:, GRIPPER_CHANNEL] >= 0.5).astype(float)
    return Trajectory.from_array(out, source="aggregated")


def finite_difference_gradient(data: np.ndarray, grid: np.ndarray,
                               estimator: StudentTEstimator, step: float = 1e-5) -> dict:
    """Central-difference gradient of the total NLL, for verification."""
    grads = {}
    for k in PARAM_KEYS:
        p = estimator.params[k]
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + step
            hi = nll_loss_array(data, grid, estimator)
            p[idx] = orig - step
            lo = nll_loss_array(data, grid, estimator)
            p[idx] = orig
            g[idx] = (hi - lo) / (2.0 * step)
            it.iternext()
        grads[k] = g
    return grads


def gradient_check(seed: int = 0, n_configs: int = 20,
                   nus=(1.25, 1.5, 3.0, math.inf), step: float = 1e-5) -> float:
    """Max per-parameter relative error between analytic and central-
    difference gradients over randomized small configurations."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_configs):
        nu = nus[i % len(nus)]
        n_q = int(rng.integers(2, 5))
        n_t = int(rng.integers(3, 7))
        n_d = int(rng.integers(1, 3))
        grid = np.linspace(0.0, 1.0, n_t)
        data = rng.normal(0.0, 1.0, (n_q, n_t, n_d))
        hidden = (int(rng.integers(4, 9)), int(rng.integers(4, 9)))
        _theta, params = _init_params(rng, hidden, n_d, data, 1e-6, nu)
        # Perturb the zero-initialized output weights so the check covers
        # a generic point in parameter space.
        for head in ("mu", "s"):
            params[f"{head}_W3"] = rng.normal(0.0, 0.3, params[f"{head}_W3"].shape)
        est = StudentTEstimator(params=params, nu=nu, hidden=hidden,
                                n_channels=n_d, var_floor=1e-6,
                                channel_shift=rng.normal(0.0, 1.0, n_d),
                                channel_scale=rng.uniform(0.5, 2.0, n_d))
        analytic = loss_gradient_array(data, grid, est)
        numeric = finite_difference_gradient(data, grid, est, step=step)
        for k in PARAM_KEYS:
            denom = np.maximum(np.abs(numeric[k]), 1e-6)
            rel = np.abs(analytic[k] - numeric[k]) / denom
            worst = max(worst, float(rel.max()))
    return worst
