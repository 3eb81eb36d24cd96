"""Composite-objective training: adaptive imputation coupled to the bound.

The outer loop alternates (a) building the multi-output sampling
distribution over the missing entries from the current shared dynamical
kernel, (b) imputing them (posterior mean or a seeded draw), and (c) a block
of gradient steps on

    total = L_mo(observed) + data_term(imputed matrix) - KL

with the imputed values held fixed (the sampling step is outside the
differentiated objective). The dynamical kernel parameters are a single
storage shared by the sampler and the latent prior.

Outputs are centered and scaled per dimension internally; observed entries
of the imputed matrix always hold the raw dataset values bit-exactly.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.optimize

from . import multioutput
from .bound import (
    BoundGradients,
    InducingSet,
    bound_gradients,
    collapsed_bound,
    fit_mapping_posterior,
    predict_outputs,
)
from .data_eval import LongitudinalDataset
from .errors import (
    DegenerateTime,
    InsufficientData,
    NonFiniteObjective,
)
from .kernels import (
    KernelFamily,
    KernelSpec,
    eval_kernel,
    from_log_params,
    n_log_params,
    rbf_ard,
    periodic,
    to_log_params,
)
from .multioutput import ConvParams, LmcParams, ObservationSet, draw_samples
from .numerics import chol_with_jitter, solve_psd
from .variational import DynamicalPrior, VariationalPosterior, compute_dim_moments, kl_qp

SAMPLERS = ("lmc", "conv", "none")
IMPUTE_MODES = ("mean", "sample")
OPTIMIZERS = ("adaptive", "quasi_newton")
DYN_FAMILIES = ("rbf", "periodic")


@dataclass(frozen=True)
class TrainConfig:
    latent_dim: int = 2
    inducing_count: int = 16
    sampler: str = "conv"  # "lmc" | "conv" | "none" (bound-only baseline)
    impute_mode: str = "sample"
    resample_every: int = 1
    max_outer: int = 15
    inner_steps: int = 20
    optimizer: str = "adaptive"
    step_size: float = 0.02
    convergence_tol: float = 1e-4
    seed: int = 0
    # model initialization
    dyn_family: str = "rbf"
    dyn_variance: float = 1.0
    dyn_lengthscale: float = 0.15  # on time rescaled to [0, 1]
    dyn_period: float = 0.5
    map_variance: float = 1.0
    map_lengthscale: float = 1.0
    beta0: float = 100.0
    beta_warmup: int = 3  # outer iterations with the noise precision frozen
    init_ridge: float = 0.1  # PCA-score noise assumed when solving for mu_bar
    task_noise0: float = 0.1
    lmc_rank: int = 0  # 0 means full rank (= number of modeled dimensions)
    conv_inducing: int = 25
    conv_scale0: float = 0.05
    prediction_noise: float = 0.0
    full_cov_sampling: bool = False
    freeze_coregionalization: bool = False

    def __post_init__(self):
        if self.latent_dim < 1 or self.inducing_count < 1:
            raise ValueError("latent_dim and inducing_count must be >= 1")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        if self.impute_mode not in IMPUTE_MODES:
            raise ValueError(f"impute_mode must be one of {IMPUTE_MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.dyn_family not in DYN_FAMILIES:
            raise ValueError(f"dyn_family must be one of {DYN_FAMILIES}")
        if self.convergence_tol <= 0 or self.step_size <= 0:
            raise ValueError("tolerances and step sizes must be positive")
        if self.resample_every < 1:
            raise ValueError("resample_every must be >= 1")


@dataclass
class ModelState:
    """Everything needed to evaluate the objective and predict."""

    times: np.ndarray  # (N,) original units
    time_offset: float
    time_span: float
    mask: np.ndarray  # (N, D_all) bool
    imputed: np.ndarray  # (N, D_all) original units; observed entries fixed
    offsets: np.ndarray  # (D_all,) per-dimension centering
    scales: np.ndarray  # (D_all,) per-dimension scaling
    dim_names: tuple
    active_dims: np.ndarray  # modeled dimension indices (>= 2 observations)
    dropped_dims: tuple
    post: VariationalPosterior
    dyn_kernel: KernelSpec  # single storage for the shared dynamical kernel
    map_kernel: KernelSpec
    inducing: InducingSet
    beta: float
    sampler: str
    lmc_params: LmcParams | None
    conv_gains: np.ndarray | None  # conv sampler state (kernel lives in dyn_kernel)
    conv_scales: np.ndarray | None
    conv_noise: np.ndarray | None
    conv_inducing_times: np.ndarray | None
    cfg: TrainConfig

    def scaled_times(self, times=None) -> np.ndarray:
        t = self.times if times is None else np.asarray(times, dtype=float)
        return (t - self.time_offset) / self.time_span

    def prior(self) -> DynamicalPrior:
        return DynamicalPrior(self.scaled_times(), self.dyn_kernel)

    def conv_params(self) -> ConvParams:
        """Sampler view sharing the dynamical kernel object (no private copy)."""
        return ConvParams(
            smoothing_scales=self.conv_scales,
            smoothing_gains=self.conv_gains,
            latent_inputs=self.conv_inducing_times,
            latent_kernel=self.dyn_kernel,
            task_noise=self.conv_noise,
            prediction_noise=self.cfg.prediction_noise,
        )

    def centered(self, matrix: np.ndarray) -> np.ndarray:
        """Active-dimension slice in internal (centered, scaled) units."""
        sub = (matrix - self.offsets[None, :]) / self.scales[None, :]
        return sub[:, self.active_dims]

    def observations(self) -> ObservationSet:
        """Observed entries as a heterotopic set over scaled time."""
        st = self.scaled_times()
        rows, cols = [], []
        for j, d in enumerate(self.active_dims):
            r = np.where(self.mask[:, d])[0]
            rows.append(r)
            cols.append(np.full(r.size, j))
        rows = np.concatenate(rows)
        cols = np.concatenate(cols).astype(int)
        vals = (self.imputed[rows, self.active_dims[cols]] - self.offsets[self.active_dims[cols]]) / self.scales[
            self.active_dims[cols]
        ]
        return ObservationSet(st[rows], cols, vals)

    def missing_targets(self):
        """(scaled time, active-dim index) pairs for unobserved entries."""
        st = self.scaled_times()
        targets = []
        locs = []
        for j, d in enumerate(self.active_dims):
            for n in np.where(~self.mask[:, d])[0]:
                targets.append((st[n], j))
                locs.append((n, d))
        return targets, locs


@dataclass(frozen=True)
class CompositeValue:
    total: float
    l_mo: float
    f_tilde: float
    kl: float


@dataclass
class TrainTrace:
    iterations: list = field(default_factory=list)
    totals: list = field(default_factory=list)
    l_mos: list = field(default_factory=list)
    f_tildes: list = field(default_factory=list)
    kls: list = field(default_factory=list)
    impute_rms: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def record(self, it, value: CompositeValue, rms: float):
        self.iterations.append(int(it))
        self.totals.append(float(value.total))
        self.l_mos.append(float(value.l_mo))
        self.f_tildes.append(float(value.f_tilde))
        self.kls.append(float(value.kl))
        self.impute_rms.append(float(rms))

    def to_csv(self, path: str):
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "total", "l_mo", "f_tilde", "kl", "impute_rms_change"])
            for row in zip(
                self.iterations, self.totals, self.l_mos, self.f_tildes, self.kls, self.impute_rms
            ):
                w.writerow([row[0]] + [repr(v) for v in row[1:]])


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _whitened_pca(Yc: np.ndarray, q: int, rng) -> np.ndarray:
    """Top-q principal scores, sign-fixed and normalized to unit variance."""
    U, s, Vt = np.linalg.svd(Yc, full_matrices=False)
    k = min(q, s.size)
    scores = U[:, :k] * s[:k]
    # Deterministic sign: largest-magnitude loading of each axis positive.
    for j in range(k):
        lead = np.argmax(np.abs(Vt[j]))
        if Vt[j, lead] < 0:
            scores[:, j] = -scores[:, j]
    X = np.zeros((Yc.shape[0], q))
    X[:, :k] = scores
    for j in range(q):
        sd = X[:, j].std()
        if sd > 1e-12:
            X[:, j] /= sd
        else:  # rank-deficient direction: tiny seeded jitter
            X[:, j] = 1e-3 * rng.standard_normal(Yc.shape[0])
    return X


def _build_dyn_kernel(cfg: TrainConfig) -> KernelSpec:
    if cfg.dyn_family == "periodic":
        return periodic(cfg.dyn_variance, cfg.dyn_lengthscale, cfg.dyn_period)
    return rbf_ard(cfg.dyn_variance, [cfg.dyn_lengthscale])


def initialize(data: LongitudinalDataset, cfg: TrainConfig) -> ModelState:
    """Deterministic starting state: per-dimension mean imputation, whitened
    PCA latents mapped through the prior solve, inducing points from the
    latent means."""
    times = data.times
    if np.any(np.diff(times) <= 0):
        raise DegenerateTime("duplicate or non-increasing timestamps")
    rng = np.random.default_rng(cfg.seed)
    N, D = data.values.shape

    counts = data.mask.sum(axis=0)
    active = np.where(counts >= 2)[0]
    dropped = tuple(int(d) for d in np.where(counts < 2)[0])
    if active.size == 0:
        raise InsufficientData("no dimension has at least 2 observations")

    offsets = np.zeros(D)
    scales = np.ones(D)
    for d in range(D):
        vals = data.values[data.mask[:, d], d]
        if vals.size:
            offsets[d] = float(vals.mean())
            sd = float(vals.std())
            scales[d] = sd if sd > 1e-8 else 1.0

    imputed = np.where(data.mask, data.values, offsets[None, :])

    t0 = float(times[0])
    span = float(times[-1] - times[0]) if times.size > 1 else 1.0
    if span <= 0:
        span = 1.0
    st = (times - t0) / span

    dyn_kernel = _build_dyn_kernel(cfg)
    q = cfg.latent_dim
    Yc = ((imputed - offsets[None, :]) / scales[None, :])[:, active]
    X0 = _whitened_pca(Yc, q, rng)

    prior = DynamicalPrior(st, dyn_kernel)
    # Ridge solve: the PCA scores are treated as noisy observations of the
    # latent path, so mu = K_t mu_bar starts as their smoothed version and
    # the initial KL stays moderate even for near-singular K_t.
    ridge = max(cfg.init_ridge, 0.0) * float(np.mean(np.diag(prior.K_t)))
    Kt_factor = chol_with_jitter(prior.K_t + ridge * np.eye(N))
    mu_bar = np.stack([solve_psd(Kt_factor, X0[:, j]) for j in range(q)])
    post = VariationalPosterior(mu_bar=mu_bar, lam=np.ones((q, N)))

    m = min(cfg.inducing_count, N)
    Z = X0[rng.choice(N, size=m, replace=False)]
    map_kernel = rbf_ard(cfg.map_variance, [cfg.map_lengthscale] * q)

    n_active = active.size
    lmc_params = None
    conv_gains = conv_scales = conv_noise = conv_z = None
    if cfg.sampler == "lmc":
        p = cfg.lmc_rank if cfg.lmc_rank > 0 else n_active
        lmc_params = LmcParams(
            phi=np.eye(n_active, p), task_noise=cfg.task_noise0 * np.ones(n_active)
        )
    elif cfg.sampler == "conv":
        conv_gains = np.ones(n_active)
        conv_scales = cfg.conv_scale0 * np.ones(n_active)
        conv_noise = cfg.task_noise0 * np.ones(n_active)
        mu = min(cfg.conv_inducing, N)
        conv_z = np.linspace(st[0] - 0.02, st[-1] + 0.02, mu)

    return ModelState(
        times=times.copy(),
        time_offset=t0,
        time_span=span,
        mask=data.mask.copy(),
        imputed=imputed,
        offsets=offsets,
        scales=scales,
        dim_names=tuple(data.dim_names),
        active_dims=active,
        dropped_dims=dropped,
        post=post,
        dyn_kernel=dyn_kernel,
        map_kernel=map_kernel,
        inducing=InducingSet(Z),
        beta=cfg.beta0,
        sampler=cfg.sampler,
        lmc_params=lmc_params,
        conv_gains=conv_gains,
        conv_scales=conv_scales,
        conv_noise=conv_noise,
        conv_inducing_times=conv_z,
        cfg=cfg,
    )


# ---------------------------------------------------------------------------
# Parameter packing
# ---------------------------------------------------------------------------


def _pack(state: ModelState) -> np.ndarray:
    parts = [
        state.post.mu_bar.ravel(),
        np.log(state.post.lam).ravel(),
        state.inducing.Z.ravel(),
        to_log_params(state.map_kernel),
        to_log_params(state.dyn_kernel),
        [math.log(state.beta)],
    ]
    if state.sampler == "lmc":
        if not state.cfg.freeze_coregionalization:
            parts.append(state.lmc_params.phi.ravel())
        parts.append(np.log(state.lmc_params.task_noise))
    elif state.sampler == "conv":
        parts.append(state.conv_gains)
        parts.append(np.log(state.conv_scales))
        parts.append(np.log(state.conv_noise))
    return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])


def _unpack(state: ModelState, vec: np.ndarray) -> ModelState:
    """New state with parameters taken from the flat vector (shared theta_x
    applied once; prior and sampler views both read it)."""
    i = 0

    def take(n):
        nonlocal i
        out = vec[i : i + n]
        i += n
        return out

    qn = state.post.mu_bar.size
    mu_bar = take(qn).reshape(state.post.mu_bar.shape)
    lam = np.exp(take(qn).reshape(state.post.lam.shape))
    Z = take(state.inducing.Z.size).reshape(state.inducing.Z.shape)
    map_kernel = from_log_params(state.map_kernel, take(n_log_params(state.map_kernel)))
    dyn_kernel = from_log_params(state.dyn_kernel, take(n_log_params(state.dyn_kernel)))
    beta = float(np.exp(take(1)[0]))
    new = replace(
        state,
        post=VariationalPosterior(mu_bar, lam),
        inducing=InducingSet(Z),
        map_kernel=map_kernel,
        dyn_kernel=dyn_kernel,
        beta=beta,
    )
    if state.sampler == "lmc":
        phi = state.lmc_params.phi
        if not state.cfg.freeze_coregionalization:
            phi = take(phi.size).reshape(phi.shape)
        noise = np.exp(take(state.lmc_params.task_noise.size))
        new.lmc_params = LmcParams(phi=phi, task_noise=noise)
    elif state.sampler == "conv":
        d = state.conv_gains.size
        new.conv_gains = take(d).copy()
        new.conv_scales = np.exp(take(d))
        new.conv_noise = np.exp(take(d))
    assert i == vec.size
    return new


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def composite_objective(state: ModelState) -> CompositeValue:
    """total = L_mo + data term - KL at the current imputation."""
    prior = state.prior()
    Yc = state.centered(state.imputed)
    bv = collapsed_bound(Yc, state.post, prior, state.inducing, state.map_kernel, state.beta)
    l_mo = 0.0
    if state.sampler != "none":
        obs = state.observations()
        if state.sampler == "lmc":
            l_mo = multioutput.lmc_log_likelihood(obs, state.lmc_params, state.dyn_kernel)
        else:
            l_mo = multioutput.sparse_conv_log_likelihood(obs, state.conv_params())
    total = l_mo + bv.data_term - bv.kl_term
    return CompositeValue(total=total, l_mo=l_mo, f_tilde=bv.data_term, kl=bv.kl_term)


def composite_gradient(state: ModelState) -> tuple[CompositeValue, np.ndarray]:
    """Objective value and its gradient in the packed-parameter layout.

    The imputed matrix is treated as a constant: gradients flow through the
    likelihood and bound terms only.
    """
    prior = state.prior()
    Yc = state.centered(state.imputed)
    bv = collapsed_bound(Yc, state.post, prior, state.inducing, state.map_kernel, state.beta)
    bg = bound_gradients(Yc, state.post, prior, state.inducing, state.map_kernel, state.beta)

    d_log_kx = bg.d_log_kx.copy()
    l_mo = 0.0
    sampler_parts = []
    if state.sampler != "none":
        obs = state.observations()
        if state.sampler == "lmc":
            l_mo = multioutput.lmc_log_likelihood(obs, state.lmc_params, state.dyn_kernel)
            sg = multioutput.lmc_likelihood_gradients(obs, state.lmc_params, state.dyn_kernel)
            d_log_kx += sg.d_log_kt
            if not state.cfg.freeze_coregionalization:
                sampler_parts.append(sg.d_phi.ravel())
            sampler_parts.append(sg.d_log_noise)
        else:
            params = state.conv_params()
            l_mo = multioutput.sparse_conv_log_likelihood(obs, params)
            sg = multioutput.conv_likelihood_gradients(obs, params)
            d_log_kx += sg.d_log_latent
            sampler_parts.extend([sg.d_gains, sg.d_log_scales, sg.d_log_noise])

    grad = np.concatenate(
        [
            bg.d_mu_bar.ravel(),
            bg.d_log_lambda.ravel(),
            bg.d_Z.ravel(),
            bg.d_log_kf,
            d_log_kx,
            [bg.d_log_beta],
        ]
        + sampler_parts
    )
    total = l_mo + bv.data_term - bv.kl_term
    value = CompositeValue(total=total, l_mo=l_mo, f_tilde=bv.data_term, kl=bv.kl_term)
    return value, grad


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


LOG_BOUND = 12.0  # |log parameter| cap: scales in [exp(-12), exp(12)]
LINEAR_BOUND = 1e3  # cap for linear parameters (latents, loadings, gains)


def _bounds(state: ModelState) -> np.ndarray:
    """(P, 2) box bounds aligned with the packed layout; keeps exp() finite."""
    qn = state.post.mu_bar.size
    rows = [
        np.tile([-LINEAR_BOUND, LINEAR_BOUND], (qn, 1)),  # mu_bar
        np.tile([-20.0, 20.0], (qn, 1)),  # log lambda
        np.tile([-LINEAR_BOUND, LINEAR_BOUND], (state.inducing.Z.size, 1)),  # Z
        np.tile([-LOG_BOUND, LOG_BOUND], (n_log_params(state.map_kernel), 1)),
        np.tile([-LOG_BOUND, LOG_BOUND], (n_log_params(state.dyn_kernel), 1)),
        np.array([[-LOG_BOUND, 16.0]]),  # log beta
    ]
    if state.sampler == "lmc":
        if not state.cfg.freeze_coregionalization:
            rows.append(np.tile([-LINEAR_BOUND, LINEAR_BOUND], (state.lmc_params.phi.size, 1)))
        rows.append(np.tile([-LOG_BOUND, 5.0], (state.lmc_params.task_noise.size, 1)))
    elif state.sampler == "conv":
        d = state.conv_gains.size
        rows.append(np.tile([-LINEAR_BOUND, LINEAR_BOUND], (d, 1)))
        rows.append(np.tile([-LOG_BOUND, 5.0], (d, 1)))  # log scales
        rows.append(np.tile([-LOG_BOUND, 5.0], (d, 1)))  # log noise
    return np.concatenate(rows, axis=0)


_EVAL_ERRORS = (np.linalg.LinAlgError, ValueError, FloatingPointError, OverflowError)


def _objective_at(state: ModelState, vec: np.ndarray):
    st = _unpack(state, vec)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore", under="ignore"):
        value, grad = composite_gradient(st)
    return value, grad, st


def _rprop_block(state, vec, n_steps, step_size, frozen):
    """Sign-based adaptive ascent with step rejection on objective decrease."""
    value, grad, _ = _objective_at(state, vec)
    if not np.isfinite(value.total):
        raise NonFiniteObjective("objective non-finite at block start")
    bounds = _bounds(state)
    delta = step_size * np.ones_like(vec)
    prev_grad = np.zeros_like(vec)
    best_vec, best_val = vec.copy(), value
    grad[frozen] = 0.0
    for _ in range(n_steps):
        sign_change = grad * prev_grad
        delta[sign_change > 0] *= 1.2
        delta[sign_change < 0] *= 0.5
        np.clip(delta, 1e-10, 5.0, out=delta)
        trial = np.clip(best_vec + np.sign(grad) * delta, bounds[:, 0], bounds[:, 1])
        try:
            t_value, t_grad, _ = _objective_at(state, trial)
        except _EVAL_ERRORS:
            delta *= 0.5
            prev_grad = np.zeros_like(vec)
            continue
        t_grad[frozen] = 0.0
        if not np.isfinite(t_value.total) or t_value.total < best_val.total:
            delta *= 0.5
            prev_grad = np.zeros_like(vec)
            continue
        best_vec, best_val = trial, t_value
        prev_grad, grad = grad, t_grad
    return best_vec, best_val


def _lbfgs_block(state, vec, n_steps, frozen):
    start_value, _, _ = _objective_at(state, vec)
    if not np.isfinite(start_value.total):
        raise NonFiniteObjective("objective non-finite at block start")
    bounds = _bounds(state)
    vec = np.clip(vec, bounds[:, 0], bounds[:, 1])

    def fun(v):
        try:
            value, grad, _ = _objective_at(state, v)
        except _EVAL_ERRORS:
            return 1e100, np.zeros_like(v)
        if not np.isfinite(value.total) or not np.all(np.isfinite(grad)):
            return 1e100, np.zeros_like(v)
        grad = grad.copy()
        grad[frozen] = 0.0
        return -value.total, -grad

    res = scipy.optimize.minimize(
        fun,
        vec,
        jac=True,
        method="L-BFGS-B",
        bounds=list(zip(bounds[:, 0], bounds[:, 1])),
        options={"maxiter": n_steps, "maxls": 25},
    )
    x = res.x.copy()
    x[frozen] = vec[frozen]  # belt and braces: frozen coordinates untouched
    end_value, _, _ = _objective_at(state, x)
    if not np.isfinite(end_value.total) or end_value.total < start_value.total:
        return vec, start_value
    return x, end_value


def _frozen_indices(state: ModelState, outer: int) -> np.ndarray:
    """Coordinates held fixed this outer iteration.

    During warmup all noise-like parameters (the bound's precision and the
    sampler's task noise) stay at their initial values so the latent
    structure organizes before noise can absorb the signal.
    """
    frozen = np.zeros(_pack(state).size, dtype=bool)
    if outer < state.cfg.beta_warmup:
        qn = state.post.mu_bar.size
        beta_idx = (
            2 * qn
            + state.inducing.Z.size
            + n_log_params(state.map_kernel)
            + n_log_params(state.dyn_kernel)
        )
        frozen[beta_idx] = True
        if state.sampler == "lmc":
            d = state.lmc_params.task_noise.size
            frozen[frozen.size - d :] = True
        elif state.sampler == "conv":
            d = state.conv_gains.size
            frozen[frozen.size - d :] = True  # log task noise is the last block
    return frozen


def _inner_optimize(state: ModelState, outer: int) -> tuple[ModelState, CompositeValue]:
    vec = _pack(state)
    frozen = _frozen_indices(state, outer)
    if state.cfg.optimizer == "quasi_newton":
        vec, value = _lbfgs_block(state, vec, state.cfg.inner_steps, frozen)
    else:
        vec, value = _rprop_block(state, vec, state.cfg.inner_steps, state.cfg.step_size, frozen)
    return _unpack(state, vec), value


# ---------------------------------------------------------------------------
# Imputation
# ---------------------------------------------------------------------------


def _refresh_imputation(state: ModelState, outer: int) -> tuple[np.ndarray, float]:
    """New imputed matrix from the current sampling distribution; returns the
    matrix and the RMS change over missing entries."""
    targets, locs = state.missing_targets()
    if not targets or state.sampler == "none":
        return state.imputed, 0.0
    obs = state.observations()
    diagonal = not state.cfg.full_cov_sampling
    if state.sampler == "lmc":
        dist = multioutput.lmc_posterior(
            obs, state.lmc_params, state.dyn_kernel, targets, diagonal=diagonal
        )
    else:
        dist = multioutput.sparse_conv_posterior(
            obs, state.conv_params(), targets, diagonal=diagonal
        )
    draws = draw_samples(dist, state.cfg.impute_mode, seed=(state.cfg.seed, outer, 0x5EED))
    new = state.imputed.copy()
    sq = 0.0
    for (n, d), v in zip(locs, draws):
        raw = v * state.scales[d] + state.offsets[d]
        sq += (raw - new[n, d]) ** 2
        new[n, d] = raw
    return new, math.sqrt(sq / len(locs))


# ---------------------------------------------------------------------------
# Fit / predict
# ---------------------------------------------------------------------------


def _snapshot(state: ModelState) -> ModelState:
    """Copy sufficient for rollback: parameters are immutable dataclasses,
    only the imputed matrix is mutable."""
    return replace(state, imputed=state.imputed.copy())


def fit(data: LongitudinalDataset, cfg: TrainConfig) -> tuple[ModelState, TrainTrace]:
    """Run the alternating impute/ascend loop until convergence or budget.

    In mean mode each outer iteration (imputation refresh plus inner
    gradient block) is one accepted or rejected step: if it fails to improve
    the objective it is rolled back entirely, so the recorded trace is
    non-decreasing. Sample mode always accepts.
    """
    state = initialize(data, cfg)
    trace = TrainTrace()
    if state.dropped_dims:
        trace.notes.append(f"dropped dimensions with <2 observations: {state.dropped_dims}")
    mean_mode = cfg.impute_mode == "mean"
    last_value = None
    flat_count = 0
    for outer in range(cfg.max_outer):
        previous = _snapshot(state) if mean_mode else None
        try:
            rms = 0.0
            if outer % cfg.resample_every == 0:
                state.imputed, rms = _refresh_imputation(state, outer)
            state, value = _inner_optimize(state, outer)
            if not np.isfinite(value.total):
                raise NonFiniteObjective(f"objective non-finite at iteration {outer}")
        except NonFiniteObjective as exc:
            exc.trace = trace
            raise
        except np.linalg.LinAlgError as exc:
            raise type(exc)(f"iteration {outer}: {exc}") from exc
        improvement = None if last_value is None else value.total - last_value.total
        if mean_mode and improvement is not None and improvement < -1e-12:
            state, value, rms = previous, last_value, 0.0  # reject the outer step
            improvement = 0.0
        trace.record(outer, value, rms)
        if mean_mode and improvement is not None:
            flat_count = flat_count + 1 if improvement < cfg.convergence_tol else 0
            if flat_count >= 3:
                last_value = value
                break
        last_value = value
    return state, trace


def predict(state: ModelState, times) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance of the outputs at arbitrary times.

    The latent predictive at each new time follows the GP conditional of the
    dynamical prior against the variational moments; it is then pushed
    through the sparse mapping in closed form. Variances include the
    observation noise 1/beta. Dropped dimensions fall back to their observed
    mean with NaN variance.
    """
    times = np.asarray(times, dtype=float).ravel()
    st_new = state.scaled_times(times)
    prior = state.prior()
    n, Q = times.size, state.post.n_latent
    means_star = np.empty((n, Q))
    vars_star = np.empty((n, Q))
    t_train = prior.times[:, None]
    t_new = st_new[:, None]
    K_star = eval_kernel(state.dyn_kernel, t_new, t_train)  # (n, N)
    k_diag = np.full(n, state.dyn_kernel.variance)
    for q in range(Q):
        dm = compute_dim_moments(prior, state.post.mu_bar[q], state.post.lam[q])
        means_star[:, q] = K_star @ state.post.mu_bar[q]
        quad = np.einsum("ij,jk,ik->i", K_star, dm.C, K_star)
        vars_star[:, q] = np.maximum(k_diag - quad, 0.0)

    Yc = state.centered(state.imputed)
    mp = fit_mapping_posterior(
        Yc, state.post, prior, state.inducing, state.map_kernel, state.beta
    )
    mean_c, var_c = predict_outputs(mp, means_star, vars_star)
    var_c = var_c + 1.0 / state.beta

    D = state.mask.shape[1]
    mean = np.tile(state.offsets, (n, 1))
    var = np.full((n, D), np.nan)
    for j, d in enumerate(state.active_dims):
        mean[:, d] = mean_c[:, j] * state.scales[d] + state.offsets[d]
        var[:, d] = var_c[:, j] * state.scales[d] ** 2
    return mean, var


def ard_relevances(state: ModelState) -> np.ndarray:
    """Inverse squared mapping lengthscales, normalized to a max of one."""
    w = state.map_kernel.ard_weights
    return w / w.max()
