"""Stagewise mixtures of flow components.

Two combination rules share the model container:

- additive: G_c = (1 - rho_c) G_{c-1} + rho_c g_c. Mixture weights are kept
  explicitly and always sum to 1; log-density is exact; sampling is exact.
- multiplicative: log G_c = sum_j rho_j log g_j - log Gamma, where Gamma
  normalizes the product of powered densities. Gamma has no closed form and
  is estimated by importance sampling with the equal-weight additive mixture
  of the same components as proposal; appending a component invalidates the
  stored estimate until it is re-run.

Stage 1 is unboosted in both modes: the first append must use rho = 1, which
gives weight vector [1] (additive) or exponent 1 and Gamma = 1 (multiplicative).

rho selection: grid line search (density estimation) picks the candidate with
the lowest validation loss, ties toward smaller rho; the stochastic update
(density matching) follows the Monte Carlo gradient of the blend's
reverse-KL surrogate with a decaying step, clipped to [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import (
    ConfigError,
    DegenerateProposalError,
    ModelStateError,
    NumericError,
    ShapeError,
    StalePartitionError,
)
from .flows import FlowComponent

ADDITIVE = "additive"
MULTIPLICATIVE = "multiplicative"


@dataclass
class GBNFModel:
    """A boosted mixture: components plus stagewise combination state.

    `rho` records the chosen stage weights in order. For additive models
    `weights` holds the resulting mixture weights; for multiplicative models
    the rho values are the exponents and `log_partition` (with its standard
    error) normalizes the product once estimated.
    """

    mode: str
    components: tuple = ()
    weights: tuple = ()
    rho: tuple = ()
    log_partition: float | None = None
    log_partition_stderr: float | None = None
    partition_fresh: bool = False

    def __post_init__(self):
        if self.mode not in (ADDITIVE, MULTIPLICATIVE):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == ADDITIVE and self.components:
            total = float(np.sum(self.weights))
            if abs(total - 1.0) > 1e-12:
                raise ShapeError(f"additive weights sum to {total}, not 1")

    @property
    def n_components(self):
        return len(self.components)

    @property
    def dim(self):
        if not self.components:
            raise ModelStateError("empty model has no dimension")
        return self.components[0].dim

    def log_prob(self, x):
        if self.mode == ADDITIVE:
            return additive_log_prob(self, x)
        return multiplicative_log_prob(self, x)


def empty_model(mode: str) -> GBNFModel:
    return GBNFModel(mode=mode)


@dataclass
class StageRecord:
    """One boosting stage's outcome, serialized as one JSON line.

    Keys: stage (1-based index), rho (chosen weight), val_loss_before /
    val_loss_after (validation loss of the mixture before and after the
    stage; before is null at stage 1), train_loss_trace (periodic training
    losses), log_partition + log_partition_stderr (multiplicative mode only,
    else null), extras (free-form diagnostics, e.g. the geometric-convergence
    ratio).
    """

    stage: int
    rho: float
    val_loss_after: float
    val_loss_before: float | None = None
    train_loss_trace: list = field(default_factory=list)
    log_partition: float | None = None
    log_partition_stderr: float | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.rho <= 1.0):
            raise ConfigError(f"stage rho must lie in [0, 1], got {self.rho}")

    def to_json_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json_line(line: str) -> "StageRecord":
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as e:
            raise ConfigError(f"bad stage record line: {e}") from e
        return StageRecord(**raw)


def append_component(model: GBNFModel, component: FlowComponent, rho_c: float) -> GBNFModel:
    """Functional stage append.

    Additive: w_j <- w_j (1 - rho_c) for existing components, w_new = rho_c.
    Stage 1 is unboosted, so the first append yields weights [1] whatever
    rho_c says. Multiplicative: the new exponent is rho_c and the partition
    estimate goes stale, except rho_c = 0 where Gamma is unchanged
    identically and the old estimate carries over.
    """
    if not (0.0 <= rho_c <= 1.0):
        raise ConfigError(f"rho must lie in [0, 1], got {rho_c}")
    if model.components and component.dim != model.dim:
        raise ShapeError(f"component dim {component.dim} != model dim {model.dim}")
    if model.mode == ADDITIVE:
        if not model.components:
            weights = (1.0,)
        else:
            weights = tuple(w * (1.0 - rho_c) for w in model.weights) + (rho_c,)
            # Guard the sum-to-1 invariant against accumulated rounding.
            total = float(np.sum(weights))
            weights = tuple(w / total for w in weights)
        return replace(
            model,
            components=model.components + (component,),
            weights=weights,
            rho=model.rho + (rho_c,),
        )
    keep = bool(model.components) and rho_c == 0.0 and model.partition_fresh
    return replace(
        model,
        components=model.components + (component,),
        weights=(),
        rho=model.rho + (rho_c,),
        log_partition=model.log_partition if keep else None,
        log_partition_stderr=model.log_partition_stderr if keep else None,
        partition_fresh=keep,
    )


def additive_log_prob(model: GBNFModel, x):
    """log sum_j w_j g_j(x), skipping zero-weight components.

    Polymorphic over ndarray / Tensor input, so a frozen mixture can sit
    inside a differentiable objective.
    """
    _require(model, ADDITIVE)
    if not model.components:
        raise ModelStateError("empty model")
    live = [(w, c) for w, c in zip(model.weights, model.components) if w > 0.0]
    n = x.shape[0] if isinstance(x, np.ndarray) else x.value.shape[0]
    if len(live) == 1:
        out = live[0][1].log_prob(x)
    else:
        cols = [
            (np.array([j]), ad.reshape(ad.add(c.log_prob(x), float(np.log(w))), (n, 1)))
            for j, (w, c) in enumerate(live)
        ]
        out = ad.logsumexp(ad.combine_cols(len(live), cols), axis=1)
    if isinstance(out, np.ndarray) and np.any(np.isneginf(out)):
        raise NumericError("additive_log_prob", "all component densities vanished at a point")
    return out


def multiplicative_log_prob(model: GBNFModel, x):
    """sum_j rho_j log g_j(x) - log Gamma. Needs a fresh partition estimate."""
    _require(model, MULTIPLICATIVE)
    if not model.components:
        raise ModelStateError("empty model")
    if not model.partition_fresh or model.log_partition is None:
        raise StalePartitionError(
            "partition estimate is stale; run estimate_log_partition (CLI: gbnf partition)"
        )
    out = None
    for rho_j, comp in zip(model.rho, model.components):
        if rho_j == 0.0:
            continue
        term = ad.mul(comp.log_prob(x), float(rho_j))
        out = term if out is None else ad.add(out, term)
    if out is None:
        n = x.shape[0] if isinstance(x, np.ndarray) else x.value.shape[0]
        out = np.zeros(n)
    return ad.sub(out, model.log_partition)


def sample_mixture(model: GBNFModel, n, rng):
    """Draw n points from an additive mixture. Returns (points, component ids).

    Component ids are drawn first, then each component's block in index
    order, so draws are bit-reproducible per seed.
    """
    _require(model, ADDITIVE)
    if not model.components:
        raise ModelStateError("empty model")
    w = np.asarray(model.weights, dtype=np.float64)
    ids = rng.choice(model.n_components, size=n, p=w / w.sum())
    out = np.empty((n, model.dim), dtype=np.float64)
    for j, comp in enumerate(model.components):
        rows = np.flatnonzero(ids == j)
        if rows.size:
            pts, _ = comp.sample(rows.size, rng)
            out[rows] = pts
    return out, ids


def leave_one_out(model: GBNFModel, i: int) -> GBNFModel:
    """Additive mixture with component i (0-based) removed, weights renormalized."""
    _require(model, ADDITIVE)
    c = model.n_components
    if c < 2:
        raise ModelStateError("leave_one_out needs at least two components")
    if not (0 <= i < c):
        raise ConfigError(f"component index {i} out of range for {c} components")
    rest_total = 1.0 - model.weights[i]
    if rest_total <= 0.0:
        raise ModelStateError(f"component {i} carries all the weight; the remainder is degenerate")
    weights = tuple(w / rest_total for j, w in enumerate(model.weights) if j != i)
    total = float(np.sum(weights))
    weights = tuple(w / total for w in weights)
    return replace(
        model,
        components=tuple(comp for j, comp in enumerate(model.components) if j != i),
        weights=weights,
        rho=tuple(r for j, r in enumerate(model.rho) if j != i),
    )


# ---------------------------------------------------------------------------
# partition estimation (multiplicative models)


def _component_log_prob_matrix(model, x):
    return np.stack([comp.log_prob(x) for comp in model.components], axis=1)


def _sample_equal_mixture(model, n, rng):
    ids = rng.choice(model.n_components, size=n)
    out = np.empty((n, model.dim), dtype=np.float64)
    for j, comp in enumerate(model.components):
        rows = np.flatnonzero(ids == j)
        if rows.size:
            pts, _ = comp.sample(rows.size, rng)
            out[rows] = pts
    return out


def _log_mean_exp(v):
    m = float(np.max(v))
    return m + float(np.log(np.mean(np.exp(v - m))))


def _ratio_stderr(log_r):
    # Delta method on log of the mean: sd(R) / (sqrt(S) * mean(R)).
    m = float(np.max(log_r))
    a = np.exp(log_r - m)
    mean_a = float(np.mean(a))
    if len(log_r) < 2 or mean_a == 0.0:
        return 0.0
    return float(np.std(a, ddof=1) / (np.sqrt(len(log_r)) * mean_a))


def estimate_log_partition(model: GBNFModel, n_samples: int, rng):
    """Importance-sampling estimate of log Gamma with its standard error.

    Proposal: the equal-weight additive mixture of the model's components.
    Raises if the total exponent is zero (the product of powers is then not
    normalizable) or if the proposal effective sample size drops below 10.
    """
    _require(model, MULTIPLICATIVE)
    if not model.components:
        raise ModelStateError("empty model")
    if n_samples < 1000:
        raise ConfigError(f"partition estimation needs n_samples >= 1000, got {n_samples}")
    rho = np.asarray(model.rho, dtype=np.float64)
    if float(rho.sum()) == 0.0:
        raise ModelStateError("total exponent is zero; the powered product is not normalizable")
    x = _sample_equal_mixture(model, n_samples, rng)
    lp = _component_log_prob_matrix(model, x)
    log_q = _rowwise_lse(lp) - np.log(model.n_components)
    log_r = lp @ rho - log_q
    ess = float(np.exp(2.0 * _lse(log_r) - _lse(2.0 * log_r)))
    if ess < 10.0:
        raise DegenerateProposalError(f"proposal effective sample size {ess:.2f} < 10")
    log_z = _lse(log_r) - np.log(n_samples)
    return float(log_z), _ratio_stderr(log_r)


def _lse(v):
    m = float(np.max(v))
    if not np.isfinite(m):
        raise NumericError("logsumexp", "all ratios vanished")
    return m + float(np.log(np.sum(np.exp(v - m))))


def _rowwise_lse(mat):
    m = mat.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(mat - m).sum(axis=1, keepdims=True)))[:, 0]


def with_partition(model: GBNFModel, log_partition: float, stderr: float) -> GBNFModel:
    return replace(
        model, log_partition=float(log_partition), log_partition_stderr=float(stderr), partition_fresh=True
    )


@dataclass(frozen=True)
class RecursionCheck:
    discrepancy: float
    combined_stderr: float
    direct: float
    recursive: float


def recursion_check(model: GBNFModel, n_samples: int, rng) -> RecursionCheck:
    """Compare the direct partition estimate against the stagewise recursion
    Gamma_c = Gamma_{c-1} * E_{G_{c-1}}[g_c^{rho_c}].

    The expectation is estimated by sampling-importance-resampling from
    G_{c-1} (equal-weight proposal). Resampled points are treated as
    independent for the standard error, which makes the combined error bar
    slightly optimistic; this is a diagnostic, not a proof.
    """
    _require(model, MULTIPLICATIVE)
    if model.n_components < 2:
        raise ModelStateError("recursion check needs at least two components")
    direct, se_direct = estimate_log_partition(model, n_samples, rng)
    prev = replace(
        model,
        components=model.components[:-1],
        rho=model.rho[:-1],
        log_partition=None,
        partition_fresh=False,
    )
    prev_log_z, se_prev = estimate_log_partition(prev, n_samples, rng)

    # SIR draw from G_{c-1}.
    proposal_pts = _sample_equal_mixture(prev, n_samples, rng)
    lp_prev = _component_log_prob_matrix(prev, proposal_pts)
    log_q = _rowwise_lse(lp_prev) - np.log(prev.n_components)
    log_w = lp_prev @ np.asarray(prev.rho) - log_q
    w = np.exp(log_w - log_w.max())
    w /= w.sum()
    idx = rng.choice(n_samples, size=n_samples, replace=True, p=w)
    pts = proposal_pts[idx]
    rho_c = float(model.rho[-1])
    vals = rho_c * model.components[-1].log_prob(pts)
    term = _log_mean_exp(vals)
    se_term = _ratio_stderr(vals)
    recursive = prev_log_z + term
    combined = float(np.sqrt(se_direct**2 + se_prev**2 + se_term**2))
    return RecursionCheck(
        discrepancy=abs(direct - recursive),
        combined_stderr=combined,
        direct=direct,
        recursive=recursive,
    )


# ---------------------------------------------------------------------------
# rho selection


def rho_line_search(objective_evaluator, grid_size: int = 26, extra_candidates=()):
    """Minimize over a uniform rho grid on [0, 1] including both endpoints.

    Ties resolve to the smaller rho. Candidates from extra_candidates (for
    example, a component's previous weight during fine-tuning) are merged in.
    Returns (rho, candidates, losses).
    """
    if grid_size < 2:
        raise ConfigError(f"grid_size must be >= 2, got {grid_size}")
    grid = np.linspace(0.0, 1.0, grid_size)
    cands = np.unique(np.concatenate([grid, np.asarray(extra_candidates, dtype=np.float64)]))
    if np.any(cands < 0) or np.any(cands > 1):
        raise ConfigError("rho candidates must lie in [0, 1]")
    losses = np.array([float(objective_evaluator(float(r))) for r in cands])
    finite = np.isfinite(losses)
    if not finite.any():
        raise NumericError("rho_line_search", "objective non-finite on the whole grid")
    masked = np.where(finite, losses, np.inf)
    best = int(np.argmin(masked))  # first occurrence = smallest rho on ties
    return float(cands[best]), cands, losses


@dataclass
class RhoSGDConfig:
    init_rho: float
    step: float = 0.05
    decay: float = 0.05
    tol: float = 1e-4
    max_iters: int = 200
    batch: int = 256
    seed: int = 0


@dataclass
class RhoSGDResult:
    rho: float
    converged: bool
    trace: list = field(default_factory=list)


def rho_sgd(evaluator, config: RhoSGDConfig) -> RhoSGDResult:
    """Stochastic mixture-weight update for density matching.

    evaluator must provide sample_fixed(n, rng), sample_new(n, rng),
    log_fixed(z), log_new(z), log_target(z) (unnormalized target is fine:
    its normalizer cancels in the gradient). Each iteration computes

        gamma(z) = log[(1 - rho) G(z) + rho g(z)] - log_target(z)
        grad     = mean gamma over new-component draws
                 - mean gamma over fixed-mixture draws

    and steps rho against it with a decaying rate, clipped to [0, 1]. Stops
    when the iterate moves less than tol; hitting max_iters returns
    converged=False.
    """
    if not (0.0 <= config.init_rho <= 1.0):
        raise ConfigError(f"init_rho must lie in [0, 1], got {config.init_rho}")
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x9E37)))
    rho = float(config.init_rho)
    trace = [rho]
    converged = False

    def gamma(z, r):
        lf = evaluator.log_fixed(z)
        ln = evaluator.log_new(z)
        with np.errstate(divide="ignore"):
            blend = np.logaddexp(np.log(1.0 - r) + lf if r < 1.0 else np.full_like(lf, -np.inf),
                                 np.log(r) + ln if r > 0.0 else np.full_like(ln, -np.inf))
        return blend - evaluator.log_target(z)

    for t in range(config.max_iters):
        z_new = evaluator.sample_new(config.batch, rng)
        z_fixed = evaluator.sample_fixed(config.batch, rng)
        grad = float(np.mean(gamma(z_new, rho)) - np.mean(gamma(z_fixed, rho)))
        if not np.isfinite(grad):
            raise NumericError("rho_sgd", "non-finite gradient")
        lr = config.step / (1.0 + config.decay * t)
        new_rho = float(np.clip(rho - lr * grad, 0.0, 1.0))
        moved = abs(new_rho - rho)
        rho = new_rho
        trace.append(rho)
        if moved < config.tol:
            converged = True
            break
    return RhoSGDResult(rho=rho, converged=converged, trace=trace)


# ---------------------------------------------------------------------------
# fine-tuning


def fine_tune(model: GBNFModel, trainer, passes: int):
    """Cycle through components; retrain each against the frozen rest.

    For each component i: freeze leave_one_out(model, i), let the trainer
    retrain a copy of component i against it, then re-select its weight by
    line search over the rho grid plus the previous weight. The candidate set
    always contains the pre-pass model (old component at its old weight), so
    a pass can only keep or lower the validation loss the trainer reports.

    trainer must provide retrain(fixed_model, component) -> component and
    blend_val_loss(fixed_model, component, rho) -> float, plus rho_grid_size.
    passes=0 (or a trainer that returns components unchanged) is a no-op.
    Returns (model, trace) with one (pass, component, val_loss) entry each.
    """
    _require(model, ADDITIVE)
    if passes < 0:
        raise ConfigError(f"passes must be >= 0, got {passes}")
    if passes == 0:
        return model, []
    if model.n_components < 2:
        raise ModelStateError("fine-tuning needs at least two components")
    trace = []
    for p in range(passes):
        for i in range(model.n_components):
            if 1.0 - model.weights[i] <= 0.0:
                continue  # removing this component would leave zero mass
            loo = leave_one_out(model, i)
            old_comp = model.components[i]
            old_w = float(model.weights[i])
            new_comp = trainer.retrain(loo, old_comp)
            best = None
            for comp in (old_comp, new_comp):
                rho, _, losses = rho_line_search(
                    lambda r, c=comp: trainer.blend_val_loss(loo, c, r),
                    grid_size=trainer.rho_grid_size,
                    extra_candidates=(old_w,),
                )
                loss = float(np.min(losses[np.isfinite(losses)]))
                if best is None or loss < best[0]:
                    best = (loss, comp, rho)
            loss, comp, rho = best
            model = _reassemble(loo, comp, rho, i)
            trace.append((p, i, loss))
    return model, trace


def _reassemble(loo: GBNFModel, component: FlowComponent, rho: float, position: int) -> GBNFModel:
    """Insert a component into an additive mixture at a slot with weight rho."""
    rest = [w * (1.0 - rho) for w in loo.weights]
    comps = list(loo.components)
    rhos = list(loo.rho)
    comps.insert(position, component)
    rest.insert(position, rho)
    rhos.insert(position, rho)
    total = float(np.sum(rest))
    if total <= 0:
        raise NumericError("fine_tune", "all mixture weights vanished")
    weights = tuple(w / total for w in rest)
    return replace(loo, components=tuple(comps), weights=weights, rho=tuple(rhos))


def _require(model: GBNFModel, mode: str):
    if model.mode != mode:
        raise ModelStateError(f"operation requires a {mode} model, got {model.mode}")
