"""Stagewise training: optimizer, schedules, stage fitting, checkpoints.

A run is fully determined by (config, seed): every random stream derives
from a numpy SeedSequence keyed on (seed, stage, purpose), gradients reduce
in fixed order, and validation sets are frozen up front, so repeated runs
are bit-identical.

Stage objectives:

- density estimation, stage 1: plain NLL on minibatches.
- density estimation, later stages, additive: the entropy-regularized ratio
  objective against the frozen mixture.
- density estimation, later stages, multiplicative: NLL over batches
  resampled with weights proportional to 1/G^beta (computed once per stage).
- density matching: the lambda-weighted reverse-KL surrogate through the
  flow, with the frozen mixture's log-density added from stage 2 on.

rho selection is a validation-loss line search over a [0, 1] grid (density
estimation) or the stochastic update (density matching). The rho = 0 grid
candidate reproduces the previous model's validation loss bit-for-bit, which
makes the per-stage validation trace non-increasing by construction.
Multiplicative stages price every candidate with a shared-sample estimate of
the partition recursion ratio E_G[g^rho], anchored so rho = 0 carries the
stored partition over exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from . import boosting as bc
from . import objectives as obj
from .errors import CheckpointError, ConfigError, NumericError, TrainingAbort
from .flows import AFFINE, COUPLING, FlowComponent, new_component
from .targets import EnergyTarget, TabularDataset

DENSITY_ESTIMATION = "density_estimation"
DENSITY_MATCHING = "density_matching"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
GRAD_CLIP_NORM = 10.0


@dataclass
class TrainConfig:
    """Everything a boosting run needs besides the data or target.

    lam left as None defaults to 0.8 for density matching and 1.0 otherwise.
    The additive-stage entropy term is a raw sum over the batch, so useful
    lam values for that objective scale like 1/batch.
    """

    mode: str
    dim: int = 2
    components: int = 1
    flow_steps: int = 4
    hidden: int = 64
    kind: str = COUPLING
    combine: str = bc.ADDITIVE
    lam: float | None = None
    lr: float = 1e-3
    schedule: str = "cosine"
    batch: int = 256
    max_steps: int = 25_000
    eval_every: int = 100
    patience: int = 50
    seed: int = 0
    rho_strategy: str | None = None
    rho_grid_size: int = 26
    rho_step: float = 0.05
    rho_decay: float = 0.1
    rho_tol: float = 1e-4
    rho_max_iters: int = 2000
    rho_batch: int = 256
    finetune_passes: int = 0
    finetune_steps: int | None = None
    partition_samples: int = 100_000
    n_mc: int = 256
    val_mc: int = 4096
    beta: float = 1.0
    target: str | None = None

    def __post_init__(self):
        if self.mode not in (DENSITY_ESTIMATION, DENSITY_MATCHING):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.combine not in (bc.ADDITIVE, bc.MULTIPLICATIVE):
            raise ConfigError(f"unknown combination rule {self.combine!r}")
        if self.mode == DENSITY_MATCHING and self.combine != bc.ADDITIVE:
            raise ConfigError("density matching supports additive combination only")
        if self.kind not in (COUPLING, AFFINE):
            raise ConfigError(f"unknown component kind {self.kind!r}")
        if self.lam is None:
            self.lam = 0.8 if self.mode == DENSITY_MATCHING else 1.0
        if self.rho_strategy is None:
            self.rho_strategy = "sgd" if self.mode == DENSITY_MATCHING else "grid"
        if self.rho_strategy not in ("grid", "sgd"):
            raise ConfigError(f"unknown rho strategy {self.rho_strategy!r}")
        if self.finetune_steps is None:
            self.finetune_steps = self.max_steps
        if self.finetune_passes > 0:
            if self.mode != DENSITY_ESTIMATION or self.combine != bc.ADDITIVE:
                raise ConfigError("fine-tuning applies to additive density estimation only")
            if self.components < 2:
                raise ConfigError("fine-tuning needs at least two components")
        if self.mode == DENSITY_MATCHING and self.dim != 2:
            raise ConfigError("density matching targets are 2-D")
        checks = [
            (self.components >= 1, "components >= 1"),
            (self.flow_steps >= 1, "flow_steps >= 1"),
            (self.dim >= 1, "dim >= 1"),
            (self.hidden >= 1, "hidden >= 1"),
            (self.lam > 0, "lam > 0"),
            (self.lr > 0, "lr > 0"),
            (self.schedule in ("cosine", "constant"), "schedule is cosine or constant"),
            (self.batch >= 1, "batch >= 1"),
            (self.max_steps >= 0, "max_steps >= 0"),
            (self.eval_every >= 1, "eval_every >= 1"),
            (self.patience >= 1, "patience >= 1"),
            (self.seed >= 0, "seed >= 0"),
            (self.rho_grid_size >= 2, "rho_grid_size >= 2"),
            (self.rho_step > 0, "rho_step > 0"),
            (self.rho_tol > 0, "rho_tol > 0"),
            (self.rho_max_iters >= 1, "rho_max_iters >= 1"),
            (self.rho_batch >= 1, "rho_batch >= 1"),
            (self.finetune_passes >= 0, "finetune_passes >= 0"),
            (self.finetune_steps >= 0, "finetune_steps >= 0"),
            (self.partition_samples >= 1000, "partition_samples >= 1000"),
            (self.n_mc >= 1, "n_mc >= 1"),
            (self.val_mc >= 1, "val_mc >= 1"),
            (self.beta >= 0, "beta >= 0"),
        ]
        for ok, what in checks:
            if not ok:
                raise ConfigError(f"config requires {what}")


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_init(n_params: int) -> AdamState:
    return AdamState(np.zeros(n_params), np.zeros(n_params), 0)


def adam_step(values, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns (new values, new state)."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != values.shape:
        raise ConfigError(f"gradient shape {grads.shape} != parameter shape {values.shape}")
    if not np.all(np.isfinite(grads)):
        raise NumericError("adam", "non-finite gradient")
    t = state.t + 1
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grads
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grads**2
    m_hat = m / (1.0 - ADAM_BETA1**t)
    v_hat = v / (1.0 - ADAM_BETA2**t)
    new_values = values - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return new_values, AdamState(m, v, t)


def cosine_lr(step: int, total: int, base: float) -> float:
    if total < 1:
        raise ConfigError(f"total steps must be >= 1, got {total}")
    if not (0 <= step <= total):
        raise ConfigError(f"step {step} outside [0, {total}]")
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


def clip_gradient(grad, max_norm: float = GRAD_CLIP_NORM):
    # Prescale by the largest entry so the squared sum cannot overflow even
    # when single entries are near the float64 ceiling.
    peak = float(np.max(np.abs(grad))) if grad.size else 0.0
    if peak == 0.0:
        return grad
    norm = peak * float(np.sqrt(np.sum((grad / peak) ** 2)))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


# ---------------------------------------------------------------------------
# derived random streams

_INIT, _BATCH, _NOISE, _VAL, _RHO, _PARTITION, _SAMPLES = range(7)


def _stream(seed: int, stage: int, purpose: int):
    return np.random.default_rng(np.random.SeedSequence((seed, stage, purpose)))


# ---------------------------------------------------------------------------
# stage training


def _fit(component, config, build_loss, val_fn, max_steps, stage):
    """Shared minimization loop: Adam, schedule, clipping, early stopping.

    build_loss(step) returns a loss program over traced params; val_fn()
    scores frozen validation data. Keeps the best-validation parameters, not
    the last. Returns (loss trace, validation trace, best validation value).
    """
    trace = []
    val_trace = []
    best_val = float(val_fn())
    best_params = component.params.values.copy()
    state = adam_init(component.params.layout.size)
    since_improvement = 0
    for step in range(max_steps):
        loss_program = build_loss(step)
        try:
            result = ad.grad_scalar(loss_program, component.params)
        except NumericError as e:
            abort = TrainingAbort(f"stage {stage} diverged at step {step}: {e}")
            abort.trace = trace
            raise abort from e
        if not np.isfinite(result.loss):
            abort = TrainingAbort(f"stage {stage} loss non-finite at step {step}")
            abort.trace = trace
            raise abort
        trace.append(float(result.loss))
        grad = clip_gradient(result.grad)
        lr = cosine_lr(step, max_steps, config.lr) if config.schedule == "cosine" else config.lr
        component.params.values, state = adam_step(
            component.params.values, grad, state, lr
        )
        if (step + 1) % config.eval_every == 0:
            val = float(val_fn())
            val_trace.append(val)
            if val < best_val:
                best_val = val
                best_params = component.params.values.copy()
                since_improvement = 0
            else:
                since_improvement += 1
                if since_improvement >= config.patience:
                    break
    component.params.values[:] = best_params
    return trace, val_trace, best_val


def _new_stage_component(config: TrainConfig, stage: int, rng=None) -> FlowComponent:
    if rng is None:
        rng = _stream(config.seed, stage, _INIT)
    parity = (stage - 1) % 2 if config.kind == COUPLING else 0
    return new_component(
        config.dim,
        config.flow_steps,
        hidden=config.hidden,
        kind=config.kind,
        start_parity=parity,
        rng=rng,
    )


def train_stage(fixed_model, data_or_target, config: TrainConfig, rng=None):
    """Fit one component against the frozen model so far (None at stage 1).

    Returns (component, StageRecord). The record's rho is a placeholder of
    1.0 until run_boosting selects the stage weight; its validation loss is
    the stage objective on frozen validation data. A caller-supplied rng
    replaces the derived initialization stream.
    """
    if fixed_model is not None and fixed_model.n_components == 0:
        fixed_model = None
    stage = 1 if fixed_model is None else fixed_model.n_components + 1
    component = _new_stage_component(config, stage, rng)
    if config.mode == DENSITY_ESTIMATION:
        fit = _train_de_component(
            component, fixed_model, data_or_target, config, stage, config.max_steps
        )
    else:
        fit = _train_matching_component(
            component, fixed_model, data_or_target, config, stage, config.max_steps
        )
    trace, val_trace, best_val = fit
    record = bc.StageRecord(
        stage=stage,
        rho=1.0,
        val_loss_after=best_val,
        train_loss_trace=trace,
        extras={"val_trace": val_trace},
    )
    return component, record


def _train_de_component(component, fixed_model, dataset, config, stage, max_steps):
    if not isinstance(dataset, TabularDataset):
        raise ConfigError("density estimation needs a TabularDataset")
    if dataset.dim != config.dim:
        raise ConfigError(f"data dim {dataset.dim} != config dim {config.dim}")
    train, val = dataset.train, dataset.val
    batch_rng = _stream(config.seed, stage, _BATCH)

    if fixed_model is None:
        def build_loss(step):
            batch = train[batch_rng.integers(0, len(train), config.batch)]
            return lambda tp: obj.nll_loss(component, batch, params=tp)

        val_fn = lambda: float(obj.nll_loss(component, val))
    elif config.combine == bc.ADDITIVE:
        fixed_lp_val = bc.additive_log_prob(fixed_model, val)

        def build_loss(step):
            batch = train[batch_rng.integers(0, len(train), config.batch)]
            fixed_lp = bc.additive_log_prob(fixed_model, batch)
            return lambda tp: obj.additive_de_objective(
                component, batch, fixed_lp, config.lam, params=tp
            )

        val_fn = lambda: float(
            obj.additive_de_objective(component, val, fixed_lp_val, config.lam)
        )
    else:
        weights = obj.compute_resample_weights(fixed_model, train, beta=config.beta)
        draw = _presampled_resampler(train, weights)
        w_val = obj.compute_resample_weights(fixed_model, val, beta=config.beta)

        def build_loss(step):
            batch = draw(config.batch, batch_rng)
            return lambda tp: obj.nll_loss(component, batch, params=tp)

        val_fn = lambda: float(-np.dot(w_val, component.log_prob(val)))

    return _fit(component, config, build_loss, val_fn, max_steps, stage)


def _presampled_resampler(data, weights):
    """Canonical-order inverse-CDF sampler with the sort done once."""
    order = np.lexsort(data.T[::-1])
    cum = np.cumsum(weights[order])
    cum[-1] = 1.0

    def draw(n, rng):
        return data[order[np.searchsorted(cum, rng.random(n), side="right")]]

    return draw


def _train_matching_component(component, fixed_model, target, config, stage, max_steps):
    if not isinstance(target, EnergyTarget):
        raise ConfigError("density matching needs an EnergyTarget")
    noise_rng = _stream(config.seed, stage, _NOISE)
    val_z0 = _stream(config.seed, stage, _VAL).standard_normal((config.val_mc, config.dim))
    fixed_fn = None
    if fixed_model is not None:
        fixed_fn = lambda x: bc.additive_log_prob(fixed_model, x)

    def build_loss(step):
        z0 = noise_rng.standard_normal((config.n_mc, config.dim))
        return lambda tp: obj.boosted_reverse_kl_objective(
            component, z0, target.log_unnorm, config.lam, fixed_log_fn=fixed_fn, params=tp
        )

    def val_fn():
        return float(
            obj.boosted_reverse_kl_objective(
                component, val_z0, target.log_unnorm, config.lam, fixed_log_fn=fixed_fn
            )
        )

    return _fit(component, config, build_loss, val_fn, max_steps, stage)


# ---------------------------------------------------------------------------
# rho evaluators


def _additive_blend_losses(prev_lp, new_lp):
    """Validation NLL of (1 - rho) G + rho g as a function of rho.

    rho = 0 returns the previous model's loss bit-for-bit (logaddexp with
    -inf returns its other argument exactly), so the grid search can never
    pick a rho that worsens validation loss.
    """

    def evaluator(r):
        if r == 0.0:
            blend = prev_lp
        elif r == 1.0:
            blend = new_lp
        else:
            blend = np.logaddexp(np.log1p(-r) + prev_lp, np.log(r) + new_lp)
        return float(-np.mean(blend))

    return evaluator


class _MultiplicativeRhoPricer:
    """Shared-sample pricing of validation loss across rho candidates.

    The loss at rho is -mean over validation of [sum_j rho_j log g_j +
    rho log g_new] + log Gamma(rho), where log Gamma(rho) adds to the stored
    log Gamma_{c-1} a self-normalized importance estimate of
    log E_{G^(c-1)}[g_new^rho] over one shared set of proposal draws. At
    rho = 0 that ratio is log E[1] = 0 identically, so the previous stored
    partition and validation loss carry over exactly.
    """

    def __init__(self, prev_model, component, val, prev_val_loss, n_samples, rng):
        self.prev = prev_model
        self.prev_val_loss = prev_val_loss
        pts = bc._sample_equal_mixture(prev_model, n_samples, rng)
        lp = bc._component_log_prob_matrix(prev_model, pts)
        log_q = bc._rowwise_lse(lp) - np.log(prev_model.n_components)
        # Unnormalized importance log-weights targeting G^(c-1).
        self.log_w = lp @ np.asarray(prev_model.rho) - log_q
        self.lp_new_prop = component.log_prob(pts)
        self.val_unnorm_prev = bc._component_log_prob_matrix(prev_model, val) @ np.asarray(
            prev_model.rho
        )
        self.lp_new_val = component.log_prob(val)

    def log_ratio(self, r):
        """log E_{G^(c-1)}[g_new^r] with a delta-method standard error."""
        if r == 0.0:
            return 0.0, 0.0
        log_num = self.log_w + r * self.lp_new_prop
        shift_w = float(self.log_w.max())
        shift_n = float(log_num.max())
        if not (np.isfinite(shift_w) and np.isfinite(shift_n)):
            raise NumericError("rho pricing", "importance weights vanished")
        v = np.exp(self.log_w - shift_w)
        u = np.exp(log_num - shift_n)
        sum_v = float(np.sum(v))
        sum_u = float(np.sum(u))
        log_est = (math.log(sum_u) + shift_n) - (math.log(sum_v) + shift_w)
        # For the self-normalized estimate A = sum(w a) / sum(w), the
        # first-order error of log A is sqrt(sum((w a - A w)^2)) / sum(w a);
        # both shifts cancel in that quotient.
        se = float(np.sqrt(np.sum((u - (sum_u / sum_v) * v) ** 2)) / sum_u)
        return log_est, se

    def log_partition_at(self, r):
        ratio, se = self.log_ratio(r)
        base_se = self.prev.log_partition_stderr or 0.0
        return self.prev.log_partition + ratio, float(math.hypot(base_se, se))

    def evaluator(self, r):
        if r == 0.0:
            return self.prev_val_loss
        log_gamma, _ = self.log_partition_at(r)
        return float(-np.mean(self.val_unnorm_prev + r * self.lp_new_val) + log_gamma)


class _MatchingRhoEvaluator:
    """Adapter giving rho_sgd sample and log-density access."""

    def __init__(self, prev_model, component, target):
        self.prev = prev_model
        self.component = component
        self.target = target

    def sample_fixed(self, n, rng):
        return bc.sample_mixture(self.prev, n, rng)[0]

    def sample_new(self, n, rng):
        return self.component.sample(n, rng)[0]

    def log_fixed(self, z):
        return bc.additive_log_prob(self.prev, z)

    def log_new(self, z):
        return self.component.log_prob(z)

    def log_target(self, z):
        return self.target.log_unnorm(z)


def _matching_blend_val(prev_model, component, target, config, stage):
    """Deterministic blend quality at each rho from two frozen sample sets.

    Estimates E_blend[log blend - log p*] as (1 - rho) E_G[gamma] +
    rho E_g[gamma], with gamma evaluated on draws frozen once per stage.
    """
    rng = _stream(config.seed, stage, _SAMPLES)
    z_new = component.sample(config.val_mc, rng)[0]
    have_prev = prev_model is not None and prev_model.n_components > 0
    sets = {1.0: z_new}
    if have_prev:
        sets[0.0] = bc.sample_mixture(prev_model, config.val_mc, rng)[0]

    cache = {}
    for key, pts in sets.items():
        lp_new = component.log_prob(pts)
        lp_fixed = bc.additive_log_prob(prev_model, pts) if have_prev else None
        cache[key] = (lp_fixed, lp_new, target.log_unnorm(pts))

    def evaluator(r):
        total = 0.0
        for key, (lp_fixed, lp_new, lt) in cache.items():
            side_weight = (1.0 - r) if key == 0.0 else r
            if side_weight == 0.0:
                continue
            if lp_fixed is None or r == 1.0:
                blend = lp_new
            elif r == 0.0:
                blend = lp_fixed
            else:
                blend = np.logaddexp(np.log1p(-r) + lp_fixed, np.log(r) + lp_new)
            total += side_weight * float(np.mean(blend - lt))
        return total

    return evaluator


# ---------------------------------------------------------------------------
# the boosting loop


def run_boosting(data_or_target, config: TrainConfig, rng=None, on_stage_end=None):
    """Train config.components stagewise. Returns (model, [StageRecord...]).

    on_stage_end(model, record), when given, runs after each stage (the CLI
    uses it to persist checkpoints and records). On divergence the partial
    model and records so far are attached to the raised TrainingAbort.
    """
    model = bc.empty_model(config.combine)
    records = []
    prev_val = None
    prev_improvement = None
    try:
        for stage in range(1, config.components + 1):
            component, record = train_stage(model, data_or_target, config, rng=rng)
            rho, record, pricer = _select_rho(
                model, component, data_or_target, config, stage, record
            )
            model = bc.append_component(model, component, rho)
            if config.combine == bc.MULTIPLICATIVE:
                model, record = _refresh_partition(model, config, stage, record, pricer)
            if record.val_loss_before is None and prev_val is not None:
                record = replace(record, val_loss_before=prev_val)
            if record.val_loss_before is not None:
                improvement = record.val_loss_before - record.val_loss_after
                if prev_improvement is not None and prev_improvement > 1e-12:
                    record.extras["geom_ratio"] = improvement / prev_improvement
                prev_improvement = improvement
            prev_val = record.val_loss_after
            records.append(record)
            if on_stage_end is not None:
                on_stage_end(model, record)
        if config.finetune_passes > 0:
            model, ft_trace = bc.fine_tune(
                model, _DEFineTuner(data_or_target, config), config.finetune_passes
            )
            if records:
                records[-1].extras["finetune_trace"] = ft_trace
    except TrainingAbort as e:
        e.partial_model = model
        e.records = records
        raise
    return model, records


def _select_rho(model, component, data_or_target, config, stage, record):
    """Pick the stage weight; returns (rho, updated record, pricer or None)."""
    if stage == 1:
        if config.mode == DENSITY_MATCHING:
            record.extras["stage_objective_val"] = record.val_loss_after
            blend = _matching_blend_val(None, component, data_or_target, config, stage)
            record = replace(record, val_loss_after=blend(1.0))
        return 1.0, record, None

    if config.mode == DENSITY_ESTIMATION and config.combine == bc.ADDITIVE:
        val = data_or_target.val
        evaluator = _additive_blend_losses(
            bc.additive_log_prob(model, val), component.log_prob(val)
        )
        rho, _, _ = bc.rho_line_search(evaluator, grid_size=config.rho_grid_size)
        record.extras["stage_objective_val"] = record.val_loss_after
        record = replace(
            record, rho=rho, val_loss_before=evaluator(0.0), val_loss_after=evaluator(rho)
        )
        return rho, record, None

    if config.mode == DENSITY_ESTIMATION:
        val = data_or_target.val
        prev_val_loss = float(-np.mean(bc.multiplicative_log_prob(model, val)))
        pricer = _MultiplicativeRhoPricer(
            model,
            component,
            val,
            prev_val_loss,
            config.partition_samples,
            _stream(config.seed, stage, _PARTITION),
        )
        rho, _, _ = bc.rho_line_search(pricer.evaluator, grid_size=config.rho_grid_size)
        record.extras["stage_objective_val"] = record.val_loss_after
        record = replace(
            record,
            rho=rho,
            val_loss_before=prev_val_loss,
            val_loss_after=pricer.evaluator(rho),
        )
        return rho, record, pricer

    blend = _matching_blend_val(model, component, data_or_target, config, stage)
    if config.rho_strategy == "grid":
        rho, _, _ = bc.rho_line_search(blend, grid_size=config.rho_grid_size)
        converged = True
    else:
        evaluator = _MatchingRhoEvaluator(model, component, data_or_target)
        seed = int(_stream(config.seed, stage, _RHO).integers(2**31))
        result = bc.rho_sgd(
            evaluator,
            bc.RhoSGDConfig(
                init_rho=1.0 / config.components,
                step=config.rho_step,
                decay=config.rho_decay,
                tol=config.rho_tol,
                max_iters=config.rho_max_iters,
                batch=config.rho_batch,
                seed=seed,
            ),
        )
        rho, converged = result.rho, result.converged
    record.extras["stage_objective_val"] = record.val_loss_after
    record.extras["rho_converged"] = bool(converged)
    record = replace(
        record, rho=rho, val_loss_before=blend(0.0), val_loss_after=blend(rho)
    )
    return rho, record, None


def _refresh_partition(model, config, stage, record, pricer):
    if pricer is None:
        log_z, se = bc.estimate_log_partition(
            model, config.partition_samples, _stream(config.seed, stage, _PARTITION)
        )
    else:
        log_z, se = pricer.log_partition_at(model.rho[-1])
    model = bc.with_partition(model, log_z, se)
    record = replace(record, log_partition=log_z, log_partition_stderr=se)
    return model, record


# ---------------------------------------------------------------------------
# fine-tuning


class _DEFineTuner:
    """Retraining backend handed to fine_tune for additive mixtures."""

    def __init__(self, dataset, config):
        self.dataset = dataset
        self.config = config
        self.rho_grid_size = config.rho_grid_size
        self._counter = 0

    def retrain(self, fixed_model, component):
        comp = component.copy()
        cfg = self.config
        self._counter += 1
        stage_key = 10_000 + self._counter  # distinct stream family per retrain
        train, val = self.dataset.train, self.dataset.val
        batch_rng = _stream(cfg.seed, stage_key, _BATCH)
        fixed_lp_val = bc.additive_log_prob(fixed_model, val)

        def build_loss(step):
            batch = train[batch_rng.integers(0, len(train), cfg.batch)]
            fixed_lp = bc.additive_log_prob(fixed_model, batch)
            return lambda tp: obj.additive_de_objective(
                comp, batch, fixed_lp, cfg.lam, params=tp
            )

        val_fn = lambda: float(
            obj.additive_de_objective(comp, val, fixed_lp_val, cfg.lam)
        )
        _fit(comp, cfg, build_loss, val_fn, cfg.finetune_steps, stage_key)
        return comp

    def blend_val_loss(self, fixed_model, component, r):
        val = self.dataset.val
        evaluator = _additive_blend_losses(
            bc.additive_log_prob(fixed_model, val), component.log_prob(val)
        )
        return evaluator(r)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"GBNF"
CHECKPOINT_VERSION = 1


@dataclass
class CheckpointData:
    model: bc.GBNFModel
    meta: dict


def _component_meta(comp: FlowComponent) -> dict:
    return {
        "dim": comp.dim,
        "n_layers": comp.n_layers,
        "hidden": comp.hidden,
        "kind": comp.kind,
        "start_parity": comp.start_parity,
        "n_params": comp.params.layout.size,
    }


def save_checkpoint(model, path, config: TrainConfig | None = None, extra_meta: dict | None = None):
    """Versioned binary dump: magic, version, JSON metadata, raw parameters.

    Parameters are written per component as a little-endian u64 count
    followed by the flat float64 little-endian vector in layout order. The
    byte stream is a pure function of the model and metadata (no timestamps),
    so identical runs write identical files. A human-readable sidecar at
    path + ".meta.json" mirrors the metadata.
    """
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "mode": model.mode,
        "weights": [float(w) for w in model.weights],
        "rho": [float(r) for r in model.rho],
        "log_partition": model.log_partition,
        "log_partition_stderr": model.log_partition_stderr,
        "partition_fresh": model.partition_fresh,
        "components": [_component_meta(c) for c in model.components],
        "config": asdict(config) if config is not None else None,
        "rng_state": None
        if config is None
        else {"seed": config.seed, "completed_stages": model.n_components},
    }
    if extra_meta:
        meta.update(extra_meta)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(CHECKPOINT_VERSION.to_bytes(2, "little"))
        f.write(len(meta_bytes).to_bytes(4, "little"))
        f.write(meta_bytes)
        for comp in model.components:
            vals = comp.params.values.astype("<f8")
            f.write(len(vals).to_bytes(8, "little"))
            f.write(vals.tobytes())
    with open(str(path) + ".meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(
            f"truncated checkpoint: wanted {n} bytes for {what} at offset "
            f"{f.tell() - len(data)}, got {len(data)}"
        )
    return data


def load_checkpoint(path) -> CheckpointData:
    """Inverse of save_checkpoint; the round trip is bit-exact."""
    try:
        f = open(path, "rb")
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    with f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; not a checkpoint file")
        version = int.from_bytes(_read_exact(f, 2, "version"), "little")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint format version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )
        meta_len = int.from_bytes(_read_exact(f, 4, "metadata length"), "little")
        try:
            meta = json.loads(_read_exact(f, meta_len, "metadata").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"unreadable checkpoint metadata: {e}") from e
        components = []
        for i, cm in enumerate(meta.get("components", [])):
            n = int.from_bytes(_read_exact(f, 8, f"component {i} size"), "little")
            if n != cm["n_params"]:
                raise CheckpointError(
                    f"component {i} carries {n} parameters, metadata says {cm['n_params']}"
                )
            raw = _read_exact(f, 8 * n, f"component {i} parameters")
            values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
            comp = FlowComponent(
                dim=cm["dim"],
                n_layers=cm["n_layers"],
                hidden=cm["hidden"],
                kind=cm["kind"],
                start_parity=cm["start_parity"],
            )
            if values.shape[0] != comp.params.layout.size:
                raise CheckpointError(
                    f"component {i} parameter count {values.shape[0]} does not fit its architecture"
                )
            comp.params.values[:] = values
            components.append(comp)
        if f.read(1):
            raise CheckpointError("trailing bytes after checkpoint payload")
    model = bc.GBNFModel(
        mode=meta["mode"],
        components=tuple(components),
        weights=tuple(meta["weights"]),
        rho=tuple(meta["rho"]),
        log_partition=meta["log_partition"],
        log_partition_stderr=meta["log_partition_stderr"],
        partition_fresh=meta["partition_fresh"],
    )
    return CheckpointData(model=model, meta=meta)
