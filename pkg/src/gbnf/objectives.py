"""Trainable loss surfaces.

Four objectives, all reduced in fixed order so per-seed runs are bit-identical:

- nll_loss: mean negative log-density of a batch (stage-1 training, and
  evaluation of whole mixtures).
- compute_resample_weights + resample: the reweighted-MLE surrogate for
  multiplicative boosting. Weights w_i are proportional to the fixed model's
  inverse density, 1 / G(x_i)^beta; new-component training is then plain NLL
  on batches resampled with replacement.
- additive_de_objective: the additive functional-gradient update with an
  entropy penalty,

      -(1/n) sum_i g(x_i) / G(x_i)  +  lambda * sum_i g(x_i) log g(x_i).

  The ratio term is linear in g, which is what makes this update seek the
  highest-residual region instead of moment-matching. Note the entropy term
  is a raw sum over the batch, so useful lambda values scale like 1/batch.
- boosted_reverse_kl_objective: reparameterized Monte Carlo mean of
  lambda*log g(z) - log p~*(z) + log G(z) with z drawn through the new
  component, for matching an unnormalized target. The fixed-mixture term is
  omitted for the first stage.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import NumericError, ShapeError
from .flows import base_log_prob

DENSITY_LOG_FLOOR = -700.0
RATIO_LOG_CEIL = 600.0


def nll_loss(model, batch, params=None):
    """Mean negative log-density. `model` is anything with log_prob(batch).

    For a FlowComponent, pass traced params to get a differentiable scalar.
    """
    if params is not None:
        lp = model.log_prob(batch, params=params)
    else:
        lp = model.log_prob(batch)
    return ad.neg(ad.mean(lp))


def compute_resample_weights(fixed_model, data, beta: float = 1.0) -> np.ndarray:
    """Normalized weights proportional to 1 / G(x_i)^beta.

    fixed_model None means the uniform stage-1 convention: equal weights.
    Computed as a softmax of -beta * log G with max subtraction, so adding a
    constant to every log-density leaves the weights unchanged: bit-for-bit
    when the shifted values are exactly representable, to rounding otherwise.
    Shifts far beyond exp's overflow range are safe either way.
    """
    n = len(data)
    if n == 0:
        raise ShapeError("cannot weight an empty dataset")
    if fixed_model is None:
        return np.full(n, 1.0 / n)
    log_g = np.asarray(fixed_model.log_prob(data), dtype=np.float64)
    logits = -beta * log_g
    logits = logits - logits.max()
    w = np.exp(logits)
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        raise NumericError("resample_weights", "weight normalization failed")
    return w / total


def resample_indices(data, weights, n, rng) -> np.ndarray:
    """Draw n indices with replacement, proportional to weights.

    Uses a canonical-order inverse CDF: candidates are ordered by row value
    (ties by input position) before the cumulative sum, so permuting data and
    weights identically permutes the drawn identities under the same seed.
    """
    data = np.atleast_2d(np.asarray(data))
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(data):
        raise ShapeError(f"{len(data)} rows vs {len(weights)} weights")
    if np.any(weights < 0) or not np.isclose(weights.sum(), 1.0):
        raise ShapeError("weights must be nonnegative and sum to 1")
    order = np.lexsort(data.T[::-1])
    cum = np.cumsum(weights[order])
    cum[-1] = 1.0
    u = rng.random(n)
    return order[np.searchsorted(cum, u, side="right")]


def resample(data, weights, n, rng) -> np.ndarray:
    return np.asarray(data)[resample_indices(data, weights, n, rng)]


def additive_de_objective(component, batch, fixed_log_probs, lam, params=None):
    """Entropy-regularized ratio objective for an additive boosting stage.

    fixed_log_probs are the frozen mixture's log-densities of the batch,
    floored at -700 and then at (log g - 600) before the ratio. The second
    floor keeps the exponent below the float64 overflow point when the
    frozen mixture is astronomically small at a data point (routine during
    fine-tuning, where the leave-one-out mixture may live on another mode);
    the gradient direction is unchanged since such a point dominates the
    batch either way.
    """
    if lam <= 0:
        raise ShapeError(f"lambda must be positive, got {lam}")
    fixed_lp = np.maximum(np.asarray(fixed_log_probs, dtype=np.float64), DENSITY_LOG_FLOOR)
    if fixed_lp.shape != (len(batch),):
        raise ShapeError(f"fixed_log_probs shape {fixed_lp.shape} does not match batch {len(batch)}")
    log_g = component.log_prob(batch, params=params)
    log_g_now = log_g.value if isinstance(log_g, ad.Tensor) else log_g
    fixed_lp = np.maximum(fixed_lp, log_g_now - RATIO_LOG_CEIL)
    ratio = ad.exp(ad.sub(log_g, fixed_lp))
    entropy_term = ad.sum(ad.mul(ad.exp(log_g), log_g))
    return ad.add(ad.neg(ad.mean(ratio)), ad.mul(entropy_term, lam))


def boosted_reverse_kl_objective(component, z0, energy_log_fn, lam, fixed_log_fn=None, params=None):
    """Monte Carlo boosted reverse-KL surrogate through the new component.

    z0 is a pre-drawn (n, d) base batch (the reparameterization trick: the
    caller owns the seed); energy_log_fn maps points to unnormalized target
    log-density; fixed_log_fn, when given, maps points to the frozen
    mixture's log-density and must be differentiable through its input.
    """
    if lam <= 0:
        raise ShapeError(f"lambda must be positive, got {lam}")
    z0 = np.asarray(z0, dtype=np.float64)
    x, logdet = component.forward(z0, params=params)
    log_g = ad.sub(base_log_prob(z0), logdet)
    terms = ad.sub(ad.mul(log_g, lam), energy_log_fn(x))
    if fixed_log_fn is not None:
        terms = ad.add(terms, fixed_log_fn(x))
    return ad.mean(terms)
