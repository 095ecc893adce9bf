"""Analytically invertible flow components over a standard normal base.

Two component kinds share one interface:

- "coupling": K affine coupling layers. Each layer splits coordinates by a
  binary mask (1 = pass through), feeds the masked coordinates to two small
  nets, and transforms the complement:

      x_t = z_t * exp(s(z_m)) + t(z_m),   log|det| = sum(s(z_m))

  Masks alternate parity layer by layer (for d = 2 the transformed coordinate
  swaps every layer), so every coordinate is transformed once K >= 2.
  `start_parity` picks which half passes through in the first layer.

- "affine": a single elementwise map x = z * exp(s) + t with learnable
  vectors s, t. One scale and shift operation, no conditioning net.

The scale net output runs through tanh and is multiplied by a per-layer gate
parameter initialized to zero; the shift net's output layer is also
zero-initialized. Every layer therefore starts as the identity map.

Parameter serialization order (the ParamLayout order, used verbatim by
checkpoints, row-major float64): for each coupling layer k = 0..K-1:
scale_w1, scale_b1, scale_w2, scale_b2, scale_gate, shift_w1, shift_b1,
shift_w2, shift_b2. For each affine layer: log_scale, shift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import NumericError, ShapeError

LOG_2PI = float(np.log(2.0 * np.pi))

COUPLING = "coupling"
AFFINE = "affine"


def mask_indices(dim: int, parity: int):
    """Pass-through and transformed coordinate indices for one layer.

    parity 0 passes even coordinates; parity 1 passes odd ones.
    """
    idx = np.arange(dim)
    passed = idx[idx % 2 == parity % 2]
    transformed = idx[idx % 2 != parity % 2]
    return passed, transformed


def _coupling_layout(dim, n_layers, hidden, start_parity):
    slots = []
    for k in range(n_layers):
        passed, transformed = mask_indices(dim, start_parity + k)
        m, t = len(passed), len(transformed)
        slots += [
            (f"L{k}.scale_w1", (hidden, m)),
            (f"L{k}.scale_b1", (hidden,)),
            (f"L{k}.scale_w2", (t, hidden)),
            (f"L{k}.scale_b2", (t,)),
            (f"L{k}.scale_gate", (1,)),
            (f"L{k}.shift_w1", (hidden, m)),
            (f"L{k}.shift_b1", (hidden,)),
            (f"L{k}.shift_w2", (t, hidden)),
            (f"L{k}.shift_b2", (t,)),
        ]
    return ad.ParamLayout(slots)


def _affine_layout(dim, n_layers):
    slots = []
    for k in range(n_layers):
        slots += [(f"L{k}.log_scale", (dim,)), (f"L{k}.shift", (dim,))]
    return ad.ParamLayout(slots)


@dataclass
class FlowComponent:
    """One invertible flow: architecture plus a flat parameter vector."""

    dim: int
    n_layers: int
    hidden: int = 64
    kind: str = COUPLING
    start_parity: int = 0
    params: ad.ParamVector = field(default=None, repr=False)

    def __post_init__(self):
        if self.dim < 1:
            raise ShapeError(f"dim must be >= 1, got {self.dim}")
        if self.n_layers < 1:
            raise ShapeError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.kind == COUPLING:
            if self.dim < 2:
                raise ShapeError("coupling layers need dim >= 2; use kind='affine' for 1-D")
            if self.hidden < 1:
                raise ShapeError(f"hidden must be >= 1, got {self.hidden}")
        elif self.kind != AFFINE:
            raise ShapeError(f"unknown flow kind {self.kind!r}")
        if self.start_parity not in (0, 1):
            raise ShapeError(f"start_parity must be 0 or 1, got {self.start_parity}")
        if self.params is None:
            self.params = ad.ParamVector(self.layout())
        elif self.params.layout != self.layout():
            raise ShapeError("params layout does not match this architecture")

    def layout(self):
        if self.kind == COUPLING:
            return _coupling_layout(self.dim, self.n_layers, self.hidden, self.start_parity)
        return _affine_layout(self.dim, self.n_layers)

    def layer_masks(self, k):
        if self.kind == AFFINE:
            return np.arange(0), np.arange(self.dim)
        return mask_indices(self.dim, self.start_parity + k)

    # All math below is written against the autodiff ops, so `p` may be either
    # the component's own ParamVector (plain-array fast path) or TracedParams,
    # and `z` may be an ndarray or a Tensor.

    def forward(self, z, params=None):
        """Map base points to data space. Returns (x, per-row logdet)."""
        p = self.params if params is None else params
        z = self._check_points(z)
        logdet = np.zeros(_n_rows(z))
        for k in range(self.n_layers):
            z, ld = self._layer(p, k, z, inverse=False)
            logdet = ad.add(logdet, ld)
        return z, logdet

    def inverse(self, x, params=None):
        """Map data points back to the base. Returns (z, per-row logdet)."""
        p = self.params if params is None else params
        x = self._check_points(x)
        logdet = np.zeros(_n_rows(x))
        for k in reversed(range(self.n_layers)):
            x, ld = self._layer(p, k, x, inverse=True)
            logdet = ad.add(logdet, ld)
        return x, logdet

    def log_prob(self, x, params=None):
        """Per-point log-density under the flow: base log-density of the
        inverse image plus the inverse-map log-determinant."""
        u, logdet = self.inverse(x, params=params)
        return ad.add(base_log_prob(u), logdet)

    def sample(self, n, rng):
        """Draw n points. Returns (points, their log-densities)."""
        z0 = rng.standard_normal((n, self.dim))
        lp0 = base_log_prob(z0)
        x, logdet = self.forward(z0)
        return x, lp0 - logdet

    def copy(self):
        return FlowComponent(
            dim=self.dim,
            n_layers=self.n_layers,
            hidden=self.hidden,
            kind=self.kind,
            start_parity=self.start_parity,
            params=self.params.copy(),
        )

    def _check_points(self, z):
        shape = z.shape
        if len(shape) != 2 or shape[1] != self.dim:
            raise ShapeError(f"expected points of shape (n, {self.dim}), got {shape}")
        return z

    def _layer(self, p, k, z, inverse):
        if self.kind == AFFINE:
            return _affine_layer(p, k, z, self.dim, inverse)
        passed, transformed = self.layer_masks(k)
        return _coupling_layer(p, k, z, passed, transformed, inverse)


def _n_rows(z):
    return z.shape[0] if isinstance(z, np.ndarray) else z.value.shape[0]


def base_log_prob(u):
    """Standard normal log-density per row: -(d/2) log(2 pi) - ||u||^2 / 2."""
    d = u.shape[-1] if isinstance(u, np.ndarray) else u.value.shape[-1]
    sq = ad.sum(ad.mul(u, u), axis=1)
    return ad.add(ad.mul(sq, -0.5), -0.5 * d * LOG_2PI)


def _coupling_nets(p, k, zm):
    h_s = ad.tanh(ad.linear(zm, p[f"L{k}.scale_w1"], p[f"L{k}.scale_b1"]))
    raw = ad.linear(h_s, p[f"L{k}.scale_w2"], p[f"L{k}.scale_b2"])
    s = ad.mul(ad.tanh(raw), p[f"L{k}.scale_gate"])
    h_t = ad.tanh(ad.linear(zm, p[f"L{k}.shift_w1"], p[f"L{k}.shift_b1"]))
    t = ad.linear(h_t, p[f"L{k}.shift_w2"], p[f"L{k}.shift_b2"])
    return s, t


def _coupling_layer(p, k, z, passed, transformed, inverse):
    zm = ad.take_cols(z, passed)
    s, t = _coupling_nets(p, k, zm)
    if isinstance(zm, np.ndarray):
        # Fast path is unchecked op by op; validate at layer granularity.
        if not (np.all(np.isfinite(ad._val(s))) and np.all(np.isfinite(ad._val(t)))):
            raise NumericError("coupling_layer", f"non-finite scale/shift at layer {k}")
    zt = ad.take_cols(z, transformed)
    if inverse:
        new = ad.mul(ad.sub(zt, t), ad.exp(ad.neg(s)))
        logdet = ad.neg(ad.sum(s, axis=1))
    else:
        new = ad.add(ad.mul(zt, ad.exp(s)), t)
        logdet = ad.sum(s, axis=1)
    if isinstance(new, np.ndarray) and not np.all(np.isfinite(new)):
        raise NumericError("coupling_layer", f"non-finite output at layer {k}")
    out = ad.combine_cols(z.shape[1] if isinstance(z, np.ndarray) else z.value.shape[1],
                          [(passed, zm), (transformed, new)])
    return out, logdet


def _affine_layer(p, k, z, dim, inverse):
    s = p[f"L{k}.log_scale"]
    t = p[f"L{k}.shift"]
    n = _n_rows(z)
    total = ad.sum(s)
    if inverse:
        out = ad.mul(ad.sub(z, t), ad.exp(ad.neg(s)))
        logdet = ad.mul(np.ones(n), ad.neg(total))
    else:
        out = ad.add(ad.mul(z, ad.exp(s)), t)
        logdet = ad.mul(np.ones(n), total)
    if isinstance(out, np.ndarray) and not np.all(np.isfinite(out)):
        raise NumericError("affine_layer", f"non-finite output at layer {k}")
    return out, logdet


def new_component(dim, n_layers, hidden=64, kind=COUPLING, start_parity=0, rng=None) -> FlowComponent:
    """Build a component initialized to the identity map.

    Net weights are uniform in +/- 1/sqrt(fan_in); scale gates, shift output
    layers, and affine parameters start at zero so forward(z) == z exactly.
    """
    comp = FlowComponent(dim=dim, n_layers=n_layers, hidden=hidden, kind=kind, start_parity=start_parity)
    if kind == AFFINE or rng is None:
        return comp
    pv = comp.params
    for k in range(n_layers):
        passed, _ = mask_indices(dim, start_parity + k)
        m = len(passed)
        bound_in = 1.0 / np.sqrt(m)
        bound_h = 1.0 / np.sqrt(hidden)
        pv[f"L{k}.scale_w1"] = rng.uniform(-bound_in, bound_in, pv.layout.shape_of(f"L{k}.scale_w1"))
        pv[f"L{k}.scale_b1"] = rng.uniform(-bound_in, bound_in, pv.layout.shape_of(f"L{k}.scale_b1"))
        pv[f"L{k}.scale_w2"] = rng.uniform(-bound_h, bound_h, pv.layout.shape_of(f"L{k}.scale_w2"))
        pv[f"L{k}.scale_b2"] = rng.uniform(-bound_h, bound_h, pv.layout.shape_of(f"L{k}.scale_b2"))
        pv[f"L{k}.shift_w1"] = rng.uniform(-bound_in, bound_in, pv.layout.shape_of(f"L{k}.shift_w1"))
        pv[f"L{k}.shift_b1"] = rng.uniform(-bound_in, bound_in, pv.layout.shape_of(f"L{k}.shift_b1"))
        # scale_gate, shift_w2, shift_b2 stay zero: identity at init.
    return comp
