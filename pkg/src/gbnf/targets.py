"""Data sources: 2-D toy samplers, unnormalized 2-D energies, tabular CSVs.

Toy generators follow the community-standard recipes, with every constant
fixed here:

- eight_gaussians: equal mixture of 8 isotropic Gaussians, sigma 0.5/sqrt(2),
  centers on a ring of radius 2*sqrt(2) (the radius-4, sigma-0.5 ring scaled
  by 1/sqrt(2) so the [-4,4]^2 grid box holds >= 99.9% of the mass).
- checkerboard: uniform on the 8 dark cells of a 4x4 board over [-4,4]^2
  (cell (i,j) is dark when i+j is even); density 1/32 on the support.
- pinwheel: five Gaussian blades (radial std 0.3, tangential std 0.1) rotated
  by blade angle + 0.25*exp(radial feature), scaled by 2.
- spiral: two-arm spiral r = sqrt(u)*3*pi, arms mirrored through the origin,
  divided by 3, plus N(0, 0.1^2) noise.

Energies u1-u4 are the classic 2-D test energies (ring; sinusoidal valley;
valley with a Gaussian bifurcation; valley with a sigmoid bifurcation),
written against the autodiff ops so log_unnorm differentiates through its
input. u2-u4 add a soft confinement 0.5*(z1/4)^8, without which the valley
extends forever along z1 and the density is not normalizable; the term is
below 0.06 nats for |z1| <= 3. Grid box for energies is [-6,6]^2.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError

TOY_NAMES = ("eight_gaussians", "checkerboard", "pinwheel", "spiral")
ENERGY_NAMES = ("u1", "u2", "u3", "u4")

TOY_BBOX = (-4.0, 4.0, -4.0, 4.0)
ENERGY_BBOX = (-6.0, 6.0, -6.0, 6.0)

EIGHT_GAUSSIAN_RADIUS = 2.0 * np.sqrt(2.0)
EIGHT_GAUSSIAN_SIGMA = 0.5 / np.sqrt(2.0)
EIGHT_GAUSSIAN_CENTERS = EIGHT_GAUSSIAN_RADIUS * np.array(
    [[np.cos(a), np.sin(a)] for a in np.arange(8) * (np.pi / 4.0)]
)


@dataclass(frozen=True)
class ToySampler:
    """Named 2-D toy distribution. `seed` is used when sample() gets no rng."""

    name: str
    seed: int | None = None

    def __post_init__(self):
        if self.name not in TOY_NAMES:
            raise ConfigError(f"unknown toy dataset {self.name!r}; choose from {TOY_NAMES}")

    def sample(self, n: int, rng=None) -> np.ndarray:
        if n < 0:
            raise ConfigError(f"sample size must be >= 0, got {n}")
        if rng is None:
            rng = np.random.default_rng(self.seed)
        return _TOY_FNS[self.name](n, rng)

    def true_log_prob(self, x):
        """Exact generator log-density where available, else None.

        Known for eight_gaussians and checkerboard; used only as a reference
        for diagnostics, never in training.
        """
        if self.name == "eight_gaussians":
            diffs = x[:, None, :] - EIGHT_GAUSSIAN_CENTERS[None, :, :]
            sq = np.sum(diffs * diffs, axis=2)
            var = EIGHT_GAUSSIAN_SIGMA**2
            comp = -sq / (2 * var) - np.log(2 * np.pi * var)
            m = comp.max(axis=1, keepdims=True)
            return np.log(np.exp(comp - m).sum(axis=1) / 8.0) + m[:, 0]
        if self.name == "checkerboard":
            i = np.floor(x[:, 0] / 2.0)
            j = np.floor(x[:, 1] / 2.0)
            inside = (np.abs(x[:, 0]) <= 4) & (np.abs(x[:, 1]) <= 4)
            dark = ((i + j) % 2 == 0) & inside
            with np.errstate(divide="ignore"):
                return np.where(dark, np.log(1.0 / 32.0), -np.inf)
        return None


def _sample_eight_gaussians(n, rng):
    idx = rng.integers(0, 8, size=n)
    noise = rng.standard_normal((n, 2)) * EIGHT_GAUSSIAN_SIGMA
    return EIGHT_GAUSSIAN_CENTERS[idx] + noise


def _sample_checkerboard(n, rng):
    x1 = rng.uniform(-2.0, 2.0, size=n)
    x2 = rng.uniform(0.0, 1.0, size=n) - rng.integers(0, 2, size=n) * 2.0
    x2 = x2 + np.floor(x1) % 2
    return 2.0 * np.stack([x1, x2], axis=1)


def _sample_pinwheel(n, rng):
    radial_std, tangential_std, rate = 0.3, 0.1, 0.25
    blades = np.arange(5) * (2 * np.pi / 5)
    labels = rng.integers(0, 5, size=n)
    features = rng.standard_normal((n, 2)) * np.array([radial_std, tangential_std])
    features[:, 0] += 1.0
    angles = blades[labels] + rate * np.exp(features[:, 0])
    c, s = np.cos(angles), np.sin(angles)
    rotated = np.stack(
        [features[:, 0] * c - features[:, 1] * s, features[:, 0] * s + features[:, 1] * c], axis=1
    )
    return 2.0 * rotated


def _sample_spiral(n, rng):
    half = n - n // 2
    t = np.sqrt(rng.uniform(0.0, 1.0, size=half)) * 3.0 * np.pi
    arm = np.stack(
        [-np.cos(t) * t + rng.uniform(0, 0.5, half), np.sin(t) * t + rng.uniform(0, 0.5, half)],
        axis=1,
    )
    pts = np.concatenate([arm, -arm[: n // 2]], axis=0) / 3.0
    return pts + rng.standard_normal((n, 2)) * 0.1


_TOY_FNS = {
    "eight_gaussians": _sample_eight_gaussians,
    "checkerboard": _sample_checkerboard,
    "pinwheel": _sample_pinwheel,
    "spiral": _sample_spiral,
}


def reference_entropy(sampler: ToySampler, n: int = 100_000, rng=None):
    """Monte Carlo -E[log p] under the generator, when its density is known."""
    if rng is None:
        rng = np.random.default_rng(0)
    x = sampler.sample(n, rng)
    lp = sampler.true_log_prob(x)
    if lp is None:
        return None
    return float(-np.mean(lp))


# ---------------------------------------------------------------------------
# energies


@dataclass(frozen=True)
class EnergyTarget:
    """Unnormalized 2-D log-density, differentiable through its input.

    log_unnorm is bounded above by `upper_bound` and falls below -100
    everywhere on the circle ||z|| = 100.
    """

    name: str
    upper_bound: float = float(np.log(2.0)) + 1e-9
    bbox: tuple = ENERGY_BBOX

    def __post_init__(self):
        if self.name not in ENERGY_NAMES:
            raise ConfigError(f"unknown energy {self.name!r}; choose from {ENERGY_NAMES}")

    def log_unnorm(self, z):
        """Per-row unnormalized log-density; z is (n, 2), ndarray or Tensor."""
        return _ENERGY_FNS[self.name](z)


def _cols(z):
    n = z.shape[0] if isinstance(z, np.ndarray) else z.value.shape[0]
    z1 = ad.reshape(ad.take_cols(z, np.array([0])), (n,))
    z2 = ad.reshape(ad.take_cols(z, np.array([1])), (n,))
    return n, z1, z2


def _sq(x):
    return ad.mul(x, x)


def _logaddexp2(a, b, n):
    stacked = ad.combine_cols(2, [(np.array([0]), ad.reshape(a, (n, 1))), (np.array([1]), ad.reshape(b, (n, 1)))])
    return ad.logsumexp(stacked, axis=1)


def _confine(z1):
    # 0.5 * (z1/4)^8, composed from squarings.
    q = ad.mul(z1, 0.25)
    q2 = _sq(q)
    q4 = _sq(q2)
    return ad.mul(_sq(q4), 0.5)


def _energy_u1(z):
    n, z1, z2 = _cols(z)
    rsq = ad.add(ad.add(_sq(z1), _sq(z2)), 1e-300)
    r = ad.exp(ad.mul(ad.log(rsq), 0.5))
    ring = ad.mul(_sq(ad.mul(ad.sub(r, 2.0), 1.0 / 0.4)), 0.5)
    a = ad.mul(_sq(ad.mul(ad.sub(z1, 2.0), 1.0 / 0.6)), -0.5)
    b = ad.mul(_sq(ad.mul(ad.add(z1, 2.0), 1.0 / 0.6)), -0.5)
    return ad.add(ad.neg(ring), _logaddexp2(a, b, n))


def _w1(z1):
    return ad.sin(ad.mul(z1, 2.0 * np.pi / 4.0))


def _energy_u2(z):
    n, z1, z2 = _cols(z)
    valley = ad.mul(_sq(ad.mul(ad.sub(z2, _w1(z1)), 1.0 / 0.4)), 0.5)
    return ad.neg(ad.add(valley, _confine(z1)))


def _energy_u3(z):
    n, z1, z2 = _cols(z)
    w1 = _w1(z1)
    w2 = ad.mul(ad.exp(ad.mul(_sq(ad.mul(ad.sub(z1, 1.0), 1.0 / 0.6)), -0.5)), 3.0)
    a = ad.mul(_sq(ad.mul(ad.sub(z2, w1), 1.0 / 0.35)), -0.5)
    b = ad.mul(_sq(ad.mul(ad.add(ad.sub(z2, w1), w2), 1.0 / 0.35)), -0.5)
    return ad.sub(_logaddexp2(a, b, n), _confine(z1))


def _energy_u4(z):
    n, z1, z2 = _cols(z)
    w1 = _w1(z1)
    # sigmoid(x) = (1 + tanh(x/2)) / 2
    w3 = ad.mul(ad.add(ad.tanh(ad.mul(ad.sub(z1, 1.0), 1.0 / 0.6)), 1.0), 1.5)
    a = ad.mul(_sq(ad.mul(ad.sub(z2, w1), 1.0 / 0.4)), -0.5)
    b = ad.mul(_sq(ad.mul(ad.add(ad.sub(z2, w1), w3), 1.0 / 0.35)), -0.5)
    return ad.sub(_logaddexp2(a, b, n), _confine(z1))


_ENERGY_FNS = {"u1": _energy_u1, "u2": _energy_u2, "u3": _energy_u3, "u4": _energy_u4}


# ---------------------------------------------------------------------------
# tabular data


@dataclass
class TabularDataset:
    """Standardized train/val/test splits of a numeric table.

    mean/std are the train-split statistics applied to every split; set
    standardize=False in load_tabular to keep raw units (mean 0, std 1 here).
    """

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    @property
    def dim(self):
        return self.train.shape[1]


def load_tabular(path, splits=(0.8, 0.1, 0.1), seed=0, header=False, standardize=True) -> TabularDataset:
    """Load a numeric CSV, shuffle deterministically, split, standardize.

    Split sizes are floor(n * frac) for train and val, remainder test. Raises
    ConfigError on non-numeric cells (with row and column), ragged rows,
    non-finite values, empty splits, or zero-variance columns.
    """
    fracs = tuple(float(f) for f in splits)
    if len(fracs) != 3 or any(f <= 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
        raise ConfigError(f"splits must be three positive fractions summing to 1, got {splits}")
    rows = _read_numeric_csv(path, header)
    data = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        bad = np.argwhere(~np.isfinite(data))[0]
        raise ConfigError(f"{path}: non-finite value at row {bad[0] + 1}, column {bad[1] + 1}")
    n = data.shape[0]
    perm = np.random.default_rng(seed).permutation(n)
    data = data[perm]
    n_train = int(np.floor(n * fracs[0]))
    n_val = int(np.floor(n * fracs[1]))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError(f"{path}: a split is empty for n={n} with fractions {fracs}")
    train, val, test = data[:n_train], data[n_train : n_train + n_val], data[n_train + n_val :]
    if standardize:
        mean = train.mean(axis=0)
        std = train.std(axis=0)
        if np.any(std == 0):
            col = int(np.argwhere(std == 0)[0][0]) + 1
            raise ConfigError(f"{path}: column {col} has zero variance in the train split")
        train = (train - mean) / std
        val = (val - mean) / std
        test = (test - mean) / std
    else:
        mean = np.zeros(data.shape[1])
        std = np.ones(data.shape[1])
    return TabularDataset(train=train, val=val, test=test, mean=mean, std=std)


def _read_numeric_csv(path, header):
    try:
        with open(path, "r", newline="") as fh:
            reader = csv.reader(fh)
            rows = []
            width = None
            for i, row in enumerate(reader):
                if header and i == 0:
                    continue
                if not row:
                    continue
                if width is None:
                    width = len(row)
                elif len(row) != width:
                    raise ConfigError(f"{path}: row {i + 1} has {len(row)} columns, expected {width}")
                try:
                    rows.append([float(c) for c in row])
                except ValueError:
                    col = next(j for j, c in enumerate(row) if not _is_float(c)) + 1
                    raise ConfigError(f"{path}: row {i + 1}, column {col} is not numeric") from None
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err}") from None
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    return rows


def _is_float(cell):
    try:
        float(cell)
        return True
    except ValueError:
        return False


def export_csv(points: np.ndarray, path):
    """Write points as plain CSV rows with 17 significant digits per value."""
    np.savetxt(path, np.atleast_2d(points), delimiter=",", fmt="%.17g")
