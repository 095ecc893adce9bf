"""Trainer tests: optimizer anchors, stage fitting, determinism, checkpoints.

Oracles:
- Adam's first step has closed form lr * g / (|g| + eps) because the bias
  correction cancels the decay factors exactly at t = 1.
- A standard normal in d dimensions has differential entropy
  d/2 * (1 + log 2 pi) = 2.83787706... for d = 2, so the best achievable
  NLL of a perfectly fit density is that value (finite-sample noise aside).
- The pricer's recursion ratio E_{G}[g^r] is checked against 2-D midpoint
  quadrature of the unnormalized densities.
"""

import math
import os

import numpy as np
import pytest

from gbnf import autodiff as ad
from gbnf import boosting as bc
from gbnf import objectives as obj
from gbnf import training as tr
from gbnf.errors import CheckpointError, ConfigError, NumericError, TrainingAbort
from gbnf.flows import AFFINE, COUPLING, FlowComponent, new_component
from gbnf.targets import EnergyTarget, TabularDataset


def _gauss_dataset(n=3000, seed=0, dim=2):
    pts = np.random.default_rng(seed).standard_normal((n, dim))
    n_tr = int(0.8 * n)
    n_va = int(0.9 * n)
    return TabularDataset(
        train=pts[:n_tr], val=pts[n_tr:n_va], test=pts[n_va:],
        mean=np.zeros(dim), std=np.ones(dim),
    )


def _fast_config(**kw):
    base = dict(
        mode=tr.DENSITY_ESTIMATION, components=1, flow_steps=1, hidden=16,
        max_steps=300, eval_every=50, batch=128, lr=5e-3, seed=3,
    )
    base.update(kw)
    return tr.TrainConfig(**base)


# ---------------------------------------------------------------------------
# config validation


def test_config_lam_and_rho_strategy_defaults():
    de = tr.TrainConfig(mode=tr.DENSITY_ESTIMATION)
    assert de.lam == 1.0 and de.rho_strategy == "grid"
    dm = tr.TrainConfig(mode=tr.DENSITY_MATCHING)
    assert dm.lam == 0.8 and dm.rho_strategy == "sgd"
    assert tr.TrainConfig(mode=tr.DENSITY_ESTIMATION, finetune_steps=None).finetune_steps == 25_000


def test_config_rejections():
    bad = [
        dict(mode="generation"),
        dict(mode=tr.DENSITY_MATCHING, combine=bc.MULTIPLICATIVE),
        dict(mode=tr.DENSITY_MATCHING, finetune_passes=1, components=2),
        dict(mode=tr.DENSITY_ESTIMATION, finetune_passes=1, components=1),
        dict(mode=tr.DENSITY_MATCHING, dim=3),
        dict(mode=tr.DENSITY_ESTIMATION, kind="spline"),
        dict(mode=tr.DENSITY_ESTIMATION, schedule="step"),
        dict(mode=tr.DENSITY_ESTIMATION, rho_strategy="newton"),
        dict(mode=tr.DENSITY_ESTIMATION, batch=0),
        dict(mode=tr.DENSITY_ESTIMATION, lr=0.0),
        dict(mode=tr.DENSITY_ESTIMATION, lam=0.0),
        dict(mode=tr.DENSITY_ESTIMATION, components=0),
        dict(mode=tr.DENSITY_ESTIMATION, max_steps=-1),
        dict(mode=tr.DENSITY_ESTIMATION, seed=-1),
        dict(mode=tr.DENSITY_ESTIMATION, partition_samples=999),
        dict(mode=tr.DENSITY_ESTIMATION, rho_grid_size=1),
    ]
    for kw in bad:
        with pytest.raises(ConfigError):
            tr.TrainConfig(**kw)


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_leaves_values_unchanged():
    values = np.array([1.0, -2.0, 0.5])
    new, state = tr.adam_step(values, np.zeros(3), tr.adam_init(3), lr=0.1)
    assert np.array_equal(new, values)
    assert state.t == 1


def test_adam_first_step_closed_form():
    # At t = 1 the bias correction cancels: m_hat = g, v_hat = g^2, so the
    # update is exactly lr * g / (|g| + eps).
    rng = np.random.default_rng(11)
    for _ in range(20):
        values = rng.standard_normal(7)
        g = rng.standard_normal(7) * 10.0 ** rng.integers(-2, 3)
        new, _ = tr.adam_step(values, g, tr.adam_init(7), lr=0.05)
        expected = values - 0.05 * g / (np.abs(g) + tr.ADAM_EPS)
        assert np.allclose(new, expected, rtol=1e-12, atol=0)


def test_adam_quadratic_convergence():
    # Minimize 0.5 ||p - p*||^2; 400 steps at lr 0.05 must land within 1e-3.
    target = np.array([1.5, -0.7, 0.2, 3.0])
    p = np.zeros(4)
    state = tr.adam_init(4)
    for _ in range(400):
        p, state = tr.adam_step(p, p - target, state, lr=0.05)
    assert np.max(np.abs(p - target)) < 1e-3


def test_adam_rejects_bad_inputs():
    with pytest.raises(NumericError):
        tr.adam_step(np.zeros(2), np.array([1.0, np.nan]), tr.adam_init(2), lr=0.1)
    with pytest.raises(ConfigError):
        tr.adam_step(np.zeros(2), np.zeros(3), tr.adam_init(2), lr=0.1)
    with pytest.raises(ConfigError):
        tr.adam_step(np.zeros(2), np.zeros(2), tr.adam_init(2), lr=0.0)


def test_adam_state_is_not_mutated():
    state = tr.adam_init(2)
    values = np.array([1.0, 2.0])
    tr.adam_step(values, np.ones(2), state, lr=0.1)
    assert state.t == 0
    assert np.array_equal(state.m, np.zeros(2))
    assert np.array_equal(values, [1.0, 2.0])


# ---------------------------------------------------------------------------
# schedule and clipping


def test_cosine_endpoints_and_midpoint():
    assert tr.cosine_lr(0, 100, 3e-4) == 3e-4
    assert tr.cosine_lr(100, 100, 3e-4) == 0.0
    assert abs(tr.cosine_lr(1, 2, 1.0) - 0.5) < 1e-15
    with pytest.raises(ConfigError):
        tr.cosine_lr(5, 4, 1.0)
    with pytest.raises(ConfigError):
        tr.cosine_lr(0, 0, 1.0)


def test_cosine_is_monotone_decreasing():
    vals = [tr.cosine_lr(s, 50, 1.0) for s in range(51)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_clip_gradient():
    small = np.array([3.0, 4.0])  # norm 5, under the limit
    assert np.array_equal(tr.clip_gradient(small), small)
    big = np.array([30.0, 40.0])  # norm 50 -> rescaled to 10
    clipped = tr.clip_gradient(big)
    assert abs(np.linalg.norm(clipped) - 10.0) < 1e-12
    assert np.allclose(clipped / np.linalg.norm(clipped), big / 50.0, rtol=1e-12)


# ---------------------------------------------------------------------------
# stage training


def test_stage1_gaussian_nll_near_entropy():
    # Differential entropy of N(0, I_2) is 1 + log(2 pi) = 2.83787707.
    ds = _gauss_dataset(n=6000, seed=1)
    model, records = tr.run_boosting(ds, _fast_config(max_steps=600))
    entropy = 1.0 + math.log(2.0 * math.pi)
    assert abs(records[0].val_loss_after - entropy) < 0.05
    assert model.n_components == 1
    assert model.weights == (1.0,)
    assert records[0].rho == 1.0
    assert records[0].val_loss_before is None


def test_max_steps_zero_returns_initialized_component():
    ds = _gauss_dataset(n=2000, seed=2)
    cfg = _fast_config(max_steps=0)
    component, record = tr.train_stage(None, ds, cfg)
    expected = tr._new_stage_component(cfg, 1)
    assert np.array_equal(component.params.values, expected.params.values)
    assert record.train_loss_trace == []
    assert record.val_loss_after == float(obj.nll_loss(expected, ds.val))


def test_identical_seeds_identical_traces():
    ds = _gauss_dataset(n=2000, seed=4)
    cfg = _fast_config(components=2, max_steps=80, eval_every=20, lam=0.01)
    m1, r1 = tr.run_boosting(ds, cfg)
    m2, r2 = tr.run_boosting(ds, cfg)
    for a, b in zip(r1, r2):
        assert a.to_json_line() == b.to_json_line()
    for c1, c2 in zip(m1.components, m2.components):
        assert np.array_equal(c1.params.values, c2.params.values)
    assert m1.weights == m2.weights and m1.rho == m2.rho
    m3, _ = tr.run_boosting(ds, _fast_config(components=2, max_steps=80, eval_every=20, lam=0.01, seed=99))
    assert not np.array_equal(m1.components[0].params.values, m3.components[0].params.values)


def test_fit_restores_best_validation_params():
    # Scripted validation values: the minimum arrives mid-run, then the
    # score only worsens until patience trips. The loop must hand back the
    # parameters snapshotted at the minimum, not the last iterate.
    comp = new_component(2, 1, kind=AFFINE)
    batch = np.random.default_rng(0).standard_normal((64, 2))
    cfg = _fast_config(max_steps=10, eval_every=1, patience=3, schedule="constant", lr=0.05)
    scripted = iter([10.0, 4.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0])
    seen = []

    def val_fn():
        seen.append(comp.params.values.copy())
        return next(scripted)

    def build_loss(step):
        return lambda tp: obj.nll_loss(comp, batch, params=tp)

    trace, val_trace, best = tr._fit(comp, cfg, build_loss, val_fn, cfg.max_steps, stage=1)
    assert best == 1.0
    # seen[0] is the pre-training evaluation; eval k happens after step k+1.
    assert np.array_equal(comp.params.values, seen[2])
    assert len(trace) == 5  # stopped after patience=3 evals past the minimum
    assert val_trace == [4.0, 1.0, 2.0, 3.0, 4.0]


def test_training_abort_carries_trace_and_partial_model():
    pts = np.full((2000, 2), np.nan)
    clean = np.random.default_rng(0).standard_normal((200, 2))
    ds = TabularDataset(train=pts, val=clean, test=clean, mean=np.zeros(2), std=np.ones(2))
    with pytest.raises(TrainingAbort) as info:
        tr.run_boosting(ds, _fast_config())
    assert info.value.partial_model.n_components == 0
    assert info.value.records == []
    assert info.value.trace == []


def test_rng_override_changes_initialization():
    ds = _gauss_dataset(n=2000, seed=5)
    cfg = _fast_config(max_steps=0)
    c_default, _ = tr.train_stage(None, ds, cfg)
    c_seeded, _ = tr.train_stage(None, ds, cfg, rng=np.random.default_rng(123))
    assert not np.array_equal(c_default.params.values, c_seeded.params.values)


# ---------------------------------------------------------------------------
# rho selection machinery


def test_additive_blend_losses_exact_endpoints():
    rng = np.random.default_rng(7)
    prev = rng.standard_normal(200) - 3.0
    new = rng.standard_normal(200) - 3.0
    ev = tr._additive_blend_losses(prev, new)
    assert ev(0.0) == float(-np.mean(prev))
    assert ev(1.0) == float(-np.mean(new))
    r = 0.3
    oracle = float(-np.mean(np.log(0.7 * np.exp(prev) + 0.3 * np.exp(new))))
    assert abs(ev(r) - oracle) < 1e-10


def test_additive_stagewise_validation_never_worsens():
    ds = _gauss_dataset(n=2500, seed=6)
    cfg = _fast_config(components=3, max_steps=60, eval_every=20, lam=0.01)
    _, records = tr.run_boosting(ds, cfg)
    for prev, rec in zip(records, records[1:]):
        assert rec.val_loss_after <= rec.val_loss_before + 1e-12
        assert abs(rec.val_loss_before - prev.val_loss_after) < 1e-9


def _affine_comp(shift, log_scale):
    comp = new_component(2, 1, kind=AFFINE)
    comp.params["L0.shift"] = np.asarray(shift, dtype=np.float64)
    comp.params["L0.log_scale"] = np.asarray(log_scale, dtype=np.float64)
    return comp


def test_multiplicative_pricer_against_quadrature():
    # Direct oracle for E_{G}[g_new^r]: midpoint quadrature of
    # integral G_tilde g_new^r / integral G_tilde on [-8, 8]^2.
    prev = bc.empty_model(bc.MULTIPLICATIVE)
    prev = bc.append_component(prev, _affine_comp([0.5, 0.0], [0.1, -0.1]), 1.0)
    prev = bc.append_component(prev, _affine_comp([-0.4, 0.3], [0.0, 0.2]), 0.5)
    prev = bc.with_partition(prev, *bc.estimate_log_partition(prev, 100_000, np.random.default_rng(0)))
    comp = _affine_comp([0.2, -0.3], [0.15, 0.0])
    val = np.random.default_rng(1).standard_normal((100, 2))
    prev_val_loss = float(-np.mean(bc.multiplicative_log_prob(prev, val)))
    pricer = tr._MultiplicativeRhoPricer(prev, comp, val, prev_val_loss, 200_000, np.random.default_rng(2))

    xs = np.linspace(-8, 8, 321)[:-1] + 0.025
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    log_gt = sum(r * c.log_prob(grid) for r, c in zip(prev.rho, prev.components))
    lp_new = comp.log_prob(grid)
    for r in (0.3, 0.7, 1.0):
        num = np.exp(log_gt + r * lp_new).sum()
        den = np.exp(log_gt).sum()
        oracle = math.log(num / den)
        est, se = pricer.log_ratio(r)
        assert abs(est - oracle) < max(4.0 * se, 5e-3), (r, est, oracle, se)

    assert pricer.log_ratio(0.0) == (0.0, 0.0)
    assert pricer.evaluator(0.0) == prev_val_loss
    assert pricer.log_partition_at(0.0) == (prev.log_partition, prev.log_partition_stderr)


def test_multiplicative_run_partition_bookkeeping():
    ds = _gauss_dataset(n=2500, seed=8)
    cfg = _fast_config(components=2, max_steps=60, eval_every=20,
                       combine=bc.MULTIPLICATIVE, partition_samples=50_000)
    model, records = tr.run_boosting(ds, cfg)
    # Stage 1 with a single unit exponent: the proposal equals the target,
    # every importance ratio is 1, and the estimate is exactly zero.
    assert records[0].log_partition == 0.0
    assert records[0].log_partition_stderr == 0.0
    assert model.partition_fresh
    assert records[1].log_partition == model.log_partition
    assert records[1].val_loss_after <= records[1].val_loss_before + 1e-12
    # The stored recursion-form estimate must agree with a direct one.
    direct, d_se = bc.estimate_log_partition(model, 200_000, np.random.default_rng(3))
    combined = math.hypot(d_se, model.log_partition_stderr)
    assert abs(direct - model.log_partition) < max(4.0 * combined, 5e-3)


def test_matching_run_records_and_weights():
    cfg = tr.TrainConfig(
        mode=tr.DENSITY_MATCHING, components=2, flow_steps=2, hidden=16,
        max_steps=120, eval_every=30, n_mc=64, val_mc=512, lr=5e-3, seed=5,
        rho_max_iters=40,
    )
    model, records = tr.run_boosting(EnergyTarget(name="u1"), cfg)
    assert model.n_components == 2
    assert abs(sum(model.weights) - 1.0) < 1e-12
    assert records[0].rho == 1.0
    assert 0.0 <= records[1].rho <= 1.0
    assert "rho_converged" in records[1].extras
    for rec in records:
        assert np.isfinite(rec.val_loss_after)
        assert "stage_objective_val" in rec.extras


def test_presampled_resampler_matches_resample_indices():
    rng = np.random.default_rng(9)
    data = rng.standard_normal((500, 2))
    w = rng.random(500)
    w /= w.sum()
    draw = tr._presampled_resampler(data, w)
    got = draw(1000, np.random.default_rng(42))
    want = obj.resample(data, w, 1000, np.random.default_rng(42))
    assert np.array_equal(got, want)


def test_finetune_smoke_keeps_weight_sum():
    ds = _gauss_dataset(n=2000, seed=10)
    cfg = _fast_config(components=2, max_steps=40, eval_every=20, lam=0.01,
                       finetune_passes=1, finetune_steps=40)
    model, records = tr.run_boosting(ds, cfg)
    assert abs(sum(model.weights) - 1.0) < 1e-12
    assert "finetune_trace" in records[-1].extras


# ---------------------------------------------------------------------------
# checkpoints


def _trained_pair(tmp_path, combine=bc.ADDITIVE):
    ds = _gauss_dataset(n=2000, seed=12)
    kw = {}
    if combine == bc.MULTIPLICATIVE:
        kw = dict(partition_samples=5000)
    cfg = _fast_config(components=2, max_steps=40, eval_every=20, lam=0.01,
                       combine=combine, **kw)
    model, _ = tr.run_boosting(ds, cfg)
    path = os.path.join(tmp_path, "model.gbnf")
    tr.save_checkpoint(model, path, config=cfg)
    return model, cfg, path


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    model, cfg, path = _trained_pair(str(tmp_path))
    loaded = tr.load_checkpoint(path)
    assert loaded.model.mode == model.mode
    assert loaded.model.weights == model.weights
    assert loaded.model.rho == model.rho
    assert loaded.model.partition_fresh == model.partition_fresh
    for a, b in zip(loaded.model.components, model.components):
        assert np.array_equal(a.params.values, b.params.values)
        assert (a.dim, a.n_layers, a.hidden, a.kind, a.start_parity) == (
            b.dim, b.n_layers, b.hidden, b.kind, b.start_parity)
    x = np.random.default_rng(0).standard_normal((64, 2))
    assert np.array_equal(bc.additive_log_prob(loaded.model, x), bc.additive_log_prob(model, x))
    assert loaded.meta["config"]["seed"] == cfg.seed


def test_checkpoint_multiplicative_partition_exact(tmp_path):
    model, _, path = _trained_pair(str(tmp_path), combine=bc.MULTIPLICATIVE)
    loaded = tr.load_checkpoint(path)
    assert loaded.model.log_partition == model.log_partition
    assert loaded.model.log_partition_stderr == model.log_partition_stderr
    assert loaded.model.partition_fresh
    x = np.random.default_rng(1).standard_normal((32, 2))
    assert np.array_equal(
        bc.multiplicative_log_prob(loaded.model, x), bc.multiplicative_log_prob(model, x))


def test_checkpoint_bytes_are_deterministic(tmp_path):
    model, cfg, path = _trained_pair(str(tmp_path))
    again = os.path.join(str(tmp_path), "again.gbnf")
    tr.save_checkpoint(model, again, config=cfg)
    with open(path, "rb") as a, open(again, "rb") as b:
        assert a.read() == b.read()
    with open(path + ".meta.json") as a, open(again + ".meta.json") as b:
        assert a.read() == b.read()


def test_checkpoint_corruption_errors(tmp_path):
    _, _, path = _trained_pair(str(tmp_path))
    raw = open(path, "rb").read()

    bad_magic = os.path.join(str(tmp_path), "magic.gbnf")
    with open(bad_magic, "wb") as f:
        f.write(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        tr.load_checkpoint(bad_magic)

    bad_version = os.path.join(str(tmp_path), "version.gbnf")
    with open(bad_version, "wb") as f:
        f.write(raw[:4] + (99).to_bytes(2, "little") + raw[6:])
    with pytest.raises(CheckpointError, match="version"):
        tr.load_checkpoint(bad_version)

    for cut in (2, 8, len(raw) // 2, len(raw) - 5):
        clipped = os.path.join(str(tmp_path), f"cut{cut}.gbnf")
        with open(clipped, "wb") as f:
            f.write(raw[:cut])
        with pytest.raises(CheckpointError, match="truncated"):
            tr.load_checkpoint(clipped)

    padded = os.path.join(str(tmp_path), "padded.gbnf")
    with open(padded, "wb") as f:
        f.write(raw + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        tr.load_checkpoint(padded)

    textfile = os.path.join(str(tmp_path), "notes.txt")
    with open(textfile, "w") as f:
        f.write("just some text\n")
    with pytest.raises(CheckpointError):
        tr.load_checkpoint(textfile)


def test_checkpoint_load_is_evaluation_identical_across_processes_shape(tmp_path):
    # Same config and seed, trained twice, saved twice: files must be equal
    # byte for byte, so any consumer sees identical densities.
    ds = _gauss_dataset(n=2000, seed=13)
    cfg = _fast_config(components=2, max_steps=30, eval_every=15, lam=0.01)
    p1 = os.path.join(str(tmp_path), "a.gbnf")
    p2 = os.path.join(str(tmp_path), "b.gbnf")
    m1, _ = tr.run_boosting(ds, cfg)
    m2, _ = tr.run_boosting(ds, cfg)
    tr.save_checkpoint(m1, p1, config=cfg)
    tr.save_checkpoint(m2, p2, config=cfg)
    with open(p1, "rb") as a, open(p2, "rb") as b:
        assert a.read() == b.read()
