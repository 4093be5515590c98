import logging
import math

import numpy as np
import pytest

from shipid import datagen as dg
from shipid import kinematics as kin
from shipid import netmodel as nm
from shipid import training as trn
from shipid.dataset import Dataset, Trajectory
from shipid.keyvalue import ConfigError

DT = 0.1


def random_batch(rng, B, L, with_acc=True):
    states = rng.normal(scale=[1, 0.3, 1, 0.1, 0.5, 0.05], size=(B, L, 6))
    frames = np.empty((B, L, 7))
    frames[..., 0:3] = states[..., list(kin.VEL_IDX)]
    frames[..., 3:7] = rng.normal(size=(B, L, 4))
    acc = rng.normal(scale=0.05, size=(B, L, 3)) if with_acc else None
    return trn.Batch(states, frames, acc)


def random_stats(rng):
    return trn.StandardizationStats(rng.uniform(0.5, 2, 6), rng.uniform(0.01, 0.1, 3))


# ------------------------------------------------------------ naive oracles


def naive_acc_loss(p, batch, stats):
    s = trn.seed_frames(p.arch, p.m)
    B, L = batch.states.shape[:2]
    N_T = L - s
    tot = 0.0
    for n in range(B):
        z = None
        for i in range(N_T):
            idx = s - 1 + i
            if p.arch == nm.FINITE:
                a = nm.forward_finite(batch.frames[n, idx - p.m + 1 : idx + 1], p)
            else:
                a, z = nm.step_full(batch.frames[n, idx], z, p)
            for j in range(3):
                tot += ((a[j] - batch.accels[n, idx, j]) / stats.sigma_a[j]) ** 2
    return tot / (B * N_T)


def naive_rollout_loss(p, batch, stats, dt):
    s = trn.seed_frames(p.arch, p.m)
    B, L = batch.states.shape[:2]
    N_T = L - s
    tot = 0.0
    for n in range(B):
        x = batch.states[n, : s].copy()
        frames = batch.frames[n].copy()
        z = None
        for i in range(s - 1, L - 1):
            if p.arch == nm.FINITE:
                a = nm.forward_finite(frames[i - p.m + 1 : i + 1], p)
            else:
                a, z = nm.step_full(frames[i], z, p)
            X, u, Y, v, psi, r = x[-1]
            nxt = np.array([X + dt * (u * math.cos(psi) - v * math.sin(psi)), u + dt * a[0],
                            Y + dt * (u * math.sin(psi) + v * math.cos(psi)), v + dt * a[1],
                            psi + dt * r, r + dt * a[2]])
            x = np.vstack([x, nxt])
            frames[i + 1, 0:3] = nxt[[1, 3, 5]]
            for j in range(6):
                tot += ((nxt[j] - batch.states[n, i + 1, j]) / stats.sigma_x[j]) ** 2
    return tot / (B * N_T)


@pytest.mark.parametrize("arch", [nm.FINITE, nm.FULL])
def test_losses_match_naive(arch, rng):
    p = nm.init_params(5, arch, m=3, seed=11)
    s = trn.seed_frames(arch, 3)
    batch = random_batch(rng, 4, 6 + s)
    stats = random_stats(rng)
    assert trn.acc_loss(p, batch, stats) == pytest.approx(naive_acc_loss(p, batch, stats), rel=1e-12)
    assert trn.rollout_loss(p, batch, stats, DT) == pytest.approx(naive_rollout_loss(p, batch, stats, DT), rel=1e-12)


def test_acc_loss_single_term():
    p = nm.init_params(3, nm.FINITE, m=1, seed=0).zero_output()
    acc = np.zeros((1, 2, 3))
    acc[0, 0, 0] = 1.0
    batch = trn.Batch(np.zeros((1, 2, 6)), np.zeros((1, 2, 7)), acc)
    stats = trn.StandardizationStats(np.ones(6), np.array([2.0, 1.0, 1.0]))
    assert trn.acc_loss(p, batch, stats) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        trn.acc_loss(p, trn.Batch(np.zeros((1, 1, 6)), np.zeros((1, 1, 7)), acc[:, :1]), stats)


def test_acc_loss_zero_when_exact(rng):
    p = nm.init_params(4, nm.FINITE, m=2, seed=1)
    batch = random_batch(rng, 3, 7)
    idx = 1 + np.arange(5)
    for n in range(3):
        for i in idx:
            batch.accels[n, i] = nm.forward_finite(batch.frames[n, i - 1 : i + 1], p)
    assert trn.acc_loss(p, batch, random_stats(rng)) == pytest.approx(0.0, abs=1e-28)


def test_zero_network_rollout_is_constant_velocity(rng):
    p = nm.init_params(4, nm.FINITE, m=2, seed=2).zero_output()
    batch = random_batch(rng, 2, 12)
    stats = random_stats(rng)
    tot = 0.0
    for n in range(2):
        X, u, Y, v, psi, r = batch.states[n, 1]
        for k in range(1, 11):
            # Euler with constant (u, v, r): heading advances linearly, positions sum the steps
            psis = psi + DT * r * np.arange(k)
            Xk = X + DT * np.sum(u * np.cos(psis) - v * np.sin(psis))
            Yk = Y + DT * np.sum(u * np.sin(psis) + v * np.cos(psis))
            pred = np.array([Xk, u, Yk, v, psi + DT * r * k, r])
            tot += np.sum(((pred - batch.states[n, 1 + k]) / stats.sigma_x) ** 2)
    assert trn.rollout_loss(p, batch, stats, DT) == pytest.approx(tot / 20, rel=1e-12)


def test_rollout_loss_zero_on_exact_data():
    # with a zero network the data must coast exactly at constant velocity
    p = nm.init_params(3, nm.FULL, seed=0).zero_output()
    x = np.array([0.0, 0.3, 0.0, 0.05, 0.2, 0.01])
    states = [x]
    for _ in range(8):
        x = kin.euler_state_step(x, np.zeros(3), DT)
        states.append(x)
    states = np.array(states)[None]
    frames = np.zeros((1, 9, 7))
    frames[..., 0:3] = states[..., list(kin.VEL_IDX)]
    batch = trn.Batch(states, frames, None)
    assert trn.rollout_loss(p, batch, trn.StandardizationStats(np.ones(6)), DT) == pytest.approx(0, abs=1e-28)


def test_missing_acceleration(rng):
    p = nm.init_params(3, nm.FINITE, m=2)
    with pytest.raises(trn.MissingAccelerationError):
        trn.acc_loss(p, random_batch(rng, 2, 5, with_acc=False), random_stats(rng))


def test_rollout_divergence_reported(rng):
    p = nm.init_params(3, nm.FINITE, m=2, seed=0, output_scale=np.full(3, 1e306))
    with pytest.raises(trn.RolloutDivergedError):
        trn.rollout_loss(p, random_batch(rng, 2, 12), random_stats(rng), DT)


# ------------------------------------------------------------- gradients


def fd_check(p, batch, kind, stats, eps=1e-6, floor_frac=1e-3):
    """Max relative error; components below floor_frac * max|fd| are compared on that scale."""
    g = trn.grad(p, batch, kind, stats, DT).grads
    analytic = np.concatenate([g[k].ravel() for k in nm.PARAM_NAMES])
    theta = p.flat()
    fd = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = eps
        lp = trn.loss_and_grad(p.from_flat(theta + e), batch, kind, stats, DT, False).loss
        lm = trn.loss_and_grad(p.from_flat(theta - e), batch, kind, stats, DT, False).loss
        fd[i] = (lp - lm) / (2 * eps)
    floor = floor_frac * np.abs(fd).max()
    return np.max(np.abs(analytic - fd) / np.maximum(np.abs(fd), floor))


@pytest.mark.parametrize("arch", [nm.FINITE, nm.FULL])
@pytest.mark.parametrize("kind", [trn.ACC, trn.STATE])
def test_gradient_single_step(arch, kind, rng):
    p = nm.init_params(3, arch, m=2, seed=5)
    batch = random_batch(rng, 2, 1 + trn.seed_frames(arch, 2))
    assert fd_check(p, batch, kind, random_stats(rng), eps=1e-5, floor_frac=1.0) < 1e-6


@pytest.mark.parametrize("arch", [nm.FINITE, nm.FULL])
def test_gradient_with_io_scaling(arch, rng):
    p = nm.init_params(3, arch, m=2, seed=6, input_scale=rng.uniform(0.5, 2, 7),
                       output_scale=rng.uniform(0.5, 2, 3))
    batch = random_batch(rng, 2, 4 + trn.seed_frames(arch, 2))
    assert fd_check(p, batch, trn.STATE, random_stats(rng)) < 1e-5


def test_standardization_invariance(rng):
    p = nm.init_params(4, nm.FINITE, m=2, seed=7)
    batch = random_batch(rng, 3, 8)
    stats = random_stats(rng)
    for kind in (trn.ACC, trn.STATE):
        a = trn.grad(p, batch, kind, stats, DT)
        b = trn.grad(p, batch, kind, stats.scaled(3.0), DT)
        assert b.loss == pytest.approx(a.loss / 9.0, rel=1e-12)
        ga = np.concatenate([a.grads[k].ravel() for k in nm.PARAM_NAMES])
        gb = np.concatenate([b.grads[k].ravel() for k in nm.PARAM_NAMES])
        cos = ga @ gb / (np.linalg.norm(ga) * np.linalg.norm(gb))
        assert cos > 1 - 1e-10


def test_small_step_does_not_increase_loss():
    rng = np.random.default_rng(0)
    ok = 0
    for trial in range(100):
        p = nm.init_params(4, nm.FINITE, m=2, seed=trial)
        batch = random_batch(rng, 3, 6)
        stats = random_stats(rng)
        kind = trn.STATE if trial % 2 else trn.ACC
        b = trn.grad(p, batch, kind, stats, DT)
        q, _ = trn.adam_step(p, b.grads, trn.AdamState.zeros_like(p), 1e-6)
        ok += trn.loss_and_grad(q, batch, kind, stats, DT, False).loss <= b.loss
    assert ok >= 95


# ------------------------------------------------------------------- adam


def test_adam_three_scalar_steps():
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
    theta, m, v = 1.0, 0.0, 0.0
    grads = [0.5, -1.0, 2.0]
    want = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        want.append(theta)
    # and by hand for the first step: update is lr * g / (|g| + eps)
    assert want[0] == pytest.approx(1.0 - 0.01 * 0.5 / (0.5 + 1e-8), rel=1e-15)
    th, mm, vv = np.array(1.0), np.array(0.0), np.array(0.0)
    for t, g in enumerate(grads, start=1):
        th, mm, vv = trn.adam_update(th, np.array(g), mm, vv, t, lr)
        assert float(th) == pytest.approx(want[t - 1], rel=1e-15)


def test_adam_first_step_magnitude_and_zero_grad():
    th, m, v = trn.adam_update(np.array(3.0), np.array(1.0), np.array(0.0), np.array(0.0), 1, 0.1)
    assert float(th) == pytest.approx(2.9, rel=1e-7)
    th2, m2, v2 = trn.adam_update(th, np.array(0.0), m, v, 2, 0.1)
    assert float(m2) == pytest.approx(0.9 * float(m))
    assert float(v2) == pytest.approx(0.999 * float(v))
    p = nm.init_params(3, seed=0)
    zeros = {k: np.zeros_like(a) for k, a in p.arrays().items()}
    q, st = trn.adam_step(p, zeros, trn.AdamState.zeros_like(p), 0.1)
    assert np.array_equal(q.flat(), p.flat()) and st.t == 1


# ---------------------------------------------------------------- windows


def _traj(n, label="R"):
    rng = np.random.default_rng(n)
    return Trajectory(np.arange(n) * DT, rng.normal(size=(n, 6)), rng.normal(size=(n, 2)),
                      np.abs(rng.normal(size=(n, 2))), rng.normal(size=(n, 3)), label, DT)


def test_window_counts(caplog):
    ds = Dataset([_traj(100)])
    assert len(trn.make_windows(ds, 60, 10)) == 31
    with caplog.at_level(logging.WARNING):
        assert trn.make_windows(Dataset([_traj(50)]), 60, 10) == []
    assert "shorter" in caplog.text
    cover = trn.make_windows(Dataset([_traj(210)]), 60, 10, stride=60)
    assert [w.start for w in cover] == [0, 60, 120]


def test_window_frames_are_slices():
    ds = Dataset([_traj(90), _traj(80, "T")])
    wins = trn.make_windows(ds, 20, 5, stride=7)
    batch = trn.make_batch(ds, wins, 25)
    for k, w in enumerate(wins):
        tr = ds.trajectories[w.traj]
        assert batch.states[k].tobytes() == tr.states[w.start : w.start + 25].tobytes()
        assert batch.frames[k].tobytes() == tr.frames()[w.start : w.start + 25].tobytes()
        assert batch.accels[k].tobytes() == tr.accels[w.start : w.start + 25].tobytes()


def test_acc_windows_need_accels():
    tr = _traj(100)
    tr.accels = None
    with pytest.raises(trn.MissingAccelerationError):
        trn.make_windows(Dataset([tr]), 10, 2, trn.ACC)


# ------------------------------------------------------------------ config


def test_config_defaults_and_lr():
    cfg = trn.TrainConfig()
    assert (cfg.batch_size, cfg.N_T, cfg.m, cfg.H) == (512, 60, 10, 200)
    assert cfg.lr_for(trn.STATE) == 2e-5 and cfg.lr_for(trn.ACC) == 1e-4
    assert cfg.replace(learning_rate=1e-3).lr_for(trn.ACC) == 1e-3
    with pytest.raises(ValueError):
        trn.TrainConfig(N_T=0)
    with pytest.raises(ValueError):
        trn.TrainConfig(learning_rate=-1.0)


def test_config_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# desk\nH = 16\nseeds = 0, 1, 2\nscale_io = yes\nlearning_rate = auto\n")
    cfg = trn.TrainConfig.from_file(p)
    assert cfg.H == 16 and cfg.seeds == (0, 1, 2) and cfg.scale_io and cfg.learning_rate is None
    p.write_text("H = 16\nlr = 3\n")
    with pytest.raises(ConfigError, match="'lr'"):
        trn.TrainConfig.from_file(p)
    p.write_text("H = sixteen\n")
    with pytest.raises(ConfigError):
        trn.TrainConfig.from_file(p)


def test_stats_reject_degenerate_channel():
    with pytest.raises(ValueError):
        trn.StandardizationStats(np.array([1, 1, 0, 1, 1, 1.0]))


# ------------------------------------------------------------------- train


@pytest.fixture(scope="module")
def coasting_sets():
    specs = [dg.ManeuverSpec(dg.TURNING, 8.0, n=15.0, delta=d) for d in (0.3, -0.5)]
    train = dg.compose_dataset([(specs[0], 1), (specs[1], 1)], seed=1)
    val = dg.compose_dataset([(dg.ManeuverSpec(dg.TURNING, 8.0, n=15.0, delta=0.4), 1)], seed=2)
    return train, val


def test_smoke_training_beats_zero_network():
    # 62 samples of a zigzag give 50 windows; the fit is judged on the same windows
    spec = dg.ManeuverSpec(dg.ZIGZAG, 6.2, n=15.0, delta=0.35, switch_angle=0.02, u0=0.45)
    ds = dg.compose_dataset([(spec, 1)], seed=0)
    cfg = trn.TrainConfig(H=8, N_T=10, m=3, batch_size=10, learning_rate=1e-2,
                          max_epochs=200, patience=200, scale_io=True)
    windows = trn.make_windows(ds, cfg.N_T, cfg.m)
    assert len(windows) == 50
    res = trn.train(ds, cfg, trn.STATE, nm.FINITE, seed=0, val=ds)
    zero = trn.batched_loss(res.params.zero_output(), trn.WindowSource(ds), windows, cfg.N_T,
                            trn.STATE, res.stats, DT)
    assert res.best_val < 0.1 * zero


def test_training_deterministic_and_seed_dependent(coasting_sets):
    train, val = coasting_sets
    cfg = trn.TrainConfig(H=4, N_T=5, m=2, batch_size=8, learning_rate=1e-3, stride=4, max_epochs=3)
    a = trn.train(train, cfg, trn.ACC, nm.FINITE, seed=3, val=val)
    b = trn.train(train, cfg, trn.ACC, nm.FINITE, seed=3, val=val)
    c = trn.train(train, cfg, trn.ACC, nm.FINITE, seed=4, val=val)
    assert a.log_csv() == b.log_csv()
    assert a.params.flat().tobytes() == b.params.flat().tobytes()
    assert a.log_csv() != c.log_csv()
    assert a.log_csv().splitlines()[0] == "epoch,train_loss,val_loss"
    assert len(a.log) == 4


def test_train_seeds_protocol(coasting_sets):
    train, val = coasting_sets
    cfg = trn.TrainConfig(H=4, N_T=5, m=1, batch_size=8, stride=4, max_epochs=2, seeds=(0, 1, 2))
    results = trn.train_seeds(train, cfg, trn.STATE, nm.FULL, val=val)
    finals = [r.best_val for r in results]
    assert len(set(finals)) == 3
    assert np.std(finals) > 0


def test_best_snapshot_returned(coasting_sets):
    train, val = coasting_sets
    cfg = trn.TrainConfig(H=4, N_T=5, m=2, batch_size=8, learning_rate=0.5, stride=4, max_epochs=6, patience=2)
    res = trn.train(train, cfg, trn.STATE, nm.FINITE, seed=0, val=val)
    vals = [v for _, _, v in res.log]
    assert res.best_val == min(vals)
    assert res.log[res.best_epoch][2] == res.best_val


def test_degenerate_split():
    ds = dg.compose_dataset([(dg.ManeuverSpec(dg.TURNING, 10.0), 1)], seed=0)
    with pytest.raises(trn.DegenerateSplitError):
        trn.train(ds, trn.TrainConfig(H=2, N_T=5, m=2, max_epochs=1), trn.STATE, nm.FINITE)


def test_split_by_whole_trajectories(small_dataset):
    tr, va = trn.split_dataset(small_dataset, 0.25, seed=0)
    assert len(tr) == 3 and len(va) == 1
    ids = {id(t) for t in tr} | {id(t) for t in va}
    assert len(ids) == 4
