import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from egokit.motionprior.checkpoint import CheckpointError, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from egokit.motionprior.denoiser import DenoiserConfig, denoise, init_params
from egokit.motionprior.diffusion import (
    ddim_sample, fuse_windows, fused_sample, noise_sample, split_windows, training_loss,
)
from egokit.motionprior.schedule import NoiseSchedule, cosine_schedule, ddim_timesteps
from egokit.motionprior.train import TrainConfig, evaluate_loss, train_denoiser

SCHED = cosine_schedule(1000)
SMALL = DenoiserConfig(state_dim=7, cond_dim=5, width=16, heads=2, enc_blocks=2, dec_blocks=2, ff_mult=2)


def small_params(seed=0, zero_output=False):
    return init_params(SMALL, np.random.default_rng(seed), zero_output)


# --- schedule and forward process ------------------------------------------------


def test_cosine_schedule_properties():
    ab = SCHED.alpha_bar
    assert SCHED.num_steps == 1000
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert ab[-1] > 0
    assert np.all(SCHED.sigma >= 0)


def test_schedule_validation():
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([1.0, 0.5, 0.6]), np.zeros(3), np.ones(3))


def test_ddim_timesteps():
    ts = ddim_timesteps(1000, 30)
    assert ts[0] == 1000 and ts[-2] == 1 and ts[-1] == 0 and len(ts) == 31
    assert np.all(np.diff(ts) < 0)
    assert list(ddim_timesteps(1000, 1)) == [1000, 0]


def test_noise_sample_examples(rng):
    x0 = rng.normal(size=(4, 7))
    sched = NoiseSchedule(np.array([1.0, 1.0, 0.5]), np.zeros(3), np.ones(3))
    assert np.array_equal(noise_sample(x0, 1, rng.normal(size=x0.shape), sched), x0)
    assert np.array_equal(noise_sample(x0, 500, np.zeros_like(x0), SCHED), np.sqrt(SCHED.alpha_bar[500]) * x0)
    with pytest.raises(ValueError):
        noise_sample(x0, 5, np.zeros((3, 7)), SCHED)
    with pytest.raises(ValueError):
        noise_sample(x0, 0, np.zeros_like(x0), SCHED)


def test_noise_sample_monte_carlo():
    rng = np.random.default_rng(0)
    n = 400
    x0 = np.full(100_000, 0.7)
    resid = noise_sample(x0, n, rng.standard_normal(x0.shape), SCHED) - np.sqrt(SCHED.alpha_bar[n]) * x0
    assert abs(resid.var() / (1 - SCHED.alpha_bar[n]) - 1) < 0.02


# --- denoiser ----------------------------------------------------------------------


@pytest.mark.parametrize("length", [1, 32, 128])
def test_denoise_shape(length, rng):
    p = small_params()
    x = rng.normal(size=(length, 7))
    assert denoise(p, x, 10, rng.normal(size=(length, 5))).shape == x.shape


def test_denoise_deterministic(rng):
    p = small_params()
    x, c = rng.normal(size=(20, 7)), rng.normal(size=(20, 5))
    assert np.array_equal(denoise(p, x, 500, c), denoise(p, x, 500, c))


def test_zero_output_head(rng):
    p = small_params(zero_output=True)
    assert np.array_equal(denoise(p, rng.normal(size=(9, 7)), 3, rng.normal(size=(9, 5))), np.zeros((9, 7)))


def test_denoise_rejects_overlong(rng):
    with pytest.raises(ValueError):
        denoise(small_params(), rng.normal(size=(129, 7)), 3, rng.normal(size=(129, 5)))


def test_denoise_batch_matches_single(rng):
    p = small_params()
    x, c = rng.normal(size=(3, 16, 7)), rng.normal(size=(3, 16, 5))
    batch = denoise(p, x, 200, c)
    for b in range(3):
        assert np.allclose(batch[b], denoise(p, x[b], 200, c[b]), atol=1e-12)


# --- training objective --------------------------------------------------------------


def test_loss_zero_when_prediction_exact(rng):
    p = small_params(zero_output=True)
    loss, grads = training_loss(p, np.zeros((2, 8, 7)), rng.normal(size=(2, 8, 5)), rng, SCHED)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads.values())


def test_loss_zero_with_zero_weights(rng):
    sched = NoiseSchedule(SCHED.alpha_bar, SCHED.sigma, np.zeros_like(SCHED.weights))
    loss, _ = training_loss(small_params(), rng.normal(size=(2, 8, 7)), rng.normal(size=(2, 8, 5)), rng, sched)
    assert loss == 0.0


def test_training_gradient_finite_differences():
    data = np.random.default_rng(5)
    x0, c = data.normal(size=(2, 6, 7)), data.normal(size=(2, 6, 5))
    p = small_params(3)

    def loss_at(params):
        return training_loss(params, x0, c, np.random.default_rng(11), SCHED)

    _, grads = loss_at(p)
    probe = np.random.default_rng(7)
    names = list(p.weights)
    for _ in range(20):
        name = names[probe.integers(len(names))]
        idx = tuple(probe.integers(s) for s in p.weights[name].shape)
        h = 1e-5
        plus, minus = p.copy(), p.copy()
        plus.weights[name][idx] += h
        minus.weights[name][idx] -= h
        num = (loss_at(plus)[0] - loss_at(minus)[0]) / (2 * h)
        ana = grads[name][idx]
        assert abs(ana - num) <= 1e-4 * max(abs(num), 1e-3), (name, idx, ana, num)


@given(st.integers(0, 1000))
def test_loss_non_negative(seed):
    rng = np.random.default_rng(seed)
    loss, _ = training_loss(small_params(seed % 3), rng.normal(size=(1, 4, 7)), rng.normal(size=(1, 4, 5)), rng, SCHED)
    assert loss >= 0


# --- sampling ------------------------------------------------------------------------


def oracle_denoiser(x0):
    return lambda xn, n, cond: x0[cond[:, 0].astype(int)]


def index_cond(length):
    return np.arange(length, dtype=float)[:, None]


def test_ddim_oracle_recovers_x0(rng):
    x0 = rng.normal(size=(64, 7))
    out = ddim_sample(oracle_denoiser(x0), index_cond(64), steps=30, rng=rng, state_dim=7)
    assert np.abs(out - x0).max() < 1e-8


def test_ddim_single_step_returns_prediction(rng):
    x0 = rng.normal(size=(10, 7))
    calls = []

    def model(xn, n, cond):
        calls.append(n)
        return x0 * 2
    out = ddim_sample(model, index_cond(10), steps=1, rng=rng, state_dim=7)
    assert calls == [1000]
    assert np.array_equal(out, x0 * 2)


def test_ddim_matches_formula(rng):
    p = small_params(1)
    c = rng.normal(size=(12, 5))
    x_init = rng.normal(size=(12, 7))
    got = ddim_sample(p, c, steps=30, x_init=x_init)
    ts = ddim_timesteps(1000, 30)
    ab = SCHED.alpha_bar
    x = x_init.copy()
    for i in range(30):
        a, b = ab[ts[i]], ab[ts[i + 1]]
        x0 = denoise(p, x, ts[i], c)
        eps = (x - np.sqrt(a) * x0) / np.sqrt(1 - a)
        x = np.sqrt(b) * x0 + np.sqrt(1 - b) * eps
    assert np.abs(got - p.denormalize_state(x)).max() < 1e-10


def test_ddim_deterministic():
    p = small_params(1)
    c = np.random.default_rng(0).normal(size=(12, 5))
    a = ddim_sample(p, c, rng=np.random.default_rng(4))
    b = ddim_sample(p, c, rng=np.random.default_rng(4))
    assert np.array_equal(a, b)


def test_guidance_hook_receives_steps(rng):
    x0 = rng.normal(size=(8, 7))
    seen = []

    def hook(x, i, total):
        seen.append((i, total))
        return x
    ddim_sample(oracle_denoiser(x0), index_cond(8), steps=5, guidance=hook, rng=rng, state_dim=7)
    assert seen == [(i, 5) for i in range(5)]


@pytest.mark.parametrize("length, expected", [
    (128, [(0, 128)]),
    (224, [(0, 128), (96, 224)]),
    (300, [(0, 128), (96, 224), (172, 300)]),
    (50, [(0, 50)]),
    (129, [(0, 128), (1, 129)]),
])
def test_split_windows(length, expected):
    assert split_windows(length) == expected


@given(st.integers(1, 2000))
def test_split_windows_cover(length):
    w = split_windows(length)
    covered = np.zeros(length, bool)
    for s, e in w:
        assert e - s == min(length, 128)
        covered[s:e] = True
    assert covered.all() and w[-1][1] == length


def test_fusion_identity_and_midpoint(rng):
    base = rng.normal(size=(224, 3))
    windows = split_windows(224)
    same = fuse_windows([base[s:e] for s, e in windows], windows, 224)
    assert np.allclose(same, base, atol=1e-15)
    d = 0.25
    fused = fuse_windows([base[0:128] + d, base[96:224] - d], windows, 224)
    assert np.allclose(fused[96:128], base[96:128], atol=1e-15)
    assert np.allclose(fused[:96], base[:96] + d) and np.allclose(fused[128:], base[128:] - d)


def test_fused_sample_oracle(rng):
    x0 = rng.normal(size=(300, 7))
    out = fused_sample(oracle_denoiser(x0), index_cond(300), steps=30, rng=rng, state_dim=7)
    assert np.abs(out - x0).max() < 1e-8


def test_fused_equals_ddim_for_one_window():
    p = small_params(2)
    c = np.random.default_rng(1).normal(size=(40, 5))
    assert np.array_equal(fused_sample(p, c, rng=np.random.default_rng(3)), ddim_sample(p, c, rng=np.random.default_rng(3)))


# --- checkpoint ------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    p = small_params(4)
    p.x_mean, p.x_std = rng.normal(size=7), rng.uniform(0.5, 2, 7)
    p.meta.update(variant="egoallo", diffusion_steps=1000)
    path = tmp_path / "m.ckpt"
    save_checkpoint(p, path)
    q = load_checkpoint(path)
    assert q.config == p.config and q.meta["variant"] == "egoallo"
    assert all(np.array_equal(p.weights[k], q.weights[k]) for k in p.weights)
    assert np.array_equal(p.x_std, q.x_std)
    assert to_bytes(q) == path.read_bytes()


def test_checkpoint_layout_header():
    blob = to_bytes(small_params())
    assert blob[:8] == b"EGOKITDN"
    assert int.from_bytes(blob[8:12], "little") == 1
    assert [int.from_bytes(blob[12 + 4 * i:16 + 4 * i], "little") for i in range(8)] == [7, 5, 16, 2, 2, 2, 2, 128]


@pytest.mark.parametrize("mutate", [lambda b: b"XXXXXXXX" + b[8:], lambda b: b[:-8], lambda b: b + b"\0" * 8,
                                    lambda b: b[:8] + (9).to_bytes(4, "little") + b[12:]])
def test_checkpoint_corrupt(mutate):
    with pytest.raises(CheckpointError):
        from_bytes(mutate(to_bytes(small_params())))


# --- training ----------------------------------------------------------------------------


def toy_data(rng, count=12):
    states, conds = [], []
    for _ in range(count):
        t = int(rng.integers(40, 80))
        c = np.cumsum(rng.normal(size=(t, 5)) * 0.1, axis=0)
        states.append(np.concatenate([np.sin(c), c[:, :2]], axis=1))
        conds.append(c)
    return states, conds


def test_training_reduces_loss_and_is_deterministic():
    states, conds = toy_data(np.random.default_rng(0))
    cfg = TrainConfig(steps=200, batch_size=4, min_crop=16, max_crop=32, warmup=10, seed=3)
    p1, l1 = train_denoiser(states, conds, SMALL, cfg)
    assert l1[-20:].mean() < l1[:20].mean()
    p2, l2 = train_denoiser(states, conds, SMALL, cfg)
    assert np.array_equal(l1, l2)
    assert to_bytes(p1) == to_bytes(p2)


def test_held_out_loss_close_to_train_loss():
    rng = np.random.default_rng(1)
    states, conds = toy_data(rng, 30)
    cfg = TrainConfig(steps=300, batch_size=8, min_crop=16, max_crop=32, warmup=20, seed=0)
    p, _ = train_denoiser(states[:24], conds[:24], SMALL, cfg)
    train = evaluate_loss(p, states[:24], conds[:24], np.random.default_rng(9), min_crop=16, max_crop=32)
    held = evaluate_loss(p, states[24:], conds[24:], np.random.default_rng(9), min_crop=16, max_crop=32)
    assert held < 2 * train
