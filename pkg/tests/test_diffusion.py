import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nam2speech import diffusion as df
from nam2speech import numerics as nx


class GaussianOracle:
    """Exact E[eps | x_t] when x0 ~ N(mu, var I), for any schedule."""

    def __init__(self, mu, var, schedule, n_mels=4):
        self.mu, self.var, self.schedule = mu, var, schedule
        self.config = df.DenoiserConfig(n_mels=n_mels, cond_dim=0)

    def predict_eps(self, x_t, t, cond=None):
        a = self.schedule.alpha_bar[np.asarray(t) - 1][:, None, None]
        return np.sqrt(1 - a) * (x_t - np.sqrt(a) * self.mu) / (a * self.var + 1 - a)


class CondOffset:
    """Toy denoiser whose conditional branch adds the mean of the conditioner."""

    def __init__(self, use_cond=True):
        self.use_cond = use_cond
        self.config = df.DenoiserConfig(n_mels=3, cond_dim=2)

    def predict_eps(self, x_t, t, cond=None):
        out = 0.3 * np.asarray(x_t) + 0.01 * np.asarray(t)[:, None, None]
        if cond is not None and self.use_cond:
            out = out + np.asarray(cond).mean(axis=2, keepdims=True)
        return out


# ---- schedule ------------------------------------------------------------------------


def test_single_step_schedule():
    s = df.NoiseSchedule([0.5])
    assert s.alpha_bar.tolist() == [0.5] and s.abar(0) == 1.0


def test_cumulative_table_matches_direct_product():
    s = df.make_schedule(50, 1e-4, 0.02)
    direct = 1.0
    for b in np.linspace(1e-4, 0.02, 50):
        direct *= 1.0 - b
    assert s.alpha_bar[-1] == direct


def test_default_schedule_is_rescaled_convention():
    s = df.make_schedule(50)
    assert s.beta[0] == pytest.approx(2e-3) and s.beta[-1] == pytest.approx(0.4)
    assert df.make_schedule(1000).beta[-1] == pytest.approx(0.02)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.floats(1e-6, 0.5), st.floats(0.0, 0.49))
def test_alpha_bar_strictly_decreasing(T, b0, extra):
    s = df.make_schedule(T, b0, b0 + extra)
    assert np.all(np.diff(s.alpha_bar) < 0) and s.alpha_bar[0] < 1.0


def test_schedule_errors():
    for b0, b1 in ((0.0, 0.1), (0.2, 0.1), (0.1, 1.0)):
        with pytest.raises(df.ScheduleError):
            df.make_schedule(10, b0, b1)
    with pytest.raises(df.ScheduleError):
        df.make_schedule(10, shape="cosine")


# ---- forward process -------------------------------------------------------------------


def test_zero_noise_marginal():
    s = df.make_schedule(50)
    x0 = np.arange(6.0)
    assert np.array_equal(df.forward_diffuse(s, x0, 17, np.zeros(6)), np.sqrt(s.abar(17)) * x0)


def test_iterated_kernel_matches_closed_form_moments():
    s = df.make_schedule(20)
    n, t = 100_000, 12
    x0 = np.array([1.5, -0.5])
    r = np.random.default_rng(0)
    x = np.broadcast_to(x0, (n, 2)).copy()
    for k in range(1, t + 1):
        x = df.forward_step(s, x, k, r.normal(size=x.shape))
    mean, var = np.sqrt(s.abar(t)) * x0, 1.0 - s.abar(t)
    assert np.all(np.abs(x.mean(axis=0) - mean) < 3 * np.sqrt(var / n))
    # standard error of a sample variance is var * sqrt(2 / (n - 1))
    assert np.all(np.abs(x.var(axis=0) - var) < 3 * var * np.sqrt(2 / (n - 1)))


def test_vanishing_beta_is_identity():
    s = df.NoiseSchedule([1e-12, 1e-12])
    x = np.random.default_rng(1).normal(size=5)
    assert np.allclose(df.forward_step(s, x, 2, np.random.default_rng(2).normal(size=5)), x, atol=1e-6)


def test_forward_rejects_bad_t():
    s = df.make_schedule(5)
    for t in (0, 6):
        with pytest.raises(df.ScheduleError):
            df.forward_diffuse(s, np.zeros(2), t, np.zeros(2))
        with pytest.raises(df.ScheduleError):
            df.posterior_params(s, np.zeros(2), np.zeros(2), t)


# ---- posterior ---------------------------------------------------------------------------


def test_posterior_at_first_step_is_deterministic():
    s = df.make_schedule(10)
    x0 = np.array([0.3, -2.0])
    mean, var = df.posterior_params(s, np.array([5.0, 5.0]), x0, 1)
    assert var == 0.0 and np.allclose(mean, x0, atol=1e-15)


def test_posterior_mean_on_noise_free_path():
    # with x_t = sqrt(abar_t) x0 the mean simplifies to sqrt(abar_{t-1}) x0
    s = df.make_schedule(30)
    x0 = np.random.default_rng(3).normal(size=8)
    for t in range(1, 31):
        mean, _ = df.posterior_params(s, np.sqrt(s.abar(t)) * x0, x0, t)
        assert np.allclose(mean, np.sqrt(s.abar(t - 1)) * x0, rtol=1e-12, atol=1e-14)


def test_posterior_variance_bounds():
    s = df.make_schedule(40)
    for t in range(2, 41):
        _, var = df.posterior_params(s, 0.0, 0.0, t)
        assert 0 < var <= s.beta[t - 1]


# ---- training ------------------------------------------------------------------------------


def test_zero_denoiser_loss_is_mean_abs_normal():
    m = df.DenoiserNet(df.DenoiserConfig(n_mels=8, cond_dim=0, hidden=8))
    st_ = df.TrainState(m, df.make_schedule(10), nx.SGD(m.parameters(), lr=0.0), np.random.default_rng(0))
    B, L, M = 16, 50, 8
    loss = df.train_step(st_, np.zeros((B, L, M)), None, 0.0)
    n = B * L * M
    # |eps| has variance 1 - 2/pi
    assert abs(loss - np.sqrt(2 / np.pi)) < 4 * np.sqrt((1 - 2 / np.pi) / n)


def test_gaussian_toy_training_progress():
    s = df.make_schedule(50)
    m = df.DenoiserNet(df.DenoiserConfig(n_mels=4, cond_dim=0, hidden=16))
    state = df.TrainState(m, s, nx.Adam(m.parameters(), lr=2e-3), np.random.default_rng(0))
    r = np.random.default_rng(1)
    for _ in range(2000):
        df.train_step(state, 1.3 + 0.5 * r.normal(size=(8, 8, 4)), None, 0.0)
    assert np.mean(state.history[-100:]) < 0.9 * state.history[0]


def test_null_token_counter():
    m = df.DenoiserNet(df.DenoiserConfig(n_mels=3, cond_dim=2, hidden=8))
    state = df.TrainState(m, df.make_schedule(10), nx.Adam(m.parameters()), np.random.default_rng(0))
    x, c = np.zeros((4, 6, 3)), np.ones((4, 6, 2))
    for _ in range(5):
        df.train_step(state, x, c, drop_prob=0.0)
    assert m.null_uses == 0
    for _ in range(5):
        df.train_step(state, x, c, drop_prob=1.0)
    assert m.null_uses == 20


def test_empty_batch_rejected():
    m = df.DenoiserNet(df.DenoiserConfig(n_mels=3, cond_dim=0))
    state = df.TrainState(m, df.make_schedule(10), nx.Adam(m.parameters()), np.random.default_rng(0))
    with pytest.raises(ValueError):
        df.train_step(state, np.zeros((0, 5, 3)), None)


def test_packed_items_do_not_interact():
    m = df.DenoiserNet(df.DenoiserConfig(n_mels=3, cond_dim=2, hidden=8))
    for p in m.parameters():
        p.data = np.random.default_rng(4).normal(size=p.shape)
    r = np.random.default_rng(5)
    x, c = r.normal(size=(3, 7, 3)), r.normal(size=(3, 7, 2))
    both = m.predict_eps(x, np.array([2, 5, 9]), c)
    alone = m.predict_eps(x[1:2], np.array([5]), c[1:2])
    assert np.allclose(both[1], alone[0], atol=1e-12)
    assert both.shape == x.shape


# ---- guidance and sampling --------------------------------------------------------------


def test_cfg_identities_are_bitwise():
    model = CondOffset()
    r = np.random.default_rng(6)
    x, c, t = r.normal(size=(2, 5, 3)), r.normal(size=(2, 5, 2)), np.array([3, 4])
    e0, e1, e2 = (df.cfg_predict(model, x, t, c, w) for w in (0.0, 1.0, 2.0))
    assert np.array_equal(e1, df._quantize(model.predict_eps(x, t, c)))
    assert np.array_equal(e0, df._quantize(model.predict_eps(x, t, None)))
    assert np.array_equal(e2 - e0, 2 * (e1 - e0))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 64).map(lambda k: k / 8))
def test_cfg_affine_for_all_dyadic_w(w):
    model = CondOffset()
    r = np.random.default_rng(7)
    x, c, t = r.normal(size=(1, 4, 3)), r.normal(size=(1, 4, 2)), np.array([2])
    e0, e1, ew = (df.cfg_predict(model, x, t, c, v) for v in (0.0, 1.0, w))
    assert np.array_equal(ew - e0, w * (e1 - e0))


def test_cfg_rejects_negative_scale():
    with pytest.raises(ValueError):
        df.cfg_predict(CondOffset(), np.zeros((1, 2, 3)), np.array([1]), None, -0.5)


def test_analytic_denoiser_reproduces_data_moments():
    s = df.make_schedule(50)
    mu, var = 1.3, 0.25
    x = df.sample(GaussianOracle(mu, var, s), None, s, w=1.0, seed=0, shape=(2500, 1, 4))
    assert abs(x.mean() - mu) < 0.05
    assert abs(x.var() - var) < 0.1 * var


def test_guidance_is_noop_when_condition_unused():
    s = df.make_schedule(10)
    model = CondOffset(use_cond=False)
    c = np.random.default_rng(8).normal(size=(2, 6, 2))
    assert np.array_equal(df.sample(model, c, s, w=0.0, seed=3), df.sample(model, c, s, w=5.0, seed=3))


def test_sampling_is_deterministic():
    s = df.make_schedule(10)
    c = np.random.default_rng(9).normal(size=(1, 6, 2))
    a = df.sample(CondOffset(), c, s, seed=11)
    assert np.array_equal(a, df.sample(CondOffset(), c, s, seed=11))
    assert not np.array_equal(a, df.sample(CondOffset(), c, s, seed=12))


def test_clamp_bounds_the_final_sample():
    s = df.make_schedule(10)
    c = np.random.default_rng(10).normal(size=(1, 6, 2)) * 50
    x = df.sample(CondOffset(), c, s, w=4.0, seed=0, clamp=(-1.0, 1.0))
    assert x.min() >= -1.0 and x.max() <= 1.0


# ---- conditioning and checkpoints ---------------------------------------------------------


def test_conditioner_dims_and_rate():
    lip = np.arange(10.0).reshape(5, 2)
    nam = np.zeros((10, 3))
    text = np.ones((10, 4))
    c = df.Conditioner(lip, nam, text)
    f = c.frames()
    assert f.shape == (10, 9) and c.dim == 9
    assert np.array_equal(f[:, :2], np.repeat(lip, 2, axis=0))
    assert df.Conditioner(lip, nam).frames().shape == (10, 5)
    with pytest.raises(ValueError):
        df.Conditioner(lip, np.zeros((4, 3))).frames(10)


def test_scaler_round_trip_and_clamp():
    r = np.random.default_rng(11)
    mels = [r.normal(-3, 2, size=(20, 5)), r.normal(-3, 2, size=(15, 5))]
    sc = df.MelScaler.fit(mels)
    assert np.allclose(sc.inverse(sc.transform(mels[0])), mels[0], atol=1e-12)
    lo, hi = sc.clamp
    assert np.allclose(sc.inverse(lo), np.log(1e-5))
    assert np.allclose(sc.inverse(hi), max(m.max() for m in mels) + 1.0)


def test_diffusion_checkpoint_round_trip(tmp_path):
    r = np.random.default_rng(12)
    mels = [r.normal(size=(12, 4)) for _ in range(3)]
    conds = [r.normal(size=(12, 2)) for _ in range(3)]
    model, scaler, state = df.train_diffusion(mels, conds, steps=3, batch=2, crop=8, T=6, hidden=8)
    p = tmp_path / "d.ckpt"
    df.save_diffusion(p, model, scaler, state.schedule, {"seed": 0})
    m2, sc2, sch2, meta = df.load_diffusion(p)
    assert meta["seed"] == 0
    assert np.array_equal(sch2.beta, state.schedule.beta)
    a = df.sample_mel(model, scaler, state.schedule, conds[0], seed=1)
    b = df.sample_mel(m2, sc2, sch2, conds[0], seed=1)
    assert np.array_equal(a, b) and a.shape == (12, 4)


def test_train_diffusion_rejects_misaligned_inputs():
    with pytest.raises(ValueError):
        df.train_diffusion([np.zeros((5, 2))], [np.zeros((4, 1))], steps=1)
    with pytest.raises(ValueError):
        df.train_diffusion([], [], steps=1)
