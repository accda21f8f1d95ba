from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from descedit import dataset as D
from descedit.diffusion import (
    AdamWState, GuidanceConfig, NoiseSchedule, NonFiniteError, TrainConfig, add_noise, combine_guidance,
    diffusion_loss, guided_prediction, make_batch, null_tokens, optimizer_step, regression_target, sample,
    sampling_timesteps, split_prediction, train_bridge, training_step,
)
from descedit.model import NULL_ID, Model, ModelConfig
from descedit.numcore import ParamSet, Tensor
from descedit.rng import stream


@pytest.fixture(scope="module")
def pairs():
    return D.gen_dataset(3, 64)


class Stub:
    """Denoiser stand-in that records what it is handed."""

    def __init__(self, fn):
        self.fn = fn
        self.config = SimpleNamespace(prediction="epsilon")
        self.refs = []
        self.calls = []

    def forward_ref(self, x):
        self.refs.append(np.array(x, copy=True))
        return "cache"

    def denoise(self, z, t, tokens, ref=None, image_keep=None):
        self.calls.append((np.array(tokens), ref, image_keep))
        return Tensor(self.fn(np.asarray(z)))


# --------------------------------------------------------------- schedule

def test_schedule_invariants():
    for s in (NoiseSchedule(), NoiseSchedule(beta_start=1e-4, beta_end=0.02), NoiseSchedule(steps=10)):
        assert s.alpha_bars[0] == 1.0
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert np.all((s.betas > 0) & (s.betas < 1))
        assert np.allclose(s.alphas, 1 - s.betas)


def test_schedule_endpoints():
    assert NoiseSchedule(steps=1000).beta_start == pytest.approx(1e-4)
    s = NoiseSchedule()
    assert s.betas[0] == pytest.approx(5e-4) and s.betas[-1] == pytest.approx(0.1)
    assert s.alpha_bars[-1] < 1e-4
    assert NoiseSchedule(beta_start=1e-4, beta_end=0.02).alpha_bars[-1] == pytest.approx(0.1322, abs=1e-4)
    with pytest.raises(ValueError):
        NoiseSchedule(beta_start=0.5, beta_end=0.1)
    with pytest.raises(ValueError):
        NoiseSchedule(steps=0)


def test_add_noise_examples():
    s = NoiseSchedule()
    s.alpha_bars[5] = 0.25
    assert add_noise(s, np.ones(3), 5, np.zeros(3)) == pytest.approx(0.5)
    s = NoiseSchedule()
    z0 = np.linspace(-1, 1, 12)
    # t=1 is the closest legal step to the clean limit
    assert np.allclose(add_noise(s, z0, 1, np.zeros(12)), np.sqrt(s.alpha_bars[1]) * z0)
    with pytest.raises(ValueError):
        add_noise(s, z0, 0, np.zeros(12))
    with pytest.raises(ValueError):
        add_noise(s, z0, 201, np.zeros(12))
    with pytest.raises(ValueError):
        add_noise(s, z0, 5, np.zeros(11))


def test_add_noise_variance():
    s = NoiseSchedule()
    rng = np.random.default_rng(0)
    z0 = rng.uniform(-1, 1, 100_000)
    for t in (10, 100, 200):
        ab = s.alpha_bars[t]
        r = add_noise(s, z0, t, rng.standard_normal(z0.shape)) - np.sqrt(ab) * z0
        assert abs(r.var() / (1 - ab) - 1) < 0.02


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2 ** 16))
def test_add_noise_shape_finite(t, seed):
    rng = np.random.default_rng(seed)
    z0 = rng.uniform(-1, 1, (2, 3, 4, 4)).astype(np.float32)
    out = add_noise(NoiseSchedule(), z0, np.full(2, t), rng.standard_normal(z0.shape).astype(np.float32))
    assert out.shape == z0.shape and out.dtype == np.float32 and np.all(np.isfinite(out))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.sampled_from(["epsilon", "v"]), st.integers(0, 2 ** 16))
def test_split_prediction_inverts_target(t, prediction, seed):
    s = NoiseSchedule()
    rng = np.random.default_rng(seed)
    z0, eps = rng.uniform(-1, 1, 8), rng.standard_normal(8)
    zt = add_noise(s, z0, t, eps)
    x0, e = split_prediction(s, zt, t, regression_target(s, z0, t, eps, prediction), prediction)
    assert np.allclose(e, eps, atol=1e-6)
    assert np.allclose(x0, z0, atol=1e-6 / np.sqrt(s.alpha_bars[t]) + 1e-6)


def test_unknown_prediction():
    s = NoiseSchedule()
    with pytest.raises(ValueError):
        regression_target(s, np.zeros(2), 1, np.zeros(2), "x0")
    with pytest.raises(ValueError):
        split_prediction(s, np.zeros(2), 1, np.zeros(2), "x0")


# -------------------------------------------------------------- optimizer

def _params(value, grad):
    ps = ParamSet()
    ps.add("w", np.array([value], dtype=np.float64))
    ps["w"].grad = np.array([grad], dtype=np.float64)
    return ps


def test_adamw_zero_grad_fixed_point():
    ps = _params(0.7, 0.0)
    optimizer_step(ps, AdamWState(), TrainConfig(lr=0.1, weight_decay=0.0))
    assert ps["w"].data[0] == 0.7


def test_adamw_first_step():
    ps = _params(1.0, 1.0)
    optimizer_step(ps, AdamWState(), TrainConfig(lr=0.1, weight_decay=0.0))
    assert ps["w"].data[0] == pytest.approx(0.9, abs=1e-6)
    ps = _params(1.0, 1.0)
    optimizer_step(ps, AdamWState(), TrainConfig(lr=0.1, weight_decay=0.01))
    assert ps["w"].data[0] == pytest.approx(1.0 - 0.001 - 0.1, abs=1e-6)


def test_adamw_skips_frozen_and_rejects_nonfinite():
    ps = _params(1.0, 1.0)
    ps.add("f", np.ones(2), frozen=True)
    ps["f"].grad = np.ones(2)
    optimizer_step(ps, AdamWState(), TrainConfig(lr=0.1))
    assert np.array_equal(ps["f"].data, np.ones(2))
    ps["w"].grad = np.array([np.nan])
    before = ps["w"].data.copy()
    state = AdamWState(step=1)
    with pytest.raises(NonFiniteError, match="w"):
        optimizer_step(ps, state, TrainConfig())
    assert state.step == 1 and np.array_equal(ps["w"].data, before)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(text_drop=1.5)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


# --------------------------------------------------------------- training

def test_batch_noises_only_target(pairs):
    s = NoiseSchedule()
    b = make_batch(pairs[:16], s, TrainConfig(), stream(0, 1))
    assert np.array_equal(b.original, np.stack([p.original_image for p in pairs[:16]]))
    assert np.array_equal(b.noisy, add_noise(s, b.target, b.t, b.noise))
    assert np.all((b.t >= 1) & (b.t <= 200))
    dropped = b.tokens[~b.text_keep]
    assert np.all(dropped[:, 0] == NULL_ID) and not np.any(dropped[:, 1:])
    with pytest.raises(ValueError):
        make_batch([], s, TrainConfig(), stream(0, 1))


def test_stub_loss_values(pairs):
    s, cfg = NoiseSchedule(), TrainConfig(text_drop=0, image_drop=0)
    b = make_batch(pairs[:8], s, cfg, stream(0, 2))
    assert diffusion_loss(Stub(lambda z: b.noise), b).item() == 0.0
    losses = []
    for i in range(20):
        b = make_batch(pairs, s, cfg, stream(0, 3, i))
        losses.append(diffusion_loss(Stub(np.zeros_like), b).item())
    # 20 batches x 64 examples x 768 scalars
    assert abs(np.mean(losses) - 1.0) < 0.02


def test_no_drop_consumes_both_conditions(pairs):
    stub = Stub(np.zeros_like)
    b = make_batch(pairs[:16], NoiseSchedule(), TrainConfig(text_drop=0, image_drop=0), stream(0, 4))
    diffusion_loss(stub, b)
    tokens, ref, keep = stub.calls[0]
    assert ref == "cache" and np.all(keep)
    assert np.array_equal(tokens, np.stack([p.description for p in pairs[:16]]))
    assert np.array_equal(stub.refs[0], b.original)


def test_dropout_frequencies(pairs):
    cfg = TrainConfig()
    text, image = [], []
    for i in range(157):
        b = make_batch(pairs, NoiseSchedule(), cfg, stream(1, 5, i))
        text.append(~b.text_keep)
        image.append(~b.image_keep)
    text, image = np.concatenate(text)[:10_000], np.concatenate(image)[:10_000]
    assert 0.04 <= text.mean() <= 0.06 and 0.04 <= image.mean() <= 0.06
    sigma = np.sqrt(0.0025 * 0.9975 / 10_000)
    assert abs((text & image).mean() - 0.0025) <= 3 * sigma


def test_training_is_deterministic(pairs):
    runs = []
    for _ in range(2):
        m = Model.init(ModelConfig(blocks=1, dim=32), 0)
        train_bridge(m, pairs, NoiseSchedule(), TrainConfig(batch_size=8, steps=3))
        runs.append(m.params.checksum())
    assert runs[0] == runs[1]


def test_training_reduces_loss_on_fixed_batch(pairs):
    m = Model.init(ModelConfig(blocks=1, dim=32), 0)
    cfg, state = TrainConfig(lr=3e-3, batch_size=8, text_drop=0, image_drop=0), AdamWState()
    losses = [training_step(m, pairs[:8], NoiseSchedule(), cfg, stream(0, 6), state).loss for _ in range(30)]
    assert losses[-1] < losses[0]


# --------------------------------------------------------------- guidance

def test_combine_guidance_examples():
    assert combine_guidance(0.0, 1.0, 2.0, 1.5, 7.5) == 9.0
    assert combine_guidance(0.3, 1.1, 2.7, 1.0, 1.0) == pytest.approx(2.7)
    assert combine_guidance(0.3, 1.1, 2.7, 0.0, 0.0) == 0.3


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 5), st.integers(0, 2 ** 16))
def test_telescoping_identities(li, seed):
    rng = np.random.default_rng(seed)
    u, i, f = rng.standard_normal((3, 10))
    assert np.allclose(combine_guidance(u, i, f, 1.0, 1.0), f, atol=1e-6)
    assert np.allclose(combine_guidance(u, i, f, li, 0.0), u + li * (i - u), atol=1e-6)


def test_guided_prediction_branch_order():
    stub = Stub(np.zeros_like)
    z = np.zeros((2, 3, 16, 16), np.float32)
    guided_prediction(stub, z, 10, "cache", [[2, 4, 3], [2, 5, 3]], 1.5, 7.5)
    assert [c[1] for c in stub.calls] == [None, "cache", "cache"]
    assert np.all(stub.calls[0][0] == null_tokens(2, 3)) and np.all(stub.calls[1][0] == null_tokens(2, 3))
    assert stub.calls[2][0].tolist() == [[2, 4, 3], [2, 5, 3]]


def test_guidance_config_validation():
    with pytest.raises(ValueError):
        GuidanceConfig(lambda_image=-1)
    with pytest.raises(ValueError):
        GuidanceConfig(sampler="euler")
    with pytest.raises(ValueError):
        sampling_timesteps(NoiseSchedule(), 201)


def test_sampling_timesteps():
    ts = sampling_timesteps(NoiseSchedule(), 50)
    assert ts[0] == 200 and ts[-1] == 1 and np.all(np.diff(ts) < 0)
    assert len(sampling_timesteps(NoiseSchedule(), 200)) == 200


# ---------------------------------------------------------------- sampler

@pytest.fixture(scope="module")
def small_model():
    return Model.init(ModelConfig(blocks=1, dim=32), 0)


def test_deterministic_sampler_reproducible(small_model, pairs):
    g = GuidanceConfig(steps=5)
    orig = D.stack(pairs[:2], "original_image")
    tok = D.stack(pairs[:2], "description")
    a = sample(small_model, orig, tok, g, NoiseSchedule(), stream(9, 1))
    b = sample(small_model, orig, tok, g, NoiseSchedule(), stream(9, 1))
    assert np.array_equal(a, b)
    assert a.shape == orig.shape and np.all(np.isfinite(a))
    single = sample(small_model, orig[0], tok[0], g, NoiseSchedule(), noise=stream(9, 1).standard_normal(orig.shape)[0])
    assert single.shape == orig[0].shape


def test_ancestral_sampler(small_model, pairs):
    g = GuidanceConfig(steps=5, sampler="ancestral")
    orig, tok = pairs[0].original_image, pairs[0].description
    with pytest.raises(ValueError):
        sample(small_model, orig, tok, g, NoiseSchedule(), noise=np.zeros_like(orig))
    a = sample(small_model, orig, tok, g, NoiseSchedule(), stream(0, 1))
    b = sample(small_model, orig, tok, g, NoiseSchedule(), stream(0, 2))
    assert np.all(np.isfinite(a)) and not np.array_equal(a, b)


def test_sampler_three_calls_per_step(small_model, pairs):
    before = small_model.denoise_calls
    sample(small_model, pairs[0].original_image, pairs[0].description, GuidanceConfig(steps=4),
           NoiseSchedule(), stream(0, 3))
    assert small_model.denoise_calls - before == 12
