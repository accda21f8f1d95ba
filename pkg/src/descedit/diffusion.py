"""Noise schedule, training objective, optimizer and the guided sampler."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import NULL_ID, MergedModelError, Model, RefCache
from .numcore import ParamSet, Tensor, backward, no_grad, ops
from .rng import PRETRAIN, TRAIN, stream

log = logging.getLogger(__name__)

SAMPLERS = ("deterministic", "ancestral")


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class NoiseSchedule:
    """Linear beta schedule. ``alpha_bars[0] == 1`` is the clean image.

    Unset endpoints default to the 1000-step DDPM endpoints (1e-4, 0.02)
    scaled by 1000/steps, which keeps the terminal signal level near zero
    for short schedules (abar_T ~ 3e-5 at 200 steps instead of 0.13).
    The scaled end is capped at 0.999 for schedules under 20 steps.
    """

    steps: int = 200
    beta_start: Optional[float] = None
    beta_end: Optional[float] = None
    betas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("schedule needs at least one step")
        if self.beta_start is None:
            self.beta_start = 1e-4 * 1000 / self.steps
        if self.beta_end is None:
            self.beta_end = min(0.02 * 1000 / self.steps, 0.999)
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("betas must satisfy 0 < start <= end < 1")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.steps)
        self.alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas


def add_noise(schedule: NoiseSchedule, z0, t, eps) -> np.ndarray:
    """sqrt(abar_t) z0 + sqrt(1 - abar_t) eps for t in [1, T]."""
    z0, eps = np.asarray(z0), np.asarray(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} differs from image shape {z0.shape}")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.steps):
        raise ValueError(f"timesteps must lie in [1, {schedule.steps}]")
    ab = schedule.alpha_bars[t].reshape(t.shape + (1,) * (z0.ndim - t.ndim))
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(z0.dtype)


def regression_target(schedule: NoiseSchedule, z0, t, eps, prediction: str = "epsilon") -> np.ndarray:
    """What the denoiser is trained to output: the noise, or v = sqrt(abar) eps - sqrt(1-abar) z0."""
    if prediction == "epsilon":
        return np.asarray(eps)
    if prediction != "v":
        raise ValueError(f"unknown prediction target {prediction!r}")
    z0, eps = np.asarray(z0), np.asarray(eps)
    ab = schedule.alpha_bars[np.asarray(t)].reshape(np.shape(t) + (1,) * (z0.ndim - np.ndim(t)))
    return (np.sqrt(ab) * eps - np.sqrt(1.0 - ab) * z0).astype(z0.dtype)


def split_prediction(schedule: NoiseSchedule, z_t, t, out, prediction: str = "epsilon"):
    """(x0, eps) implied by a denoiser output at noisy state ``z_t``."""
    z_t, out = np.asarray(z_t, dtype=np.float64), np.asarray(out, dtype=np.float64)
    ab = schedule.alpha_bars[np.asarray(t)].reshape(np.shape(t) + (1,) * (z_t.ndim - np.ndim(t)))
    if prediction == "epsilon":
        eps = out
        x0 = (z_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    elif prediction == "v":
        x0 = np.sqrt(ab) * z_t - np.sqrt(1.0 - ab) * out
        eps = np.sqrt(1.0 - ab) * z_t + np.sqrt(ab) * out
    else:
        raise ValueError(f"unknown prediction target {prediction!r}")
    return x0, eps


# ---------------------------------------------------------------- optimizer

@dataclass
class TrainConfig:
    lr: float = 1e-3  # bridge stage; calibrated for the desk protocol
    batch_size: int = 32
    steps: int = 3000
    text_drop: float = 0.05
    image_drop: float = 0.05
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    pretrain_steps: int = 3000
    pretrain_lr: float = 1e-3
    log_every: int = 100

    def __post_init__(self):
        for name in ("text_drop", "image_drop"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: ParamSet, state: AdamWState, config: TrainConfig, lr: float | None = None) -> None:
    """Decoupled-weight-decay Adam update of every non-frozen entry.

    Gradients are read from each entry's ``grad``. A non-finite gradient
    rejects the whole step before anything changes.
    """
    lr = config.lr if lr is None else lr
    names = [n for n in params if not params.is_frozen(n)]
    bad = [n for n in names if not np.all(np.isfinite(params[n].grad))]
    if bad:
        raise NonFiniteError(f"non-finite gradient in {', '.join(bad)}; step {state.step + 1} rejected")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for n in names:
        p = params[n]
        g = p.grad
        m = state.m.get(n)
        if m is None:
            m = state.m[n] = np.zeros_like(p.data)
            state.v[n] = np.zeros_like(p.data)
        v = state.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        params.set(n, p.data - lr * config.weight_decay * p.data - lr * update)


# ----------------------------------------------------------------- training

@dataclass
class TrainBatch:
    original: np.ndarray
    target: np.ndarray
    tokens: np.ndarray
    t: np.ndarray
    noise: np.ndarray
    noisy: np.ndarray
    text_keep: np.ndarray
    image_keep: np.ndarray
    objective: np.ndarray


def null_tokens(n: int, length: int = 16) -> np.ndarray:
    out = np.zeros((n, length), dtype=np.int64)
    out[:, 0] = NULL_ID
    return out


def make_batch(pairs, schedule: NoiseSchedule, config: TrainConfig, rng: np.random.Generator,
               text_mode: str = "description", prediction: str = "epsilon") -> TrainBatch:
    """Noise only the target; the original stays clean for the reference pass."""
    if not pairs:
        raise ValueError("batch must be nonempty")
    n = len(pairs)
    original = np.stack([p.original_image for p in pairs])
    target = np.stack([p.target_image for p in pairs])
    tokens = np.stack([p.tokens(text_mode) for p in pairs]).astype(np.int64)
    t = rng.integers(1, schedule.steps + 1, size=n)
    noise = rng.standard_normal(target.shape).astype(target.dtype)
    text_keep = rng.random(n) >= config.text_drop
    image_keep = rng.random(n) >= config.image_drop
    tokens[~text_keep] = null_tokens(int((~text_keep).sum()), tokens.shape[1])
    noisy = add_noise(schedule, target, t, noise)
    objective = regression_target(schedule, target, t, noise, prediction)
    return TrainBatch(original, target, tokens, t, noise, noisy, text_keep, image_keep, objective)


def diffusion_loss(model, batch: TrainBatch) -> Tensor:
    """Mean squared error between the denoiser output and its regression target."""
    ref = model.forward_ref(batch.original) if batch.image_keep.any() else None
    pred = model.denoise(batch.noisy, batch.t, batch.tokens, ref, image_keep=batch.image_keep)
    return ops.mse(pred, batch.objective)


@dataclass
class StepResult:
    loss: float
    batch: TrainBatch


def training_step(model: Model, pairs, schedule: NoiseSchedule, config: TrainConfig,
                  rng: np.random.Generator, state: AdamWState, text_mode: str = "description") -> StepResult:
    if model.merged:
        raise MergedModelError("cannot train a model whose LoRA factors were merged")
    batch = make_batch(pairs, schedule, config, rng, text_mode, model.config.prediction)
    model.params.zero_grad()
    loss = diffusion_loss(model, batch)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite loss at step {state.step + 1}")
    backward(loss)
    optimizer_step(model.params, state, config)
    return StepResult(value, batch)


def _batch_indices(seed: int, domain: int, step: int, n: int, size: int) -> tuple[np.ndarray, np.random.Generator]:
    rng = stream(seed, domain, step)
    return rng.choice(n, size=min(size, n), replace=False), rng


def train_bridge(model: Model, pairs, schedule: NoiseSchedule, config: TrainConfig,
                 text_mode: str = "description", steps: int | None = None,
                 callback: Optional[Callable[[int, float], None]] = None) -> list[float]:
    """Train only LoRA factors and fusion maps. Returns the per-step losses."""
    steps = config.steps if steps is None else steps
    state = AdamWState()
    losses = []
    for step in range(steps):
        idx, rng = _batch_indices(config.seed, TRAIN, step, len(pairs), config.batch_size)
        res = training_step(model, [pairs[i] for i in idx], schedule, config, rng, state, text_mode)
        losses.append(res.loss)
        if callback is not None:
            callback(step, res.loss)
    return losses


def pretrain_base(model: Model, pairs, schedule: NoiseSchedule, config: TrainConfig,
                  steps: int | None = None,
                  callback: Optional[Callable[[int, float], None]] = None) -> list[float]:
    """Fit the base denoiser as a text-to-image model on every scene render.

    Both originals and targets with their full descriptions form the corpus;
    text is dropped to NULL at ``config.text_drop``.  Afterwards the base is
    frozen again and the bridges are rebuilt from the trained weights.
    """
    from .dataset import describe

    steps = config.pretrain_steps if steps is None else steps
    images = np.concatenate([np.stack([p.original_image for p in pairs]),
                             np.stack([p.target_image for p in pairs])])
    texts = np.concatenate([np.stack([describe(p.original) for p in pairs]),
                            np.stack([p.description for p in pairs])]).astype(np.int64)
    base, bridge = model.base_names(), model.bridge_trainable_names()
    model.params.set_frozen(bridge, True)
    model.params.set_frozen(base, False)
    state = AdamWState()
    losses = []
    try:
        for step in range(steps):
            idx, rng = _batch_indices(config.seed, PRETRAIN, step, len(images), config.batch_size)
            x0, tok = images[idx], texts[idx].copy()
            t = rng.integers(1, schedule.steps + 1, size=len(idx))
            noise = rng.standard_normal(x0.shape).astype(x0.dtype)
            drop = rng.random(len(idx)) < config.text_drop
            tok[drop] = null_tokens(int(drop.sum()), tok.shape[1])
            model.params.zero_grad()
            objective = regression_target(schedule, x0, t, noise, model.config.prediction)
            loss = ops.mse(model.denoise(add_noise(schedule, x0, t, noise), t, tok), objective)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite pretraining loss at step {step}")
            backward(loss)
            # cosine decay keeps the late base weights stable
            lr = config.pretrain_lr * 0.5 * (1 + math.cos(math.pi * step / max(steps, 1)))
            optimizer_step(model.params, state, config, lr=lr)
            losses.append(value)
            if callback is not None:
                callback(step, value)
    finally:
        model.params.set_frozen(base, True)
        model.params.set_frozen(bridge, False)
    model.reset_bridge(config.seed)
    return losses


# ---------------------------------------------------------------- inference

@dataclass
class GuidanceConfig:
    lambda_image: float = 1.5
    lambda_text: float = 7.5
    sampler: str = "deterministic"
    steps: int = 50

    def __post_init__(self):
        if self.lambda_image < 0 or self.lambda_text < 0:
            raise ValueError("guidance weights must be non-negative")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        if self.steps < 1:
            raise ValueError("inference steps must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def combine_guidance(e_uncond, e_image, e_full, lambda_image: float, lambda_text: float):
    """e(0,0) + lI (e(I,0) - e(0,0)) + lT (e(I,T) - e(I,0))."""
    return e_uncond + lambda_image * (e_image - e_uncond) + lambda_text * (e_full - e_image)


def guided_prediction(model: Model, z_t, t, ref: RefCache, tokens, lambda_image: float,
                      lambda_text: float) -> np.ndarray:
    """Three denoiser calls, in the order unconditional, image-only, full.

    The combination is applied to raw denoiser outputs; for v-prediction the
    map to noise is affine with weights that sum to one, so guiding v and
    guiding the implied noise agree.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    null = null_tokens(tokens.shape[0], tokens.shape[1])
    with no_grad():
        e_uncond = model.denoise(z_t, t, null, None).data
        e_image = model.denoise(z_t, t, null, ref).data
        e_full = model.denoise(z_t, t, tokens, ref).data
    return combine_guidance(e_uncond, e_image, e_full, lambda_image, lambda_text)


def sampling_timesteps(schedule: NoiseSchedule, steps: int) -> np.ndarray:
    if steps > schedule.steps:
        raise ValueError(f"{steps} inference steps exceed the schedule's {schedule.steps}")
    ts = np.unique(np.round(np.linspace(1, schedule.steps, steps)).astype(int))
    return ts[::-1]


def sample(model: Model, originals, tokens, guidance: GuidanceConfig, schedule: NoiseSchedule,
           rng: np.random.Generator | None = None, noise: np.ndarray | None = None) -> np.ndarray:
    """Edit ``originals`` [B,3,H,W] toward ``tokens`` [B,L].

    The reference pass runs once. ``deterministic`` is DDIM with eta=0 and
    is noise-free after the initial draw; ``ancestral`` uses eta=1.
    """
    if guidance.sampler == "ancestral" and rng is None:
        raise ValueError("the ancestral sampler needs an rng for its per-step noise")
    originals = np.asarray(originals, dtype=np.float32)
    single = originals.ndim == 3
    if single:
        originals = originals[None]
        tokens = np.asarray(tokens)[None]
    if noise is None:
        if rng is None:
            raise ValueError("sample needs either rng or an explicit initial noise")
        noise = rng.standard_normal(originals.shape)
    x = np.asarray(noise, dtype=originals.dtype).reshape(originals.shape).copy()
    ref = model.forward_ref(originals)
    ts = sampling_timesteps(schedule, guidance.steps)
    ab = schedule.alpha_bars
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        out = guided_prediction(model, x, int(t), ref, tokens, guidance.lambda_image, guidance.lambda_text)
        a_t, a_prev = ab[t], ab[t_prev]
        x0, _ = split_prediction(schedule, x, int(t), out, model.config.prediction)
        x0 = np.clip(x0, -1.0, 1.0)
        eps = (x - np.sqrt(a_t) * x0) / np.sqrt(1 - a_t)
        if guidance.sampler == "ancestral" and t_prev > 0:
            sigma = np.sqrt((1 - a_prev) / (1 - a_t) * (1 - a_t / a_prev))
            z = rng.standard_normal(x.shape)
            x = np.sqrt(a_prev) * x0 + np.sqrt(1 - a_prev - sigma ** 2) * eps + sigma * z
        else:
            x = np.sqrt(a_prev) * x0 + np.sqrt(1 - a_prev) * eps
        x = x.astype(originals.dtype)
    return x[0] if single else x
