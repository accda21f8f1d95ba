"""Runtime invariant suite behind ``descedit selftest``.

Each check builds what it needs from a fixed seed, so the suite is cheap
(a few seconds) and deterministic.  A check returns a ``Check``; it never
raises for an ordinary failure.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import dataset as D
from .checkpoint import dumps_checkpoint, loads_checkpoint
from .diffusion import (AdamWState, NoiseSchedule, TrainConfig, guided_prediction, make_batch,
                        null_tokens, train_bridge, training_step)
from .model import MergedModelError, Model, ModelConfig, expected_trainable_count
from .numcore import Tensor, no_grad
from .rng import EVAL, stream


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""
    seconds: float = 0.0


def _random_inputs(model: Model, rng, n: int):
    c = model.config
    z = rng.standard_normal((n, c.channels, c.image_size, c.image_size)).astype(np.float32)
    ref = rng.uniform(-1, 1, z.shape).astype(np.float32)
    tokens = rng.integers(2, c.vocab_size, size=(n, c.max_text_len))
    t = rng.integers(1, 201, size=n)
    return z, ref, tokens, t


def _perturb_bridge(model: Model, rng, scale: float = 0.05) -> None:
    for name in model.bridge_trainable_names():
        model.params.set(name, model.params[name].data + scale * rng.standard_normal(model.params[name].shape)
                         .astype(model.params[name].dtype))


def check_zero_init(seed: int = 0, n: int = 10) -> Check:
    model = Model.init(ModelConfig(), seed)
    rng = stream(seed, EVAL, 1)
    worst = 0.0
    with no_grad():
        for _ in range(n):
            z, ref, tokens, t = _random_inputs(model, rng, 1)
            bridged = model.denoise(z, t, tokens, model.forward_ref(ref)).data
            bypassed = model.denoise(z, t, tokens, None).data
            worst = max(worst, float(np.abs(bridged - bypassed).max()))
    return Check("zero_init_identity", worst < 1e-6, f"max |diff| {worst:.3g}")


def check_cfg_algebra(seed: int = 0, n: int = 10) -> Check:
    model = Model.init(ModelConfig(), seed)
    rng = stream(seed, EVAL, 2)
    _perturb_bridge(model, rng)
    worst, calls = 0.0, set()
    with no_grad():
        for _ in range(n):
            z, ref_img, tokens, t = _random_inputs(model, rng, 1)
            ref = model.forward_ref(ref_img)
            full = model.denoise(z, t, tokens, ref).data
            uncond = model.denoise(z, t, null_tokens(1, tokens.shape[-1]), None).data
            before = model.denoise_calls
            g1 = guided_prediction(model, z, t, ref, tokens, 1.0, 1.0)
            calls.add(model.denoise_calls - before)
            g0 = guided_prediction(model, z, t, ref, tokens, 0.0, 0.0)
            worst = max(worst, float(np.abs(g1 - full).max()), float(np.abs(g0 - uncond).max()))
    ok = worst < 1e-6 and calls == {3}
    return Check("cfg_algebra", ok, f"max |diff| {worst:.3g}, calls per guided step {sorted(calls)}")


def check_lora_merge(seed: int = 0, n: int = 100) -> Check:
    model = Model.init(ModelConfig(), seed)
    rng = stream(seed, EVAL, 3)
    _perturb_bridge(model, rng)
    merged = model.merge_lora()
    d, tokens = model.config.dim, model.config.num_tokens
    worst = 0.0
    with no_grad():
        for _ in range(n):
            h_edit = rng.standard_normal((1, tokens, d)).astype(np.float32)
            h_ref = rng.standard_normal((1, tokens, d)).astype(np.float32)
            a = model.bridge_output(0, Tensor(h_edit), Tensor(h_ref)).data
            b = merged.bridge_output(0, Tensor(h_edit), Tensor(h_ref)).data
            worst = max(worst, float(np.abs(a - b).max()))
    pair = D.gen_dataset(seed, 2)
    try:
        training_step(merged, pair, NoiseSchedule(), TrainConfig(batch_size=2), stream(seed, EVAL, 4),
                      AdamWState())
        terminal = False
    except MergedModelError:
        terminal = True
    return Check("lora_merge", worst < 1e-5 and terminal,
                 f"max |diff| {worst:.3g}, training after merge rejected: {terminal}")


def check_dropout(seed: int = 0, n: int = 10_000) -> Check:
    cfg = TrainConfig(batch_size=500)
    pairs = D.gen_dataset(seed, 500)
    schedule = NoiseSchedule()
    text = image = joint = 0
    for step in range(n // cfg.batch_size):
        b = make_batch(pairs, schedule, cfg, stream(seed, EVAL, 5, step))
        text += int((~b.text_keep).sum())
        image += int((~b.image_keep).sum())
        joint += int((~b.text_keep & ~b.image_keep).sum())
    ft, fi, fj = text / n, image / n, joint / n
    p = cfg.text_drop * cfg.image_drop
    sigma = np.sqrt(p * (1 - p) / n)
    ok = 0.04 <= ft <= 0.06 and 0.04 <= fi <= 0.06 and abs(fj - p) <= 3 * sigma
    return Check("dropout_statistics", ok, f"text {ft:.4f} image {fi:.4f} joint {fj:.4f}")


def frozen_base_intact(model: Model, reference_checksum: str) -> bool:
    names = [n for n in model.params if model.params.is_frozen(n)]
    return model.params.checksum(names) == reference_checksum


def check_frozen_base(seed: int = 0, steps: int = 3) -> Check:
    model = Model.init(ModelConfig(), seed)
    frozen = [n for n in model.params if model.params.is_frozen(n)]
    before = model.params.checksum(frozen)
    bridge_before = model.params.checksum(model.bridge_trainable_names())
    pairs = D.gen_dataset(seed, 16)
    train_bridge(model, pairs, NoiseSchedule(), TrainConfig(batch_size=8, steps=steps))
    intact = frozen_base_intact(model, before)
    moved = model.params.checksum(model.bridge_trainable_names()) != bridge_before
    # negative control: the same check must catch a perturbed frozen weight
    probe = model.copy()
    w = probe.params["blocks.0.attn.wq"]
    bumped = w.data.copy()
    bumped.flat[0] += 1e-3
    probe.params.set("blocks.0.attn.wq", bumped)
    caught = not frozen_base_intact(probe, before)
    return Check("frozen_base", intact and moved and caught,
                 f"base unchanged: {intact}, bridge moved: {moved}, perturbation caught: {caught}")


def check_param_count() -> Check:
    bad = []
    for blocks, dim, rank in ((2, 64, 8), (1, 32, 4), (3, 48, 2)):
        model = Model.init(ModelConfig(blocks=blocks, dim=dim, heads=4, lora_rank=rank), 0)
        got = model.params.num_scalars(trainable_only=True)
        if got != expected_trainable_count(blocks, dim, rank):
            bad.append(f"{(blocks, dim, rank)}: {got}")
    return Check("trainable_count", not bad, "; ".join(bad) or "B(8dr + d^2 + d) for 3 configs")


def check_noise_isolation(seed: int = 0, steps: int = 5) -> Check:
    model = Model.init(ModelConfig(), seed)
    seen = []
    original = model.forward_ref

    def spy(z):
        seen.append(np.array(z, copy=True))
        return original(z)

    model.forward_ref = spy
    pairs = D.gen_dataset(seed, 16)
    state, ok = AdamWState(), True
    for step in range(steps):
        seen.clear()
        res = training_step(model, pairs[:8], NoiseSchedule(), TrainConfig(batch_size=8),
                            stream(seed, EVAL, 6, step), state)
        ok &= len(seen) <= 1 and all(np.array_equal(s, res.batch.original) for s in seen)
    return Check("noise_isolation", ok, "reference pass consumes the clean original")


def check_roundtrips(seed: int = 0) -> Check:
    pairs = D.gen_dataset(seed, 8)
    blob = D.dumps_dataset(pairs)
    data_ok = D.dumps_dataset(D.loads_dataset(blob)) == blob
    model = Model.init(ModelConfig(), seed)
    _perturb_bridge(model, stream(seed, EVAL, 7))
    cblob = dumps_checkpoint(model, {"seed": seed}, 7)
    loaded, cfg, step = loads_checkpoint(cblob)
    ckpt_ok = (dumps_checkpoint(loaded, cfg, step) == cblob
               and all(np.array_equal(loaded.params[n].data, model.params[n].data) for n in model.params))
    return Check("roundtrips", data_ok and ckpt_ok, f"dataset {data_ok}, checkpoint {ckpt_ok}")


def run_gradcheck(seed: int = 0, samples: int = 100, h: float = 1e-4, batch: int = 4):
    """Finite-difference check of the full training loss on a 2-block, d=64, f64 model.

    Bridges are moved off their zero init first; at zero init the LoRA
    gradients vanish exactly and relative error is meaningless.
    """
    from .diffusion import diffusion_loss
    from .numcore import finite_diff_check

    model = Model.init(ModelConfig(blocks=2, dim=64), seed, dtype=np.float64)
    _perturb_bridge(model, stream(seed, EVAL, 8), scale=0.1)
    pairs = D.gen_dataset(seed, batch)
    cfg = TrainConfig(batch_size=batch, text_drop=0.0, image_drop=0.0)
    b = make_batch(pairs, NoiseSchedule(), cfg, stream(seed, EVAL, 9), prediction=model.config.prediction)
    for name in ("original", "target", "noise", "noisy", "objective"):
        setattr(b, name, getattr(b, name).astype(np.float64))
    return finite_diff_check(lambda _: diffusion_loss(model, b), model.params, samples=samples, h=h,
                             rng=stream(seed, EVAL, 10))


CHECKS: dict[str, Callable[[], Check]] = {
    "zero_init_identity": check_zero_init,
    "cfg_algebra": check_cfg_algebra,
    "lora_merge": check_lora_merge,
    "dropout_statistics": check_dropout,
    "frozen_base": check_frozen_base,
    "trainable_count": check_param_count,
    "noise_isolation": check_noise_isolation,
    "roundtrips": check_roundtrips,
}


def run_all(names=None) -> list[Check]:
    results = []
    for name in names or CHECKS:
        t0 = time.perf_counter()
        try:
            res = CHECKS[name]()
        except Exception as exc:  # a crash is a failed invariant, reported by name
            res = Check(name, False, f"{type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results
