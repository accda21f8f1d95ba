"""End-to-end runs built from a RunConfig: train, edit, evaluate, sweep, ablate.

A pretrained base depends only on the data and the base-relevant config
fields, so runs that differ in bridge settings (fusion mode, text mode,
bridge steps) can share one.  ``cache_dir`` persists bases as DEDT files
keyed by ``base_digest``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import dataset as D
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .diffusion import GuidanceConfig, pretrain_base, sample, train_bridge
from .metrics import build_report, evaluate_outputs
from .model import Model
from .rng import SAMPLE, stream

log = logging.getLogger(__name__)

DEFAULT_COUNT = 3200
# fields that only affect the bridge stage or inference
BRIDGE_ONLY = ("fusion", "bridge_query", "lora_rank", "lora_alpha", "lr", "steps", "image_drop",
               "text_mode", "lambda_image", "lambda_text", "sampler", "inference_steps", "log_every")


def load_pairs(cfg: RunConfig, count: int = DEFAULT_COUNT) -> list:
    """The configured dataset file, or a fresh deterministic set from ``cfg.seed``."""
    if cfg.dataset:
        return D.load_dataset(cfg.dataset)
    return D.gen_dataset(cfg.seed, count)


def split_pairs(pairs, holdout: int) -> tuple[list, list, int]:
    """(train, held-out, offset of the held-out block): the last ``holdout`` pairs are held out."""
    if holdout >= len(pairs):
        raise ValueError(f"holdout {holdout} leaves no training pairs out of {len(pairs)}")
    cut = len(pairs) - holdout
    return list(pairs[:cut]), list(pairs[cut:]), cut


def pairs_digest(pairs) -> str:
    return hashlib.sha256(D.dumps_dataset(pairs)).hexdigest()[:16]


def base_digest(cfg: RunConfig, train) -> str:
    body = {k: v for k, v in cfg.to_dict().items() if k not in BRIDGE_ONLY and k not in
            ("dataset", "checkpoint", "out_dir")}
    body["data"] = pairs_digest(train)
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def build_base(cfg: RunConfig, train, cache_dir=None,
               callback: Optional[Callable[[int, float], None]] = None) -> Model:
    """Initialise and pretrain the base denoiser (bridges left at their zero init)."""
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"base-{base_digest(cfg, train)}.dedt"
        if path.exists():
            log.info("reusing pretrained base %s", path)
            model, _, _ = load_checkpoint(path)
            return _with_bridge_config(model, cfg)
    model = Model.init(cfg.model_config(), cfg.seed)
    if cfg.pretrain_steps > 0:
        pretrain_base(model, train, cfg.schedule(), cfg.train_config(), callback=callback)
    if path is not None:
        save_checkpoint(path, model, cfg.to_dict(), 0)
    return model


def _with_bridge_config(base: Model, cfg: RunConfig) -> Model:
    """Copy of ``base`` with ``cfg``'s bridge settings and freshly initialised bridges."""
    mc = cfg.model_config()
    ours = {k: v for k, v in asdict(mc).items() if k not in BRIDGE_ONLY}
    theirs = {k: v for k, v in asdict(base.config).items() if k not in BRIDGE_ONLY}
    if ours != theirs:
        raise ValueError("base model architecture does not match the run config")
    model = Model(mc, base.params.copy())
    model.reset_bridge(cfg.seed)
    return model


def train_model(cfg: RunConfig, train, base: Model | None = None, cache_dir=None,
                callback: Optional[Callable[[str, int, float], None]] = None) -> tuple[Model, list]:
    """Pretrain (or reuse) the base, then train the bridges. Returns (model, bridge losses)."""
    def stage(name):
        return None if callback is None else (lambda step, loss: callback(name, step, loss))

    if base is None:
        base = build_base(cfg, train, cache_dir, stage("pretrain"))
    model = _with_bridge_config(base, cfg)
    losses = train_bridge(model, train, cfg.schedule(), cfg.train_config(), cfg.text_mode,
                          callback=stage("bridge"))
    return model, losses


def edit(model: Model, pairs, cfg: RunConfig, indices=None, guidance: GuidanceConfig | None = None,
         batch: int = 100) -> np.ndarray:
    """Edited images for ``pairs``; initial noise for pair k comes from stream (seed, SAMPLE, indices[k]).

    ``indices`` are the pairs' positions in the full dataset, so a pair gets the
    same noise whichever subset it is edited in.
    """
    guidance = guidance or cfg.guidance_config()
    indices = np.arange(len(pairs)) if indices is None else np.asarray(indices)
    if len(indices) != len(pairs):
        raise ValueError("one index per pair")
    schedule = cfg.schedule()
    outs = []
    for lo in range(0, len(pairs), batch):
        chunk = pairs[lo: lo + batch]
        idx = indices[lo: lo + batch]
        noise = np.stack([stream(cfg.seed, SAMPLE, int(i)).standard_normal((3, D.IMAGE_SIZE, D.IMAGE_SIZE))
                          for i in idx])
        rng = stream(cfg.seed, SAMPLE, int(idx[0]), 1) if guidance.sampler == "ancestral" else None
        tokens = np.stack([p.tokens(cfg.text_mode) for p in chunk])
        outs.append(sample(model, D.stack(chunk, "original_image"), tokens, guidance, schedule,
                           rng=rng, noise=noise))
    return np.concatenate(outs)


def evaluate(model: Model, pairs, cfg: RunConfig, indices=None, guidance: GuidanceConfig | None = None):
    """(per-example metric arrays, outputs)."""
    outputs = edit(model, pairs, cfg, indices, guidance)
    return evaluate_outputs(outputs, pairs, cfg.seed), outputs


def sweep(model: Model, pairs, cfg: RunConfig, lambdas, indices=None):
    """One metric run per image-guidance weight. Returns ([(name, metrics)], {lambda: outputs})."""
    runs, outputs = [], {}
    base = cfg.guidance_config()
    for lam in lambdas:
        g = GuidanceConfig(float(lam), base.lambda_text, base.sampler, base.steps)
        metrics, outs = evaluate(model, pairs, cfg, indices, g)
        runs.append((f"lambda_I={float(lam):g}", metrics))
        outputs[float(lam)] = outs
    return runs, outputs


def ablate(cfg: RunConfig, pairs, modes, text_modes=None, cache_dir=None,
           callback: Optional[Callable[[str, int, float], None]] = None):
    """Train and evaluate one model per (fusion mode, text mode) on a shared base.

    Returns the MetricReport and the trained models keyed by run name.
    """
    text_modes = list(text_modes or [cfg.text_mode])
    train, held, offset = split_pairs(pairs, cfg.holdout_count)
    base = build_base(cfg, train, cache_dir, None if callback is None else
                      (lambda s, l: callback("pretrain", s, l)))
    runs, models = [], {}
    for tm in text_modes:
        for mode in modes:
            run_cfg = cfg.replace(fusion=mode, text_mode=tm)
            name = mode if len(text_modes) == 1 else f"{mode}/{tm}"
            model, _ = train_model(run_cfg, train, base, callback=callback)
            metrics, _ = evaluate(model, held, run_cfg, np.arange(offset, offset + len(held)))
            runs.append((name, metrics))
            models[name] = model
    meta = {"seed": cfg.seed, "config_digest": cfg.digest(), "heldout": len(held)}
    return build_report(runs, meta), models
