"""``descedit`` command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 data or format error,
3 invariant failure.  Every command prints the digest of the run config it
used, so a gen-data -> train -> eval chain can be audited.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import dataset as D
from .config import ConfigError, RunConfig
from .diffusion import NonFiniteError

log = logging.getLogger("descedit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3
OUT_ENV = "DESCEDIT_OUT_DIR"


class UsageError(Exception):
    pass


class InvariantFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ------------------------------------------------------------------ helpers

def _float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _str_list(text: str) -> list[str]:
    vals = [v.strip() for v in text.split(",") if v.strip()]
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _load_config(args, base: dict | None = None) -> RunConfig:
    """Config file (or a checkpoint's stored config), then explicit flag overrides."""
    data = dict(base or {})
    if getattr(args, "config", None):
        data.update(RunConfig.from_file(args.config).to_dict())
    cfg = RunConfig.from_dict(data)
    overrides = {
        "seed": getattr(args, "seed", None),
        "steps": getattr(args, "steps", None),
        "pretrain_steps": getattr(args, "pretrain_steps", None),
        "fusion": getattr(args, "fusion", None),
        "text_mode": getattr(args, "text_mode", None),
        "lambda_image": getattr(args, "lambda_i", None),
        "lambda_text": getattr(args, "lambda_t", None),
        "sampler": getattr(args, "sampler", None),
        "dataset": getattr(args, "data", None),
    }
    return cfg.replace(**overrides)


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    return Path(cfg.out_dir if cfg else "out")


def _say(text: str = "") -> None:
    print(text, flush=True)


def _digest_line(cfg: RunConfig) -> None:
    _say(f"config_digest {cfg.digest()}")


def _load_model(path):
    from .checkpoint import load_checkpoint

    if path is None:
        raise UsageError("--checkpoint is required")
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _heldout(cfg: RunConfig, count: int | None):
    from .pipeline import load_pairs, split_pairs

    pairs = load_pairs(cfg)
    _, held, offset = split_pairs(pairs, cfg.holdout_count)
    if count is not None:
        if count < 1:
            raise UsageError("--count must be >= 1")
        held = held[:count]
    return held, np.arange(offset, offset + len(held))


def _metric_row(name: str, metrics: dict) -> str:
    cells = " ".join(f"{k}={float(np.mean(v)):.4f}" for k, v in metrics.items())
    return f"{name} {cells}"


def _progress(stage, step, loss, every):
    if step % every == 0:
        log.info("%s step %d loss %.6f", stage, step, loss)


# ----------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    out = Path(args.out) if args.out else _out_dir(args, cfg) / "pairs.deds"
    pairs = D.gen_dataset(cfg.seed, args.count)
    out.parent.mkdir(parents=True, exist_ok=True)
    blob = D.dumps_dataset(pairs)
    out.write_bytes(blob)
    _digest_line(cfg)
    _say(f"count {len(pairs)}")
    _say(f"sha256 {hashlib.sha256(blob).hexdigest()}")
    _say(f"wrote {out} ({len(blob)} bytes)")
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .pipeline import load_pairs, split_pairs, train_model

    cfg = _load_config(args)
    _digest_line(cfg)
    pairs = load_pairs(cfg)
    train, held, _ = split_pairs(pairs, cfg.holdout_count)
    out = Path(args.out) if args.out else _out_dir(args, cfg) / "model.dedt"
    every = max(1, cfg.log_every)
    t0 = time.perf_counter()
    model, losses = train_model(cfg, train, cache_dir=args.base_cache,
                                callback=lambda s, i, l: _progress(s, i, l, every))
    save_checkpoint(out, model, cfg.to_dict(), len(losses))
    if losses:
        _say(f"loss first {losses[0]:.6f} last {losses[-1]:.6f}")
    _say(f"trained {len(train)} pairs ({len(held)} held out) in {time.perf_counter() - t0:.1f}s")
    _say(f"wrote {out}")
    return EXIT_OK


def cmd_edit(args) -> int:
    from .checkpoint import write_ppm
    from .metrics import evaluate_outputs
    from .pipeline import edit, load_pairs

    model, stored, _ = _load_model(args.checkpoint)
    cfg = _load_config(args, stored)
    _digest_line(cfg)
    pairs = load_pairs(cfg)
    i = args.input_pair_index
    if not 0 <= i < len(pairs):
        raise UsageError(f"pair index {i} outside [0, {len(pairs)})")
    pair = pairs[i]
    out = edit(model, [pair], cfg, [i])[0]
    dest = _out_dir(args, cfg)
    write_ppm(dest / "original.ppm", pair.original_image)
    write_ppm(dest / "output.ppm", out)
    write_ppm(dest / "target.ppm", pair.target_image)
    _say(_metric_row(f"pair={i}", evaluate_outputs([out], [pair], cfg.seed)))
    _say(f"wrote {dest}/original.ppm output.ppm target.ppm")
    return EXIT_OK


def _write_report(report, dest: Path, stem: str) -> None:
    text_path, json_path = report.write(dest / f"{stem}.txt")
    _say(report.to_text().rstrip())
    _say(f"wrote {text_path} {json_path}")


def cmd_sweep(args) -> int:
    from .checkpoint import image_grid, write_ppm
    from .metrics import build_report
    from .pipeline import sweep

    model, stored, _ = _load_model(args.checkpoint)
    cfg = _load_config(args, stored)
    _digest_line(cfg)
    held, idx = _heldout(cfg, args.count)
    runs, outputs = sweep(model, held, cfg, args.lambda_i_list, idx)
    dest = _out_dir(args, cfg)
    report = build_report(runs, {"seed": cfg.seed, "config_digest": cfg.digest(), "pairs": len(held)})
    _write_report(report, dest, "sweep")
    shown = range(min(args.grid_rows, len(held)))
    rows = [[held[k].original_image] + [outputs[lam][k] for lam in sorted(outputs)] + [held[k].target_image]
            for k in shown]
    write_ppm(dest / "sweep_grid.ppm", image_grid(rows))
    _say(f"grid columns: original, lambda_I={sorted(outputs)}, target")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .pipeline import ablate, load_pairs

    cfg = _load_config(args)
    _digest_line(cfg)
    pairs = load_pairs(cfg)
    every = max(1, cfg.log_every)
    report, _ = ablate(cfg, pairs, args.modes, args.text_modes, cache_dir=args.base_cache,
                       callback=lambda s, i, l: _progress(s, i, l, every))
    _write_report(report, _out_dir(args, cfg), "ablation")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import build_report
    from .pipeline import evaluate

    model, stored, step = _load_model(args.checkpoint)
    cfg = _load_config(args, stored)
    _digest_line(cfg)
    held, idx = _heldout(cfg, args.count)
    metrics, _ = evaluate(model, held, cfg, idx)
    name = f"{cfg.fusion}/{cfg.text_mode}"
    report = build_report([(name, metrics)], {"seed": cfg.seed, "config_digest": cfg.digest(),
                                               "pairs": len(held), "step": step})
    _write_report(report, _out_dir(args, cfg), "eval")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import CHECKS, run_all

    unknown = [n for n in args.only or [] if n not in CHECKS]
    if unknown:
        raise UsageError(f"unknown checks: {', '.join(unknown)}; known: {', '.join(CHECKS)}")
    results = run_all(args.only)
    for r in results:
        _say(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail} ({r.seconds:.2f}s)")
    failed = [r.name for r in results if not r.ok]
    if failed:
        raise InvariantFailure(f"failed invariants: {', '.join(failed)}")
    _say(f"all {len(results)} invariants hold")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .selftest import run_gradcheck

    report = run_gradcheck(args.seed or 0, args.samples, args.h)
    _say(str(report))
    _say(f"max_rel_error {report.max_rel_error:.6e}")
    if not report.max_rel_error < args.tol:
        worst = max(report.entries, key=lambda e: e.rel_error)
        raise InvariantFailure(f"gradient check failed at {worst.name}[{worst.index}]: "
                               f"analytic {worst.analytic:.6e} numeric {worst.numeric:.6e}")
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="descedit", description="Description-driven image editing with attention bridges.")
    p.add_argument("--version", action="version", version=f"descedit {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="suppress progress logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON run config (unknown keys are errors)")
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=f"output path (default: ${OUT_ENV} or the config's out_dir)")

    g = sub.add_parser("gen-data", help="generate a synthetic pair dataset")
    common(g)
    g.add_argument("--count", type=int, required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="pretrain the base and train the bridges")
    common(t)
    t.add_argument("--data", help="dataset file (default: generate from the seed)")
    t.add_argument("--steps", type=int)
    t.add_argument("--pretrain-steps", type=int)
    t.add_argument("--fusion", choices=("zero-linear", "direct-addition", "direct-replacement"))
    t.add_argument("--text-mode", choices=("description", "instruction"))
    t.add_argument("--base-cache", help="directory for reusable pretrained bases")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("edit", help="edit one pair and write PPM images")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--input-pair-index", "--index", dest="input_pair_index", type=int, required=True)
    e.add_argument("--lambda-i", type=float)
    e.add_argument("--lambda-t", type=float)
    e.add_argument("--sampler", choices=("deterministic", "ancestral"))
    e.set_defaults(func=cmd_edit)

    s = sub.add_parser("sweep", help="image-guidance sweep over held-out pairs")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--lambda-i-list", type=_float_list, default=[0.5, 1.0, 1.5, 2.0, 2.5])
    s.add_argument("--lambda-t", type=float)
    s.add_argument("--count", type=int, default=50)
    s.add_argument("--grid-rows", type=int, default=8)
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("ablate", help="train and evaluate each fusion mode on one protocol")
    common(a)
    a.add_argument("--data")
    a.add_argument("--modes", type=_str_list, default=["zero-linear", "direct-addition", "direct-replacement"])
    a.add_argument("--text-modes", type=_str_list)
    a.add_argument("--steps", type=int)
    a.add_argument("--pretrain-steps", type=int)
    a.add_argument("--base-cache")
    a.set_defaults(func=cmd_ablate)

    v = sub.add_parser("eval", help="metric report over the held-out split")
    common(v)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data")
    v.add_argument("--count", type=int)
    v.set_defaults(func=cmd_eval)

    st = sub.add_parser("selftest", help="run the invariant suite")
    st.add_argument("--only", type=_str_list)
    st.set_defaults(func=cmd_selftest)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the training loss (64-bit)")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--samples", type=int, default=100)
    gc.add_argument("--h", type=float, default=1e-4)
    gc.add_argument("--tol", type=float, default=1e-3)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    from .errors import FormatError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"descedit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"descedit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"descedit: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, D.SceneError) as exc:
        print(f"descedit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvariantFailure, NonFiniteError) as exc:
        print(f"descedit: invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
