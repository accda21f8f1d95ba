"""Image-editing metrics and the comparison report.

Pixel metrics assume images in [-1, 1] (data range 2) unless told
otherwise.  ``proxy_embed_sim`` is a fixed random projection standing in
for learned-feature similarity; ``adherence`` (L1 to the target inside the
edit mask) stands in for text-image alignment.  Neither is the learned
metric it replaces.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

PSNR_CAP = 99.0
DATA_RANGE = 2.0

# column -> True when larger is better
COLUMNS = {
    "l1": False,
    "l2": False,
    "psnr": True,
    "ssim": True,
    "consistency": False,
    "adherence": False,
    "proxy_sim": True,
    "success": True,
}
COLUMN_TITLES = {
    "l1": "L1", "l2": "L2", "psnr": "PSNR", "ssim": "SSIM",
    "consistency": "Consist(out)", "adherence": "Adhere(in)*",
    "proxy_sim": "ProxySim", "success": "Success",
}


def _same_shape(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def l1(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(np.mean(np.abs(a - b)))


def l2(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, data_range: float = DATA_RANGE) -> float:
    if data_range <= 0:
        raise ValueError("data range must be positive")
    mse = l2(a, b)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range ** 2 / mse))


def ssim(a, b, data_range: float = DATA_RANGE, window: int = 8) -> float:
    """Mean SSIM over non-overlapping uniform windows, averaged over channels."""
    a, b = _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    _, h, w = a.shape
    if window > h or window > w:
        raise ValueError(f"window {window} larger than image {h}x{w}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    gh, gw = h // window, w // window

    def blocks(x):
        x = x[:, : gh * window, : gw * window]
        return x.reshape(x.shape[0], gh, window, gw, window).transpose(0, 1, 3, 2, 4).reshape(
            x.shape[0], gh, gw, -1)

    xa, xb = blocks(a), blocks(b)
    mu_a, mu_b = xa.mean(-1), xb.mean(-1)
    var_a = xa.var(-1)
    var_b = xb.var(-1)
    cov = ((xa - mu_a[..., None]) * (xb - mu_b[..., None])).mean(-1)
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def masked_l1(a, b, mask) -> float:
    """Mean |a - b| over channels and the pixels where ``mask`` is set."""
    a, b = _same_shape(a, b)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    return float(np.abs(a - b)[..., mask].mean())


def region_metrics(output, pair) -> dict:
    """consistency: L1 to the original outside the mask; adherence: L1 to the
    target inside it."""
    mask = np.asarray(pair.mask, dtype=bool)
    if not mask.any():
        raise ValueError("edit mask is empty")
    out = {"adherence": masked_l1(output, pair.target_image, mask)}
    out["consistency"] = masked_l1(output, pair.original_image, ~mask) if (~mask).any() else 0.0
    return out


@lru_cache(maxsize=8)
def _projection(n_in: int, seed: int, dim: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    return rng.standard_normal((n_in, dim)) / math.sqrt(dim)


def proxy_embed_sim(a, b, seed: int = 0, dim: int = 64) -> float:
    a, b = _same_shape(a, b)
    proj = _projection(a.size, seed, dim)
    ea, eb = a.reshape(-1) @ proj, b.reshape(-1) @ proj
    na, nb = np.linalg.norm(ea), np.linalg.norm(eb)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(ea @ eb / (na * nb), -1.0, 1.0))


def edit_success(output, pair) -> bool:
    return l1(output, pair.target_image) < l1(output, pair.original_image)


def evaluate_outputs(outputs, pairs, seed: int = 0) -> dict:
    """Per-example metric arrays, keyed by column name."""
    rows = {k: [] for k in COLUMNS}
    for out, p in zip(outputs, pairs):
        rows["l1"].append(l1(out, p.original_image))
        rows["l2"].append(l2(out, p.original_image))
        rows["psnr"].append(psnr(out, p.original_image))
        rows["ssim"].append(ssim(out, p.original_image))
        rows.update({k: rows[k] + [v] for k, v in region_metrics(out, p).items()})
        rows["proxy_sim"].append(proxy_embed_sim(out, p.original_image, seed))
        rows["success"].append(float(edit_success(out, p)))
    return {k: np.asarray(v, dtype=np.float64) for k, v in rows.items()}


# ------------------------------------------------------------------- report

@dataclass
class MetricReport:
    methods: list
    values: dict  # method -> {column: per-example array}
    metadata: dict = field(default_factory=dict)

    def means(self) -> dict:
        return {m: {c: float(np.mean(self.values[m][c])) for c in COLUMNS} for m in self.methods}

    def best(self) -> dict:
        """column -> set of methods achieving the best mean (ties share it)."""
        means = self.means()
        out = {}
        for c, higher in COLUMNS.items():
            vals = [means[m][c] for m in self.methods]
            target = max(vals) if higher else min(vals)
            out[c] = {m for m in self.methods if means[m][c] == target}
        return out

    def to_text(self) -> str:
        means, best = self.means(), self.best()
        width = max(8, *(len(m) for m in self.methods))
        head = f"{'Method':<{width}} | " + " ".join(f"{COLUMN_TITLES[c]:>13}" for c in COLUMNS)
        lines = [head, "-" * len(head)]
        for m in self.methods:
            cells = []
            for c in COLUMNS:
                mark = "*" if m in best[c] else " "
                cells.append(f"{means[m][c]:>12.4f}{mark}")
            lines.append(f"{m:<{width}} | " + " ".join(cells))
        lines.append("")
        lines.append("trailing * marks the best value per column (ties marked on all).")
        lines.append("Adhere(in)* is L1 to the target inside the edit mask, standing in for text alignment;")
        lines.append("ProxySim is a fixed random-projection cosine, standing in for learned feature similarity.")
        meta = " ".join(f"{k}={v}" for k, v in sorted(self.metadata.items()))
        if meta:
            lines.append(meta)
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        best = self.best()
        return {
            "metadata": self.metadata,
            "columns": list(COLUMNS),
            "methods": {
                m: {c: [float(v) for v in self.values[m][c]] for c in COLUMNS} for m in self.methods
            },
            "means": self.means(),
            "best": {c: sorted(v) for c, v in best.items()},
        }

    def write(self, path) -> tuple[Path, Path]:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        text_path = path.with_suffix(".txt")
        json_path = path.with_suffix(".json")
        text_path.write_text(self.to_text(), encoding="utf-8")
        json_path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True), encoding="utf-8")
        return text_path, json_path


def build_report(runs, metadata: dict | None = None) -> MetricReport:
    """``runs``: sequence of (method name, per-example metric dict)."""
    runs = list(runs)
    if not runs:
        raise ValueError("report needs at least one run")
    methods = [name for name, _ in runs]
    if len(set(methods)) != len(methods):
        raise ValueError("duplicate method names")
    values = {name: {c: np.asarray(vals[c], dtype=np.float64) for c in COLUMNS} for name, vals in runs}
    for name in methods:
        for c in COLUMNS:
            if not np.all(np.isfinite(values[name][c])):
                raise ValueError(f"non-finite {c} values for {name}")
    return MetricReport(methods, values, dict(metadata or {}))
