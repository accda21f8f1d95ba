"""Cross-attentive denoiser: an attention stack with per-block reference bridges.

The denoiser is a small patch transformer (patchify, ``blocks`` x [self
attention, text cross attention, MLP], unpatchify) predicting noise.  A
second, weight-sharing pass over the clean original image at timestep 0
records the normalized hidden state that feeds every self-attention.  In
the editing pass each block's bridge attends with queries from those
reference features and keys/values from the denoising features, and the
result is fused into the self-attention output.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .numcore import ParamSet, ShapeError, Tensor, no_grad
from .numcore import ops

FUSION_MODES = ("zero-linear", "direct-addition", "direct-replacement")
BRIDGE_QUERY_SOURCES = ("reference", "denoiser")
PREDICTIONS = ("epsilon", "v")
PAD_ID = 0
NULL_ID = 1
REF_TIMESTEP = 0
_MASK_BIAS = -1e9


class MergedModelError(RuntimeError):
    """Raised when training is attempted on a model whose LoRA was merged."""


@dataclass
class ModelConfig:
    image_size: int = 16
    channels: int = 3
    patch_size: int = 2
    dim: int = 64
    blocks: int = 2
    heads: int = 4
    vocab_size: int = 23
    max_text_len: int = 16
    lora_rank: int = 8
    lora_alpha: Optional[float] = None
    fusion: str = "zero-linear"
    bridge_query: str = "reference"
    mlp_ratio: int = 4
    text_layers: int = 1
    prediction: str = "v"

    def __post_init__(self):
        if self.prediction not in PREDICTIONS:
            raise ValueError(f"prediction must be one of {PREDICTIONS}, got {self.prediction!r}")
        if self.text_layers < 0:
            raise ValueError("text_layers must be >= 0")
        if self.lora_alpha is None:
            self.lora_alpha = float(self.lora_rank)
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ValueError(f"patch size {self.patch_size} does not divide image size {self.image_size}")
        if self.dim % 2:
            raise ValueError("dim must be even for the sinusoidal timestep embedding")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")
        if self.lora_alpha <= 0:
            raise ValueError("lora_alpha must be positive")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.bridge_query not in BRIDGE_QUERY_SOURCES:
            raise ValueError(f"bridge_query must be one of {BRIDGE_QUERY_SOURCES}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def lora_scale(self) -> float:
        return float(self.lora_alpha) / self.lora_rank

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RefCache:
    """Per-block self-attention inputs of the reference pass."""

    hidden: list
    timestep: int = REF_TIMESTEP

    def __post_init__(self):
        if self.timestep != REF_TIMESTEP:
            raise ValueError("reference features are always taken at timestep 0")


def expected_trainable_count(blocks: int, dim: int, rank: int) -> int:
    return blocks * (8 * dim * rank + dim * dim + dim)


# ---------------------------------------------------------------- primitives

def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding: sin over the first half, cos over the second.

    Frequencies are ``max_period ** (-i / half)``, so the first is 1.
    """
    if dim % 2:
        raise ValueError(f"timestep embedding dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("timesteps must be non-negative")
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def patchify(image, patch: int) -> Tensor:
    """[..., C, H, W] -> [..., (H/p)(W/p), C*p*p], row-major over the patch grid."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    *lead, c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"patch size {patch} does not divide image extents {(h, w)}")
    gh, gw = h // patch, w // patch
    n = len(lead)
    x = x.reshape(*lead, c, gh, patch, gw, patch)
    axes = tuple(range(n)) + tuple(n + a for a in (1, 3, 0, 2, 4))
    return x.transpose(axes).reshape(*lead, gh * gw, c * patch * patch)


def unpatchify(tokens, patch: int, channels: int, size: int) -> Tensor:
    x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    *lead, n_tok, d_in = x.shape
    g = size // patch
    if g * g != n_tok or d_in != channels * patch * patch:
        raise ShapeError(f"cannot unpatchify {x.shape} into {channels}x{size}x{size} with patch {patch}")
    n = len(lead)
    x = x.reshape(*lead, g, g, channels, patch, patch)
    axes = tuple(range(n)) + tuple(n + a for a in (2, 0, 3, 1, 4))
    return x.transpose(axes).reshape(*lead, channels, size, size)


def attention(q: Tensor, k: Tensor, v: Tensor, bias=None) -> Tensor:
    """softmax(q k^T / sqrt(d_h) + bias) v over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key head dims differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key/value counts differ: {k.shape} vs {v.shape}")
    nd = k.ndim
    kt = k.transpose(tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = (q @ kt) * (1.0 / math.sqrt(q.shape[-1]))
    if bias is not None:
        scores = scores + bias
    return ops.softmax(scores, axis=-1) @ v


def lora_project(x: Tensor, w: Tensor, a: Tensor | None = None, b: Tensor | None = None,
                 alpha: float = 1.0, rank: int | None = None) -> Tensor:
    """x (W + (alpha/r) A B), evaluated in factored form."""
    base = x @ w
    if a is None:
        return base
    r = a.shape[-1]
    if b.shape[0] != r or (rank is not None and rank != r):
        raise ShapeError(f"LoRA rank mismatch: A {a.shape}, B {b.shape}, rank {rank}")
    if alpha == 0:
        return base
    return base + ((x @ a) @ b) * (alpha / r)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    bsz, n, d = x.shape
    return x.reshape(bsz, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    bsz, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(bsz, n, h * dh)


def _sincos_2d(grid: int, dim: int) -> np.ndarray:
    half = dim // 2
    ys, xs = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    return np.concatenate([timestep_embedding(ys.reshape(-1), half, 100.0),
                           timestep_embedding(xs.reshape(-1), half, 100.0)], axis=-1)


# --------------------------------------------------------------------- model

_ATTN = ("q", "k", "v", "o")


@dataclass
class Model:
    config: ModelConfig
    params: ParamSet
    merged: bool = False
    denoise_calls: int = field(default=0, compare=False)

    # ----- construction

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "Model":
        from .rng import INIT, stream

        rng = stream(seed, INIT)
        c, d = config, config.dim
        p = ParamSet()

        def normal(*shape, std):
            return (rng.standard_normal(shape) * std).astype(dtype)

        def ones(n):
            return np.ones(n, dtype=dtype)

        def zeros(*shape):
            return np.zeros(shape, dtype=dtype)

        p.add("patch.w", normal(c.patch_dim, d, std=1 / math.sqrt(c.patch_dim)), frozen=True)
        p.add("patch.b", zeros(d), frozen=True)
        p.add("pos", _sincos_2d(c.grid, d).astype(dtype) * 0.5, frozen=True)
        p.add("time.w1", normal(d, d, std=1 / math.sqrt(d)), frozen=True)
        p.add("time.b1", zeros(d), frozen=True)
        p.add("time.w2", normal(d, d, std=1 / math.sqrt(d)), frozen=True)
        p.add("time.b2", zeros(d), frozen=True)
        p.add("text.emb", normal(c.vocab_size, d, std=1.0), frozen=True)
        p.add("text.pos", timestep_embedding(np.arange(c.max_text_len), d).astype(dtype) * 0.5, frozen=True)
        hidden = c.mlp_ratio * d
        for j in range(c.text_layers):
            pre = f"text.enc.{j}."
            for ln in ("ln1", "ln2"):
                p.add(pre + ln + ".g", ones(d), frozen=True)
                p.add(pre + ln + ".b", zeros(d), frozen=True)
            for m in _ATTN:
                p.add(f"{pre}attn.w{m}", normal(d, d, std=1 / math.sqrt(d)), frozen=True)
            p.add(pre + "mlp.w1", normal(d, hidden, std=1 / math.sqrt(d)), frozen=True)
            p.add(pre + "mlp.b1", zeros(hidden), frozen=True)
            p.add(pre + "mlp.w2", normal(hidden, d, std=1 / math.sqrt(hidden)), frozen=True)
            p.add(pre + "mlp.b2", zeros(d), frozen=True)
        for i in range(c.blocks):
            pre = f"blocks.{i}."
            for ln in ("ln1", "ln2", "ln3"):
                p.add(pre + ln + ".g", ones(d), frozen=True)
                p.add(pre + ln + ".b", zeros(d), frozen=True)
            for kind in ("attn", "xattn"):
                for m in _ATTN:
                    p.add(f"{pre}{kind}.w{m}", normal(d, d, std=1 / math.sqrt(d)), frozen=True)
            p.add(pre + "mlp.w1", normal(d, hidden, std=1 / math.sqrt(d)), frozen=True)
            p.add(pre + "mlp.b1", zeros(hidden), frozen=True)
            p.add(pre + "mlp.w2", normal(hidden, d, std=1 / math.sqrt(hidden)), frozen=True)
            p.add(pre + "mlp.b2", zeros(d), frozen=True)
        p.add("final.ln.g", ones(d), frozen=True)
        p.add("final.ln.b", zeros(d), frozen=True)
        p.add("final.w", normal(d, c.patch_dim, std=0.1 / math.sqrt(d)), frozen=True)
        p.add("final.b", zeros(c.patch_dim), frozen=True)

        model = cls(config, p)
        model.reset_bridge(seed)
        return model

    def reset_bridge(self, seed: int = 0) -> None:
        """(Re)build every bridge from the current self-attention weights.

        Base copies are bitwise copies, LoRA B factors and the fusion map are
        zero, LoRA A factors are Gaussian with std 1/sqrt(d).
        """
        from .rng import INIT, stream

        c, p = self.config, self.params
        dtype = p["patch.w"].dtype
        rng = stream(seed, INIT, 1)
        for name in [n for n in p if n.startswith("bridge.")]:
            p.remove(name)
        for i in range(c.blocks):
            pre = f"bridge.{i}."
            for m in _ATTN:
                p.add(f"{pre}base.w{m}", p[f"blocks.{i}.attn.w{m}"].data, frozen=True)
            for m in _ATTN:
                a = rng.standard_normal((c.dim, c.lora_rank)) / math.sqrt(c.dim)
                p.add(f"{pre}lora.{m}.a", a.astype(dtype))
                p.add(f"{pre}lora.{m}.b", np.zeros((c.lora_rank, c.dim), dtype=dtype))
            p.add(pre + "fuse.w", np.zeros((c.dim, c.dim), dtype=dtype))
            p.add(pre + "fuse.b", np.zeros(c.dim, dtype=dtype))
        self.merged = False

    def base_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("bridge.")]

    def bridge_trainable_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("bridge.") and ".base." not in n]

    def trainable_params(self) -> ParamSet:
        return self.params.trainable()

    def astype(self, dtype) -> "Model":
        return Model(self.config, self.params.astype(dtype), merged=self.merged)

    def copy(self) -> "Model":
        return Model(self.config, self.params.copy(), merged=self.merged)

    def merge_lora(self) -> "Model":
        """Fold every LoRA delta into its base copy. Merging is terminal."""
        if self.merged:
            raise MergedModelError("LoRA factors are already merged")
        c = self.config
        params = self.params.copy()
        for i in range(c.blocks):
            pre = f"bridge.{i}."
            for m in _ATTN:
                a = params[f"{pre}lora.{m}.a"].data
                b = params[f"{pre}lora.{m}.b"].data
                w = params[f"{pre}base.w{m}"].data
                params.set(f"{pre}base.w{m}", w + c.lora_scale * (a @ b))
                params.remove(f"{pre}lora.{m}.a")
                params.remove(f"{pre}lora.{m}.b")
        return Model(c, params, merged=True)

    # ----- forward passes

    def _check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ValueError(f"token ids must lie in [0, {self.config.vocab_size})")
        extra = self.config.max_text_len - tokens.shape[-1]
        if extra < 0:
            raise ValueError(f"text longer than {self.config.max_text_len} tokens")
        if extra:
            tokens = np.pad(tokens, ((0, 0), (0, extra)), constant_values=PAD_ID)
        return tokens

    def _proj(self, prefix: str, m: str, x: Tensor) -> Tensor:
        p = self.params
        w = p[f"{prefix}base.w{m}"]
        if self.merged:
            return x @ w
        return lora_project(x, w, p[f"{prefix}lora.{m}.a"], p[f"{prefix}lora.{m}.b"],
                            self.config.lora_alpha, self.config.lora_rank)

    def _self_attention(self, i: int, a: Tensor) -> Tensor:
        p, h = self.params, self.config.heads
        pre = f"blocks.{i}.attn."
        q = _split_heads(a @ p[pre + "wq"], h)
        k = _split_heads(a @ p[pre + "wk"], h)
        v = _split_heads(a @ p[pre + "wv"], h)
        return _merge_heads(attention(q, k, v)) @ p[pre + "wo"]

    def bridge_output(self, i: int, h_edit: Tensor, h_ref: Tensor) -> Tensor:
        """Z' for block ``i``: attention with reference queries, denoiser keys/values."""
        if h_edit.shape[-2] != h_ref.shape[-2]:
            raise ShapeError(f"bridge token counts differ: {h_edit.shape} vs {h_ref.shape}")
        pre, h = f"bridge.{i}.", self.config.heads
        if self.config.bridge_query == "reference":
            q_src, kv_src = h_ref, h_edit
        else:
            q_src, kv_src = h_edit, h_ref
        q = _split_heads(self._proj(pre, "q", q_src), h)
        k = _split_heads(self._proj(pre, "k", kv_src), h)
        v = _split_heads(self._proj(pre, "v", kv_src), h)
        return self._proj(pre, "o", _merge_heads(attention(q, k, v)))

    def bridge_block(self, i: int, z: Tensor, h_edit: Tensor, h_ref: Tensor, image_keep=None) -> Tensor:
        """Fuse the bridge output into the self-attention output ``z``.

        ``image_keep`` (bool per batch row) bypasses the bridge where False.
        """
        if image_keep is not None:
            image_keep = np.asarray(image_keep, dtype=bool).reshape(-1)
            if not image_keep.any():
                return z
        zp = self.bridge_output(i, h_edit, h_ref)
        mode = self.config.fusion
        if mode == "zero-linear":
            pre = f"bridge.{i}."
            delta = zp @ self.params[pre + "fuse.w"] + self.params[pre + "fuse.b"]
        elif mode == "direct-addition":
            delta = zp
        else:
            delta = zp - z
        if image_keep is not None and not image_keep.all():
            delta = delta * Tensor(image_keep.astype(z.dtype).reshape(-1, 1, 1))
        return z + delta

    def _embed(self, x: Tensor, t, tokens: np.ndarray):
        c, p = self.config, self.params
        bsz = x.shape[0]
        h = patchify(x, c.patch_size) @ p["patch.w"] + p["patch.b"] + p["pos"]
        t = np.broadcast_to(np.asarray(t), (bsz,))
        temb = Tensor(timestep_embedding(t, c.dim).astype(x.dtype))
        temb = ops.silu(temb @ p["time.w1"] + p["time.b1"]) @ p["time.w2"] + p["time.b2"]
        h = h + temb.reshape(bsz, 1, c.dim)
        if tokens.shape[0] == 1 and bsz > 1:
            tokens = np.repeat(tokens, bsz, axis=0)
        txt = ops.embedding(p["text.emb"], tokens) + p["text.pos"]
        bias = Tensor(np.where(tokens == PAD_ID, _MASK_BIAS, 0.0).astype(x.dtype)[:, None, None, :])
        for j in range(c.text_layers):
            txt = self._text_layer(j, txt, bias)
        return h, txt, bias

    def _text_layer(self, j: int, txt: Tensor, bias: Tensor) -> Tensor:
        """Pre-norm self-attention + MLP over the tokens, so each token sees its neighbours."""
        p, nh = self.params, self.config.heads
        pre = f"text.enc.{j}."
        a = ops.layer_norm(txt, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q, k, v = (_split_heads(a @ p[f"{pre}attn.w{m}"], nh) for m in "qkv")
        txt = txt + _merge_heads(attention(q, k, v, bias)) @ p[pre + "attn.wo"]
        m = ops.layer_norm(txt, p[pre + "ln2.g"], p[pre + "ln2.b"])
        m = ops.silu(m @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]) @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]
        return txt + m

    def _block_rest(self, i: int, h: Tensor, txt: Tensor, bias: Tensor) -> Tensor:
        p, nh = self.params, self.config.heads
        pre = f"blocks.{i}."
        c = ops.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
        q = _split_heads(c @ p[pre + "xattn.wq"], nh)
        k = _split_heads(txt @ p[pre + "xattn.wk"], nh)
        v = _split_heads(txt @ p[pre + "xattn.wv"], nh)
        h = h + _merge_heads(attention(q, k, v, bias)) @ p[pre + "xattn.wo"]
        m = ops.layer_norm(h, p[pre + "ln3.g"], p[pre + "ln3.b"])
        m = ops.silu(m @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]) @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]
        return h + m

    @staticmethod
    def _batched(x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 3:
            return x.reshape(1, *x.shape), True
        return x, False

    def forward_ref(self, z_o) -> RefCache:
        """Run the plain denoiser on the clean original at timestep 0 with NULL text."""
        c = self.config
        x, _ = self._batched(z_o)
        if not np.all(np.isfinite(x.data)):
            raise ValueError("reference image must be finite")
        tokens = self._check_tokens([NULL_ID])
        hidden = []
        with no_grad():
            h, txt, bias = self._embed(Tensor(x.data), REF_TIMESTEP, tokens)
            for i in range(c.blocks):
                p = self.params
                a = ops.layer_norm(h, p[f"blocks.{i}.ln1.g"], p[f"blocks.{i}.ln1.b"])
                hidden.append(a.data)
                if i == c.blocks - 1:
                    break
                h = h + self._self_attention(i, a)
                h = self._block_rest(i, h, txt, bias)
        return RefCache(hidden)

    def denoise(self, z_t, t, tokens, ref: RefCache | None = None, image_keep=None) -> Tensor:
        """Predicted noise for ``z_t``; ``ref=None`` is the image-unconditional branch."""
        self.denoise_calls += 1
        c, p = self.config, self.params
        x, squeeze = self._batched(z_t)
        tokens = self._check_tokens(tokens)
        h, txt, bias = self._embed(x, t, tokens)
        for i in range(c.blocks):
            a = ops.layer_norm(h, p[f"blocks.{i}.ln1.g"], p[f"blocks.{i}.ln1.b"])
            z = self._self_attention(i, a)
            if ref is not None:
                h_ref = ref.hidden[i]
                if h_ref.shape[0] == 1 and a.shape[0] > 1:
                    h_ref = np.repeat(h_ref, a.shape[0], axis=0)
                z = self.bridge_block(i, z, a, Tensor(h_ref), image_keep)
            h = h + z
            h = self._block_rest(i, h, txt, bias)
        out = ops.layer_norm(h, p["final.ln.g"], p["final.ln.b"]) @ p["final.w"] + p["final.b"]
        out = unpatchify(out, c.patch_size, c.channels, c.image_size)
        if squeeze:
            out = out.reshape(*out.shape[1:])
        return out
