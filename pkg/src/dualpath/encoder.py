"""Toy vision transformer with a one-way degradation-reader token.

The patch tokens attend only among themselves; one extra token reads all
patch tokens every layer but is never visible to them as a key or value.
Its final state is the degradation embedding, the pooled patch tokens are
the semantic embedding, and dropping the extra token at inference time
reproduces the semantic outputs bit for bit.

Layer recipe (fixed): pre-norm residual attention, then a residual
token-wise two-layer gelu MLP with hidden width 2*dim. Attention scores
are scaled by 1/sqrt(head_dim). There is no positional embedding; the
corpus generator makes classes separable from patch content alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping

import numpy as np

from . import tensor as T
from .rng import make_rng
from .tensor import AttentionMask, GradTape, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    image_h: int = 32
    image_w: int = 32
    channels: int = 3
    patch: int = 8
    dim: int = 32
    layers: int = 2
    heads: int = 2
    agg: str = "mean"  # "mean" or "cls"
    nc_bidirectional: bool = False
    nc_enabled: bool = True

    def __post_init__(self):
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ValueError(f"patch {self.patch} must divide image {self.image_h}x{self.image_w}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.agg not in ("mean", "cls"):
            raise ValueError(f"unknown aggregation mode {self.agg!r}")
        if self.nc_bidirectional and not self.nc_enabled:
            raise ValueError("bidirectional mode requires the extra token to be enabled")

    @property
    def tokens(self) -> int:
        return (self.image_h // self.patch) * (self.image_w // self.patch)

    @property
    def causal_tokens(self) -> int:
        """Patch tokens plus the cls token when configured."""
        return self.tokens + (1 if self.agg == "cls" else 0)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


@dataclass
class EncoderWeights:
    """Named weight arrays; shapes fixed by the config they were built for."""

    config: EncoderConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "EncoderWeights":
        return EncoderWeights(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "EncoderWeights":
        return EncoderWeights(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})


@dataclass
class EncoderOutput:
    sem_tokens: Tensor  # causal_tokens x dim
    z_sem: Tensor  # (dim,)
    z_deg: Tensor | None  # (dim,), absent in inference/baseline mode


def weight_names(config: EncoderConfig) -> list[str]:
    names = ["patch_w", "patch_b", "z_nc0"]
    if config.agg == "cls":
        names.append("cls")
    for i in range(config.layers):
        p = f"layers.{i}."
        names += [
            p + "ln1_g", p + "ln1_b",
            p + "wq", p + "bq", p + "wk", p + "bk", p + "wv", p + "bv",
            p + "wo", p + "bo",
            p + "ln2_g", p + "ln2_b",
            p + "mlp_w1", p + "mlp_b1", p + "mlp_w2", p + "mlp_b2",
        ]
    return names


def _shape_of(name: str, config: EncoderConfig) -> tuple:
    d = config.dim
    base = name.rsplit(".", 1)[-1]
    return {
        "patch_w": (config.patch_dim, d),
        "patch_b": (d,),
        "z_nc0": (1, d),
        "cls": (1, d),
        "ln1_g": (d,), "ln1_b": (d,), "ln2_g": (d,), "ln2_b": (d,),
        "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,),
        "wv": (d, d), "bv": (d,), "wo": (d, d), "bo": (d,),
        "mlp_w1": (d, 2 * d), "mlp_b1": (2 * d,),
        "mlp_w2": (2 * d, d), "mlp_b2": (d,),
    }[base]


def init_weights(config: EncoderConfig, seed, dtype=np.float32) -> EncoderWeights:
    """Seeded init; each array gets its own derived stream, so the draw is
    independent of iteration order and of which ablation flags are set."""
    tensors: dict[str, np.ndarray] = {}
    for name in weight_names(config):
        shape = _shape_of(name, config)
        base = name.rsplit(".", 1)[-1]
        if base in ("ln1_g", "ln2_g"):
            arr = np.ones(shape)
        elif base in ("ln1_b", "ln2_b") or base.startswith("b") or base in ("patch_b", "mlp_b1", "mlp_b2"):
            arr = np.zeros(shape)
        elif base in ("z_nc0", "cls"):
            arr = make_rng(seed, "weights", name).normal(size=shape) / math.sqrt(config.dim)
        else:
            fan_in = shape[0]
            arr = make_rng(seed, "weights", name).normal(size=shape) / math.sqrt(fan_in)
        tensors[name] = arr.astype(dtype)
    return EncoderWeights(config, tensors)


def zero_weights(config: EncoderConfig, dtype=np.float32) -> EncoderWeights:
    """All projections zero (layer norms keep unit gain); the forward pass
    then reduces to a residual passthrough of the patch embeddings."""
    w = init_weights(config, seed=0, dtype=dtype)
    for name, arr in w.tensors.items():
        base = name.rsplit(".", 1)[-1]
        if base not in ("ln1_g", "ln2_g"):
            w.tensors[name] = np.zeros_like(arr)
    return w


def wrap_weights(weights: EncoderWeights, tape: GradTape | None = None) -> dict[str, Tensor]:
    """Lift raw arrays to tensors, as tape leaves when a tape is given."""
    if tape is None:
        return {k: Tensor(v) for k, v in weights.tensors.items()}
    return {k: tape.param(v) for k, v in weights.tensors.items()}


def patchify(image, config: EncoderConfig) -> np.ndarray:
    """Non-overlapping patches in row-major order (top-left patch first).

    Each row is one patch flattened in (row, col, channel) order. Output
    shape is tokens x (patch*patch*channels).
    """
    pixels = getattr(image, "pixels", image)
    pixels = np.asarray(pixels)
    expect = (config.image_h, config.image_w, config.channels)
    if pixels.shape != expect:
        raise ValueError(f"image shape {pixels.shape} does not match config {expect}")
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    p = config.patch
    gh, gw = config.image_h // p, config.image_w // p
    out = (
        pixels.reshape(gh, p, gw, p, config.channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, config.patch_dim)
    )
    return np.ascontiguousarray(out)


def build_masks(tokens: int, nc_bidirectional: bool) -> tuple[AttentionMask, AttentionMask | None]:
    """Masks for one layer of the dual-path attention.

    Default: an all-true tokens x tokens mask for the patch branch and a
    1 x tokens row for the extra token (it reads every patch token but not
    itself). Bidirectional ablation: one joint all-true mask over
    tokens + 1 positions, and no separate reader row.
    """
    if tokens < 1:
        raise ValueError("need at least one token")
    if nc_bidirectional:
        return AttentionMask.full(tokens + 1, tokens + 1), None
    return AttentionMask.full(tokens, tokens), AttentionMask.full(1, tokens)


def _attend(q: Tensor, k: Tensor, v: Tensor, mask: AttentionMask, heads: int) -> Tensor:
    d = q.shape[1]
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    outs = []
    for h in range(heads):
        qh = T.slice_cols(q, h * dh, (h + 1) * dh)
        kh = T.slice_cols(k, h * dh, (h + 1) * dh)
        vh = T.slice_cols(v, h * dh, (h + 1) * dh)
        scores = T.mul(T.matmul(qh, T.transpose(kh)), scale)
        attn = T.masked_softmax(scores, mask)
        outs.append(T.matmul(attn, vh))
    return T.concat_cols(outs)


def _proj(x: Tensor, wt: Mapping[str, Tensor], prefix: str, name: str) -> Tensor:
    return T.add(T.matmul(x, wt[prefix + "w" + name]), wt[prefix + "b" + name])


def _mlp(x: Tensor, wt: Mapping[str, Tensor], prefix: str) -> Tensor:
    h = T.gelu(T.add(T.matmul(x, wt[prefix + "mlp_w1"]), wt[prefix + "mlp_b1"]))
    return T.add(T.matmul(h, wt[prefix + "mlp_w2"]), wt[prefix + "mlp_b2"])


def _embed(image, wt: Mapping[str, Tensor], config: EncoderConfig, patches) -> Tensor:
    if patches is None:
        patches = patchify(image, config)
    if not isinstance(patches, Tensor):
        patches = Tensor(np.asarray(patches, dtype=wt["patch_w"].dtype))
    x = T.add(T.matmul(patches, wt["patch_w"]), wt["patch_b"])
    if config.agg == "cls":
        x = T.concat_rows([wt["cls"], x])
    return x


def _forward(image, wt: Mapping[str, Tensor], config: EncoderConfig,
             include_nc: bool, patches=None) -> EncoderOutput:
    x = _embed(image, wt, config, patches)
    n = config.causal_tokens
    causal_mask, nc_mask = build_masks(n, config.nc_bidirectional)

    if config.nc_bidirectional:
        # joint stack: the extra token is an ordinary (T+1)-th token
        j = T.concat_rows([x, wt["z_nc0"]])
        for i in range(config.layers):
            p = f"layers.{i}."
            jl = T.layer_norm(j, wt[p + "ln1_g"], wt[p + "ln1_b"])
            q = _proj(jl, wt, p, "q")
            k = _proj(jl, wt, p, "k")
            v = _proj(jl, wt, p, "v")
            attn = T.add(T.matmul(_attend(q, k, v, causal_mask, config.heads), wt[p + "wo"]), wt[p + "bo"])
            j = T.add(j, attn)
            j = T.add(j, _mlp(T.layer_norm(j, wt[p + "ln2_g"], wt[p + "ln2_b"]), wt, p))
        sem_tokens = T.slice_rows(j, 0, n)
        z_deg = T.reshape(T.slice_rows(j, n, n + 1), (config.dim,))
        return EncoderOutput(sem_tokens, aggregate(sem_tokens, config.agg), z_deg)

    z = wt["z_nc0"] if include_nc else None
    for i in range(config.layers):
        p = f"layers.{i}."
        xl = T.layer_norm(x, wt[p + "ln1_g"], wt[p + "ln1_b"])
        q = _proj(xl, wt, p, "q")
        k = _proj(xl, wt, p, "k")
        v = _proj(xl, wt, p, "v")
        attn = T.add(T.matmul(_attend(q, k, v, causal_mask, config.heads), wt[p + "wo"]), wt[p + "bo"])
        x_next = T.add(x, attn)
        x_next = T.add(x_next, _mlp(T.layer_norm(x_next, wt[p + "ln2_g"], wt[p + "ln2_b"]), wt, p))

        if z is not None:
            # reader token: queries from its own state, keys/values are the
            # layer-input patch tokens; softmax runs over the patch keys only
            zl = T.layer_norm(z, wt[p + "ln1_g"], wt[p + "ln1_b"])
            qz = _proj(zl, wt, p, "q")
            attn_z = T.add(T.matmul(_attend(qz, k, v, nc_mask, config.heads), wt[p + "wo"]), wt[p + "bo"])
            z_next = T.add(z, attn_z)
            z = T.add(z_next, _mlp(T.layer_norm(z_next, wt[p + "ln2_g"], wt[p + "ln2_b"]), wt, p))

        x = x_next

    z_deg = T.reshape(z, (config.dim,)) if z is not None else None
    return EncoderOutput(x, aggregate(x, config.agg), z_deg)


def aggregate(sem_tokens: Tensor, mode: str) -> Tensor:
    """Pool token states to one vector: arithmetic mean, or the cls row."""
    d = sem_tokens.shape[1]
    if mode == "mean":
        return T.reshape(T.mean(sem_tokens, axis=0), (d,))
    if mode == "cls":
        return T.reshape(T.slice_rows(sem_tokens, 0, 1), (d,))
    raise ValueError(f"unknown aggregation mode {mode!r}")


def forward_dual(image, weights, config: EncoderConfig, patches=None) -> EncoderOutput:
    """Full pass: semantic tokens, pooled semantic embedding, and the
    degradation embedding (None when the extra token is disabled)."""
    wt = weights if isinstance(weights, Mapping) else wrap_weights(weights)
    return _forward(image, wt, config, include_nc=config.nc_enabled, patches=patches)


# ---------------------------------------------------------------------------
# batched forward: many images as one masked token stack
#
# Row layout: [B*T patch rows | B cls rows (cls mode) | B reader rows].
# The block mask keeps every image's tokens attending within their own
# image, reproducing the per-image semantics in a single attention call.


@dataclass
class BatchEncoderOutput:
    sem_tokens: Tensor  # batch * causal_tokens x dim, grouped per image
    z_sem: Tensor  # batch x dim
    z_deg: Tensor | None  # batch x dim
    batch: int


@lru_cache(maxsize=32)
def _batch_mask(batch: int, tokens: int, cls: bool, bidirectional: bool,
                include_nc: bool) -> AttentionMask:
    n_patch = batch * tokens
    n = n_patch + (batch if cls else 0) + (batch if include_nc else 0)
    allowed = np.zeros((n, n), dtype=bool)
    cls0 = n_patch
    nc0 = n_patch + (batch if cls else 0)
    for i in range(batch):
        lo, hi = i * tokens, (i + 1) * tokens
        causal_cols = np.zeros(n, dtype=bool)
        causal_cols[lo:hi] = True
        if cls:
            causal_cols[cls0 + i] = True
        allowed[lo:hi] = causal_cols
        if cls:
            allowed[cls0 + i] = causal_cols
        if include_nc:
            row = causal_cols.copy()
            if bidirectional:
                row[nc0 + i] = True
                allowed[lo:hi, nc0 + i] = True
                if cls:
                    allowed[cls0 + i, nc0 + i] = True
            allowed[nc0 + i] = row
    return AttentionMask(allowed)


def forward_dual_batch(patch_stack, batch: int, weights, config: EncoderConfig,
                       include_nc: bool | None = None) -> BatchEncoderOutput:
    """Encode `batch` images stacked as one (batch*T) x patch_dim matrix.

    Equivalent to per-image forward_dual up to float reassociation; one
    attention call per head/layer instead of one per image.
    """
    wt = weights if isinstance(weights, Mapping) else wrap_weights(weights)
    if include_nc is None:
        include_nc = config.nc_enabled
    if config.nc_bidirectional and not include_nc:
        raise ValueError("bidirectional mode cannot drop the extra token")
    t_img = config.tokens
    cls = config.agg == "cls"
    if not isinstance(patch_stack, Tensor):
        patch_stack = Tensor(np.asarray(patch_stack, dtype=wt["patch_w"].dtype))
    if patch_stack.shape != (batch * t_img, config.patch_dim):
        raise ValueError(f"patch stack shape {patch_stack.shape} does not match "
                         f"{batch} images of {t_img} patches")

    x = T.add(T.matmul(patch_stack, wt["patch_w"]), wt["patch_b"])
    parts = [x]
    if cls:
        parts.append(T.gather_rows(wt["cls"], [0] * batch))
    if include_nc:
        parts.append(T.gather_rows(wt["z_nc0"], [0] * batch))
    s = T.concat_rows(parts) if len(parts) > 1 else x
    mask = _batch_mask(batch, t_img, cls, config.nc_bidirectional, include_nc)

    for i in range(config.layers):
        p = f"layers.{i}."
        sl = T.layer_norm(s, wt[p + "ln1_g"], wt[p + "ln1_b"])
        q = _proj(sl, wt, p, "q")
        k = _proj(sl, wt, p, "k")
        v = _proj(sl, wt, p, "v")
        attn = T.add(T.matmul(_attend(q, k, v, mask, config.heads), wt[p + "wo"]), wt[p + "bo"])
        s = T.add(s, attn)
        s = T.add(s, _mlp(T.layer_norm(s, wt[p + "ln2_g"], wt[p + "ln2_b"]), wt, p))

    n_patch = batch * t_img
    cls0 = n_patch
    nc0 = n_patch + (batch if cls else 0)
    if cls:
        idx = []
        for i in range(batch):
            idx.append(cls0 + i)
            idx.extend(range(i * t_img, (i + 1) * t_img))
        sem_tokens = T.gather_rows(s, idx)
        z_sem = T.gather_rows(s, [cls0 + i for i in range(batch)])
    else:
        sem_tokens = T.slice_rows(s, 0, n_patch) if len(parts) > 1 else s
        avg = np.zeros((batch, s.shape[0]), dtype=s.dtype)
        for i in range(batch):
            avg[i, i * t_img : (i + 1) * t_img] = 1.0 / t_img
        z_sem = T.matmul(Tensor(avg), s)
    z_deg = T.slice_rows(s, nc0, nc0 + batch) if include_nc else None
    return BatchEncoderOutput(sem_tokens, z_sem, z_deg, batch)


def forward_inference(image, weights, config: EncoderConfig, patches=None) -> Tensor:
    """Semantic embedding with the reader token entirely absent.

    Bit-identical to forward_dual(...).z_sem in the default one-way mode;
    refuses to run in bidirectional mode, where removing the token would
    silently change the result.
    """
    if config.nc_bidirectional:
        raise ValueError("inference without the extra token is undefined in bidirectional mode")
    wt = weights if isinstance(weights, Mapping) else wrap_weights(weights)
    return _forward(image, wt, config, include_nc=False, patches=patches).z_sem
