"""Transformer QP-class predictor.

Input object crops are split into non-overlapping patches, linearly
projected, prepended with a learned class token, position-encoded, and run
through a pre-norm encoder stack.  The prediction head averages the
layer-normed patch tokens (the class token stays in the sequence for
checkpoint compatibility but is excluded from the pool) and maps the pooled
vector to ``num_classes`` logits, one per QP value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .resample import bicubic_resize_2d
from .tensor import (
    Parameter,
    Tensor,
    add,
    broadcast_to,
    concat,
    gelu,
    layer_norm,
    linear,
    mean,
    multi_head_attention,
    reshape,
    slice_axis,
    transpose,
)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 96
    patch_size: int = 32
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_dim: int = 128
    num_classes: int = 64

    def __post_init__(self):
        for field in ("image_size", "patch_size", "dim", "depth", "heads", "mlp_dim", "num_classes"):
            if getattr(self, field) <= 0:
                raise ConfigError(f"{field} must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    def to_dict(self) -> dict:
        return asdict(self)


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """[3, S, S] image -> [L, 3*patch^2] rows in raster order.

    Row i holds patch (i // g, i % g) flattened channel-first; implemented
    with reshape/transpose so gradients flow back to the image if needed.
    """
    if isinstance(image, np.ndarray):
        image = Tensor(image)
    squeeze = image.ndim == 3
    if squeeze:
        image = reshape(image, (1,) + image.shape)
    b, c, h, w = image.shape
    if h % patch_size != 0 or w % patch_size != 0:
        raise ContractError(
            f"image size {h}x{w} not divisible by patch size {patch_size}"
        )
    gh, gw = h // patch_size, w // patch_size
    x = reshape(image, (b, c, gh, patch_size, gw, patch_size))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    x = reshape(x, (b, gh * gw, c * patch_size * patch_size))
    return reshape(x, x.shape[1:]) if squeeze else x


def interpolate_pos_embed(pos_embed: np.ndarray, grid_new: int) -> np.ndarray:
    """Resize a [1+L, D] position table to a new square grid.

    The class-token row (index 0) is copied unchanged; the L grid rows are
    reshaped to sqrt(L) x sqrt(L) x D, bicubic-resized to grid_new**2 rows,
    and re-flattened in raster order.
    """
    pos = np.asarray(pos_embed)
    if pos.ndim != 2 or pos.shape[0] < 2:
        raise ContractError(f"pos_embed must be [1+L, D], got shape {pos.shape}")
    l_old = pos.shape[0] - 1
    side = math.isqrt(l_old)
    if side * side != l_old:
        raise ContractError(f"pos_embed grid length {l_old} is not a perfect square")
    if grid_new <= 0:
        raise ContractError(f"target grid must be positive, got {grid_new}")
    d = pos.shape[1]
    grid = pos[1:].reshape(side, side, d).astype(np.float64)
    resized = bicubic_resize_2d(grid, grid_new, grid_new)
    out = np.concatenate(
        [pos[:1].astype(np.float64), resized.reshape(grid_new * grid_new, d)], axis=0
    )
    return out.astype(pos.dtype)


class DTJRDModel:
    """QP-class transformer with named parameters."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        d, depth = config.dim, config.depth
        patch_dim = 3 * config.patch_size * config.patch_size

        def w(name, *shape, scale=0.02):
            return Parameter(name, rng.normal(0.0, scale, size=shape), dtype=dtype)

        def zeros(name, *shape):
            return Parameter(name, np.zeros(shape), dtype=dtype)

        def ones(name, *shape):
            return Parameter(name, np.ones(shape), dtype=dtype)

        params: list[Parameter] = [
            w("patch_embed.w", patch_dim, d),
            zeros("patch_embed.b", d),
            w("class_token", 1, 1, d),
            w("pos_embed", 1 + config.num_patches, d),
        ]
        for i in range(depth):
            p = f"blocks.{i}."
            params += [
                ones(p + "ln1.scale", d),
                zeros(p + "ln1.shift", d),
                w(p + "attn.qkv.w", d, 3 * d),
                zeros(p + "attn.qkv.b", 3 * d),
                w(p + "attn.proj.w", d, d),
                zeros(p + "attn.proj.b", d),
                ones(p + "ln2.scale", d),
                zeros(p + "ln2.shift", d),
                w(p + "mlp.w1", d, config.mlp_dim),
                zeros(p + "mlp.b1", config.mlp_dim),
                w(p + "mlp.w2", config.mlp_dim, d),
                zeros(p + "mlp.b2", d),
            ]
        params += [
            ones("final_ln.scale", d),
            zeros("final_ln.shift", d),
            w("head.w", d, config.num_classes),
            zeros("head.b", config.num_classes),
        ]
        self._params = {p.name: p for p in params}

    # -- parameter access ------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def named_parameters(self) -> dict[str, Parameter]:
        return dict(self._params)

    def param(self, name: str) -> Parameter:
        try:
            return self._params[name]
        except KeyError:
            raise ConfigError(f"unknown parameter {name!r}") from None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self._params.values())

    # -- forward ----------------------------------------------------------

    def encode(self, images, return_attention: bool = False):
        """[B, 3, S, S] crops -> final token sequence [B, 1+L, D]."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
        s = self.config.image_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
            raise ShapeError(
                f"expected images [B, 3, {s}, {s}], got {x.shape}"
            )
        b = x.shape[0]
        p = self._params

        tokens = linear(patchify(x, self.config.patch_size),
                        p["patch_embed.w"].tensor, p["patch_embed.b"].tensor)
        cls = broadcast_to(p["class_token"].tensor, (b, 1, self.config.dim))
        seq = add(concat([cls, tokens], axis=1), p["pos_embed"].tensor)

        attn_maps = []
        for i in range(self.config.depth):
            blk = f"blocks.{i}."
            normed = layer_norm(seq, p[blk + "ln1.scale"].tensor, p[blk + "ln1.shift"].tensor)
            attended = multi_head_attention(
                normed,
                p[blk + "attn.qkv.w"].tensor, p[blk + "attn.qkv.b"].tensor,
                p[blk + "attn.proj.w"].tensor, p[blk + "attn.proj.b"].tensor,
                heads=self.config.heads,
                return_weights=return_attention,
            )
            if return_attention:
                attended, weights = attended
                attn_maps.append(weights)
            seq = add(seq, attended)
            normed = layer_norm(seq, p[blk + "ln2.scale"].tensor, p[blk + "ln2.shift"].tensor)
            hidden = gelu(linear(normed, p[blk + "mlp.w1"].tensor, p[blk + "mlp.b1"].tensor))
            seq = add(seq, linear(hidden, p[blk + "mlp.w2"].tensor, p[blk + "mlp.b2"].tensor))
        if return_attention:
            return seq, attn_maps
        return seq

    def head_from_tokens(self, seq: Tensor) -> Tensor:
        """Average the layer-normed patch tokens (class token excluded) and
        project to class logits."""
        p = self._params
        patch_tokens = slice_axis(seq, 1, 1, 1 + self.config.num_patches)
        pooled = mean(
            layer_norm(patch_tokens, p["final_ln.scale"].tensor, p["final_ln.shift"].tensor),
            axis=1,
        )
        return linear(pooled, p["head.w"].tensor, p["head.b"].tensor)

    def forward(self, images, return_attention: bool = False):
        """[B, 3, S, S] crops -> [B, num_classes] logits."""
        if return_attention:
            seq, attn_maps = self.encode(images, return_attention=True)
            return self.head_from_tokens(seq), attn_maps
        return self.head_from_tokens(self.encode(images))

    __call__ = forward


def predict_jrd(logits, decode: str = "argmax"):
    """Logits -> QP class.

    ``argmax`` breaks exact ties toward the smaller index (the safer, lower
    QP).  ``expectation`` decodes round(sum_x x * softmax(logits)) instead.
    1-D input yields an int; 2-D input yields an int array per row.
    """
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.size == 0:
        raise ContractError("predict_jrd on empty logits")
    if arr.ndim not in (1, 2):
        raise ContractError(f"logits must be 1-D or 2-D, got shape {arr.shape}")
    if decode == "argmax":
        idx = np.argmax(arr, axis=-1)
    elif decode == "expectation":
        shifted = arr - arr.max(axis=-1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=-1, keepdims=True)
        classes = np.arange(arr.shape[-1])
        idx = np.rint(probs @ classes).astype(np.int64)
    else:
        raise ConfigError(f"unknown decode rule {decode!r}")
    return int(idx) if arr.ndim == 1 else idx.astype(np.int64)
