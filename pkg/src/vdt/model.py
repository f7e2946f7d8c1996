"""View-decoupled transformer and its baseline ViT counterpart."""
from __future__ import annotations

import dataclasses
import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .errors import ConfigError, InputError

MODES = ("vdt", "baseline_vit")


@dataclass
class ModelConfig:
    image_height: int = 32
    image_width: int = 16
    patch_size: int = 8
    in_channels: int = 3
    num_blocks: int = 4
    embed_dim: int = 64
    num_heads: int = 4
    mlp_ratio: float = 4.0
    mode: str = "vdt"
    disable_subtraction: bool = False
    num_identities: int = 64
    ln_eps: float = 1e-6
    final_norm: bool = True
    bn_neck: bool = True
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self):
        p = self.patch_size
        if p <= 0 or self.image_height % p or self.image_width % p:
            raise ConfigError(
                f"image {self.image_height}x{self.image_width} is not tiled by patch size {p}")
        if self.embed_dim <= 0 or self.num_heads <= 0 or self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.num_blocks < 0:
            raise ConfigError("num_blocks must be >= 0")
        if self.num_identities < 1:
            raise ConfigError("num_identities must be >= 1")
        if self.hidden_dim < 1:
            raise ConfigError("mlp_ratio too small for embed_dim")

    @property
    def num_patches(self):
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    @property
    def num_tokens(self):
        return self.num_patches + (2 if self.mode == "vdt" else 1)

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.in_channels

    @property
    def hidden_dim(self):
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def paper_scale_config(**overrides):
    """ViT-Base shapes: 256x128 input, 16px patches, N=12, d=768."""
    base = dict(image_height=256, image_width=128, patch_size=16, num_blocks=12,
                embed_dim=768, num_heads=12)
    base.update(overrides)
    return ModelConfig(**base)


def _param_shapes(config):
    d, h = config.embed_dim, config.hidden_dim
    shapes = OrderedDict()
    shapes["patch_embed.weight"] = (config.patch_dim, d)
    shapes["patch_embed.bias"] = (d,)
    shapes["meta_token"] = (d,)
    if config.mode == "vdt":
        shapes["view_token"] = (d,)
    shapes["pos_embed"] = (config.num_tokens, d)
    for j in range(config.num_blocks):
        b = f"blocks.{j}."
        shapes[b + "norm1.gain"] = (d,)
        shapes[b + "norm1.bias"] = (d,)
        shapes[b + "attn.qkv.weight"] = (d, 3 * d)
        shapes[b + "attn.q_bias"] = (d,)
        shapes[b + "attn.v_bias"] = (d,)
        shapes[b + "attn.proj.weight"] = (d, d)
        shapes[b + "attn.proj.bias"] = (d,)
        shapes[b + "norm2.gain"] = (d,)
        shapes[b + "norm2.bias"] = (d,)
        shapes[b + "mlp.fc1.weight"] = (d, h)
        shapes[b + "mlp.fc1.bias"] = (h,)
        shapes[b + "mlp.fc2.weight"] = (h, d)
        shapes[b + "mlp.fc2.bias"] = (d,)
    if config.final_norm:
        shapes["norm.gain"] = (d,)
        shapes["norm.bias"] = (d,)
    shapes["id_head.weight"] = (d, config.num_identities)
    shapes["id_head.bias"] = (config.num_identities,)
    if config.mode == "vdt":
        shapes["view_head.weight"] = (d, 2)
        shapes["view_head.bias"] = (2,)
    if config.bn_neck:
        # running statistics of the identity neck; state, not learnable
        shapes["neck.running_mean"] = (d,)
        shapes["neck.running_var"] = (d,)
    return shapes


BUFFERS = ("neck.running_mean", "neck.running_var")


def _trunc_normal(rng, shape, std=0.02):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


# truncated-normal(0.02) init; every other weight matrix is Xavier-uniform
_TOKEN_PARAMS = ("meta_token", "view_token", "pos_embed")


class ModelParams:
    """Named learnable tensors of one model, in a fixed canonical order."""

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = OrderedDict(tensors)

    @classmethod
    def init(cls, config, seed=0, dtype=None):
        rng = np.random.default_rng(seed)
        tensors = OrderedDict()
        for name, shape in _param_shapes(config).items():
            if name in BUFFERS:
                value = np.ones(shape) if name.endswith("var") else np.zeros(shape)
                tensors[name] = nk.tensor(value, requires_grad=False, name=name, dtype=dtype)
                continue
            if name == "norm.gain":
                # output features start near unit norm so the squared-distance
                # triplet does not swamp the classifier early on
                value = np.full(shape, config.embed_dim ** -0.5)
            elif name.endswith(".gain"):
                value = np.ones(shape)
            elif name.endswith("bias"):
                value = np.zeros(shape)
            elif name in _TOKEN_PARAMS:
                value = _trunc_normal(rng, shape)
            else:
                limit = math.sqrt(6.0 / (shape[0] + shape[1]))
                value = rng.uniform(-limit, limit, shape)
            tensors[name] = nk.tensor(value, requires_grad=True, name=name, dtype=dtype)
        return cls(config, tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    def learnable(self):
        return [t for n, t in self.tensors.items() if n not in BUFFERS]

    def num_parameters(self):
        return sum(t.size for n, t in self.tensors.items() if n not in BUFFERS)

    def copy(self):
        return ModelParams(self.config, OrderedDict(
            (n, nk.tensor(t.data.copy(), requires_grad=t.requires_grad, name=n, dtype=t.dtype))
            for n, t in self.tensors.items()))


def param_count(config):
    """Closed-form number of learnable scalars for ``config``."""
    d, h, c = config.embed_dim, config.hidden_dim, config.num_identities
    # query/value biases only: a key bias shifts each softmax row uniformly
    per_block = 4 * d + (3 * d * d + 2 * d) + (d * d + d) + (d * h + h) + (h * d + d)
    total = config.patch_dim * d + d      # patch projection
    total += d                            # meta / class token
    total += config.num_patches * d + d   # positional rows for patches + meta
    total += config.num_blocks * per_block
    if config.final_norm:
        total += 2 * d                    # shared output LayerNorm
    total += d * c + c                    # identity head
    if config.mode == "vdt":
        total += d                        # view token
        total += d                        # positional row of the view token
        total += 2 * d + 2                # view head
    return total


def param_delta(config):
    """Extra parameters of VDT over the baseline ViT built from the same config."""
    return (param_count(config.replace(mode="vdt"))
            - param_count(config.replace(mode="baseline_vit")))


# -- forward pieces --------------------------------------------------------------

def patchify(images, config):
    """Split ``(B,H,W,C)`` or ``(H,W,C)`` images into flattened patches.

    Patches follow the patch grid in row-major order, and each patch is
    flattened (row, column, channel) row-major.
    """
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4:
        raise InputError(f"expected (B,H,W,C) images, got shape {images.shape}")
    _, H, W, C = images.shape
    p = config.patch_size
    if H % p or W % p:
        raise ConfigError(f"image {H}x{W} is not tiled by patch size {p}")
    if (H, W, C) != (config.image_height, config.image_width, config.in_channels):
        raise InputError(
            f"image shape {(H, W, C)} does not match configured "
            f"{(config.image_height, config.image_width, config.in_channels)}")
    B = images.shape[0]
    gh, gw = H // p, W // p
    patches = images.reshape(B, gh, p, gw, p, C).transpose(0, 1, 3, 2, 4, 5)
    patches = patches.reshape(B, gh * gw, p * p * C)
    return patches[0] if single else patches


def embed_patches(patches, params):
    x = nk.tensor(patches, dtype=params["patch_embed.weight"].dtype)
    return nk.linear(x, params["patch_embed.weight"], params["patch_embed.bias"])


def serialize(patch_tokens, params):
    """[meta; patches; view] + positional embedding, for a ``(B,M,d)`` batch."""
    B, M, d = patch_tokens.shape
    parts = [nk.broadcast_to(nk.reshape(params["meta_token"], (1, 1, d)), (B, 1, d)),
             patch_tokens]
    if "view_token" in params:
        parts.append(nk.broadcast_to(nk.reshape(params["view_token"], (1, 1, d)), (B, 1, d)))
    seq = nk.concat(parts, axis=1)
    if seq.shape[1] != params["pos_embed"].shape[0]:
        raise InputError(
            f"{seq.shape[1]} tokens but positional embedding has {params['pos_embed'].shape[0]} rows")
    return seq + params["pos_embed"]


def attention(x, params, prefix, num_heads, trace=None):
    B, T, d = x.shape
    dh = d // num_heads
    q_bias = params[prefix + "q_bias"]
    bias = nk.concat([q_bias, nk.tensor(np.zeros(d), dtype=q_bias.dtype), params[prefix + "v_bias"]])
    qkv = nk.linear(x, params[prefix + "qkv.weight"], bias)
    qkv = qkv.reshape(B, T, 3, num_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    weights = nk.softmax_rows(scores)
    if trace is not None:
        trace["attention"] = weights.data
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
    return nk.linear(ctx, params[prefix + "proj.weight"], params[prefix + "proj.bias"])


def encoder_layer(x, params, prefix, config, trace=None):
    """Pre-norm transformer encoder layer: x + MHSA(LN(x)), then x + MLP(LN(x))."""
    eps = config.ln_eps
    h = nk.layer_norm(x, params[prefix + "norm1.gain"], params[prefix + "norm1.bias"], eps)
    x = x + attention(h, params, prefix + "attn.", config.num_heads, trace)
    h = nk.layer_norm(x, params[prefix + "norm2.gain"], params[prefix + "norm2.bias"], eps)
    h = nk.gelu(nk.linear(h, params[prefix + "mlp.fc1.weight"], params[prefix + "mlp.fc1.bias"]))
    return x + nk.linear(h, params[prefix + "mlp.fc2.weight"], params[prefix + "mlp.fc2.bias"])


def subtract_view_from_meta(x):
    """Overwrite token 0 with token 0 minus the last token; other tokens pass through."""
    out = x.data.copy()
    out[:, 0] = x.data[:, 0] - x.data[:, -1]

    def backward(g):
        gx = g.copy()
        gx[:, -1] -= g[:, 0]
        return (gx,)

    return nk._make(out, (x,), backward, "subtractive_separation")


def vdt_block(x, params, index, config, trace=None):
    record = {} if trace is not None else None
    x = encoder_layer(x, params, f"blocks.{index}.", config, record)
    if record is not None:
        record["post_meta"] = x.data[:, 0].copy()
        if config.mode == "vdt":
            record["post_view"] = x.data[:, -1].copy()
    if config.mode == "vdt" and not config.disable_subtraction:
        x = subtract_view_from_meta(x)
    if record is not None:
        record["out_meta"] = x.data[:, 0].copy()
        trace.append(record)
    return x


def forward(images, params, config=None, trace=None):
    """Final meta and view tokens for a batch of ``(B,H,W,C)`` images.

    Returns ``(meta, view)``; ``view`` is None in baseline mode.  When a list
    is passed as ``trace`` one record per block is appended holding the
    attention weights and the meta/view tokens around the subtraction.
    """
    config = config or params.config
    images = np.asarray(images)
    if images.ndim != 4:
        raise InputError(f"expected (B,H,W,C) images, got shape {images.shape}")
    x = serialize(embed_patches(patchify(images, config), params), params)
    for j in range(config.num_blocks):
        x = vdt_block(x, params, j, config, trace)
    if config.final_norm:
        x = nk.layer_norm(x, params["norm.gain"], params["norm.bias"], config.ln_eps)
    meta = x[:, 0]
    view = x[:, -1] if config.mode == "vdt" else None
    return meta, view


def batch_standardize(x, eps=1e-5):
    """Per-feature standardisation over the batch axis of a ``(B, d)`` tensor."""
    mu = nk.mean(x, axis=0, keepdims=True)
    xc = x - mu
    var = nk.mean(xc * xc, axis=0, keepdims=True)
    return xc / nk.sqrt(var + eps), mu.data[0], var.data[0]


def id_neck(meta, params, training=False, eps=1e-5):
    """Parameter-free batch norm in front of the identity classifier.

    Training uses batch statistics and updates the running estimates;
    inference uses the running estimates.
    """
    config = params.config
    if not config.bn_neck:
        return meta
    mean_buf, var_buf = params["neck.running_mean"], params["neck.running_var"]
    if training:
        if meta.shape[0] < 2:
            raise InputError("batch statistics need at least two samples")
        out, mu, var = batch_standardize(meta, eps)
        m = config.bn_momentum
        mean_buf.data[...] = (1 - m) * mean_buf.data + m * mu
        var_buf.data[...] = (1 - m) * var_buf.data + m * var
        return out
    return (meta - mean_buf.data) / np.sqrt(var_buf.data + eps)


def heads(meta, view, params, training=False):
    """Identity and view logits; the identity branch goes through the neck."""
    id_logits = nk.linear(id_neck(meta, params, training), params["id_head.weight"],
                          params["id_head.bias"])
    view_logits = None
    if view is not None:
        view_logits = nk.linear(view, params["view_head.weight"], params["view_head.bias"])
    return id_logits, view_logits


def extract_features(images, params, config=None, batch_size=64):
    """Meta-token retrieval features as a numpy array, without recording the tape."""
    images = np.asarray(images)
    out = []
    with nk.no_grad():
        for start in range(0, len(images), batch_size):
            meta, _ = forward(images[start:start + batch_size], params, config)
            out.append(meta.data)
    if not out:
        return np.zeros((0, (config or params.config).embed_dim))
    return np.concatenate(out, axis=0)
