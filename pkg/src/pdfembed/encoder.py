"""Patch transformer with N+1 class tokens, written against numpy.

The forward pass prepends the same learned class tokens ``C0`` to the patch
tokens of every image (real or generated) and returns the final-layer states
of those N+1 tokens. Backward is hand-derived; ``tests/test_gradients.py``
checks it against central differences.

Architecture (pre-norm)::

    tokens = [C0 ; patches @ W_patch + b_patch + pos]
    for each layer:  x = x + MHA(LN1(x));  x = x + MLP(LN2(x))
    out    = LN_final(x)[:, :N+1]
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionMismatch, Divergence, ZeroNorm

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 16
    channels: int = 1
    patch_size: int = 4
    embed_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    mlp_ratio: int = 2
    N: int = 5

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.num_layers < 1 or self.N < 1:
            raise ValueError("num_layers and N must be >= 1")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")

    @property
    def num_tokens(self) -> int:
        return self.N + 1

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def hidden_dim(self) -> int:
        return self.mlp_ratio * self.embed_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fields = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in fields})


def param_shapes(config: ModelConfig) -> "OrderedDict[str, tuple]":
    """Parameter names and shapes in declaration (= checkpoint) order."""
    D, H = config.embed_dim, config.hidden_dim
    shapes = OrderedDict()
    shapes["patch_w"] = (config.patch_dim, D)
    shapes["patch_b"] = (D,)
    shapes["pos"] = (config.num_patches, D)
    shapes["cls"] = (config.num_tokens, D)
    for l in range(config.num_layers):
        shapes[f"l{l}.ln1_g"] = (D,)
        shapes[f"l{l}.ln1_b"] = (D,)
        shapes[f"l{l}.qkv_w"] = (D, 3 * D)
        shapes[f"l{l}.qkv_b"] = (3 * D,)
        shapes[f"l{l}.proj_w"] = (D, D)
        shapes[f"l{l}.proj_b"] = (D,)
        shapes[f"l{l}.ln2_g"] = (D,)
        shapes[f"l{l}.ln2_b"] = (D,)
        shapes[f"l{l}.fc1_w"] = (D, H)
        shapes[f"l{l}.fc1_b"] = (H,)
        shapes[f"l{l}.fc2_w"] = (H, D)
        shapes[f"l{l}.fc2_b"] = (D,)
    shapes["lnf_g"] = (D,)
    shapes["lnf_b"] = (D,)
    return shapes


class ModelParams(OrderedDict):
    """Name -> float64 array, ordered as ``param_shapes``."""

    def copy(self) -> "ModelParams":
        return ModelParams((k, v.copy()) for k, v in self.items())

    def zeros_like(self) -> "ModelParams":
        return ModelParams((k, np.zeros_like(v)) for k, v in self.items())

    def num_scalars(self) -> int:
        return sum(v.size for v in self.values())

    def flat_index(self):
        """``[(name, flat_offset), ...]`` for every scalar, in order."""
        return [(k, i) for k, v in self.items() for i in range(v.size)]


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    params = ModelParams()
    for name, shape in param_shapes(config).items():
        short = name.split(".")[-1]
        if name in ("pos", "cls"):
            arr = rng.normal(0.0, 0.02, size=shape)
        elif short.endswith("_w"):
            fan_in, fan_out = shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-bound, bound, size=shape)
        elif short.endswith("_g"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(np.float64)
    return params


def check_params(params: ModelParams, config: ModelConfig) -> None:
    for name, shape in param_shapes(config).items():
        if name not in params:
            raise DimensionMismatch(f"missing parameter {name}")
        if params[name].shape != shape:
            raise DimensionMismatch(f"{name}: shape {params[name].shape} != {shape}")
        if not np.all(np.isfinite(params[name])):
            raise Divergence(f"parameter {name} is not finite", step=-1)


# ----------------------------------------------------------------------------
# building blocks


def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _ln_bwd(dy, cache):
    xhat, rstd, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axes)
    db = dy.sum(axes)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu(z):
    t = np.tanh(_GELU_C * z * (1.0 + 0.044715 * z * z))
    return 0.5 * z * (1.0 + t), t


def _gelu_grad(z, t):
    # 0.5 (1 + t) + 0.5 z (1 - t^2) c (1 + 3 * 0.044715 z^2), with few temporaries
    out = z * z
    out *= 3 * 0.044715
    out += 1.0
    out *= z
    out *= 0.5 * _GELU_C
    tt = t * t
    np.subtract(1.0, tt, out=tt)
    out *= tt
    out += 0.5
    tt = 0.5 * t
    out += tt
    return out


def _outer_sum(a, b):
    """``sum over (m, t) of a[m, t, :]^T b[m, t, :]`` as one matmul."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _softmax(s):
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(-1, keepdims=True)


def patchify(images: np.ndarray, config: ModelConfig) -> np.ndarray:
    """``(M, C, H, W)`` -> ``(M, P, p*p*C)`` in raster order of patches."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[:, None]
    M, C, H, W = images.shape
    s, p = config.image_size, config.patch_size
    if (C, H, W) != (config.channels, s, s):
        raise DimensionMismatch(
            f"image shape {(C, H, W)} does not match config {(config.channels, s, s)}")
    g = s // p
    x = images.reshape(M, C, g, p, g, p).transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(M, g * g, p * p * C)


# ----------------------------------------------------------------------------
# forward / backward over a stack of images


def forward_batch(params: ModelParams, config: ModelConfig, images: np.ndarray,
                  keep_cache: bool = False):
    """Encode ``(M, C, H, W)`` images to ``(M, N+1, D)`` class-token states."""
    patches = patchify(images, config)
    M = patches.shape[0]
    K, D, nh = config.num_tokens, config.embed_dim, config.num_heads
    dh = D // nh
    T = K + config.num_patches
    scale = 1.0 / math.sqrt(dh)

    xp = patches @ params["patch_w"] + params["patch_b"] + params["pos"]
    x = np.concatenate([np.broadcast_to(params["cls"], (M, K, D)), xp], axis=1)
    caches = []
    for l in range(config.num_layers):
        p = f"l{l}."
        a, ln1 = _ln_fwd(x, params[p + "ln1_g"], params[p + "ln1_b"])
        qkv = a @ params[p + "qkv_w"] + params[p + "qkv_b"]
        qkv = qkv.reshape(M, T, 3, nh, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = _softmax(q @ k.transpose(0, 1, 3, 2) * scale)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(M, T, D)
        x = x + o @ params[p + "proj_w"] + params[p + "proj_b"]
        a2, ln2 = _ln_fwd(x, params[p + "ln2_g"], params[p + "ln2_b"])
        z = a2 @ params[p + "fc1_w"] + params[p + "fc1_b"]
        u, t = _gelu(z)
        x = x + u @ params[p + "fc2_w"] + params[p + "fc2_b"]
        if keep_cache:
            caches.append((a, ln1, q, k, v, att, o, a2, ln2, z, u, t))
    # only the class tokens are consumed; skip normalising patch tokens
    out, lnf = _ln_fwd(x[:, :K], params["lnf_g"], params["lnf_b"])
    if not keep_cache:
        return out
    return out, (patches, caches, lnf, M, T)


def backward_batch(params: ModelParams, config: ModelConfig, cache, dout: np.ndarray) -> ModelParams:
    """Gradients of a scalar loss w.r.t. all parameters given ``dL/d out``."""
    patches, caches, lnf, M, T = cache
    K, D, nh = config.num_tokens, config.embed_dim, config.num_heads
    dh = D // nh
    scale = 1.0 / math.sqrt(dh)
    grads = params.zeros_like()

    dxk, grads["lnf_g"], grads["lnf_b"] = _ln_bwd(dout, lnf)
    dx = np.zeros((M, T, D))
    dx[:, :K] = dxk
    for l in reversed(range(config.num_layers)):
        p = f"l{l}."
        a, ln1, q, k, v, att, o, a2, ln2, z, u, t = caches[l]
        # MLP branch
        grads[p + "fc2_w"] = _outer_sum(u, dx)
        grads[p + "fc2_b"] = dx.sum((0, 1))
        dz = (dx @ params[p + "fc2_w"].T) * _gelu_grad(z, t)
        grads[p + "fc1_w"] = _outer_sum(a2, dz)
        grads[p + "fc1_b"] = dz.sum((0, 1))
        da2 = dz @ params[p + "fc1_w"].T
        dxl, grads[p + "ln2_g"], grads[p + "ln2_b"] = _ln_bwd(da2, ln2)
        dx = dx + dxl
        # attention branch
        grads[p + "proj_w"] = _outer_sum(o, dx)
        grads[p + "proj_b"] = dx.sum((0, 1))
        do = (dx @ params[p + "proj_w"].T).reshape(M, T, nh, dh).transpose(0, 2, 1, 3)
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(M, T, 3 * D)
        grads[p + "qkv_w"] = _outer_sum(a, dqkv)
        grads[p + "qkv_b"] = dqkv.sum((0, 1))
        da = dqkv @ params[p + "qkv_w"].T
        dxl, grads[p + "ln1_g"], grads[p + "ln1_b"] = _ln_bwd(da, ln1)
        dx = dx + dxl

    grads["cls"] = dx[:, :K].sum(0)
    dxp = dx[:, K:]
    grads["pos"] = dxp.sum(0)
    grads["patch_b"] = dxp.sum((0, 1))
    grads["patch_w"] = _outer_sum(patches, dxp)
    return grads


# ----------------------------------------------------------------------------
# per-image API and similarity heads


def forward(params: ModelParams, config: ModelConfig, image: np.ndarray) -> np.ndarray:
    """VectorSet of one image: ``(N+1, D)``, every row with nonzero norm."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    out = forward_batch(params, config, image[None])[0]
    if np.any(np.linalg.norm(out, axis=-1) == 0):
        raise ZeroNorm("encoder produced a zero-norm representative vector")
    return out


def encode(params: ModelParams, config: ModelConfig, images: np.ndarray,
           batch_size: int = 256) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[:, None]
    chunks = [forward_batch(params, config, images[i:i + batch_size])
              for i in range(0, len(images), batch_size)]
    if not chunks:
        return np.zeros((0, config.num_tokens, config.embed_dim))
    return np.concatenate(chunks)


def predict_raw(vs_r: np.ndarray, vs_g: np.ndarray) -> np.ndarray:
    """Per-level cosine similarities ``h`` between corresponding vectors.

    Works on a single pair ``(K, D)`` or a stack ``(..., K, D)``.
    """
    vs_r = np.asarray(vs_r, dtype=np.float64)
    vs_g = np.asarray(vs_g, dtype=np.float64)
    if vs_r.shape != vs_g.shape:
        raise DimensionMismatch(f"vector sets differ in shape: {vs_r.shape} vs {vs_g.shape}")
    nr = np.linalg.norm(vs_r, axis=-1)
    ng = np.linalg.norm(vs_g, axis=-1)
    if np.any(nr == 0) or np.any(ng == 0):
        raise ZeroNorm("zero-norm representative vector")
    h = np.einsum("...kd,...kd->...k", vs_r, vs_g) / (nr * ng)
    return np.clip(h, -1.0, 1.0)


def normalize_h(h: np.ndarray, tau: float = 0.1) -> np.ndarray:
    """Softmax of ``h / tau`` along the last axis."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    h = np.asarray(h, dtype=np.float64)
    if not np.all(np.isfinite(h)):
        raise ValueError("non-finite similarity")
    return _softmax(h / tau)


# Cosines this close to 1 on every level mean the two vector sets coincide.
DUPLICATE_TOL = 1e-6


def level_from_h(h: np.ndarray) -> np.ndarray:
    """Argmax level with the lowest index winning ties.

    A pair whose cosines all sit at the ceiling (within ``DUPLICATE_TOL``) is a
    duplicate and gets the top level; plain argmax would fall back to 0 there
    because every entry ties.
    """
    h = np.asarray(h, dtype=np.float64)
    j = np.argmax(h, axis=-1)  # numpy returns the first maximum
    dup = np.all(h >= 1.0 - DUPLICATE_TOL, axis=-1)
    return np.where(dup, h.shape[-1] - 1, j)


def predict_level(vs_r: np.ndarray, vs_g: np.ndarray, grid=None):
    """``(j, j / N)`` for one pair of vector sets."""
    h = predict_raw(vs_r, vs_g)
    N = h.shape[-1] - 1 if grid is None else grid.N
    if h.shape[-1] != N + 1:
        raise DimensionMismatch(f"{h.shape[-1]} similarities for N={N}")
    j = int(level_from_h(h))
    return j, j / N


def backward(params: ModelParams, config: ModelConfig, batch, objective, reduction: str = "mean"):
    """Loss and parameter gradients for a batch of pairs.

    ``batch`` is ``(real_images, gen_images, levels)``; ``objective`` an
    ``objectives.ObjectiveSpec``. Real and generated images go through one
    forward pass with shared weights.
    """
    from .objectives import loss_and_grad

    real, gen, levels = batch
    real = np.asarray(real, dtype=np.float64)
    gen = np.asarray(gen, dtype=np.float64)
    B = len(real)
    out, cache = forward_batch(params, config, np.concatenate([real, gen]), keep_cache=True)
    loss, dvr, dvg = loss_and_grad(out[:B], out[B:], np.asarray(levels), objective, config.N,
                                   reduction=reduction)
    if not np.isfinite(loss):
        raise Divergence(f"non-finite loss {loss}", step=-1)
    grads = backward_batch(params, config, cache, np.concatenate([dvr, dvg]))
    return loss, grads
