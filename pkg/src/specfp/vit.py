"""A small self-contained Vision Transformer with analytic gradients.

Pre-norm encoder blocks: Z' = Z + MSA(LN(Z)); Z_out = Z' + FFN(LN(Z')).
Patches are non-overlapping, flattened row-major (row, col, channel),
projected by a learned matrix, a class token is prepended and positional
embeddings are added to the full token sequence. The classification head
reads the final class-token state.

The backward pass is hand-written reverse-mode differentiation of this exact
forward computation; a central-finite-difference oracle in the tests pins it
to 1e-5 relative error. Everything is float64 numpy on purpose: gradient
checks at that tolerance are not meaningful in float32.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from scipy.special import erf

from .errors import NumericError, ValidationError

LN_EPS = 1e-12  # keeps LN output variance 1 to ~1e-12 for O(1) tokens
INIT_STD = 0.02
CHECKPOINT_FORMAT = "specfp-vit-v1"


@dataclass(frozen=True)
class VitConfig:
    embed_dim: int
    num_layers: int
    num_heads: int
    num_classes: int
    image_size: int = 224
    patch_size: int = 16
    mlp_dim: int | None = None

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValidationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ValidationError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if min(self.embed_dim, self.num_layers, self.num_heads, self.num_classes) < 1:
            raise ValidationError("all dimensions must be >= 1")
        if self.mlp_dim is None:
            object.__setattr__(self, "mlp_dim", 4 * self.embed_dim)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


@dataclass(eq=False)
class LayerParams:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass(eq=False)
class VitModel:
    config: VitConfig
    patch_embed: np.ndarray  # (d, P*P*3)
    patch_bias: np.ndarray  # (d,)
    pos_embed: np.ndarray  # (N+1, d)
    class_token: np.ndarray  # (d,)
    layers: list[LayerParams] = field(default_factory=list)
    head_weight: np.ndarray = None  # (num_classes, d)
    head_bias: np.ndarray = None  # (num_classes,)


def named_parameters(model: VitModel) -> Iterator[tuple[str, np.ndarray]]:
    yield "patch_embed", model.patch_embed
    yield "patch_bias", model.patch_bias
    yield "pos_embed", model.pos_embed
    yield "class_token", model.class_token
    for i, layer in enumerate(model.layers):
        for name in ("ln1_gain", "ln1_bias", "wq", "bq", "wk", "bk", "wv", "bv",
                     "wo", "bo", "ln2_gain", "ln2_bias", "w1", "b1", "w2", "b2"):
            yield f"layer{i}.{name}", getattr(layer, name)
    yield "head_weight", model.head_weight
    yield "head_bias", model.head_bias


def set_parameter(model: VitModel, name: str, value: np.ndarray) -> None:
    if name.startswith("layer"):
        idx_s, _, attr = name[5:].partition(".")
        setattr(model.layers[int(idx_s)], attr, value)
    else:
        setattr(model, name, value)


def _trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    # redraw anything beyond 2 std, the usual ViT init convention
    out = rng.normal(0.0, std, shape)
    while True:
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            return out
        out[bad] = rng.normal(0.0, std, int(bad.sum()))


def init_model(config: VitConfig, seed: int = 0) -> VitModel:
    rng = np.random.Generator(np.random.PCG64(seed))
    d = config.embed_dim
    mlp = config.mlp_dim
    layers = []
    for _ in range(config.num_layers):
        layers.append(LayerParams(
            ln1_gain=np.ones(d), ln1_bias=np.zeros(d),
            wq=_trunc_normal(rng, (d, d)), bq=np.zeros(d),
            wk=_trunc_normal(rng, (d, d)), bk=np.zeros(d),
            wv=_trunc_normal(rng, (d, d)), bv=np.zeros(d),
            wo=_trunc_normal(rng, (d, d)), bo=np.zeros(d),
            ln2_gain=np.ones(d), ln2_bias=np.zeros(d),
            w1=_trunc_normal(rng, (mlp, d)), b1=np.zeros(mlp),
            w2=_trunc_normal(rng, (d, mlp)), b2=np.zeros(d),
        ))
    return VitModel(
        config=config,
        patch_embed=_trunc_normal(rng, (d, config.patch_dim)),
        patch_bias=np.zeros(d),
        pos_embed=_trunc_normal(rng, (config.num_tokens, d)),
        class_token=_trunc_normal(rng, (d,)),
        layers=layers,
        head_weight=_trunc_normal(rng, (config.num_classes, d)),
        head_bias=np.zeros(config.num_classes),
    )


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


def _layernorm_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = centered * inv
    return xhat * gain + bias, (xhat, inv)


def _layernorm_backward(dy, cache, gain):
    xhat, inv = cache
    dgain = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dbias = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgain, dbias


def _patchify(imgs: np.ndarray, patch: int) -> np.ndarray:
    b, h, w, c = imgs.shape
    g = h // patch
    x = imgs.reshape(b, g, patch, g, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)  # (b, grid_row, grid_col, pr, pc, c)
    return x.reshape(b, g * g, patch * patch * c)


def _embed_forward(imgs: np.ndarray, model: VitModel):
    cfg = model.config
    patches = _patchify(imgs, cfg.patch_size)
    tok = patches @ model.patch_embed.T + model.patch_bias
    cls = np.broadcast_to(model.class_token, (imgs.shape[0], 1, cfg.embed_dim))
    z = np.concatenate([cls, tok], axis=1) + model.pos_embed
    return z, patches


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes; any number of
    leading stack axes (heads, batch)."""
    if q.shape != k.shape or q.shape != v.shape:
        raise ValidationError(f"Q/K/V shapes differ: {q.shape} {k.shape} {v.shape}")
    if q.shape[-1] < 1:
        raise ValidationError("d_k must be >= 1")
    scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    return softmax(scores) @ v


def _msa_forward(y: np.ndarray, layer: LayerParams, cfg: VitConfig):
    b, t, d = y.shape
    heads, dk = cfg.num_heads, cfg.head_dim

    def split(m):
        return m.reshape(b, t, heads, dk).transpose(0, 2, 1, 3)

    q = split(y @ layer.wq.T + layer.bq)
    k = split(y @ layer.wk.T + layer.bk)
    v = split(y @ layer.wv.T + layer.bv)
    scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(dk)
    attn = softmax(scores)
    ctx = attn @ v  # (b, heads, t, dk)
    merged = ctx.transpose(0, 2, 1, 3).reshape(b, t, d)
    out = merged @ layer.wo.T + layer.bo
    return out, (q, k, v, attn, merged)


def _msa_backward(dout: np.ndarray, y: np.ndarray, cache, layer: LayerParams,
                  cfg: VitConfig, grads: dict, prefix: str):
    q, k, v, attn, merged = cache
    b, t, d = y.shape
    heads, dk = cfg.num_heads, cfg.head_dim
    dout2 = dout.reshape(-1, d)
    grads[prefix + "wo"] = dout2.T @ merged.reshape(-1, d)
    grads[prefix + "bo"] = dout2.sum(axis=0)
    dmerged = (dout @ layer.wo).reshape(b, t, heads, dk).transpose(0, 2, 1, 3)
    dattn = dmerged @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(attn, -1, -2) @ dmerged
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dscores /= math.sqrt(dk)
    dq = dscores @ k
    dk_ = np.swapaxes(dscores, -1, -2) @ q

    def merge(m):
        return m.transpose(0, 2, 1, 3).reshape(-1, d)

    y2 = y.reshape(-1, d)
    dy = np.zeros_like(y)
    for name, dproj, w in (("q", dq, layer.wq), ("k", dk_, layer.wk), ("v", dv, layer.wv)):
        flat = merge(dproj)
        grads[prefix + "w" + name] = flat.T @ y2
        grads[prefix + "b" + name] = flat.sum(axis=0)
        dy += (flat @ w).reshape(b, t, d)
    return dy


def _layer_forward(z: np.ndarray, layer: LayerParams, cfg: VitConfig):
    y1, ln1_cache = _layernorm_forward(z, layer.ln1_gain, layer.ln1_bias)
    attn_out, msa_cache = _msa_forward(y1, layer, cfg)
    z_mid = z + attn_out
    y2, ln2_cache = _layernorm_forward(z_mid, layer.ln2_gain, layer.ln2_bias)
    h = y2 @ layer.w1.T + layer.b1
    a = _gelu(h)
    ffn_out = a @ layer.w2.T + layer.b2
    z_out = z_mid + ffn_out
    return z_out, (y1, ln1_cache, msa_cache, z_mid, y2, ln2_cache, h, a)


def _layer_backward(dz_out: np.ndarray, layer: LayerParams, cfg: VitConfig,
                    cache, grads: dict, prefix: str):
    y1, ln1_cache, msa_cache, z_mid, y2, ln2_cache, h, a = cache
    d = dz_out.shape[-1]
    da = dz_out @ layer.w2
    grads[prefix + "w2"] = dz_out.reshape(-1, d).T @ a.reshape(-1, a.shape[-1])
    grads[prefix + "b2"] = dz_out.reshape(-1, d).sum(axis=0)
    dh = da * _gelu_grad(h)
    grads[prefix + "w1"] = dh.reshape(-1, dh.shape[-1]).T @ y2.reshape(-1, d)
    grads[prefix + "b1"] = dh.reshape(-1, dh.shape[-1]).sum(axis=0)
    dy2 = dh @ layer.w1
    dz_mid_ln, dg2, db2 = _layernorm_backward(dy2, ln2_cache, layer.ln2_gain)
    grads[prefix + "ln2_gain"] = dg2
    grads[prefix + "ln2_bias"] = db2
    dz_mid = dz_out + dz_mid_ln
    dy1 = _msa_backward(dz_mid, y1, msa_cache, layer, cfg, grads, prefix)
    dz_ln, dg1, db1 = _layernorm_backward(dy1, ln1_cache, layer.ln1_gain)
    grads[prefix + "ln1_gain"] = dg1
    grads[prefix + "ln1_bias"] = db1
    return dz_mid + dz_ln


def _check_images(imgs: np.ndarray, cfg: VitConfig) -> np.ndarray:
    imgs = np.asarray(imgs, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[None]
    expected = (cfg.image_size, cfg.image_size, 3)
    if imgs.ndim != 4 or imgs.shape[1:] != expected:
        raise ValidationError(f"image batch shape {imgs.shape}, expected (*, {expected})")
    return imgs


def forward_batch(imgs: np.ndarray, model: VitModel, *, want_cache: bool = False):
    """Logits for a batch of standardized images; optionally keep the
    per-layer activations needed by backward()."""
    cfg = model.config
    imgs = _check_images(imgs, cfg)
    z, patches = _embed_forward(imgs, model)
    caches = []
    for i, layer in enumerate(model.layers):
        z, cache = _layer_forward(z, layer, cfg)
        if want_cache:
            caches.append(cache)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite activations after encoder layer {i}")
    cls_final = z[:, 0]
    logits = cls_final @ model.head_weight.T + model.head_bias
    if not np.all(np.isfinite(logits)):
        raise NumericError(f"non-finite logits after encoder layer {len(model.layers) - 1}")
    if want_cache:
        return logits, (patches, caches, cls_final)
    return logits


def embed_patches(img: np.ndarray, model: VitModel) -> np.ndarray:
    """Token matrix (N+1) x d for a single image."""
    imgs = _check_images(img, model.config)
    z, _ = _embed_forward(imgs, model)
    return z[0]


def encoder_layer(tokens: np.ndarray, layer: LayerParams, config: VitConfig) -> np.ndarray:
    """One pre-norm encoder block applied to a (N+1) x d token matrix."""
    z, _ = _layer_forward(tokens[None], layer, config)
    return z[0]


def forward(img: np.ndarray, model: VitModel) -> tuple[np.ndarray, int]:
    """Class probabilities and argmax prediction (lowest index wins ties)."""
    logits = forward_batch(img, model)[0]
    probs = softmax(logits)
    return probs, int(np.argmax(probs))


def smoothed_targets(labels: np.ndarray, num_classes: int, alpha: float) -> np.ndarray:
    """(1 - alpha) * one-hot + alpha / num_classes, rows sum to 1."""
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    targets = np.full((labels.size, num_classes), alpha / num_classes)
    targets[np.arange(labels.size), labels] += 1.0 - alpha
    return targets


def loss_smoothed_ce(logits: np.ndarray, labels, alpha: float) -> float:
    """Label-smoothed cross entropy, computed from logits via log-softmax so
    the result is finite for any finite logits."""
    if not 0.0 <= alpha < 1.0:
        raise ValidationError(f"alpha {alpha} outside [0, 1)")
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    targets = smoothed_targets(labels, logits.shape[1], alpha)
    if targets.shape[0] != logits.shape[0]:
        raise ValidationError("labels/logits batch size mismatch")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-(targets * log_probs).sum(axis=1).mean())


def backward(model: VitModel, imgs: np.ndarray, labels, alpha: float):
    """Mean-batch loss and analytic gradients for every parameter.

    Returns (loss, grads) with grads a dict keyed like named_parameters().
    """
    cfg = model.config
    imgs = _check_images(imgs, cfg)
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    if labels.size != imgs.shape[0]:
        raise ValidationError("labels/batch size mismatch")
    if labels.size == 0:
        raise ValidationError("empty batch")
    logits, (patches, caches, cls_final) = forward_batch(imgs, model, want_cache=True)
    loss = loss_smoothed_ce(logits, labels, alpha)

    b = imgs.shape[0]
    probs = softmax(logits)
    dlogits = (probs - smoothed_targets(labels, cfg.num_classes, alpha)) / b
    grads: dict[str, np.ndarray] = {}
    grads["head_weight"] = dlogits.T @ cls_final
    grads["head_bias"] = dlogits.sum(axis=0)
    dz = np.zeros((b, cfg.num_tokens, cfg.embed_dim))
    dz[:, 0] = dlogits @ model.head_weight
    for i in range(len(model.layers) - 1, -1, -1):
        dz = _layer_backward(dz, model.layers[i], cfg, caches[i], grads, f"layer{i}.")
    grads["pos_embed"] = dz.sum(axis=0)
    grads["class_token"] = dz[:, 0].sum(axis=0)
    dtok = dz[:, 1:]
    grads["patch_embed"] = (
        dtok.reshape(-1, cfg.embed_dim).T @ patches.reshape(-1, cfg.patch_dim)
    )
    grads["patch_bias"] = dtok.reshape(-1, cfg.embed_dim).sum(axis=0)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    return loss, grads


def save_checkpoint(model: VitModel, path) -> None:
    """Versioned container: config as JSON plus one named array per
    parameter (npz, so every tensor carries its shape header)."""
    arrays = {f"param:{name}": value for name, value in named_parameters(model)}
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": {k: getattr(model.config, k) for k in (
            "embed_dim", "num_layers", "num_heads", "num_classes",
            "image_size", "patch_size", "mlp_dim")},
    }
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> VitModel:
    with np.load(path) as data:
        if "__meta__" not in data:
            raise ValidationError("not a model checkpoint: missing metadata")
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValidationError(f"unsupported checkpoint format {meta.get('format')!r}")
        config = VitConfig(**meta["config"])
        model = init_model(config, seed=0)
        for name, current in named_parameters(model):
            key = f"param:{name}"
            if key not in data:
                raise ValidationError(f"checkpoint missing parameter {name}")
            stored = data[key]
            if stored.shape != current.shape:
                raise ValidationError(
                    f"checkpoint shape mismatch for {name}: "
                    f"{stored.shape} vs expected {current.shape}"
                )
            if not np.all(np.isfinite(stored)):
                raise ValidationError(f"non-finite values in checkpoint parameter {name}")
            set_parameter(model, name, stored.astype(np.float64))
    return model


def clone_parameters(model: VitModel) -> dict[str, np.ndarray]:
    return {name: value.copy() for name, value in named_parameters(model)}


def restore_parameters(model: VitModel, params: dict[str, np.ndarray]) -> None:
    for name, value in params.items():
        set_parameter(model, name, value.copy())
