"""Joint audio/semantic embedding network with hand-written gradients.

Audio branch, for a ``(T, D)`` chunk:

    [conv1d(width k_i) -> ReLU -> maxpool(p_i)] * n_layers
    -> conv1d(width 1, E channels) -> mean over time  = y_A

The first convolution spans all D input bins; later ones mix channels over
time only. Semantic branch: ``y_W = relu(w @ W_sem + b_sem)``.
Relevance is the cosine of ``y_A`` and ``y_W``; the ranking loss is
``max(0, margin - rel(A, W+) + rel(A, W-))``. The classification baseline
puts a sigmoid layer of size ``n_classes`` on ``y_A`` instead.

All arrays are float64 and batched over the leading axis.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from zsltag.errors import ConfigError, DataError


@dataclass(frozen=True)
class EncoderConfig:
    input_frames: int = 130
    input_bins: int = 128
    conv_channels: tuple[int, ...] = (64, 64, 64, 64)
    conv_widths: tuple[int, ...] = (4, 4, 4, 4)
    pool_widths: tuple[int, ...] = (4, 2, 2, 2)
    embedding_dim: int = 256
    semantic_dim: int = 300
    semantic_activation: str = "relu"
    n_classes: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "conv_widths", tuple(self.conv_widths))
        object.__setattr__(self, "pool_widths", tuple(self.pool_widths))
        n = len(self.conv_channels)
        if n < 1 or len(self.conv_widths) != n or len(self.pool_widths) != n:
            raise ConfigError("conv_channels, conv_widths and pool_widths must have the same non-zero length")
        if self.semantic_activation not in ("relu", "linear"):
            raise ConfigError(f"semantic_activation must be 'relu' or 'linear', got {self.semantic_activation!r}")
        if min(self.embedding_dim, self.semantic_dim, self.input_bins, self.input_frames) < 1:
            raise ConfigError("dimensions must be positive")
        if self.output_frames() < 1:
            raise ConfigError(f"{self.input_frames} input frames are pooled away before the head layer")

    def output_frames(self) -> int:
        t = self.input_frames
        for k, p in zip(self.conv_widths, self.pool_widths):
            t = (t - k + 1) // p
            if t < 1:
                return 0
        return t

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter shapes in the canonical (checkpoint) order."""
        out = {}
        c_in = self.input_bins
        for i, (c, k) in enumerate(zip(self.conv_channels, self.conv_widths)):
            out[f"conv{i}.W"] = (k, c_in, c)
            out[f"conv{i}.b"] = (c,)
            c_in = c
        out["head.W"] = (1, c_in, self.embedding_dim)
        out["head.b"] = (self.embedding_dim,)
        out["sem.W"] = (self.semantic_dim, self.embedding_dim)
        out["sem.b"] = (self.embedding_dim,)
        if self.n_classes:
            out["cls.W"] = (self.embedding_dim, self.n_classes)
            out["cls.b"] = (self.n_classes,)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def paper_profile(semantic_dim: int, input_bins: int = 128, n_classes: int = 0) -> EncoderConfig:
    """Four 64-channel conv layers over 128 mel bins, 256-d embedding."""
    return EncoderConfig(input_bins=input_bins, semantic_dim=semantic_dim, n_classes=n_classes)


def tiny_profile(semantic_dim: int, input_bins: int = 128, n_classes: int = 0, input_frames: int = 130) -> EncoderConfig:
    return EncoderConfig(
        input_frames=input_frames,
        input_bins=input_bins,
        conv_channels=(8, 8),
        conv_widths=(4, 4),
        pool_widths=(4, 2),
        embedding_dim=16,
        semantic_dim=semantic_dim,
        n_classes=n_classes,
    )


PROFILES = {"paper": paper_profile, "tiny": tiny_profile}


@dataclass
class ModelParams:
    config: EncoderConfig
    tensors: dict[str, np.ndarray]
    seed: int | None = None
    classes: tuple[int, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = self.config.shapes()
        if list(self.tensors) != list(expected):
            raise DataError(f"parameter names {list(self.tensors)} do not match config {list(expected)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise DataError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")
        if self.config.n_classes and len(self.classes) not in (0, self.config.n_classes):
            raise DataError("classifier label ids must match n_classes")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    @property
    def has_classifier(self) -> bool:
        return self.config.n_classes > 0

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.seed, self.classes, dict(self.meta))

    def as_float32(self) -> "ModelParams":
        """Round every tensor to float32 precision (what a checkpoint stores)."""
        return ModelParams(
            self.config,
            {k: v.astype(np.float32).astype(np.float64) for k, v in self.tensors.items()},
            self.seed,
            self.classes,
            dict(self.meta),
        )

    def all_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors.values())


def init_params(config: EncoderConfig, seed: int, classes=()) -> ModelParams:
    """Uniform(-sqrt(6 / fan_in), +sqrt(6 / fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.shapes().items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            lim = np.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-lim, lim, size=shape)
    return ModelParams(config, tensors, seed, tuple(classes))


# -- layers ----------------------------------------------------------------------


def _conv_forward(x, w, b):
    """x (B, T, C), w (k, C, F) -> (B, T-k+1, F), plus the im2col matrix."""
    k, c, f = w.shape
    bsz, t, _ = x.shape
    t_out = t - k + 1
    cols = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)  # (B, T', C, k)
    cols = cols.transpose(0, 1, 3, 2).reshape(bsz * t_out, k * c)
    out = cols @ w.reshape(k * c, f) + b
    return out.reshape(bsz, t_out, f), cols


def _conv_backward(dout, cols, w, x_shape):
    k, c, f = w.shape
    bsz, t, _ = x_shape
    t_out = t - k + 1
    d2 = dout.reshape(bsz * t_out, f)
    dw = (cols.T @ d2).reshape(k, c, f)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(k * c, f).T).reshape(bsz, t_out, k, c)
    dx = np.zeros(x_shape)
    for j in range(k):
        dx[:, j:j + t_out] += dcols[:, :, j]
    return dx, dw, db


def _pool_forward(x, p):
    bsz, t, c = x.shape
    t_out = t // p
    win = x[:, : t_out * p].reshape(bsz, t_out, p, c)
    arg = win.argmax(axis=2)
    out = np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0, :]
    return out, arg


def _pool_backward(dout, arg, p, x_shape):
    bsz, t_out, c = dout.shape
    dwin = np.zeros((bsz, t_out, p, c))
    np.put_along_axis(dwin, arg[:, :, None, :], dout[:, :, None, :], axis=2)
    dx = np.zeros(x_shape)
    dx[:, : t_out * p] = dwin.reshape(bsz, t_out * p, c)
    return dx


def audio_forward_batch(params: ModelParams, x: np.ndarray):
    """(B, T, D) chunks -> (B, E) embeddings and the activation cache."""
    cfg = params.config
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (cfg.input_frames, cfg.input_bins):
        raise DataError(f"expected chunks of shape (B, {cfg.input_frames}, {cfg.input_bins}), got {x.shape}")
    layers = []
    h = x
    for i, p in enumerate(cfg.pool_widths):
        z, cols = _conv_forward(h, params[f"conv{i}.W"], params[f"conv{i}.b"])
        a = np.maximum(z, 0.0)
        pooled, arg = _pool_forward(a, p)
        layers.append((h.shape, cols, z, a.shape, arg))
        h = pooled
    z, cols = _conv_forward(h, params["head.W"], params["head.b"])
    y = z.mean(axis=1)
    return y, {"layers": layers, "head": (h.shape, cols, z.shape)}


def audio_backward(params: ModelParams, cache, dy: np.ndarray) -> dict[str, np.ndarray]:
    cfg = params.config
    grads = {}
    h_shape, cols, z_shape = cache["head"]
    dz = np.broadcast_to(dy[:, None, :] / z_shape[1], z_shape)
    dh, grads["head.W"], grads["head.b"] = _conv_backward(dz, cols, params["head.W"], h_shape)
    for i in reversed(range(len(cfg.pool_widths))):
        x_shape, cols, z, a_shape, arg = cache["layers"][i]
        da = _pool_backward(dh, arg, cfg.pool_widths[i], a_shape)
        dz = da * (z > 0)
        dh, grads[f"conv{i}.W"], grads[f"conv{i}.b"] = _conv_backward(dz, cols, params[f"conv{i}.W"], x_shape)
    return grads


def audio_forward(params: ModelParams, chunk: np.ndarray):
    """Single ``(T, D)`` chunk -> (E,) embedding and cache."""
    y, cache = audio_forward_batch(params, np.asarray(chunk)[None])
    return y[0], cache


def semantic_forward_batch(params: ModelParams, w: np.ndarray):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != params.config.semantic_dim:
        raise DataError(f"semantic vectors must have dimension {params.config.semantic_dim}, got {w.shape}")
    z = w @ params["sem.W"] + params["sem.b"]
    y = np.maximum(z, 0.0) if params.config.semantic_activation == "relu" else z
    return y, (w, z)


def semantic_backward(params: ModelParams, cache, dy: np.ndarray) -> dict[str, np.ndarray]:
    w, z = cache
    dz = dy * (z > 0) if params.config.semantic_activation == "relu" else dy
    return {"sem.W": w.T @ dz, "sem.b": dz.sum(axis=0)}


def semantic_forward(params: ModelParams, w: np.ndarray) -> np.ndarray:
    return semantic_forward_batch(params, np.asarray(w)[None])[0][0]


# -- relevance and losses --------------------------------------------------------


def cosine_rows(a: np.ndarray, b: np.ndarray):
    """Row-wise cosine; rows with a zero vector score 0. Returns (cos, |a|, |b|)."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    den = na * nb
    dots = (a * b).sum(axis=-1)
    cos = np.divide(dots, den, out=np.zeros_like(dots), where=den > 0)
    return cos, na, nb


def cosine_grads(a, b, cos, na, nb):
    """d cos / d a and d cos / d b, row-wise; zero where either norm vanishes."""
    ok = (na > 0) & (nb > 0)
    sa = np.where(ok, na, 1.0)[:, None]
    sb = np.where(ok, nb, 1.0)[:, None]
    ga = b / (sa * sb) - cos[:, None] * a / sa**2
    gb = a / (sa * sb) - cos[:, None] * b / sb**2
    ga[~ok] = 0.0
    gb[~ok] = 0.0
    return ga, gb


def relevance(y_a: np.ndarray, y_w: np.ndarray) -> float:
    """Cosine similarity; 0 if either vector is zero."""
    return float(cosine_rows(np.asarray(y_a, float)[None], np.asarray(y_w, float)[None])[0][0])


def relevance_matrix(audio_emb: np.ndarray, label_emb: np.ndarray) -> np.ndarray:
    """(N, E) x (L, E) -> (N, L) cosine scores."""
    def unit(m):
        n = np.linalg.norm(m, axis=1, keepdims=True)
        return np.divide(m, n, out=np.zeros_like(m), where=n > 0)

    return np.clip(unit(audio_emb) @ unit(label_emb).T, -1.0, 1.0)


def hinge_loss(rel_pos, rel_neg, margin: float):
    """``max(0, margin - rel_pos + rel_neg)``, elementwise."""
    return np.maximum(0.0, margin - np.asarray(rel_pos) + np.asarray(rel_neg))


def embedding_forward(params: ModelParams, x, w_pos, w_neg, margin: float):
    """Mean hinge loss over a batch of (chunk, positive vector, negative vector)."""
    bsz = len(x)
    y_a, a_cache = audio_forward_batch(params, x)
    y_w, s_cache = semantic_forward_batch(params, np.concatenate([w_pos, w_neg]))
    yp, yn = y_w[:bsz], y_w[bsz:]
    cp, na, npos = cosine_rows(y_a, yp)
    cn, _, nneg = cosine_rows(y_a, yn)
    per = hinge_loss(cp, cn, margin)
    cache = ("embedding", a_cache, s_cache, y_a, yp, yn, (cp, na, npos), (cn, na, nneg), per > 0)
    return float(per.mean()), cache


def classifier_forward(params: ModelParams, x, targets):
    """Mean binary cross-entropy over batch and labels."""
    if not params.has_classifier:
        raise ConfigError("model has no classifier head")
    y_a, a_cache = audio_forward_batch(params, x)
    logits = y_a @ params["cls.W"] + params["cls.b"]
    t = np.asarray(targets, dtype=np.float64)
    loss = np.logaddexp(0.0, logits) - t * logits
    return float(loss.mean()), ("classifier", a_cache, y_a, logits, t)


def sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def backward(params: ModelParams, cache, dloss: float = 1.0) -> dict[str, np.ndarray]:
    """Gradients of a forward loss, keyed and shaped like ``params.tensors``."""
    kind = cache[0]
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    if kind == "embedding":
        _, a_cache, s_cache, y_a, yp, yn, (cp, na, npos), (cn, _, nneg), active = cache
        bsz = len(y_a)
        g = dloss * active / bsz
        ga_p, gw_p = cosine_grads(y_a, yp, cp, na, npos)
        ga_n, gw_n = cosine_grads(y_a, yn, cn, na, nneg)
        dy_a = g[:, None] * (ga_n - ga_p)
        dy_w = np.concatenate([-g[:, None] * gw_p, g[:, None] * gw_n])
        grads.update(audio_backward(params, a_cache, dy_a))
        grads.update(semantic_backward(params, s_cache, dy_w))
    elif kind == "classifier":
        _, a_cache, y_a, logits, t = cache
        dlogits = dloss * (sigmoid(logits) - t) / t.size
        grads["cls.W"] = y_a.T @ dlogits
        grads["cls.b"] = dlogits.sum(axis=0)
        grads.update(audio_backward(params, a_cache, dlogits @ params["cls.W"].T))
    else:
        raise ValueError(f"unknown cache kind {kind!r}")
    return grads


# -- checkpoints -----------------------------------------------------------------

_LEN = struct.Struct("<I")


def save_checkpoint(path, params: ModelParams, **meta) -> None:
    """Length-prefixed JSON header, then little-endian float32 tensors in declared order."""
    header = {
        "config": asdict(params.config),
        "seed": params.seed,
        "classes": list(params.classes),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()],
        "meta": {**params.meta, **meta},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_LEN.pack(len(hb)))
        f.write(hb)
        for v in params.tensors.values():
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    try:
        (n,) = _LEN.unpack_from(raw)
        header = json.loads(raw[_LEN.size:_LEN.size + n].decode("utf-8"))
        config = EncoderConfig.from_dict(header["config"])
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed checkpoint header ({exc})") from None
    off = _LEN.size + n
    tensors = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape))
        if off + 4 * count > len(raw):
            raise DataError(f"{path}: truncated tensor {spec['name']}")
        tensors[spec["name"]] = np.frombuffer(raw, "<f4", count, off).reshape(shape).astype(np.float64)
        off += 4 * count
    return ModelParams(config, tensors, header.get("seed"), tuple(header.get("classes", ())), header.get("meta", {}))
