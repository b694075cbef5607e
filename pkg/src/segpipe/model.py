"""A small 2D/3D U-Net in plain numpy, with hand-written backward pass.

Architecture for ``depth = D`` and ``base_channels = b`` (``c_l = b * 2**l``)::

    enc{l}   conv3-relu, conv3-relu           l = 0 .. D-1, then 2x max pool
    mid      conv3-relu, conv3-relu           at 1 / 2**D resolution
    dec{l}   nearest x2, up: conv3-relu,      l = D-1 .. 0
             concat skip, conv3-relu, conv3-relu
    head     1x1 conv to num_classes logits

Convolutions are same-padded.  Internally activations are channels-last
``(B, *spatial, C)``; the public surface is channel-first.

The 3x3(x3) convolution flattens the zero-padded batch into a
``(rows, C)`` matrix.  A kernel tap is then a constant row offset, so each
tap is one contiguous slice times a ``(C_in, C_out)`` matrix; rows that fall
on padding produce garbage outputs that are dropped.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError, DomainError, NumericsError, ShapeError

KERNEL = 3
# taps*C_in at or below this use one im2col matmul instead of per-tap matmuls
_IM2COL_MAX = 64


@dataclass(frozen=True)
class ModelSpec:
    dim: int = 3
    depth: int = 2
    base_channels: int = 8
    in_channels: int = 1
    num_classes: int = 2

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise DomainError("dim must be 2 or 3")
        if self.depth < 1:
            raise DomainError("depth must be >= 1")
        if self.num_classes < 2:
            raise DomainError("num_classes must be >= 2")
        if self.base_channels < 1 or self.in_channels < 1:
            raise DomainError("channel counts must be positive")

    @property
    def divisor(self) -> int:
        return 2 ** self.depth

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def layers(self) -> list:
        """``[(name, c_in, c_out, kernel)]`` in parameter order."""
        out = []
        c_in = self.in_channels
        for lv in range(self.depth):
            c = self.channels(lv)
            out += [(f"enc{lv}.conv1", c_in, c, KERNEL), (f"enc{lv}.conv2", c, c, KERNEL)]
            c_in = c
        c = self.channels(self.depth)
        out += [("mid.conv1", c_in, c, KERNEL), ("mid.conv2", c, c, KERNEL)]
        for lv in reversed(range(self.depth)):
            c = self.channels(lv)
            out += [
                (f"dec{lv}.up", self.channels(lv + 1), c, KERNEL),
                (f"dec{lv}.conv1", 2 * c, c, KERNEL),
                (f"dec{lv}.conv2", c, c, KERNEL),
            ]
        out.append(("head", self.channels(0), self.num_classes, 1))
        return out

    def param_shapes(self) -> dict:
        shapes = {}
        for name, ci, co, k in self.layers():
            shapes[f"{name}.w"] = (co, ci) + (k,) * self.dim
            shapes[f"{name}.b"] = (co,)
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelParams:
    arrays: dict
    seed: Optional[int] = None

    def __getitem__(self, key):
        return self.arrays[key]

    def keys(self):
        return self.arrays.keys()

    def count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, self.seed)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: v.astype(dtype) for k, v in self.arrays.items()}, self.seed)

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype


def init_params(spec: ModelSpec, seed: int, dtype=np.float32) -> ModelParams:
    """Fan-in scaled uniform init (He for ReLU layers, unit gain for the head); zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, ci, co, k in spec.layers():
        fan_in = ci * k ** spec.dim
        gain = 1.0 if name == "head" else math.sqrt(2.0)
        bound = gain * math.sqrt(3.0 / fan_in)
        arrays[f"{name}.w"] = rng.uniform(-bound, bound, (co, ci) + (k,) * spec.dim).astype(dtype)
        arrays[f"{name}.b"] = np.zeros(co, dtype=dtype)
    return ModelParams(arrays, seed)


def zero_params(spec: ModelSpec, dtype=np.float32) -> ModelParams:
    return ModelParams({k: np.zeros(s, dtype=dtype) for k, s in spec.param_shapes().items()})


# ------------------------------------------------------------------ layers


def _taps(w: np.ndarray) -> np.ndarray:
    """(C_out, C_in, k..k) -> (taps, C_in, C_out)."""
    return np.ascontiguousarray(np.moveaxis(w, (0, 1), (-1, -2)).reshape(-1, w.shape[1], w.shape[0]))


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    B, *S, C = x.shape
    nd = len(S)
    co = w.shape[0]
    if w.shape[2] == 1:
        wm = w.reshape(co, C).T
        y = x.reshape(-1, C) @ wm + b
        return y.reshape(B, *S, co), ("1x1", x, wm)
    Sp = [s + 2 for s in S]
    xp = np.zeros((B, *Sp, C), dtype=x.dtype)
    xp[(slice(None),) + (slice(1, -1),) * nd] = x
    P = xp.size // C
    xf = xp.reshape(P, C)
    strides = [int(np.prod(Sp[a + 1:])) for a in range(nd)]
    offs = [sum(k * s for k, s in zip(t, strides)) for t in itertools.product(range(KERNEL), repeat=nd)]
    L = P - offs[-1]
    wk = _taps(w)
    yf = np.zeros((P, co), dtype=x.dtype)
    if len(offs) * C <= _IM2COL_MAX:
        cols = np.concatenate([xf[o:o + L] for o in offs], axis=1)
        np.matmul(cols, wk.reshape(-1, co), out=yf[:L])
        cache_cols = cols
    else:
        np.matmul(xf[offs[0]:offs[0] + L], wk[0], out=yf[:L])
        for n in range(1, len(offs)):
            o = offs[n]
            yf[:L] += xf[o:o + L] @ wk[n]
        cache_cols = None
    y = yf.reshape(B, *Sp, co)[(slice(None),) + tuple(slice(0, s) for s in S)] + b
    return y, ("kxk", xf, wk, offs, L, tuple(S), tuple(Sp), cache_cols)


def _conv_backward(dy: np.ndarray, cache, need_dx: bool = True):
    kind = cache[0]
    co = dy.shape[-1]
    db = dy.reshape(-1, co).sum(axis=0)
    if kind == "1x1":
        _, x, wm = cache
        C = x.shape[-1]
        dy2 = dy.reshape(-1, co)
        dw = (x.reshape(-1, C).T @ dy2).T
        dx = (dy2 @ wm.T).reshape(x.shape) if need_dx else None
        return dx, dw.reshape((co, C) + (1,) * (x.ndim - 2)), db
    _, xf, wk, offs, L, S, Sp, cols = cache
    B = dy.shape[0]
    C = xf.shape[1]
    nd = len(S)
    dyf = np.zeros((B, *Sp, co), dtype=dy.dtype)
    dyf[(slice(None),) + tuple(slice(0, s) for s in S)] = dy
    dyf = dyf.reshape(-1, co)[:L]
    dxf = np.zeros_like(xf) if need_dx else None
    if cols is not None:
        dwk = (cols.T @ dyf).reshape(len(offs), C, co)
        if need_dx:
            dcols = dyf @ wk.reshape(-1, co).T
            for n, o in enumerate(offs):
                dxf[o:o + L] += dcols[:, n * C:(n + 1) * C]
    else:
        dwk = np.empty_like(wk)
        for n, o in enumerate(offs):
            dwk[n] = xf[o:o + L].T @ dyf
            if need_dx:
                dxf[o:o + L] += dyf @ wk[n].T
    # (taps, C_in, C_out) -> (C_out, C_in, k..k)
    dw = np.moveaxis(dwk.reshape((KERNEL,) * nd + (C, co)), (-1, -2), (0, 1))
    dx = None
    if need_dx:
        dx = dxf.reshape(B, *Sp, C)[(slice(None),) + (slice(1, -1),) * nd]
        dx = np.ascontiguousarray(dx)
    return dx, np.ascontiguousarray(dw), db


def _pool_forward(x: np.ndarray):
    B, *S, C = x.shape
    nd = len(S)
    split = [B]
    for s in S:
        split += [s // 2, 2]
    xr = x.reshape(*split, C)
    # (B, s0/2, s1/2, ..., C, window)
    perm = [0] + [1 + 2 * a for a in range(nd)] + [1 + 2 * nd] + [2 + 2 * a for a in range(nd)]
    win = xr.transpose(perm).reshape(B, *[s // 2 for s in S], C, 2 ** nd)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape, perm)


def _pool_backward(dy: np.ndarray, cache):
    idx, shape, perm = cache
    B, *S, C = shape
    nd = len(S)
    dwin = np.zeros(idx.shape + (2 ** nd,), dtype=dy.dtype)
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
    split = [B] + [s // 2 for s in S] + [C] + [2] * nd
    dxr = dwin.reshape(split).transpose(np.argsort(perm))
    return np.ascontiguousarray(dxr).reshape(shape)


def _upsample(x: np.ndarray) -> np.ndarray:
    B, *S, C = x.shape
    view = [B]
    for s in S:
        view += [s, 1]
    target = [B]
    for s in S:
        target += [s, 2]
    return np.broadcast_to(x.reshape(*view, C), (*target, C)).reshape(B, *[2 * s for s in S], C)


def _upsample_backward(dy: np.ndarray) -> np.ndarray:
    B, *S, C = dy.shape
    split = [B]
    for s in S:
        split += [s // 2, 2]
    return dy.reshape(*split, C).sum(axis=tuple(2 + 2 * a for a in range(len(S))))


# ------------------------------------------------------------ forward/back


def _check_input(spec: ModelSpec, x: np.ndarray) -> tuple:
    x = np.asarray(x)
    batched = x.ndim == spec.dim + 2
    if not batched and x.ndim != spec.dim + 1:
        raise ShapeError(f"expected [C, *spatial] or [B, C, *spatial] for a {spec.dim}D model, got {x.shape}")
    if not batched:
        x = x[None]
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"model expects {spec.in_channels} input channels, got {x.shape[1]}")
    S = x.shape[2:]
    if any(s % spec.divisor for s in S):
        raise ShapeError(f"spatial shape {tuple(S)} must be divisible by {spec.divisor}")
    return x, batched


def _forward(params: ModelParams, spec: ModelSpec, x: np.ndarray, keep: bool):
    dtype = params.dtype
    h = np.moveaxis(x, 1, -1).astype(dtype)
    caches = []
    skips = []

    def conv_relu(name, h):
        y, c = _conv_forward(h, params[f"{name}.w"], params[f"{name}.b"])
        out = np.maximum(y, 0)
        if keep:
            caches.append((name, c, out > 0))
        return out

    for lv in range(spec.depth):
        h = conv_relu(f"enc{lv}.conv1", h)
        h = conv_relu(f"enc{lv}.conv2", h)
        skips.append(h)
        h, pc = _pool_forward(h)
        if keep:
            caches.append((f"enc{lv}.pool", pc, None))
    h = conv_relu("mid.conv1", h)
    h = conv_relu("mid.conv2", h)
    for lv in reversed(range(spec.depth)):
        h = conv_relu(f"dec{lv}.up", _upsample(h))
        c_up = h.shape[-1]
        h = np.concatenate([h, skips[lv]], axis=-1)
        if keep:
            caches.append((f"dec{lv}.cat", c_up, None))
        h = conv_relu(f"dec{lv}.conv1", h)
        h = conv_relu(f"dec{lv}.conv2", h)
    logits, hc = _conv_forward(h, params["head.w"], params["head.b"])
    if keep:
        caches.append(("head", hc, None))
    return np.moveaxis(logits, -1, 1), caches


def forward(params: ModelParams, spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    """Logits ``[num_classes, *spatial]`` (or batched ``[B, num_classes, *spatial]``)."""
    xb, batched = _check_input(spec, x)
    logits, _ = _forward(params, spec, xb, keep=False)
    return logits if batched else logits[0]


def forward_with_cache(params: ModelParams, spec: ModelSpec, x: np.ndarray):
    xb, batched = _check_input(spec, x)
    logits, caches = _forward(params, spec, xb, keep=True)
    return (logits if batched else logits[0]), (caches, batched)


def backward(params: ModelParams, spec: ModelSpec, x: Optional[np.ndarray], loss_grad: np.ndarray, cache=None) -> dict:
    """Gradients of every parameter given dLoss/dLogits.

    ``cache`` is the second return value of :func:`forward_with_cache`; when
    omitted the forward pass is recomputed from ``x``.
    """
    if cache is None:
        _, cache = forward_with_cache(params, spec, x)
    caches, batched = cache
    g = np.asarray(loss_grad, dtype=params.dtype)
    if not batched:
        g = g[None]
    g = np.moveaxis(g, 1, -1)
    grads = {}
    stack = list(caches)
    skip_grads = {}

    name, hc, _ = stack.pop()
    g, grads["head.w"], grads["head.b"] = _conv_backward(g, hc)

    def conv_relu_back(g, need_dx=True):
        name, c, mask = stack.pop()
        g = g * mask
        dx, grads[f"{name}.w"], grads[f"{name}.b"] = _conv_backward(g, c, need_dx)
        return dx

    for lv in range(spec.depth):
        g = conv_relu_back(g)  # dec conv2
        g = conv_relu_back(g)  # dec conv1
        _, c_up, _ = stack.pop()
        skip_grads[lv] = g[..., c_up:]
        g = g[..., :c_up]
        g = conv_relu_back(g)  # dec up conv
        g = _upsample_backward(g)
    g = conv_relu_back(g)  # mid conv2
    g = conv_relu_back(g)  # mid conv1
    for lv in reversed(range(spec.depth)):
        _, pc, _ = stack.pop()
        g = _pool_backward(g, pc) + skip_grads[lv]
        g = conv_relu_back(g)
        g = conv_relu_back(g, need_dx=lv > 0)
    return {k: grads[k] for k in params.keys()}


# -------------------------------------------------------------------- loss


def softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def dice_ce_loss(logits: np.ndarray, target: np.ndarray, smooth: float = 1e-5):
    """Cross-entropy plus ``1 - mean foreground soft Dice``; returns ``(loss, dloss/dlogits)``.

    Accepts ``[K, *spatial]`` with ``[*spatial]`` targets or the batched
    equivalents.  Dice sums run over the whole batch.  All accumulation is
    float64.
    """
    logits = np.asarray(logits)
    target = np.asarray(target)
    batched = logits.ndim == target.ndim + 1 and logits.ndim >= 3 and target.ndim >= 2 and logits.shape[0] == target.shape[0] and logits.ndim - 2 == target.ndim - 1
    z = logits.astype(np.float64)
    if not batched:
        z, target = z[None], target[None]
    K = z.shape[1]
    if tuple(target.shape) != (z.shape[0],) + tuple(z.shape[2:]):
        raise ShapeError(f"logits {logits.shape} and target {target.shape} disagree")
    if target.size and (target.min() < 0 or target.max() >= K):
        raise DomainError(f"target labels must lie in [0, {K})")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    p = e / s
    logp = z - np.log(s)
    g = (np.arange(K).reshape((1, K) + (1,) * (z.ndim - 2)) == target[:, None]).astype(np.float64)
    n_vox = target.size
    ce = -float((logp * g).sum()) / n_vox

    axes = (0,) + tuple(range(2, z.ndim))
    inter = (p * g).sum(axis=axes)
    psum = p.sum(axis=axes)
    gsum = g.sum(axis=axes)
    denom = psum + gsum + smooth
    dice = (2 * inter + smooth) / denom
    fg = np.arange(1, K)
    loss = ce + 1.0 - float(dice[fg].mean())

    shape = (1, K) + (1,) * (z.ndim - 2)
    ddice_dp = (2 * g * denom.reshape(shape) - (2 * inter + smooth).reshape(shape)) / (denom ** 2).reshape(shape)
    weight = np.zeros(K)
    weight[fg] = -1.0 / len(fg)
    dp = ddice_dp * weight.reshape(shape)
    dz = (p - g) / n_vox + p * (dp - (p * dp).sum(axis=1, keepdims=True))
    if not batched:
        dz = dz[0]
    return loss, dz.astype(logits.dtype if np.issubdtype(logits.dtype, np.floating) else np.float64)


# --------------------------------------------------------------- optimizer


def optimizer_step(params: ModelParams, grads: dict, state: Optional[dict], lr: float, momentum: float = 0.9):
    """SGD with heavy-ball momentum: ``v <- m v + g``; ``p <- p - lr v``."""
    if set(grads) != set(params.keys()):
        raise DomainError("gradient keys do not match parameter keys")
    for k, g in grads.items():
        if not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise NumericsError(f"non-finite gradient in {k} ({bad} entries)")
    state = state or {}
    new_state, new_arrays = {}, {}
    for k, p in params.arrays.items():
        v = state.get(k)
        g = grads[k].astype(p.dtype, copy=False)
        v = g.copy() if v is None else momentum * v + g
        new_state[k] = v.astype(p.dtype, copy=False)
        new_arrays[k] = (p - lr * new_state[k]).astype(p.dtype, copy=False)
    return ModelParams(new_arrays, params.seed), new_state


# ------------------------------------------------------------- predictors


class UNetPredictor:
    """Deterministic ``patch -> logits`` wrapper around a parameter set."""

    def __init__(self, params: ModelParams, spec: ModelSpec):
        self.params = params
        self.spec = spec

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def divisor(self) -> int:
        return self.spec.divisor

    def predict_logits(self, patch: np.ndarray) -> np.ndarray:
        return forward(self.params, self.spec, patch)

    __call__ = predict_logits


# -------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"SEGPIPE-CKPT\n"
CKPT_VERSION = 1


def save_checkpoint(path, spec: ModelSpec, params: ModelParams, opt_state: Optional[dict], step: int, extra: Optional[dict] = None) -> str:
    """Write a byte-stable checkpoint container and return its SHA-256."""
    arrays = [(f"param/{k}", v) for k, v in params.arrays.items()]
    arrays += [(f"momentum/{k}", v) for k, v in sorted((opt_state or {}).items())]
    index, offset, blobs = [], 0, []
    for name, arr in arrays:
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        index.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = {
        "format_version": CKPT_VERSION,
        "spec": spec.to_dict(),
        "step": int(step),
        "seed": params.seed,
        "arrays": index,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = CKPT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)
    return hashlib.sha256(payload).hexdigest()


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: ModelParams
    opt_state: dict
    step: int
    extra: dict
    sha256: str


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    pos = len(CKPT_MAGIC)
    try:
        (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
        header = json.loads(raw[pos + 8:pos + 8 + hlen].decode("utf-8"))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header") from exc
    if header.get("format_version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    base = pos + 8 + hlen
    params, momentum = {}, {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = base + entry["offset"]
        if start + count * dt.itemsize > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=start).reshape(entry["shape"]).copy()
        kind, key = entry["name"].split("/", 1)
        (params if kind == "param" else momentum)[key] = arr
    return Checkpoint(
        spec=ModelSpec(**header["spec"]),
        params=ModelParams(params, header.get("seed")),
        opt_state=momentum,
        step=int(header["step"]),
        extra=header.get("extra", {}),
        sha256=hashlib.sha256(raw).hexdigest(),
    )
