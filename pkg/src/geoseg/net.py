"""A small per-pixel road classifier with hand-written reverse mode and Adam.

Topology (image ``(3, H, W)``, H and W divisible by 4)::

    conv 3->16, 3x3, stride 2, reflect pad 1  -> ReLU
    conv 16->32, 3x3, stride 2, reflect pad 1 -> ReLU
    conv 32->1, 1x1
    bilinear upsample x4 to (H, W)

The upsample uses half-pixel centres (``align_corners=False``): output index
``i`` reads source coordinate ``max((i + 0.5) / 4 - 0.5, 0)`` and interpolates
linearly between the two neighbouring source cells, the upper one clamped to
the last index. The receptive field at input resolution is 11 px.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadShape, DecodeError

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")
PARAM_SHAPES = {
    "w1": (16, 3, 3, 3), "b1": (16,),
    "w2": (32, 16, 3, 3), "b2": (32,),
    "w3": (1, 32, 1, 1), "b3": (1,),
}
UPSAMPLE = 4
MAGIC = b"GEOSEG01"


def init_params(seed: int = 0, dtype=np.float64) -> dict[str, np.ndarray]:
    """Kaiming-uniform weights (fan-in, ReLU gain), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name in PARAM_NAMES:
        shape = PARAM_SHAPES[name]
        if name.startswith("w"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def _check_params(params):
    for name in PARAM_NAMES:
        if name not in params:
            raise BadShape(f"missing parameter {name!r}")
        if params[name].shape != PARAM_SHAPES[name]:
            raise BadShape(f"{name} has shape {params[name].shape}, expected {PARAM_SHAPES[name]}")


def _as_chw(image, dtype) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(dtype) / 255.0
    img = img.astype(dtype, copy=False)
    if img.ndim == 3 and img.shape[-1] == 3 and img.shape[0] != 3:
        img = np.moveaxis(img, -1, 0)
    if img.ndim != 3 or img.shape[0] != 3:
        raise BadShape(f"expected a 3-channel image, got shape {np.shape(image)}")
    if img.shape[1] % 4 or img.shape[2] % 4:
        raise BadShape(f"image size {img.shape[2]}x{img.shape[1]} is not divisible by 4")
    return img


def _conv3x3_s2(x, w, b):
    """Stride-2 3x3 convolution with reflect padding. Returns (out, padded input)."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    ho, wo = x.shape[1] // 2, x.shape[2] // 2
    out = np.zeros((w.shape[0], ho, wo), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            patch = xp[:, dy:dy + 2 * ho:2, dx:dx + 2 * wo:2]
            out += np.tensordot(w[:, :, dy, dx], patch, axes=(1, 0))
    out += b[:, None, None]
    return out, xp


def _conv3x3_s2_backward(g, xp, w, in_shape):
    """Gradients of ``_conv3x3_s2`` w.r.t. input, weights and bias."""
    ho, wo = g.shape[1:]
    gw = np.empty_like(w)
    gxp = np.zeros_like(xp)
    for dy in range(3):
        for dx in range(3):
            patch = xp[:, dy:dy + 2 * ho:2, dx:dx + 2 * wo:2]
            gw[:, :, dy, dx] = np.tensordot(g, patch, axes=([1, 2], [1, 2]))
            gxp[:, dy:dy + 2 * ho:2, dx:dx + 2 * wo:2] += np.tensordot(w[:, :, dy, dx], g, axes=(0, 0))
    gb = g.sum(axis=(1, 2))
    # fold the reflect padding back onto the interior
    gx = gxp[:, 1:-1, 1:-1].copy()
    gx[:, 1, :] += gxp[:, 0, 1:-1]
    gx[:, -2, :] += gxp[:, -1, 1:-1]
    gx[:, :, 1] += gxp[:, 1:-1, 0]
    gx[:, :, -2] += gxp[:, 1:-1, -1]
    gx[:, 1, 1] += gxp[:, 0, 0]
    gx[:, 1, -2] += gxp[:, 0, -1]
    gx[:, -2, 1] += gxp[:, -1, 0]
    gx[:, -2, -2] += gxp[:, -1, -1]
    assert gx.shape == in_shape
    return gx, gw, gb


def upsample_matrix(n_in: int, factor: int = UPSAMPLE, dtype=np.float64) -> np.ndarray:
    """(n_in * factor, n_in) linear interpolation matrix, half-pixel centres."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    U = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    U[rows, i0] += 1.0 - frac
    U[rows, i1] += frac
    return U


@dataclass
class ForwardCache:
    x: np.ndarray
    xp1: np.ndarray
    a1: np.ndarray
    xp2: np.ndarray
    a2: np.ndarray
    Uh: np.ndarray
    Uw: np.ndarray


def forward(params, image, return_cache: bool = False):
    """Logit map of shape (H, W) for a 3-channel image with values in [0, 1]."""
    _check_params(params)
    dtype = params["w1"].dtype
    x = _as_chw(image, dtype)
    z1, xp1 = _conv3x3_s2(x, params["w1"], params["b1"])
    a1 = np.maximum(z1, 0)
    z2, xp2 = _conv3x3_s2(a1, params["w2"], params["b2"])
    a2 = np.maximum(z2, 0)
    low = np.tensordot(params["w3"][0, :, 0, 0], a2, axes=(0, 0)) + params["b3"][0]
    Uh = upsample_matrix(low.shape[0], dtype=dtype)
    Uw = upsample_matrix(low.shape[1], dtype=dtype)
    logits = Uh @ low @ Uw.T
    if return_cache:
        return logits, ForwardCache(x, xp1, a1, xp2, a2, Uh, Uw)
    return logits


def backward(params, image, output_gradient, cache: ForwardCache | None = None,
             frozen=()) -> dict[str, np.ndarray]:
    """Parameter gradients of ``sum(output_gradient * forward(params, image))``.

    Names listed in ``frozen`` get exactly-zero gradients.
    """
    if cache is None:
        _, cache = forward(params, image, return_cache=True)
    g = np.asarray(output_gradient, dtype=params["w1"].dtype)
    H, W = cache.x.shape[1:]
    if g.shape != (H, W):
        raise BadShape(f"output gradient {g.shape} does not match image {(H, W)}")

    g_low = cache.Uh.T @ g @ cache.Uw
    grads = {
        "w3": np.tensordot(cache.a2, g_low, axes=([1, 2], [0, 1])).reshape(PARAM_SHAPES["w3"]),
        "b3": np.array([g_low.sum()], dtype=g.dtype),
    }
    g_a2 = params["w3"][0, :, 0, 0][:, None, None] * g_low[None]
    g_z2 = g_a2 * (cache.a2 > 0)
    g_a1, grads["w2"], grads["b2"] = _conv3x3_s2_backward(g_z2, cache.xp2, params["w2"], cache.a1.shape)
    g_z1 = g_a1 * (cache.a1 > 0)
    _, grads["w1"], grads["b1"] = _conv3x3_s2_backward(g_z1, cache.xp1, params["w1"], cache.x.shape)
    for name in frozen:
        grads[name] = np.zeros_like(params[name])
    return grads


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update; returns new (params, state) and leaves inputs alone."""
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v)


class SegNet:
    """Parameters plus optimiser state; the unit the training loop mutates."""

    def __init__(self, params=None, seed: int = 0, lr: float = 1e-4, dtype=np.float64):
        self.params = init_params(seed, dtype) if params is None else {k: np.array(v) for k, v in params.items()}
        _check_params(self.params)
        self.adam = AdamState(lr=lr)

    def __call__(self, image) -> np.ndarray:
        return forward(self.params, image)

    def predict(self, image) -> np.ndarray:
        """Binary road mask; road iff logit > 0."""
        return forward(self.params, image) > 0

    def step(self, grads) -> None:
        self.params, self.adam = adam_step(self.params, grads, self.adam)

    def copy(self) -> "SegNet":
        other = SegNet(self.params)
        a = self.adam
        other.adam = AdamState(a.lr, a.beta1, a.beta2, a.eps, a.step,
                               {k: v.copy() for k, v in a.m.items()},
                               {k: v.copy() for k, v in a.v.items()})
        return other


# checkpoint container ------------------------------------------------------
#
#   magic  b"GEOSEG01"
#   u32    tensor count
#   per tensor:
#     u16 name length, name (utf-8)
#     u8  dtype code (0 = float64, 1 = float32, 2 = int64)
#     u8  ndim, then ndim x u32 dims
#     raw little-endian data, C order

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1, np.dtype("int64"): 2}


def save_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name!r}")
        enc = name.encode("utf-8")
        out.append(struct.pack("<H", len(enc)) + enc)
        out.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(out)


def load_tensors(data: bytes) -> dict[str, np.ndarray]:
    if data[:8] != MAGIC:
        raise DecodeError("not a GEOSEG01 checkpoint")
    try:
        (count,) = struct.unpack_from("<I", data, 8)
        pos = 12
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(data):
                raise DecodeError("truncated checkpoint")
            tensors[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).astype(dt.newbyteorder("="))
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise DecodeError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(data):
        raise DecodeError("trailing bytes in checkpoint")
    return tensors


def save_checkpoint(model: SegNet, path) -> None:
    tensors = {f"param/{k}": v for k, v in model.params.items()}
    for k, v in model.adam.m.items():
        tensors[f"adam_m/{k}"] = v
    for k, v in model.adam.v.items():
        tensors[f"adam_v/{k}"] = v
    tensors["adam_step"] = np.array([model.adam.step], dtype=np.int64)
    tensors["adam_hyper"] = np.array([model.adam.lr, model.adam.beta1, model.adam.beta2, model.adam.eps])
    with open(path, "wb") as f:
        f.write(save_tensors(tensors))


def load_checkpoint(path) -> SegNet:
    with open(path, "rb") as f:
        tensors = load_tensors(f.read())
    params = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("param/")}
    model = SegNet(params)
    if "adam_hyper" in tensors:
        lr, b1, b2, eps = (float(x) for x in tensors["adam_hyper"])
        model.adam = AdamState(
            lr, b1, b2, eps, int(tensors["adam_step"][0]),
            {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("adam_m/")},
            {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("adam_v/")},
        )
    return model
