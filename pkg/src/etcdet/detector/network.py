"""A small single-shot detector trained from scratch in numpy.

The trunk is a chain of stride-2 3x3 convolutions taking the 300x300x1 input
down to the feature maps the priors tile (18, 9, 5, 3 by default); the last
four trunk activations each feed a localization head (4 offsets per prior)
and a classification head (num_classes + 1 logits per prior, background at
index 0). Forward caches what backward needs; gradients are accumulated into
per-layer buffers and applied by plain SGD. Checkpoints round-trip the full
parameter set, the config, and the training RNG state bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .priors import PriorConfig, generate_priors

_CKPT_MAGIC = b"MSSD"
_CKPT_VERSION = 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    b, h, w, c = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    hp, wp = x.shape[1], x.shape[2]
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    sb, sh, sw, sc = x.strides
    windows = as_strided(
        x,
        shape=(b, oh, ow, k, k, c),
        strides=(sb, sh * stride, sw * stride, sh, sw, sc),
    )
    return windows.reshape(b * oh * ow, k * k * c), oh, ow


class Conv2d:
    """3x3-style convolution (NHWC) with cached columns for the backward pass."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, pad: int,
                 rng: np.random.Generator, dtype: np.dtype):
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.pad = kernel, stride, pad
        fan_in = kernel * kernel * c_in
        limit = np.sqrt(6.0 / fan_in)
        self.w = rng.uniform(-limit, limit, size=(fan_in, c_out)).astype(dtype)
        self.b = np.zeros(c_out, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._cache = None

    def out_size(self, in_size: int) -> int:
        return (in_size + 2 * self.pad - self.kernel) // self.stride + 1

    def forward(self, x: np.ndarray) -> np.ndarray:
        cols, oh, ow = _im2col(x, self.kernel, self.stride, self.pad)
        cols = cols.astype(self.w.dtype, copy=False)
        out = cols @ self.w + self.b
        self._cache = (cols, x.shape, oh, ow)
        return out.reshape(x.shape[0], oh, ow, self.c_out)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        cols, x_shape, oh, ow = self._cache
        b, h, w, c = x_shape
        dyf = dy.reshape(-1, self.c_out)
        self.gw += cols.T @ dyf
        self.gb += dyf.sum(axis=0)
        dcols = (dyf @ self.w.T).reshape(b, oh, ow, self.kernel, self.kernel, c)
        hp, wp = h + 2 * self.pad, w + 2 * self.pad
        dxp = np.zeros((b, hp, wp, c), dtype=dy.dtype)
        s = self.stride
        for ki in range(self.kernel):
            for kj in range(self.kernel):
                dxp[:, ki : ki + oh * s : s, kj : kj + ow * s : s, :] += dcols[:, :, :, ki, kj, :]
        if self.pad:
            return dxp[:, self.pad : self.pad + h, self.pad : self.pad + w, :]
        return dxp

    def zero_grad(self):
        self.gw[...] = 0
        self.gb[...] = 0


class _Softplus:
    """Trunk nonlinearity. Smooth everywhere, which keeps central finite
    differences at eps = 1e-3 faithful to the analytic gradient (a ReLU trunk
    crosses kinks at that step size)."""

    def forward(self, x):
        self._sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def backward(self, dy):
        return dy * self._sig


@dataclass(frozen=True)
class MiniSSDConfig:
    """Architecture descriptor; conv_specs rows are (c_out, kernel, stride, pad)."""

    input_size: int = 300
    conv_specs: tuple[tuple[int, int, int, int], ...] = (
        (8, 3, 2, 1),
        (16, 3, 2, 1),
        (32, 3, 2, 0),
        (48, 3, 2, 0),
        (48, 3, 2, 1),
        (48, 3, 2, 1),
        (48, 3, 2, 1),
    )
    head_layers: tuple[int, ...] = (3, 4, 5, 6)
    num_classes: int = 3
    priors: PriorConfig = field(default_factory=PriorConfig)
    dtype: str = "float32"
    seed: int = 0
    background_bias: float = 2.0
    head_init_scale: float = 0.0  # heads start at zero weights plus biases
    head_gain: float = 6.0  # fixed output scale on the head convolutions

    def feature_map_sizes(self) -> tuple[int, ...]:
        size = self.input_size
        sizes = []
        for c_out, k, s, p in self.conv_specs:
            size = (size + 2 * p - k) // s + 1
            sizes.append(size)
        return tuple(sizes[i] for i in self.head_layers)

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        got = self.feature_map_sizes()
        want = self.priors.feature_map_sizes
        if got != tuple(want):
            raise ValueError(
                f"head feature maps {got} do not match the prior grid {tuple(want)}"
            )


class MiniSSD:
    def __init__(self, config: MiniSSDConfig):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        A = len(config.priors.aspect_ratios)
        C1 = config.num_classes + 1

        self.trunk: list[Conv2d] = []
        self.acts: list[_Softplus] = []
        c_in = 1
        for c_out, k, s, p in config.conv_specs:
            self.trunk.append(Conv2d(c_in, c_out, k, s, p, rng, self.dtype))
            self.acts.append(_Softplus())
            c_in = c_out

        self.loc_heads: list[Conv2d] = []
        self.cls_heads: list[Conv2d] = []
        for idx in config.head_layers:
            c = config.conv_specs[idx][0]
            loc = Conv2d(c, A * 4, 3, 1, 1, rng, self.dtype)
            loc.w *= config.head_init_scale
            self.loc_heads.append(loc)
            head = Conv2d(c, A * C1, 3, 1, 1, rng, self.dtype)
            head.w *= config.head_init_scale
            # the fixed gain multiplies the conv output, so the stored bias is
            # pre-divided to land the intended background logit
            head.b[0::C1] = config.background_bias / config.head_gain
            self.cls_heads.append(head)

        self.priors = generate_priors(config.priors)
        self.n_priors = len(self.priors)
        self._cache = None

    def calibrate(self, images: np.ndarray, target_std: float = 2.0) -> None:
        """Data-dependent init: walk the trunk once on a calibration batch,
        centering each layer's pre-activation mean to zero (via bias) and
        scaling its weights for unit-ish pre-activation spread.

        Plain He init leaves the deep features nearly constant here (the
        softplus slope of 1/2 at the origin shrinks the signal every layer
        while its positive offset accumulates), which stalls SGD at the
        fixed learning rate. Deterministic given the batch.
        """
        h = np.asarray(images, dtype=self.dtype)
        if h.ndim == 3:
            h = h[..., None]
        for conv, act in zip(self.trunk, self.acts):
            pre = conv.forward(h)
            mu = pre.mean(axis=(0, 1, 2))
            sd = pre.std(axis=(0, 1, 2)) + 1e-8
            conv.w *= (target_std / sd).astype(self.dtype)
            conv.b[...] = ((conv.b - mu) * (target_std / sd)).astype(self.dtype)
            h = act.forward(conv.forward(h))

    # -- parameter plumbing ----------------------------------------------------

    def _layers(self) -> dict[str, Conv2d]:
        layers = {f"trunk{i}": l for i, l in enumerate(self.trunk)}
        for i, (loc, cls) in enumerate(zip(self.loc_heads, self.cls_heads)):
            layers[f"loc{i}"] = loc
            layers[f"cls{i}"] = cls
        return layers

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._layers().items():
            out[f"{name}.w"] = layer.w
            out[f"{name}.b"] = layer.b
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._layers().items():
            out[f"{name}.w"] = layer.gw
            out[f"{name}.b"] = layer.gb
        return out

    def zero_grad(self):
        for layer in self._layers().values():
            layer.zero_grad()

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def sgd_step(self, lr: float):
        for layer in self._layers().values():
            layer.w -= lr * layer.gw
            layer.b -= lr * layer.gb

    # -- forward / backward ------------------------------------------------------

    def forward(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """images (B, S, S) or (B, S, S, 1) -> offsets (B, P, 4), logits (B, P, C+1)."""
        x = np.asarray(images, dtype=self.dtype)
        if x.ndim == 3:
            x = x[..., None]
        if x.shape[1] != self.config.input_size or x.shape[2] != self.config.input_size:
            raise ValueError(
                f"expected {self.config.input_size}x{self.config.input_size} input, got {x.shape[1:3]}"
            )
        B = x.shape[0]
        A = len(self.config.priors.aspect_ratios)
        C1 = self.config.num_classes + 1

        feats = []
        for conv, act in zip(self.trunk, self.acts):
            x = act.forward(conv.forward(x))
            feats.append(x)

        offsets, logits, head_shapes = [], [], []
        g = self.config.head_gain
        for i, idx in enumerate(self.config.head_layers):
            f = feats[idx]
            lo = self.loc_heads[i].forward(f) * g
            cl = self.cls_heads[i].forward(f) * g
            head_shapes.append(lo.shape)
            offsets.append(lo.reshape(B, -1, 4))
            logits.append(cl.reshape(B, -1, C1))
        self._cache = head_shapes
        return np.concatenate(offsets, axis=1), np.concatenate(logits, axis=1)

    def backward(self, d_offsets: np.ndarray, d_logits: np.ndarray) -> None:
        """Accumulate parameter gradients for the cached forward pass."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        head_shapes = self._cache
        B = d_offsets.shape[0]
        A = len(self.config.priors.aspect_ratios)
        C1 = self.config.num_classes + 1

        trunk_grads: dict[int, np.ndarray] = {}
        start = 0
        for i, idx in enumerate(self.config.head_layers):
            b, h, w, _ = head_shapes[i]
            count = h * w * A
            g = self.config.head_gain
            d_lo = d_offsets[:, start : start + count, :].reshape(b, h, w, A * 4) * g
            d_cl = d_logits[:, start : start + count, :].reshape(b, h, w, A * C1) * g
            start += count
            df = self.loc_heads[i].backward(d_lo.astype(self.dtype, copy=False))
            df = df + self.cls_heads[i].backward(d_cl.astype(self.dtype, copy=False))
            trunk_grads[idx] = trunk_grads.get(idx, 0) + df

        dx = None
        for idx in range(len(self.trunk) - 1, -1, -1):
            if dx is None:
                dx = trunk_grads.get(idx)
            elif idx in trunk_grads:
                dx = dx + trunk_grads[idx]
            if dx is None:
                continue
            dx = self.trunk[idx].backward(self.acts[idx].backward(dx))
        self._cache = None


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, model: MiniSSD, train_config=None, rng_state: dict | None = None) -> None:
    """Versioned header + named little-endian tensors + config + RNG state."""
    from dataclasses import asdict

    params = model.parameters()
    index = []
    blobs = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(params[name].shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "model_config": _config_to_dict(model.config),
        "train_config": asdict(train_config) if train_config is not None else None,
        "rng_state": _jsonable(rng_state),
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<HI", _CKPT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path) -> tuple[MiniSSD, dict | None, dict | None]:
    """Returns (model, train_config dict, rng_state) restored bit-exactly."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack_from("<HI", raw, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[10 : 10 + header_len])
    body = raw[10 + header_len :]
    model = MiniSSD(_config_from_dict(header["model_config"]))
    params = model.parameters()
    for entry in header["tensors"]:
        arr = np.frombuffer(body, dtype="<f8", count=entry["nbytes"] // 8, offset=entry["offset"])
        params[entry["name"]][...] = arr.reshape(entry["shape"]).astype(model.dtype)
    return model, header["train_config"], header["rng_state"]


def _config_to_dict(cfg: MiniSSDConfig) -> dict:
    return {
        "input_size": cfg.input_size,
        "conv_specs": [list(row) for row in cfg.conv_specs],
        "head_layers": list(cfg.head_layers),
        "num_classes": cfg.num_classes,
        "priors": {
            "feature_map_sizes": list(cfg.priors.feature_map_sizes),
            "scales": list(cfg.priors.scales),
            "aspect_ratios": list(cfg.priors.aspect_ratios),
            "clip": cfg.priors.clip,
        },
        "dtype": cfg.dtype,
        "seed": cfg.seed,
        "background_bias": cfg.background_bias,
        "head_init_scale": cfg.head_init_scale,
        "head_gain": cfg.head_gain,
    }


def _config_from_dict(d: dict) -> MiniSSDConfig:
    return MiniSSDConfig(
        input_size=d["input_size"],
        conv_specs=tuple(tuple(row) for row in d["conv_specs"]),
        head_layers=tuple(d["head_layers"]),
        num_classes=d["num_classes"],
        priors=PriorConfig(
            feature_map_sizes=tuple(d["priors"]["feature_map_sizes"]),
            scales=tuple(d["priors"]["scales"]),
            aspect_ratios=tuple(d["priors"]["aspect_ratios"]),
            clip=d["priors"]["clip"],
        ),
        dtype=d["dtype"],
        seed=d["seed"],
        background_bias=d["background_bias"],
        head_init_scale=d.get("head_init_scale", 0.0),
        head_gain=d.get("head_gain", 6.0),
    )


def _jsonable(obj):
    if obj is None or isinstance(obj, (str, int, float, bool)):
        return obj
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj
