"""Trainable layers, the AdamW optimizer, the EMA parameter shadow, and the
on-disk checkpoint format (one little-endian float32 blob per parameter plus
a JSON index)."""

from __future__ import annotations

import json
import os

import numpy as np

from . import tensor as T
from .errors import ContractError, ManifestError, ShapeError

CHECKPOINT_INDEX = "index.json"
CHECKPOINT_FORMAT = 1


class Linear:
    """Affine map x[b,in] -> x W^T + bias, kaiming-uniform weights, zero bias."""

    def __init__(self, in_features, out_features, rng, dtype=T.DEFAULT_DTYPE):
        self.weight = T.create([out_features, in_features], "kaiming",
                               fan_in=in_features, seed=rng, requires_grad=True, dtype=dtype)
        self.bias = T.create([out_features], "zeros", requires_grad=True, dtype=dtype)

    def __call__(self, x):
        return T.add_row_bias(T.matmul(x, T.transpose(self.weight)), self.bias)

    def named_parameters(self, prefix=""):
        return [(prefix + "weight", self.weight), (prefix + "bias", self.bias)]


class ConvBlock:
    """conv -> channel bias -> relu -> 2x2 average pooling."""

    def __init__(self, in_channels, out_channels, rng, kernel=3, stride=1,
                 padding=1, pool=2, dtype=T.DEFAULT_DTYPE):
        self.kernel = T.create([out_channels, in_channels, kernel, kernel], "kaiming",
                               fan_in=in_channels * kernel * kernel, seed=rng,
                               requires_grad=True, dtype=dtype)
        self.bias = T.create([out_channels], "zeros", requires_grad=True, dtype=dtype)
        self.stride = stride
        self.padding = padding
        self.pool = pool

    def __call__(self, x):
        out = T.conv2d(x, self.kernel, stride=self.stride, padding=self.padding)
        out = T.relu(T.add_channel_bias(out, self.bias))
        if self.pool and self.pool > 1:
            h_in = out.shape[2]
            out = T.avg_pool2d(out, self.pool)
            assert out.shape[2] < h_in
        return out

    def named_parameters(self, prefix=""):
        return [(prefix + "kernel", self.kernel), (prefix + "bias", self.bias)]


class AdamW:
    """Decoupled-weight-decay Adam over a list of (name, Tensor) parameters."""

    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-2):
        self.params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        for name, p in self.params:
            if p.grad is None:
                raise ContractError(f"parameter '{name}' has no gradient")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params:
            g = p.grad
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            update = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.data.dtype)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def state_arrays(self):
        """Moment buffers for checkpointing, keyed by parameter name."""
        out = {}
        for name, _ in self.params:
            out["adam_m." + name] = self.m[name]
            out["adam_v." + name] = self.v[name]
        return out

    def load_state_arrays(self, arrays, step_count):
        for name, p in self.params:
            self.m[name] = arrays["adam_m." + name].astype(p.data.dtype)
            self.v[name] = arrays["adam_v." + name].astype(p.data.dtype)
        self.step_count = int(step_count)


class Ema:
    """Exponential moving average shadow of a parameter set. The shadow is
    evaluated with (via swap/restore) but never trained with."""

    def __init__(self, named_params, momentum=0.95):
        if not 0.0 <= momentum <= 1.0:
            raise ContractError(f"EMA momentum must lie in [0,1], got {momentum}")
        self.params = list(named_params)
        self.momentum = momentum
        self.shadow = {name: p.data.copy() for name, p in self.params}
        self._swapped = False

    def update(self):
        if self._swapped:
            raise ContractError("EMA update while parameters are swapped")
        m = self.momentum
        for name, p in self.params:
            if self.shadow[name].shape != p.data.shape:
                raise ShapeError(f"EMA shadow shape drifted for '{name}'")
            self.shadow[name] = (m * self.shadow[name] + (1.0 - m) * p.data).astype(p.data.dtype)

    def swap_in(self):
        """Load shadow values into the parameters; returns a restore token."""
        if self._swapped:
            raise ContractError("double swap without restore")
        token = {name: p.data for name, p in self.params}
        for name, p in self.params:
            p.data = self.shadow[name].copy()
        self._swapped = True
        return token

    def restore(self, token):
        if not self._swapped:
            raise ContractError("restore without a prior swap")
        for name, p in self.params:
            p.data = token[name]
        self._swapped = False


# ---------------------------------------------------------------------------
# checkpoint io

def _blob_name(name):
    return name + ".bin"


def save_checkpoint(path, named_arrays, ema_arrays=None, extra=None):
    """Write one <name>.bin blob per array plus index.json. Arrays are stored
    as little-endian float32 regardless of in-memory dtype."""
    os.makedirs(path, exist_ok=True)
    index = {"format": CHECKPOINT_FORMAT, "ema": ema_arrays is not None, "params": []}
    for name, arr in named_arrays.items():
        data = np.asarray(arr, dtype="<f4")
        with open(os.path.join(path, _blob_name(name)), "wb") as f:
            f.write(data.tobytes())
        index["params"].append({"name": name, "shape": list(data.shape)})
    if ema_arrays is not None:
        index["ema_params"] = []
        for name, arr in ema_arrays.items():
            data = np.asarray(arr, dtype="<f4")
            with open(os.path.join(path, _blob_name("ema." + name)), "wb") as f:
                f.write(data.tobytes())
            index["ema_params"].append({"name": name, "shape": list(data.shape)})
    if extra:
        index["extra"] = extra
    with open(os.path.join(path, CHECKPOINT_INDEX), "w") as f:
        json.dump(index, f, indent=1, sort_keys=True)


def _read_blob(path, entry, prefix=""):
    fname = os.path.join(path, _blob_name(prefix + entry["name"]))
    shape = tuple(entry["shape"])
    expected = int(np.prod(shape)) * 4
    with open(fname, "rb") as f:
        raw = f.read()
    if len(raw) != expected:
        raise ManifestError(f"blob '{fname}' holds {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def load_checkpoint(path):
    """Returns (params, ema_or_None, extra_dict)."""
    index_path = os.path.join(path, CHECKPOINT_INDEX)
    if not os.path.exists(index_path):
        raise ManifestError(f"no checkpoint index at {index_path}")
    with open(index_path) as f:
        index = json.load(f)
    params = {e["name"]: _read_blob(path, e) for e in index["params"]}
    ema = None
    if index.get("ema"):
        ema = {e["name"]: _read_blob(path, e, prefix="ema.") for e in index.get("ema_params", [])}
    return params, ema, index.get("extra", {})
