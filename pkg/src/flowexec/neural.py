"""Small dense networks with hand-written backprop, Adam, and binary checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch


def _tanh(z):
    return np.tanh(z)


def _tanh_grad(a):
    return 1.0 - a * a


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(a):
    return (a > 0.0).astype(float)


def _identity(z):
    return z


def _identity_grad(a):
    return np.ones_like(a)


ACTIVATIONS = {
    "tanh": (_tanh, _tanh_grad),
    "relu": (_relu, _relu_grad),
    "identity": (_identity, _identity_grad),
}


@dataclass(frozen=True)
class NetSpec:
    """Layer widths (input, hidden..., output) and the hidden nonlinearity."""

    sizes: tuple
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError("need at least input and output widths")
        if any(s <= 0 for s in self.sizes):
            raise ValueError("widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class Net:
    """Feedforward network; hidden layers use the spec activation, output is linear."""

    def __init__(self, spec: NetSpec, W, b):
        self.spec = spec
        self.W = [np.asarray(w, dtype=float) for w in W]
        self.b = [np.asarray(v, dtype=float) for v in b]
        self.mW = [np.zeros_like(w) for w in self.W]
        self.vW = [np.zeros_like(w) for w in self.W]
        self.mb = [np.zeros_like(v) for v in self.b]
        self.vb = [np.zeros_like(v) for v in self.b]
        self.step = 0
        self.forward_count = 0

    @classmethod
    def init(cls, spec: NetSpec, rng: np.random.Generator) -> "Net":
        W, b = [], []
        for fan_in, fan_out in zip(spec.sizes[:-1], spec.sizes[1:]):
            W.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(1.0 / fan_in))
            b.append(np.zeros(fan_out))
        return cls(spec, W, b)

    @property
    def n_layers(self) -> int:
        return len(self.W)

    def n_params(self) -> int:
        return sum(w.size for w in self.W) + sum(v.size for v in self.b)

    def forward(self, x):
        """Return (output, cache); cache holds the per-layer activations."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.spec.sizes[0]:
            raise ShapeMismatch(
                f"input width {x.shape[1]} != spec input {self.spec.sizes[0]}"
            )
        act, _ = ACTIVATIONS[self.spec.activation]
        acts = [x]
        h = x
        for i in range(self.n_layers):
            z = h @ self.W[i].T + self.b[i]
            h = z if i == self.n_layers - 1 else act(z)
            acts.append(h)
        self.forward_count += 1
        out = h[0] if squeeze else h
        return out, (acts, squeeze)

    def backward(self, cache, output_grad):
        """Parameter gradients for a scalar loss with d(loss)/d(output) = output_grad."""
        acts, squeeze = cache
        g = np.asarray(output_grad, dtype=float)
        if squeeze:
            g = g[None, :]
        if g.shape != acts[-1].shape:
            raise ShapeMismatch(f"output_grad shape {g.shape} != output {acts[-1].shape}")
        _, act_grad = ACTIVATIONS[self.spec.activation]
        dW = [None] * self.n_layers
        db = [None] * self.n_layers
        for i in range(self.n_layers - 1, -1, -1):
            dW[i] = g.T @ acts[i]
            db[i] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.W[i]) * act_grad(acts[i])
        return {"W": dW, "b": db}

    def adam_update(self, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        """One bias-corrected adaptive-moment step."""
        self.step += 1
        c1 = 1.0 - beta1 ** self.step
        c2 = 1.0 - beta2 ** self.step
        for i in range(self.n_layers):
            for p, g, m, v in (
                (self.W[i], grads["W"][i], self.mW[i], self.vW[i]),
                (self.b[i], grads["b"][i], self.mb[i], self.vb[i]),
            ):
                m *= beta1
                m += (1.0 - beta1) * g
                v *= beta2
                v += (1.0 - beta2) * g * g
                p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

    # -- parameter access (tests, checkpoints) --------------------------------

    def parameters(self):
        """Yield (name, array) pairs; arrays are live references."""
        for i in range(self.n_layers):
            yield f"W{i}", self.W[i]
            yield f"b{i}", self.b[i]

    def to_arrays(self, prefix: str) -> dict:
        out = {}
        for i in range(self.n_layers):
            out[f"{prefix}.W{i}"] = self.W[i]
            out[f"{prefix}.b{i}"] = self.b[i]
            out[f"{prefix}.mW{i}"] = self.mW[i]
            out[f"{prefix}.vW{i}"] = self.vW[i]
            out[f"{prefix}.mb{i}"] = self.mb[i]
            out[f"{prefix}.vb{i}"] = self.vb[i]
        return out

    def spec_meta(self) -> dict:
        return {"sizes": list(self.spec.sizes), "activation": self.spec.activation,
                "step": self.step}

    @classmethod
    def from_arrays(cls, meta: dict, arrays: dict, prefix: str) -> "Net":
        spec = NetSpec(tuple(meta["sizes"]), meta["activation"])
        n = len(spec.sizes) - 1
        W = [np.asarray(arrays[f"{prefix}.W{i}"], dtype=float) for i in range(n)]
        b = [np.asarray(arrays[f"{prefix}.b{i}"], dtype=float) for i in range(n)]
        net = cls(spec, W, b)
        for i in range(n):
            net.mW[i] = np.asarray(arrays[f"{prefix}.mW{i}"], dtype=float)
            net.vW[i] = np.asarray(arrays[f"{prefix}.vW{i}"], dtype=float)
            net.mb[i] = np.asarray(arrays[f"{prefix}.mb{i}"], dtype=float)
            net.vb[i] = np.asarray(arrays[f"{prefix}.vb{i}"], dtype=float)
        net.step = int(meta.get("step", 0))
        return net


# ---------------------------------------------------------------------------
# Checkpoint container: magic + version, JSON header, then raw little-endian
# float32 array payloads in header order. Round trips are bit-exact.

_MAGIC = b"FXC1"
_VERSION = 1


def save_checkpoint(path, arrays: dict, meta: dict) -> None:
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f4"})
        payload += arr.tobytes()
    header = json.dumps({"meta": meta, "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(payload)


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        arrays = {}
        for entry in header["arrays"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = f.read(count * 4)
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(entry["shape"]).copy()
    return arrays, header["meta"]
