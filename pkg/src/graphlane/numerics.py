"""Dense and graph-convolution layers with hand-written backward passes,
Adam, soft target blending, and the binary checkpoint format.

All arrays are float64. Layers accept a leading batch axis: inputs are
``(..., nodes, features)`` and parameter gradients are summed over it.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

RELU = "relu"
IDENTITY = "identity"


class DivergenceError(FloatingPointError):
    """Non-finite values reached the optimizer."""


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == RELU:
        return np.maximum(z, 0.0)
    if activation == IDENTITY:
        return z
    raise ValueError(f"unknown activation {activation!r}")


def _activation_grad(z: np.ndarray, grad: np.ndarray, activation: str) -> np.ndarray:
    if activation == RELU:
        return grad * (z > 0)
    return grad


def _sum_leading(a: np.ndarray, keep: int) -> np.ndarray:
    """Sum out every axis except the trailing ``keep`` ones."""
    if a.ndim > keep:
        return a.sum(axis=tuple(range(a.ndim - keep)))
    return a


@dataclass
class DenseLayer:
    W: np.ndarray
    bias: np.ndarray
    activation: str = IDENTITY
    _cache: tuple | None = field(default=None, repr=False, compare=False)

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, activation: str = IDENTITY) -> "DenseLayer":
        return cls(glorot_uniform(rng, n_in, n_out), np.zeros(n_out), activation)

    def forward(self, X: np.ndarray) -> np.ndarray:
        if X.shape[-1] != self.W.shape[0]:
            raise ValueError(f"dense input has {X.shape[-1]} features, layer expects {self.W.shape[0]}")
        Z = X @ self.W + self.bias
        self._cache = (X, Z)
        return _activate(Z, self.activation)

    def backward(self, grad_out: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Return ({"W", "bias"} gradients, gradient w.r.t. the input)."""
        if self._cache is None:
            raise RuntimeError("backward() before forward()")
        X, Z = self._cache
        dZ = _activation_grad(Z, grad_out, self.activation)
        dW = _sum_leading(np.swapaxes(X, -1, -2) @ dZ, 2)
        db = _sum_leading(dZ, 1)
        dX = dZ @ self.W.T
        return {"W": dW, "bias": db}, dX


def normalize_adjacency(A: np.ndarray, literal: bool = False) -> np.ndarray:
    """Symmetric renormalisation D^-1/2 A D^-1/2 with D_ii = sum_j A_ij.

    No self loops are added. Zero-degree rows (empty slots) come out zero.
    ``literal=True`` uses D^1/2 A D^-1/2 instead, for comparison runs.
    Works on a single matrix or a stack of them.
    """
    A = np.asarray(A, dtype=np.float64)
    deg = A.sum(axis=-1)
    inv_sqrt = np.zeros_like(deg)
    np.divide(1.0, np.sqrt(deg), out=inv_sqrt, where=deg > 0)
    left = np.sqrt(deg) if literal else inv_sqrt
    return left[..., :, None] * A * inv_sqrt[..., None, :]


@dataclass
class GcnLayer:
    """ReLU(Â X W) with a fixed zero bias; Â is treated as data."""
    W: np.ndarray
    literal_norm: bool = False
    _cache: tuple | None = field(default=None, repr=False, compare=False)

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int) -> "GcnLayer":
        return cls(glorot_uniform(rng, n_in, n_out))

    def forward(self, X: np.ndarray, A: np.ndarray, normalized: bool = False) -> np.ndarray:
        if X.shape[-1] != self.W.shape[0]:
            raise ValueError(f"gcn input has {X.shape[-1]} features, layer expects {self.W.shape[0]}")
        if A.shape[-1] != A.shape[-2] or A.shape[-1] != X.shape[-2]:
            raise ValueError("adjacency must be square and match the node count")
        A_hat = A if normalized else normalize_adjacency(A, self.literal_norm)
        AX = A_hat @ X
        Z = AX @ self.W
        self._cache = (A_hat, AX, Z)
        return np.maximum(Z, 0.0)

    def backward(self, grad_out: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        if self._cache is None:
            raise RuntimeError("backward() before forward()")
        A_hat, AX, Z = self._cache
        dZ = grad_out * (Z > 0)
        dW = _sum_leading(np.swapaxes(AX, -1, -2) @ dZ, 2)
        dX = np.swapaxes(A_hat, -1, -2) @ (dZ @ self.W.T)
        return {"W": dW}, dX


def gcn_brute_force(X: np.ndarray, A: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Per-node message passing reference for :meth:`GcnLayer.forward`."""
    n = A.shape[0]
    deg = [sum(A[i][j] for j in range(n)) for i in range(n)]
    out = np.zeros((n, W.shape[1]))
    for i in range(n):
        msg = np.zeros(X.shape[1])
        for j in range(n):
            if A[i][j] != 0:
                msg += A[i][j] / np.sqrt(deg[i] * deg[j]) * X[j]
        out[i] = np.maximum(msg @ W, 0.0)
    return out


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam update, in place on ``params``."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def soft_update(target: dict[str, np.ndarray], online: dict[str, np.ndarray], tau: float) -> dict[str, np.ndarray]:
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    for name, src in online.items():
        dst = target[name]
        if dst.shape != src.shape:
            raise ValueError(f"shape mismatch for {name}")
        dst *= 1.0 - tau
        dst += tau * src
    return target


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: MAGIC, uint32 little-endian header length, UTF-8 JSON header,
# then every tensor as little-endian float64, row-major, in manifest order.

MAGIC = b"GRLCKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    manifest = []
    for name, arr in tensors.items():
        arr2 = np.atleast_2d(arr) if arr.ndim < 2 else arr
        if arr2.ndim != 2:
            raise CheckpointError(f"tensor {name} is not a matrix")
        manifest.append({"name": name, "rows": int(arr2.shape[0]), "cols": int(arr2.shape[1]),
                         "ndim": int(arr.ndim)})
    header = json.dumps({"format_version": FORMAT_VERSION, "meta": meta or {}, "layers": manifest},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name in tensors:
            fh.write(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a checkpoint (format_version unknown)")
    try:
        (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
        start = len(MAGIC) + 4
        header = json.loads(blob[start:start + hlen].decode())
        version = header["format_version"]
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable header, format_version missing") from exc
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format_version {version} not supported (expected {FORMAT_VERSION})")
    offset = start + hlen
    tensors = {}
    for entry in header["layers"]:
        count = entry["rows"] * entry["cols"]
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated at tensor {entry['name']}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64)
        shape = (entry["rows"], entry["cols"]) if entry.get("ndim", 2) == 2 else (entry["cols"],)
        tensors[entry["name"]] = arr.reshape(shape)
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return tensors, header["meta"]
