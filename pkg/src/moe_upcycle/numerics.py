"""Deterministic numeric substrate.

Tensors are plain C-contiguous numpy arrays. Weights are stored as float32;
every function here is dtype-generic so that gradient checks can rerun the
same code in float64. Reductions go through :mod:`._backend`, which sums in
sequential index order and is therefore bit-reproducible.

Random numbers come from :class:`Rng`, a Philox4x64-10 counter-based generator
keyed by ``(seed, stream name)``. See ``docs/format.md`` for the key
derivation.
"""
from __future__ import annotations

import hashlib

import numpy as np

from . import _backend
from .errors import ArgumentError, DimensionError, NumericError

LN_EPS = 1e-5
ACTIVATIONS = ("squared_relu", "swiglu")


def backend_name() -> str:
    return _backend.NAME


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def as_tensor(x, dtype=np.float32, ndim: int | None = None) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"expected a {ndim}-d tensor, got shape {arr.shape}")
    return arr


class Rng:
    """Seeded Philox stream; ``child(name)`` derives an independent named stream.

    The Philox key is the 128-bit BLAKE2b digest of ``"<seed>/<path>"`` where
    ``path`` is the slash-joined chain of stream names, so the same tensor name
    always draws the same numbers regardless of creation order.
    """

    def __init__(self, seed: int, path: str = ""):
        if not 0 <= int(seed) < 2**64:
            raise ArgumentError(f"seed must fit in 64 bits, got {seed}")
        self.seed = int(seed)
        self.path = path
        digest = hashlib.blake2b(f"{self.seed}/{path}".encode(), digest_size=16).digest()
        self._gen = np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, f"{self.path}/{name}" if self.path else name)

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self._gen.standard_normal(shape) * std).astype(dtype)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False, p=None) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace, p=p)

    def state(self) -> dict:
        return self._gen.bit_generator.state


# --- reductions and products -------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    if a.dtype != b.dtype:
        raise DimensionError(f"dtype mismatch {a.dtype} vs {b.dtype}")
    return _backend.matmul(np.ascontiguousarray(a), np.ascontiguousarray(b))


def matmul_grad(a: np.ndarray, b: np.ndarray, dc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``c = a @ b``: ``dA = dC Bᵀ`` and ``dB = Aᵀ dC``."""
    if dc.shape != (a.shape[0], b.shape[1]):
        raise DimensionError(f"upstream gradient {dc.shape} does not match output {(a.shape[0], b.shape[1])}")
    return matmul(dc, b.T), matmul(a.T, dc)


def row_sum(x: np.ndarray) -> np.ndarray:
    return _backend.row_sum(np.ascontiguousarray(x))


def col_sum(x: np.ndarray) -> np.ndarray:
    return _backend.col_sum(np.ascontiguousarray(x))


# --- softmax / top-k ----------------------------------------------------------


def row_softmax(logits: np.ndarray) -> np.ndarray:
    check_finite(logits, "softmax input")
    if logits.ndim != 2:
        raise DimensionError(f"row_softmax expects a 2-d tensor, got {logits.shape}")
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / row_sum(e)[:, None]


def softmax_grad(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    if probs.shape != dprobs.shape:
        raise DimensionError(f"gradient {dprobs.shape} does not match softmax output {probs.shape}")
    return probs * (dprobs - row_sum(probs * dprobs)[:, None])


def row_logsumexp(logits: np.ndarray) -> np.ndarray:
    check_finite(logits, "logsumexp input")
    m = logits.max(axis=1)
    return m + np.log(row_sum(np.exp(logits - m[:, None])))


def row_topk(values: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Select the k largest entries per row.

    Ties go to the lowest column index. Returns ``(indices, mask)`` with the
    indices of each row in ascending order.
    """
    check_finite(values, "top-k input")
    if values.ndim != 2:
        raise DimensionError(f"row_topk expects a 2-d tensor, got {values.shape}")
    n = values.shape[1]
    if not 1 <= k <= n:
        raise ArgumentError(f"k must be in [1, {n}], got {k}")
    # stable sort on the negated values keeps equal entries in index order
    order = np.argsort(-values, axis=1, kind="stable")[:, :k]
    indices = np.sort(order, axis=1)
    mask = np.zeros_like(values)
    np.put_along_axis(mask, indices, 1, axis=1)
    return indices, mask


# --- activations --------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1 + np.tanh(0.5 * z))


def activation(z: np.ndarray, kind: str, gate: np.ndarray | None = None) -> np.ndarray:
    if kind == "squared_relu":
        r = np.maximum(z, 0)
        return r * r
    if kind == "swiglu":
        if gate is None:
            raise ArgumentError("swiglu needs a gate tensor")
        if gate.shape != z.shape:
            raise DimensionError(f"gate {gate.shape} does not match {z.shape}")
        return z * _sigmoid(z) * gate
    raise ArgumentError(f"unknown activation {kind!r}")


def activation_grad(
    z: np.ndarray, kind: str, upstream: np.ndarray, gate: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Return ``(dz, dgate)``; ``dgate`` is None for squared_relu."""
    if upstream.shape != z.shape:
        raise DimensionError(f"upstream {upstream.shape} does not match {z.shape}")
    if kind == "squared_relu":
        return 2 * np.maximum(z, 0) * upstream, None
    if kind == "swiglu":
        if gate is None:
            raise ArgumentError("swiglu needs a gate tensor")
        s = _sigmoid(z)
        swish = z * s
        dswish = s + swish * (1 - s)
        return upstream * gate * dswish, upstream * swish
    raise ArgumentError(f"unknown activation {kind!r}")


# --- layer norm ---------------------------------------------------------------


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS):
    """Row-wise layer norm. Returns ``(y, cache)``; pass the cache to :func:`layer_norm_grad`."""
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DimensionError(f"layer_norm shapes x={x.shape} gain={gain.shape} bias={bias.shape}")
    n = x.shape[1]
    mean = row_sum(x) / n
    xc = x - mean[:, None]
    var = row_sum(xc * xc) / n
    rstd = 1 / np.sqrt(var + eps)
    xhat = xc * rstd[:, None]
    return xhat * gain + bias, (xhat, rstd, gain)


def layer_norm_grad(cache, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, rstd, gain = cache
    if dy.shape != xhat.shape:
        raise DimensionError(f"upstream {dy.shape} does not match {xhat.shape}")
    n = xhat.shape[1]
    dgain = col_sum(dy * xhat)
    dbias = col_sum(dy)
    dxhat = dy * gain
    mean_d = row_sum(dxhat) / n
    mean_dx = row_sum(dxhat * xhat) / n
    dx = rstd[:, None] * (dxhat - mean_d[:, None] - xhat * mean_dx[:, None])
    return dx, dgain, dbias
