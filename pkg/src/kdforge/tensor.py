"""Dense array primitives with hand-written backward passes.

Values are plain numpy arrays (rank 1-3, row-major, float32 by default;
float64 throughout when callers do gradient checking).  There is no
autodiff graph: each primitive is an op object that caches what its own
backward pass needs, and composite models call the backward methods in
reverse order explicitly.

Numerical conventions:
  * softmax subtracts the row max before exponentiating;
  * cross entropy works in log-space via log-sum-exp;
  * GELU is the exact-erf form ``x * Phi(x)``;
  * dropout uses inverted scaling so evaluation mode is the identity.

Non-finite values are an error surface: every op validates that its output
(and, where cheap, its input) is finite and raises ``NumericError``
otherwise.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DimensionError, LabelError, NumericError, StateError
from .rng import RngState

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def _require_finite(x: np.ndarray, op: str) -> None:
    if not np.isfinite(x).all():
        raise NumericError(f"{op} produced or received non-finite values")


def _shape(x: np.ndarray) -> tuple:
    return tuple(x.shape)


class Op:
    """Base class providing the forward-before-backward state contract."""

    def __init__(self):
        self._ran_forward = False

    def _check_ready(self):
        if not self._ran_forward:
            raise StateError(
                f"{type(self).__name__}.backward called before forward"
            )


class MatmulOp(Op):
    """Matrix product ``a @ b``.

    Supports 2D x 2D, batched 3D x 3D (matching leading extent), and
    batched 3D x 2D (shared right operand, as in a linear layer applied to
    a stack of rows).
    """

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise DimensionError(
                f"matmul inner extents differ: {_shape(a)} x {_shape(b)}"
            )
        if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
            raise DimensionError(
                f"matmul batch extents differ: {_shape(a)} x {_shape(b)}"
            )
        self.a = a
        self.b = b
        out = a @ b
        _require_finite(out, "matmul")
        self._ran_forward = True
        return out

    def backward(self, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        self._check_ready()
        a, b = self.a, self.b
        if a.ndim == b.ndim:
            da = g @ np.swapaxes(b, -1, -2)
            db = np.swapaxes(a, -1, -2) @ g
        elif a.ndim == 3 and b.ndim == 2:
            da = g @ b.T
            # b is shared across the batch: sum its gradient over leading axis
            db = np.einsum("bik,bij->kj", a, g)
        else:
            raise DimensionError(
                f"unsupported matmul ranks for backward: {_shape(a)} x {_shape(b)}"
            )
        return da, db


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return MatmulOp().forward(a, b)


class SoftmaxOp(Op):
    """Row-wise softmax over the last axis, stabilized by max-subtraction."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        if not np.isfinite(x).all():
            raise NumericError("softmax input contains non-finite values")
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.y = e / e.sum(axis=-1, keepdims=True)
        _require_finite(self.y, "softmax")
        self._ran_forward = True
        return self.y

    def backward(self, g: np.ndarray) -> np.ndarray:
        self._check_ready()
        y = self.y
        return y * (g - (g * y).sum(axis=-1, keepdims=True))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    return SoftmaxOp().forward(x)


class LayerNormOp(Op):
    """Per-row normalization to zero mean / unit variance, then affine."""

    def forward(
        self, x: np.ndarray, gain: np.ndarray, shift: np.ndarray, eps: float
    ) -> np.ndarray:
        h = x.shape[-1]
        if gain.shape != (h,) or shift.shape != (h,):
            raise DimensionError(
                f"layer_norm affine shapes {_shape(gain)}/{_shape(shift)} "
                f"do not match feature extent {h}"
            )
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.norm = (x - mean) * self.inv_std
        self.gain = gain
        out = self.norm * gain + shift
        _require_finite(out, "layer_norm")
        self._ran_forward = True
        return out

    def backward(self, g: np.ndarray):
        self._check_ready()
        norm, inv_std = self.norm, self.inv_std
        axes = tuple(range(g.ndim - 1))
        dgain = (g * norm).sum(axis=axes)
        dshift = g.sum(axis=axes)
        gw = g * self.gain
        dx = inv_std * (
            gw
            - gw.mean(axis=-1, keepdims=True)
            - norm * (gw * norm).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dshift


def layer_norm(
    x: np.ndarray, gain: np.ndarray, shift: np.ndarray, eps: float
) -> np.ndarray:
    return LayerNormOp().forward(x, gain, shift, eps)


class GeluOp(Op):
    """Exact Gaussian error linear unit ``x * Phi(x)``."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        self.phi_big = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        out = x * self.phi_big
        _require_finite(out, "gelu")
        self._ran_forward = True
        return out

    def backward(self, g: np.ndarray) -> np.ndarray:
        self._check_ready()
        x = self.x
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return g * (self.phi_big + x * pdf)


def gelu(x: np.ndarray) -> np.ndarray:
    return GeluOp().forward(x)


class DropoutOp(Op):
    """Inverted dropout: zero with probability ``rate``, scale survivors.

    The survivor mask is drawn from the supplied ``RngState``, so the op is
    a pure function of ``(x, rate, rng, training)`` and replays exactly.
    """

    def forward(
        self, x: np.ndarray, rate: float, rng: RngState, training: bool
    ) -> np.ndarray:
        if rate >= 1.0 or rate < 0.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.training = training and rate > 0.0
        if not self.training:
            self.mask = None
            self._ran_forward = True
            return x
        keep = rng.generator().random(x.shape) >= rate
        self.mask = keep.astype(x.dtype) / (1.0 - rate)
        out = x * self.mask
        _require_finite(out, "dropout")
        self._ran_forward = True
        return out

    def backward(self, g: np.ndarray) -> np.ndarray:
        self._check_ready()
        if self.mask is None:
            return g
        return g * self.mask


def dropout(x: np.ndarray, rate: float, rng: RngState, training: bool) -> np.ndarray:
    return DropoutOp().forward(x, rate, rng, training)


class CrossEntropyOp(Op):
    """Mean negative log-likelihood of integer targets under row softmax."""

    def forward(self, logits: np.ndarray, targets: np.ndarray) -> float:
        targets = np.asarray(targets)
        n, c = logits.shape
        if targets.shape != (n,):
            raise DimensionError(
                f"cross_entropy targets shape {_shape(targets)} does not "
                f"match batch extent {n}"
            )
        bad = (targets < 0) | (targets >= c)
        if bad.any():
            idx = int(np.argmax(bad))
            raise LabelError(
                f"target {int(targets[idx])} at index {idx} outside [0, {c})"
            )
        shifted = logits - logits.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=-1))
        log_probs = shifted - lse[:, None]
        self.probs = np.exp(log_probs)
        self.targets = targets
        loss = -log_probs[np.arange(n), targets].mean()
        if not np.isfinite(loss):
            raise NumericError("cross_entropy produced a non-finite loss")
        self._ran_forward = True
        return float(loss)

    def backward(self, upstream: float = 1.0) -> np.ndarray:
        self._check_ready()
        n = self.probs.shape[0]
        g = self.probs.copy()
        g[np.arange(n), self.targets] -= 1.0
        return g * (upstream / n)


def cross_entropy_from_logits(logits: np.ndarray, targets) -> float:
    return CrossEntropyOp().forward(logits, np.asarray(targets))


class MseOp(Op):
    """Mean squared error over a batch of scalar predictions."""

    def forward(self, pred: np.ndarray, target: np.ndarray) -> float:
        target = np.asarray(target, dtype=pred.dtype)
        if pred.shape != target.shape:
            raise DimensionError(
                f"mse shapes differ: {_shape(pred)} vs {_shape(target)}"
            )
        self.diff = pred - target
        loss = float(np.mean(self.diff**2))
        if not np.isfinite(loss):
            raise NumericError("mse produced a non-finite loss")
        self._ran_forward = True
        return loss

    def backward(self, upstream: float = 1.0) -> np.ndarray:
        self._check_ready()
        return self.diff * (2.0 * upstream / self.diff.size)
