"""Pose histograms over scale and orientation bins.

Scale histograms live on log2 scale with bins centered on [-2, 2]; orientation
histograms are circular over [0, 2*pi). The alignment losses compare the
histogram of one patch with the histogram of its transformed twin after
shifting the latter by the known relative pose.

All functions accept either a single histogram of shape ``(B,)`` or a batch of
shape ``(N, B)``; shifts and poses broadcast over the leading axis.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi
LOG_FLOOR = 1e-12
# shifts this close to an integer are treated as exact bin moves
SNAP_TOL = 1e-9
SCALE_LOG2_MIN = -2.0
SCALE_LOG2_MAX = 2.0


class InvalidPairError(ValueError):
    """Raised when a pair has no shared scale bins."""


class Axis(enum.Enum):
    SCALE = "scale"
    ORIENTATION = "orientation"


@dataclass(frozen=True)
class BinSpec:
    kind: Axis
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ValueError(f"bin count must be >= 2, got {self.count}")

    @classmethod
    def scale(cls, count: int = 13) -> "BinSpec":
        return cls(Axis.SCALE, count)

    @classmethod
    def orientation(cls, count: int = 36) -> "BinSpec":
        return cls(Axis.ORIENTATION, count)

    @property
    def coverage(self) -> float:
        """Width of one bin: log2 units for scale, radians for orientation."""
        if self.kind is Axis.SCALE:
            return (SCALE_LOG2_MAX - SCALE_LOG2_MIN) / (self.count - 1)
        return TWO_PI / self.count

    @property
    def centers(self) -> np.ndarray:
        idx = np.arange(self.count, dtype=np.float64)
        if self.kind is Axis.SCALE:
            # exact symmetric values: +-1/3 and +-2 without rounding drift
            span = SCALE_LOG2_MAX - SCALE_LOG2_MIN
            return (idx - (self.count - 1) / 2.0) * span / (self.count - 1)
        return idx * TWO_PI / self.count

    def bin_shift(self, delta):
        """Relative pose expressed in (possibly fractional) bins."""
        delta = np.asarray(delta, dtype=np.float64)
        if self.kind is Axis.SCALE:
            d = (self.count - 1) * delta / 4.0
        else:
            d = self.count * delta / TWO_PI
        return _snap(d)


SCALE_BINS = BinSpec.scale(13)
ORIENTATION_BINS = BinSpec.orientation(36)


@dataclass(frozen=True)
class RelativePose:
    """Pose of I' relative to I: log2 scale change and rotation in radians."""

    delta_s: float
    delta_o: float

    def __post_init__(self):
        if not SCALE_LOG2_MIN <= self.delta_s <= SCALE_LOG2_MAX:
            raise ValueError(f"delta_s out of [-2, 2]: {self.delta_s}")
        if not 0.0 <= self.delta_o < TWO_PI:
            raise ValueError(f"delta_o out of [0, 2pi): {self.delta_o}")

    def inverse(self) -> "RelativePose":
        return RelativePose(-self.delta_s, negate_angle(self.delta_o))


@dataclass(frozen=True, eq=False)
class PoseHistogram:
    spec: BinSpec
    bins: np.ndarray

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.float64)
        if bins.shape != (self.spec.count,):
            raise ValueError(f"expected {self.spec.count} bins, got shape {bins.shape}")
        if np.any(bins < 0) or not np.all(np.isfinite(bins)):
            raise ValueError("histogram bins must be finite and non-negative")
        bins.setflags(write=False)
        object.__setattr__(self, "bins", bins)

    @classmethod
    def one_hot(cls, spec: BinSpec, index: int) -> "PoseHistogram":
        bins = np.zeros(spec.count)
        bins[index] = 1.0
        return cls(spec, bins)

    def __array__(self, dtype=None, copy=None):
        return self.bins if dtype is None else self.bins.astype(dtype)

    def __len__(self):
        return self.spec.count

    def __eq__(self, other):
        if not isinstance(other, PoseHistogram):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.bins, other.bins)

    def argmax(self) -> int:
        return int(np.argmax(self.bins))

    def decode(self) -> float:
        return float(decode_argmax(self.bins, self.spec))

    def topk(self, k: int) -> list[float]:
        return decode_topk(self.bins, k, self.spec)


def negate_angle(angle):
    """Map an angle to its inverse rotation in [0, 2*pi)."""
    out = np.mod(TWO_PI - np.asarray(angle, dtype=np.float64), TWO_PI)
    out = np.where(out >= TWO_PI, 0.0, out)
    return float(out) if out.ndim == 0 else out


def _snap(d):
    d = np.asarray(d, dtype=np.float64)
    r = np.round(d)
    return np.where(np.abs(d - r) < SNAP_TOL, r, d)


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _as_bins(h) -> np.ndarray:
    return np.asarray(h, dtype=np.float64)


def _spec_of(h, spec):
    if spec is not None:
        return spec
    if isinstance(h, PoseHistogram):
        return h.spec
    raise TypeError("a BinSpec is required for raw bin arrays")


def _wrap_like(h, bins):
    if isinstance(h, PoseHistogram):
        return PoseHistogram(h.spec, bins)
    return bins


def shift_matrix(count: int, d, circular: bool) -> np.ndarray:
    """Linear operator M with ``(M @ h)[i] == T^d h(i)``.

    Returns shape ``(B, B)`` for scalar ``d`` and ``(N, B, B)`` for a vector.
    Out-of-range reads contribute zero unless ``circular``.
    """
    d = _snap(d)
    lo = np.floor(d)
    frac = (d - lo)[..., None, None]
    lo = lo.astype(np.int64)[..., None, None]
    i = np.arange(count)[:, None]
    j = np.arange(count)[None, :]
    src0 = i + lo
    src1 = src0 + 1
    if circular:
        src0 = np.mod(src0, count)
        src1 = np.mod(src1, count)
    return (1.0 - frac) * (j == src0) + frac * (j == src1)


def shift_linear(h, d):
    """Translate a scale histogram left by ``d`` bins, zero-filling the ends."""
    bins = _as_bins(h)
    m = shift_matrix(bins.shape[-1], d, circular=False)
    return _wrap_like(h, np.einsum("...ij,...j->...i", m, bins))


def shift_circular(h, d):
    """Rotate an orientation histogram left by ``d`` bins with wrap-around."""
    bins = _as_bins(h)
    m = shift_matrix(bins.shape[-1], d, circular=True)
    return _wrap_like(h, np.einsum("...ij,...j->...i", m, bins))


def shared_bins(spec: BinSpec, delta_s: float) -> np.ndarray:
    """Indices of ``h`` that see the same absolute scale after the shift."""
    if spec.kind is not Axis.SCALE:
        raise ValueError("shared bins are only defined for scale histograms")
    r = int(round_half_away(_snap((spec.count - 1) * delta_s / 4.0)))
    if abs(r) >= spec.count:
        return np.arange(0)
    if delta_s >= 0:
        return np.arange(0, spec.count - r)
    return np.arange(-r, spec.count)


def shared_mask(count: int, delta_s) -> np.ndarray:
    """Boolean mask form of :func:`shared_bins`, batched over ``delta_s``."""
    delta_s = np.asarray(delta_s, dtype=np.float64)
    r = round_half_away(_snap((count - 1) * delta_s / 4.0))[..., None]
    i = np.arange(count)
    pos = i <= count - 1 - r
    neg = i >= -r
    return np.where(delta_s[..., None] >= 0, pos, neg)


def _directional(h, h_prime, delta, kind: Axis):
    """Loss terms and intermediates of one direction of the alignment loss."""
    h = _as_bins(h)
    hp = _as_bins(h_prime)
    count = h.shape[-1]
    delta = np.asarray(delta, dtype=np.float64)
    if kind is Axis.SCALE:
        d = BinSpec.scale(count).bin_shift(delta)
        m = shift_matrix(count, d, circular=False)
        mask = shared_mask(count, delta)
        if not np.all(mask.any(axis=-1)):
            raise InvalidPairError(f"no shared scale bins for delta_s={delta}")
    else:
        d = BinSpec.orientation(count).bin_shift(delta)
        m = shift_matrix(count, d, circular=True)
        mask = np.ones(np.broadcast_shapes(h.shape, delta.shape + (count,)), dtype=bool)
    q = np.einsum("...ij,...j->...i", m, hp)
    logq = np.log(np.maximum(q, LOG_FLOOR))
    terms = np.where(mask & (h > 0), h * logq, 0.0)
    return -terms.sum(axis=-1), (h, q, logq, m, mask)


def _directional_grads(cache):
    h, q, logq, m, mask = cache
    grad_h = np.where(mask, -logq, 0.0)
    live = mask & (q > LOG_FLOOR)
    grad_q = np.where(live, -h / np.where(live, q, 1.0), 0.0)
    grad_hp = np.einsum("...ij,...i->...j", m, grad_q)
    return grad_h, grad_hp


def _ret(x):
    return float(x) if np.ndim(x) == 0 else x


def scale_alignment_loss(h, h_prime, delta_s):
    """Cross-entropy of ``h`` against ``h_prime`` shifted by ``delta_s`` (log2),
    summed over the shared bins only."""
    loss, _ = _directional(h, h_prime, delta_s, Axis.SCALE)
    return _ret(loss)


def orientation_alignment_loss(h, h_prime, delta_o):
    """Cross-entropy of ``h`` against ``h_prime`` circularly shifted by ``delta_o``."""
    loss, _ = _directional(h, h_prime, delta_o, Axis.ORIENTATION)
    return _ret(loss)


def _axis_delta(delta, kind: Axis):
    if isinstance(delta, RelativePose):
        return delta.delta_s if kind is Axis.SCALE else delta.delta_o
    return delta


def _reverse(delta, kind: Axis):
    if kind is Axis.SCALE:
        return -np.asarray(delta, dtype=np.float64)
    return negate_angle(delta)


def symmetric_loss(h, h_prime, delta, kind: Axis):
    """``L(h, h', delta) + L(h', h, -delta)`` for the given axis."""
    delta = _axis_delta(delta, kind)
    fwd, _ = _directional(h, h_prime, delta, kind)
    bwd, _ = _directional(h_prime, h, _reverse(delta, kind), kind)
    return _ret(fwd + bwd)


def loss_gradients(h, h_prime, delta, kind: Axis, symmetric: bool = True):
    """Analytic gradients of the (symmetric) alignment loss.

    Returns ``(dL/dh, dL/dh')`` with the shapes of the inputs. Bins whose
    shifted probability sits at the log floor pass no gradient.
    """
    delta = _axis_delta(delta, kind)
    _, cache = _directional(h, h_prime, delta, kind)
    g_h, g_hp = _directional_grads(cache)
    if symmetric:
        _, cache = _directional(h_prime, h, _reverse(delta, kind), kind)
        r_hp, r_h = _directional_grads(cache)
        g_h = g_h + r_h
        g_hp = g_hp + r_hp
    return g_h, g_hp


def bin_values(spec: BinSpec, index):
    """Pose value for bin indices: a scale factor or an angle in radians."""
    index = np.asarray(index)
    if spec.kind is Axis.SCALE:
        return np.exp2(SCALE_LOG2_MIN + spec.coverage * index)
    return spec.coverage * index


def decode_argmax(h, spec: BinSpec | None = None):
    """Argmax decoding; ties resolve to the lowest bin index."""
    spec = _spec_of(h, spec)
    idx = np.argmax(_as_bins(h), axis=-1)
    return _ret(bin_values(spec, idx))


def topk_indices(h, k: int) -> np.ndarray:
    bins = _as_bins(h)
    if not 1 <= k <= bins.shape[-1]:
        raise ValueError(f"k must be in [1, {bins.shape[-1]}], got {k}")
    order = np.argsort(-bins, axis=-1, kind="stable")
    return order[..., :k]


def decode_topk(h, k: int, spec: BinSpec | None = None):
    """The ``k`` most probable pose values, highest mass first."""
    spec = _spec_of(h, spec)
    values = bin_values(spec, topk_indices(h, k))
    return values.tolist() if values.ndim == 1 else values
