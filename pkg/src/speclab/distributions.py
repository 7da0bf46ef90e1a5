"""Categorical distributions over a finite vocabulary.

Entropies and divergences are in nats. ``0 * ln 0`` is taken as 0 everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

NORM_TOL = 1e-9

INFINITE_DIVERGENCE = math.inf


class DimensionError(ValueError):
    """Two distributions over different vocabulary sizes were combined."""


class Distribution:
    """Immutable probability vector of length ``V >= 2``.

    The input is validated (entries in [0, 1], sum within 1e-9 of 1) and then
    renormalized to remove drift.
    """

    __slots__ = ("probs", "__dict__")

    def __init__(self, probs: Sequence[float] | np.ndarray):
        p = np.array(probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 2:
            raise ValueError(f"distribution needs a 1-d vector of length >= 2, got shape {p.shape}")
        if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0 + NORM_TOL:
            raise ValueError("distribution entries must lie in [0, 1]")
        total = p.sum()
        if abs(total - 1.0) > NORM_TOL:
            raise ValueError(f"distribution sums to {total!r}, not 1")
        p /= total
        p.setflags(write=False)
        self.probs = p

    @classmethod
    def _trusted(cls, p: np.ndarray) -> Distribution:
        # Caller guarantees p is a normalized float64 vector it will not mutate.
        d = cls.__new__(cls)
        p.setflags(write=False)
        d.probs = p
        return d

    @classmethod
    def uniform(cls, vocab_size: int) -> Distribution:
        return cls(np.full(vocab_size, 1.0 / vocab_size))

    @classmethod
    def one_hot(cls, vocab_size: int, index: int) -> Distribution:
        p = np.zeros(vocab_size)
        p[index] = 1.0
        return cls(p)

    @property
    def vocab_size(self) -> int:
        return self.probs.size

    @cached_property
    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.probs)
        # Pin the tail to exactly 1 from the last positive entry on, so an
        # inverse-CDF lookup can never land on a zero-probability token.
        last = int(np.flatnonzero(self.probs)[-1])
        c[last:] = 1.0
        c.setflags(write=False)
        return c

    @cached_property
    def cdf_list(self) -> list[float]:
        return self.cdf.tolist()

    @cached_property
    def entropy(self) -> float:
        return entropy(self)

    @cached_property
    def max_prob(self) -> float:
        return float(self.probs.max())

    def __getitem__(self, i: int) -> float:
        return float(self.probs[i])

    def __len__(self) -> int:
        return self.probs.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Distribution):
            return NotImplemented
        return np.array_equal(self.probs, other.probs)

    def __hash__(self) -> int:
        return hash(self.probs.tobytes())

    def __repr__(self) -> str:
        return f"Distribution({np.array2string(self.probs, precision=4, separator=', ')})"


@dataclass(frozen=True)
class AdjustmentSpec:
    """Sampling adjustment: temperature, then optional top-k or nucleus truncation."""

    temperature: float = 1.0
    top_k: int | None = None
    nucleus_p: float | None = None

    def __post_init__(self):
        if not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise ValueError(f"temperature must be a positive finite number, got {self.temperature!r}")
        if self.top_k is not None and self.nucleus_p is not None:
            raise ValueError("at most one of top_k / nucleus_p may be set")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k!r}")
        if self.nucleus_p is not None and not (0.0 < self.nucleus_p <= 1.0):
            raise ValueError(f"nucleus_p must lie in (0, 1], got {self.nucleus_p!r}")

    @property
    def is_identity(self) -> bool:
        return self.temperature == 1.0 and self.top_k is None and self.nucleus_p is None


def _check_same_size(p: Distribution, q: Distribution) -> None:
    if p.vocab_size != q.vocab_size:
        raise DimensionError(f"vocab size mismatch: {p.vocab_size} vs {q.vocab_size}")


def adjust_rows(rows: np.ndarray, spec: AdjustmentSpec) -> np.ndarray:
    """Apply ``spec`` to every row of a 2-d array of probability vectors."""
    rows = np.asarray(rows, dtype=np.float64)
    if spec.is_identity:
        return rows / rows.sum(axis=1, keepdims=True)
    V = rows.shape[1]
    if spec.top_k is not None and spec.top_k > V:
        raise ValueError(f"top_k={spec.top_k} exceeds vocab size {V}")

    out = rows.copy()
    if spec.temperature != 1.0:
        # Scale by the row max first so p**(1/T) cannot underflow the whole row.
        scaled = out / out.max(axis=1, keepdims=True)
        with np.errstate(divide="ignore"):
            out = np.exp(np.log(scaled) / spec.temperature)
        out /= out.sum(axis=1, keepdims=True)

    if spec.top_k is not None or spec.nucleus_p is not None:
        # Descending order with ties broken by lowest index.
        order = np.argsort(-out, axis=1, kind="stable")
        sorted_p = np.take_along_axis(out, order, axis=1)
        if spec.top_k is not None:
            keep_sorted = np.broadcast_to(np.arange(V) < spec.top_k, out.shape)
        else:
            csum = np.cumsum(sorted_p, axis=1)
            # Entry j is kept iff the mass strictly before it is still short of p.
            before = csum - sorted_p
            keep_sorted = before < spec.nucleus_p - 1e-12
            keep_sorted[:, 0] = True
        keep = np.zeros(out.shape, dtype=bool)
        np.put_along_axis(keep, order, keep_sorted, axis=1)
        out = np.where(keep, out, 0.0)
        total = out.sum(axis=1, keepdims=True)
        assert np.all(total > 0), "truncation removed all probability mass"
        out /= total
    return out


def adjust(d: Distribution, spec: AdjustmentSpec) -> Distribution:
    """Temperature as ``p ** (1/T)`` renormalized, then top-k or nucleus truncation."""
    return Distribution._trusted(adjust_rows(d.probs[None, :], spec)[0])


def entropy(d: Distribution) -> float:
    p = d.probs[d.probs > 0]
    h = float(-np.sum(p * np.log(p)))
    return min(max(h, 0.0), math.log(d.vocab_size))


def tvd(p: Distribution, q: Distribution) -> float:
    _check_same_size(p, q)
    return float(0.5 * np.abs(p.probs - q.probs).sum())


def kld(p: Distribution, q: Distribution) -> float:
    """KL(p || q); ``INFINITE_DIVERGENCE`` when p has mass where q has none."""
    _check_same_size(p, q)
    support = p.probs > 0
    if np.any(q.probs[support] == 0):
        return INFINITE_DIVERGENCE
    ps, qs = p.probs[support], q.probs[support]
    return max(float(np.sum(ps * (np.log(ps) - np.log(qs)))), 0.0)


def cross_entropy(p: Distribution, q: Distribution) -> float:
    """CE(p, q) = -sum p ln q over the support of p."""
    _check_same_size(p, q)
    support = p.probs > 0
    if np.any(q.probs[support] == 0):
        return INFINITE_DIVERGENCE
    return float(-np.sum(p.probs[support] * np.log(q.probs[support])))


def residual_with_flag(p_tm: Distribution, p_dm: Distribution) -> tuple[Distribution, bool]:
    """Like :func:`residual` but also reports whether the p_tm fallback was taken."""
    _check_same_size(p_tm, p_dm)
    r = np.maximum(p_tm.probs - p_dm.probs, 0.0)
    total = r.sum()
    if total <= 0.0:
        return p_tm, True
    return Distribution._trusted(r / total), False


def residual(p_tm: Distribution, p_dm: Distribution) -> Distribution:
    """norm(max(0, p_tm - p_dm)); p_tm itself when the residual is all zero."""
    return residual_with_flag(p_tm, p_dm)[0]


def acceptance_prob_analytic(p_dm: Distribution, p_tm: Distribution) -> float:
    """Probability that one token drafted from p_dm survives rejection sampling."""
    _check_same_size(p_dm, p_tm)
    return float(np.minimum(p_dm.probs, p_tm.probs).sum())
