"""Token sampling and the rejection-sampling verification step.

All randomness is drawn as uniforms from one :class:`Rng` per generation run,
in this fixed order:

* one uniform per drafted token (inverse-CDF draw from the draft row);
* during verification, one uniform per examined draft position for the
  accept test, then one uniform for either the replacement token (drawn from
  the residual) or the bonus token (drawn from the next target row).
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .distributions import Distribution, residual_with_flag

RNG_ALGORITHM = "philox4x64-block"
_BLOCK = 4096  # multiple of 4 so block starts align with Philox counter steps


def _philox_key(seed: int, stream: int) -> np.ndarray:
    return np.random.SeedSequence([seed & (2**64 - 1), stream]).generate_state(2, dtype=np.uint64)


class Rng:
    """Deterministic uniform stream backed by Philox.

    The state is ``(seed, stream, counter)`` where ``counter`` is the number of
    uniforms consumed so far; :meth:`from_state` restores it in O(1).
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._bitgen = np.random.Philox(key=_philox_key(self.seed, self.stream))
        self._gen = np.random.Generator(self._bitgen)
        self._buf: list[float] = []
        self._pos = 0
        self._base = 0  # stream index of self._buf[0]

    @property
    def counter(self) -> int:
        return self._base + self._pos

    @property
    def state(self) -> tuple[str, int, int, int]:
        return (RNG_ALGORITHM, self.seed, self.stream, self.counter)

    @classmethod
    def from_state(cls, state: tuple[str, int, int, int]) -> Rng:
        algorithm, seed, stream, counter = state
        if algorithm != RNG_ALGORITHM:
            raise ValueError(f"unknown rng algorithm {algorithm!r}")
        rng = cls(seed, stream)
        block, offset = divmod(counter, _BLOCK)
        # Each Philox counter step yields four 64-bit outputs, one per double.
        rng._bitgen.advance(block * _BLOCK // 4)
        rng._base = block * _BLOCK
        if offset:
            rng._refill()
            rng._pos = offset
        return rng

    def spawn(self, stream: int) -> Rng:
        """Independent stream with the same seed."""
        return Rng(self.seed, stream)

    def _refill(self) -> None:
        self._base += len(self._buf)
        self._buf = self._gen.random(_BLOCK).tolist()
        self._pos = 0

    def uniform(self) -> float:
        if self._pos >= len(self._buf):
            self._refill()
        u = self._buf[self._pos]
        self._pos += 1
        return u


def sample(d: Distribution, rng: Rng) -> int:
    """Inverse-CDF draw consuming exactly one uniform."""
    cdf = d.cdf_list
    i = bisect_right(cdf, rng.uniform())
    return min(i, len(cdf) - 1)


@dataclass
class VerifyOutcome:
    accepted_count: int
    emitted_tokens: list[int]
    rejection_index: int | None
    bonus_token_used: bool
    residual_fallback: bool = False
    accept_probs: list[float] = field(default_factory=list)

    def __post_init__(self):
        assert len(self.emitted_tokens) == self.accepted_count + 1
        assert (self.rejection_index is None) == self.bonus_token_used


def verify_round(
    draft_tokens: Sequence[int],
    draft_dists: Sequence[Distribution],
    target_dists: Sequence[Distribution],
    rng: Rng,
) -> VerifyOutcome:
    """Rejection-sample ``n`` drafted tokens against the target.

    ``target_dists`` holds ``n + 1`` rows; the last one is used for the bonus
    token when every draft is accepted. ``rejection_index`` is 0-based.
    """
    n = len(draft_tokens)
    if len(draft_dists) != n or len(target_dists) != n + 1:
        raise ValueError(
            f"need |draft_dists| = |draft_tokens| = n and |target_dists| = n + 1; "
            f"got {len(draft_tokens)}, {len(draft_dists)}, {len(target_dists)}"
        )
    emitted: list[int] = []
    accept_probs: list[float] = []
    for i in range(n):
        tok = draft_tokens[i]
        p_dm = draft_dists[i].probs[tok]
        p_tm = target_dists[i].probs[tok]
        assert p_dm > 0, "drafted token has zero draft probability"
        ratio = p_tm / p_dm
        a = 1.0 if ratio >= 1.0 else float(ratio)
        accept_probs.append(a)
        if rng.uniform() < a:
            emitted.append(tok)
            continue
        res, fell_back = residual_with_flag(target_dists[i], draft_dists[i])
        emitted.append(sample(res, rng))
        return VerifyOutcome(i, emitted, i, False, fell_back, accept_probs)
    emitted.append(sample(target_dists[n], rng))
    return VerifyOutcome(n, emitted, None, True, False, accept_probs)


def verify_accept_all(
    draft_tokens: Sequence[int],
    draft_dists: Sequence[Distribution],
    target_dists: Sequence[Distribution],
    rng: Rng,
) -> VerifyOutcome:
    """Broken verifier that accepts every draft. Negative control only."""
    emitted = list(draft_tokens) + [sample(target_dists[len(draft_tokens)], rng)]
    return VerifyOutcome(len(draft_tokens), emitted, None, True)


Verifier = Callable[[Sequence[int], Sequence[Distribution], Sequence[Distribution], Rng], VerifyOutcome]
