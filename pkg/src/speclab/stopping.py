"""Draft-stopping policies and the dynamic threshold controller.

Three policies decide, before each draft token after the first, whether to
keep drafting:

* ``static``: draft exactly ``max_draft_length`` tokens;
* ``max-confidence``: stop when the largest draft probability is below lambda;
* ``adaedl``: stop when ``1 - sqrt(gamma * H)`` is below lambda, with ``H``
  the draft entropy in nats.

The threshold lambda can follow a per-round controller that nudges it towards
a target acceptance rate using two exponential moving averages.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

from .distributions import Distribution, entropy

POLICY_KINDS = ("static", "max-confidence", "adaedl")
ENTROPY_SOURCES = ("raw", "adjusted")
ACCEPT_COMPARE = ("max-length", "drafted")

CONTINUE = "continue"
BELOW_THRESHOLD = "criterion-below-threshold"
MAX_LENGTH = "max-length-reached"


@dataclass(frozen=True)
class PolicyConfig:
    """Stopping policy plus controller hyperparameters.

    ``accept_compare`` selects what the controller's "already drafting the
    maximum" test compares ``n_accepted`` against: the max draft length
    (``"max-length"``, as published) or the tokens drafted this round.
    ``persist_controller`` keeps controller state across prompts.
    """

    kind: str = "adaedl"
    max_draft_length: int = 7
    gamma: float = 0.2
    initial_lambda: float = 0.5
    dynamic_lambda: bool = True
    entropy_source: str = "adjusted"
    alpha: float = 0.9
    epsilon: float = 0.01
    beta1: float = 0.5
    beta2: float = 0.9
    accept_compare: str = "max-length"
    persist_controller: bool = False

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}; expected one of {POLICY_KINDS}")
        if self.max_draft_length < 1:
            raise ValueError(f"max_draft_length must be >= 1, got {self.max_draft_length}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma!r}")
        if self.kind == "adaedl" and self.gamma > 1:
            warnings.warn(f"gamma={self.gamma} is outside the recommended range (0, 1]", stacklevel=3)
        for name in ("initial_lambda", "alpha", "epsilon", "beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v!r}")
        if self.entropy_source not in ENTROPY_SOURCES:
            raise ValueError(f"entropy_source must be one of {ENTROPY_SOURCES}, got {self.entropy_source!r}")
        if self.accept_compare not in ACCEPT_COMPARE:
            raise ValueError(f"accept_compare must be one of {ACCEPT_COMPARE}, got {self.accept_compare!r}")

    def initial_state(self) -> ControllerState:
        return ControllerState(
            lam=self.initial_lambda,
            ar_ema=self.alpha,
            alpha=self.alpha,
            epsilon=self.epsilon,
            beta1=self.beta1,
            beta2=self.beta2,
        )


@dataclass(frozen=True)
class ControllerState:
    # The acceptance-rate EMA starts at alpha so lambda holds still until
    # rounds provide evidence.
    lam: float
    ar_ema: float
    alpha: float = 0.9
    epsilon: float = 0.01
    beta1: float = 0.5
    beta2: float = 0.9
    rounds_seen: int = 0


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    criterion_value: float
    reason: str


def criterion_adaedl(d: Distribution, gamma: float) -> float:
    """``1 - sqrt(gamma * H(d))``; unclamped, so it can go negative."""
    return 1.0 - math.sqrt(gamma * entropy(d))


def criterion_max_confidence(d: Distribution) -> float:
    return float(d.probs.max())


def criterion_value(policy: PolicyConfig, d: Distribution) -> float:
    # Static policies record the AdaEDL value for offline analysis.
    if policy.kind == "max-confidence":
        return d.max_prob
    return 1.0 - math.sqrt(policy.gamma * d.entropy)


def should_stop(
    policy: PolicyConfig,
    state: ControllerState,
    d: Distribution,
    tokens_drafted_so_far: int,
) -> StopDecision:
    """Decide whether to draft the token that would be drawn from ``d``.

    The first token of a round is always drafted.
    """
    L = policy.max_draft_length
    if not 0 <= tokens_drafted_so_far <= L:
        raise ValueError(f"tokens_drafted_so_far={tokens_drafted_so_far} outside [0, {L}]")
    value = criterion_value(policy, d)
    if tokens_drafted_so_far == L:
        return StopDecision(True, value, MAX_LENGTH)
    if policy.kind != "static" and tokens_drafted_so_far > 0 and value < state.lam:
        return StopDecision(True, value, BELOW_THRESHOLD)
    return StopDecision(False, value, CONTINUE)


def update_lambda(
    state: ControllerState,
    n_drafted: int,
    n_accepted: int,
    max_draft_length: int,
    compare_to: int | None = None,
) -> ControllerState:
    """One controller step after a verified round.

    ``compare_to`` overrides what ``n_accepted`` is compared against in the
    "not yet drafting the maximum" branch; it defaults to ``max_draft_length``.
    """
    if n_drafted < 1:
        raise ValueError("a round must draft at least one token")
    if not 0 <= n_accepted <= n_drafted:
        raise ValueError(f"n_accepted={n_accepted} outside [0, {n_drafted}]")
    full = max_draft_length if compare_to is None else compare_to

    ar_i = n_accepted / n_drafted
    ar = state.beta1 * state.ar_ema + (1.0 - state.beta1) * ar_i
    lam = state.lam
    if ar < state.alpha:
        target = lam + state.epsilon
    elif n_accepted != full:
        target = lam - state.epsilon
    else:
        target = lam
    if target != lam:
        # Skipped when target == lam: the blend is then lam itself, and
        # evaluating it in floating point could drift by an ulp.
        lam = state.beta2 * lam + (1.0 - state.beta2) * target
        lam = min(max(lam, 0.0), 1.0)
    return replace(state, lam=lam, ar_ema=ar, rounds_seen=state.rounds_seen + 1)
