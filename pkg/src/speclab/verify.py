"""Self-check suites run by ``speclab verify <suite>``.

Each suite returns a list of :class:`Check` results; the CLI prints one line
per check and exits nonzero when any check fails.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .distributions import AdjustmentSpec, Distribution, acceptance_prob_analytic, cross_entropy, entropy, kld, tvd
from .engine import (
    CostModel,
    empirical_output_distribution,
    empirical_output_distributions,
    generate_autoregressive,
    generate_speculative,
)
from .models import DerivedDraftSpec, MarkovModel, derive_draft, random_target
from .sampling import Rng
from .stopping import (
    ControllerState,
    PolicyConfig,
    criterion_adaedl,
    criterion_max_confidence,
    update_lambda,
)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def _random_pair(rng: np.random.Generator, V: int, conc: float = 1.0) -> tuple[Distribution, Distribution]:
    p = rng.dirichlet(np.full(V, conc))
    q = rng.dirichlet(np.full(V, conc))
    return Distribution(p / p.sum()), Distribution(q / q.sum())


def sharpened_to_cross_entropy(d: Distribution, target_ce: float, tol: float = 1e-14) -> Distribution:
    """The member ``q ∝ d**a`` (``a >= 1``) of d's power family with CE(d, q) = target_ce.

    CE(d, d**a / Z) = a * H(d) + ln Z(a) grows without bound in ``a`` when
    ``d`` is not uniform on its support, so bisection on ``a`` finds it.
    """
    p = d.probs[d.probs > 0]
    logp = np.log(p)

    def ce(a: float) -> float:
        z = logp * a
        m = z.max()
        log_z = m + math.log(np.exp(z - m).sum())
        return float(-(p * (z - log_z)).sum())

    lo, hi = 1.0, 2.0
    while ce(hi) < target_ce:
        hi *= 2.0
        if hi > 1e6:
            raise ValueError("target cross-entropy not reachable")
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if ce(mid) < target_ce:
            lo = mid
        else:
            hi = mid
    a = 0.5 * (lo + hi)
    z = np.where(d.probs > 0, np.log(np.where(d.probs > 0, d.probs, 1.0)) * a, -np.inf)
    out = np.exp(z - z.max())
    return Distribution(out / out.sum())


# ---------------------------------------------------------------- suites

def losslessness(trials: int = 200_000, seed: int = 0, vocab_sizes=(2, 4, 8)) -> list[Check]:
    """Emitted-token law equals the target row, for every policy and V."""
    checks = []
    for V in vocab_sizes:
        tm = random_target(V, 1, 1.0, seed + V)
        dm = derive_draft(tm, DerivedDraftSpec("dirichlet-resample", 0.9, seed + 100 + V))
        ctx = [V - 1]
        row = tm.table[ctx[-1]]
        expected = {0: Distribution(row), 1: Distribution(row @ tm.table)}
        ar = empirical_output_distribution(tm, None, ctx, trials, seed)
        dist = tvd(ar, expected[0])
        checks.append(Check(f"V={V} autoregressive", dist < 0.01, f"TVD={dist:.5f} < 0.01"))
        for kind in ("static", "max-confidence", "adaedl"):
            policy = PolicyConfig(kind=kind, max_draft_length=4, initial_lambda=median_criterion(kind, dm),
                                  dynamic_lambda=False)
            laws = empirical_output_distributions(tm, dm, ctx, trials, seed, policy, n_positions=2)
            for pos, emp in enumerate(laws):
                dist = tvd(emp, expected[pos])
                checks.append(Check(f"V={V} {kind} token {pos + 1}", dist < 0.01, f"TVD={dist:.5f} < 0.01"))
    V = 4
    tm = MarkovModel(np.tile([0.7, 0.1, 0.1, 0.1], (V, 1)), V, 1)
    dm = MarkovModel(np.tile([0.1, 0.1, 0.1, 0.7], (V, 1)), V, 1)
    broken = empirical_output_distribution(tm, dm, [0], trials, seed, verifier="accept-always")
    dist = tvd(broken, Distribution(tm.table[0]))
    checks.append(Check("negative control (accept-always)", dist > 0.05, f"TVD={dist:.5f} > 0.05"))
    return checks


def median_criterion(kind: str, dm: MarkovModel, gamma: float = 0.2) -> float:
    """Median criterion value over the draft rows: a threshold that stops about half the time."""
    if kind == "static":
        return 0.5
    f: Callable[[Distribution], float]
    f = criterion_max_confidence if kind == "max-confidence" else (lambda d: criterion_adaedl(d, gamma))
    vals = [f(Distribution(r)) for r in dm.table]
    return float(min(max(np.median(vals), 0.0), 1.0))


def pinsker(n_pairs: int = 10_000, n_constructed: int = 1_000, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    violations = 0
    worst = -math.inf
    for _ in range(n_pairs):
        V = int(rng.integers(2, 33))
        p, q = _random_pair(rng, V, float(rng.choice([0.1, 0.5, 1.0, 5.0])))
        k = kld(p, q)
        if math.isinf(k):
            continue
        lhs = 1.0 - math.sqrt(k / 2.0)
        rhs = acceptance_prob_analytic(p, q)
        worst = max(worst, lhs - rhs)
        if lhs > rhs + 1e-12:
            violations += 1
    checks = [Check("Pinsker: 1 - sqrt(KL/2) <= 1 - TVD", violations == 0,
                    f"{violations} violations in {n_pairs} pairs (max lhs - rhs = {worst:.3g})")]

    bad = 0
    err = 0.0
    for _ in range(n_constructed):
        V = int(rng.integers(3, 33))
        d = Distribution(rng.dirichlet(np.full(V, 0.5)))
        gamma = float(rng.uniform(0.05, 1.0))
        h = entropy(d)
        q = sharpened_to_cross_entropy(d, (1.0 + 2.0 * gamma) * h)
        gap = abs(criterion_adaedl(d, gamma) - (1.0 - math.sqrt(kld(d, q) / 2.0)))
        ce_gap = abs(cross_entropy(d, q) - (1.0 + 2.0 * gamma) * h)
        err = max(err, gap)
        bad += gap > 1e-9 or ce_gap > 1e-9
    checks.append(Check("CE = (1+2g)H gives criterion = 1 - sqrt(KL/2)", bad == 0,
                        f"{bad} mismatches in {n_constructed} pairs (max error {err:.3g})"))
    return checks


HAND_TRACES = (
    # (state, n_drafted, n_accepted, L, expected lambda, expected AR)
    (ControllerState(lam=0.5, ar_ema=0.9), 5, 3, 7, 0.501, 0.75),
    (ControllerState(lam=0.5, ar_ema=1.0), 7, 7, 7, 0.5, 1.0),
)


def controller(n_sequences: int = 10_000, seed: int = 0) -> list[Check]:
    checks = []
    for i, (state, n, a, L, lam, ar) in enumerate(HAND_TRACES, 1):
        out = update_lambda(state, n, a, L)
        ok = abs(out.lam - lam) <= 1e-12 and abs(out.ar_ema - ar) <= 1e-12
        checks.append(Check(f"hand trace {i}", ok, f"lambda={out.lam!r} (want {lam}), AR={out.ar_ema!r} (want {ar})"))

    rng = np.random.default_rng(seed)
    direction = fixed = clamp = 0
    for _ in range(n_sequences):
        L = int(rng.integers(1, 17))
        st = ControllerState(
            lam=float(rng.uniform()), ar_ema=float(rng.uniform()), alpha=float(rng.uniform(0.05, 1.0)),
            epsilon=float(rng.uniform(0, 0.2)), beta1=float(rng.uniform()), beta2=float(rng.uniform()),
        )
        for _ in range(int(rng.integers(1, 20))):
            n = int(rng.integers(1, L + 1))
            a = int(rng.integers(0, n + 1))
            new = update_lambda(st, n, a, L)
            step = (1.0 - st.beta2) * st.epsilon
            if new.ar_ema < st.alpha:
                want = min(st.lam + step, 1.0)
            elif a != L:
                want = max(st.lam - step, 0.0)
            else:
                want = st.lam
            direction += abs(new.lam - want) > 1e-12
            clamp += not 0.0 <= new.lam <= 1.0
            st = new
        # Fixed point: with AR-EMA >= alpha, full-acceptance rounds keep lambda still.
        fp = replace(st, ar_ema=float(rng.uniform(st.alpha, 1.0)))
        for _ in range(5):
            nxt = update_lambda(fp, L, L, L)
            fixed += nxt.lam != fp.lam
            fp = nxt
    checks.append(Check("direction", direction == 0, f"{direction} wrong-direction updates"))
    checks.append(Check("fixed point", fixed == 0, f"{fixed} moves at the fixed point"))
    checks.append(Check("clamp", clamp == 0, f"{clamp} lambdas outside [0, 1]"))
    return checks


def clock() -> list[Check]:
    checks = []
    V = 4
    det = MarkovModel(np.eye(V)[np.roll(np.arange(V), -1)], V, 1)
    _, rep = generate_autoregressive(det, [0], 100, AdjustmentSpec(), Rng(0), CostModel(t_verify_round=0.04))
    checks.append(Check("autoregressive TPS", abs(rep.tps - 25.0) < 1e-9, f"{rep.tps!r} (want 25.0)"))

    cost = CostModel(t_draft_token=0.004, t_verify_round=0.04)
    tm = random_target(V, 1, 1.0, 0)
    _, rep = generate_speculative(tm, tm, [0], 800, PolicyConfig(kind="static"), AdjustmentSpec(), Rng(0), cost, True)
    want = 8 / (7 * 0.004 + 0.04)
    ok = abs(rep.tps - want) < 1e-9 and rep.accepted_count_histogram[7] == rep.n_rounds
    checks.append(Check("all-accept TPS", ok, f"{rep.tps!r} (want {want!r})"))
    total = math.fsum(r.simulated_time for r in rep.rounds)
    checks.append(Check("clock additivity", total == rep.total_simulated_seconds or
                        abs(total - rep.total_simulated_seconds) < 1e-12, f"{total!r} vs {rep.total_simulated_seconds!r}"))

    even = np.tile([0.5, 0.0, 0.5, 0.0], (V, 1))
    odd = np.tile([0.0, 0.5, 0.0, 0.5], (V, 1))
    _, rep = generate_speculative(MarkovModel(even, V, 1), MarkovModel(odd, V, 1), [0], 100,
                                  PolicyConfig(kind="static"), AdjustmentSpec(), Rng(0), cost)
    want = 1 / (7 * 0.004 + 0.04)
    ok = abs(rep.tps - want) < 1e-9 and rep.accepted_count_histogram[0] == rep.n_rounds
    checks.append(Check("all-reject TPS", ok, f"{rep.tps!r} (want {want!r})"))
    return checks


SUITES: dict[str, Callable[[], list[Check]]] = {
    "losslessness": losslessness,
    "pinsker": pinsker,
    "controller": controller,
    "clock": clock,
}
