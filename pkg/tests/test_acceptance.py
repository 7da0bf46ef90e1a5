"""Acceptance suite: one test per criterion, each at its stated tolerance.

Every test logs a PASS/FAIL line (collected in the terminal summary by
conftest.py) before asserting, so a failing criterion still reports its
numbers.

Trend criteria (5-8) share one toy setup: a V=256 first-order target with
rows from Dirichlet(1/V) (peaked rows with a long tail) and a
``partial-knowledge`` draft. One replicate is one seed: its own target,
draft, prompt corpus (4 prompts of 8 tokens) and run seed, 128 generated
tokens per prompt, TPS averaged over prompts. Initial thresholds are picked
per setting (strength and temperature) on tuning seeds disjoint from the
evaluation seeds. A gap between paired per-seed TPS values is significant
when its mean exceeds twice its standard error.
"""

from __future__ import annotations

import math
import time
from functools import lru_cache

import numpy as np
import pytest
from scipy.optimize import brentq

from speclab import cli, harness
from speclab.config import from_dict
from speclab.distributions import Distribution, acceptance_prob_analytic, entropy, kld, tvd
from speclab.engine import empirical_output_distribution, empirical_output_distributions
from speclab.models import DerivedDraftSpec, MarkovModel, derive_draft, random_target
from speclab.sampling import Rng, verify_round
from speclab.stopping import ControllerState, PolicyConfig, criterion_adaedl, criterion_max_confidence, update_lambda

LAMBDA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))
TEMPERATURES = (0.7, 1.0, 1.3, 1.7)
HIGH_STRENGTH = 0.7
MODERATE_STRENGTH = 0.5
TUNING_SEEDS = tuple(range(100, 120))
EVAL_SEEDS = tuple(range(0, 30))
LAMBDA_SEEDS = tuple(range(0, 20))


# ------------------------------------------------------------------ helpers

def trend_config(method: str, seed: int, strength: float, temperature: float = 1.0, lam: float = 0.5):
    return from_dict({
        "method": method,
        "target": {"vocab_size": 256, "order": 1, "concentration": 1.0 / 256, "seed": 1000 + seed},
        "draft": {"mode": "partial-knowledge", "strength": strength, "seed": 2000 + seed},
        "policy": {"max_draft_length": 7, "gamma": 0.2, "initial_lambda": lam, "dynamic_lambda": True},
        "sampling": {"temperature": temperature},
        "cost": {"ratio": 7.0, "t_verify_round": 0.04},
        "prompts": {"count": 4, "length": 8, "seed": seed},
        "generation_length": 128,
        "seed": seed,
    })


@lru_cache(maxsize=None)
def seed_tps(method: str, seed: int, strength: float, temperature: float = 1.0, lam: float = 0.5) -> float:
    res = harness.run_point("p", trend_config(method, seed, strength, temperature, lam))
    return harness.point_rows(res)[-1]["tps"]


def tps(method: str, seeds, strength: float, temperature: float = 1.0, lam: float = 0.5) -> np.ndarray:
    return np.array([seed_tps(method, s, strength, temperature, lam) for s in seeds])


def paired_gap(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Mean of a - b and its standard error."""
    d = a - b
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(len(d)))


def tuned_lambda(method: str, strength: float, temperature: float = 1.0) -> float:
    means = [tps(method, TUNING_SEEDS, strength, temperature, lam).mean() for lam in LAMBDA_GRID]
    return LAMBDA_GRID[int(np.argmax(means))]


# -------------------------------------------------------------- criterion 1

def test_c1_losslessness(criterion_log):
    t0 = time.perf_counter()
    results = []
    for V in (2, 4, 8):
        tm = random_target(V, 1, 1.0, 11 + V)
        dm = derive_draft(tm, DerivedDraftSpec("dirichlet-resample", 0.9, 21 + V))
        ctx = [V - 1]
        # Oracle: first token ~ tm row, second token ~ that row times the transition matrix.
        first = tm.table[ctx[-1]]
        second = first @ tm.table
        for kind in ("static", "max-confidence", "adaedl"):
            if kind == "static":
                lam = 0.5
            else:
                f = criterion_max_confidence if kind == "max-confidence" else (lambda d: criterion_adaedl(d, 0.2))
                lam = float(np.clip(np.median([f(Distribution(r)) for r in dm.table]), 0.0, 1.0))
            policy = PolicyConfig(kind=kind, max_draft_length=4, initial_lambda=lam, dynamic_lambda=False)
            laws = empirical_output_distributions(tm, dm, ctx, 200_000, 7, policy, n_positions=2)
            results.append((V, kind, tvd(laws[0], Distribution(first)), tvd(laws[1], Distribution(second))))

    V = 4
    tm = MarkovModel(np.tile([0.7, 0.1, 0.1, 0.1], (V, 1)), V, 1)
    dm = MarkovModel(np.tile([0.1, 0.1, 0.1, 0.7], (V, 1)), V, 1)
    broken = tvd(empirical_output_distribution(tm, dm, [0], 200_000, 7, verifier="accept-always"),
                 Distribution(tm.table[0]))
    elapsed = time.perf_counter() - t0

    worst = max(max(r[2], r[3]) for r in results)
    ok = worst < 0.01 and broken > 0.05 and elapsed < 120
    criterion_log(1, "losslessness", ok,
                  f"max TVD {worst:.4f} < 0.01 over V in (2,4,8) x 3 policies x 2 positions; "
                  f"accept-always TVD {broken:.3f} > 0.05; {elapsed:.0f}s < 120s")
    assert worst < 0.01, results
    assert broken > 0.05
    assert elapsed < 120


# -------------------------------------------------------------- criterion 2

def test_c2_beta_identity(criterion_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(10_000):
        V = int(rng.integers(2, 65))
        conc = float(rng.choice([0.05, 0.5, 1.0, 10.0]))
        p, q = Distribution(rng.dirichlet(np.full(V, conc))), Distribution(rng.dirichlet(np.full(V, conc)))
        worst = max(worst, abs(acceptance_prob_analytic(p, q) - (1.0 - tvd(p, q))))

    n = 100_000
    z_scores = []
    for k in range(5):
        V = 6
        p_dm = Distribution(rng.dirichlet(np.ones(V)))
        p_tm = Distribution(rng.dirichlet(np.ones(V)))
        beta = acceptance_prob_analytic(p_dm, p_tm)
        r = Rng(20 + k)
        accepted = 0
        for _ in range(n):
            tok = int(np.searchsorted(p_dm.cdf, r.uniform(), side="right"))
            tok = min(tok, V - 1)
            accepted += verify_round([tok], [p_dm], [p_tm, p_tm], r).accepted_count
        z_scores.append(abs(accepted / n - beta) / math.sqrt(beta * (1 - beta) / n))
    elapsed = time.perf_counter() - t0

    ok = worst <= 1e-12 and max(z_scores) <= 4 and elapsed < 60
    criterion_log(2, "beta identity", ok,
                  f"max |sum min - (1 - TVD)| = {worst:.2e} <= 1e-12 on 1e4 pairs; "
                  f"max MC z = {max(z_scores):.2f} <= 4 at 1e5 trials; {elapsed:.0f}s < 60s")
    assert worst <= 1e-12
    assert max(z_scores) <= 4
    assert elapsed < 60


# -------------------------------------------------------------- criterion 3

def test_c3_pinsker_chain(criterion_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    violations = checked = 0
    while checked < 10_000:
        V = int(rng.integers(2, 65))
        conc = float(rng.choice([0.1, 0.5, 1.0, 5.0]))
        p, q = Distribution(rng.dirichlet(np.full(V, conc))), Distribution(rng.dirichlet(np.full(V, conc)))
        k = kld(p, q)
        if math.isinf(k):
            continue
        checked += 1
        violations += 1.0 - math.sqrt(k / 2.0) > acceptance_prob_analytic(p, q) + 1e-12

    # Oracle: solve CE(d, d**a / Z) = (1 + 2 gamma) H(d) for a with scipy's brentq.
    worst = 0.0
    constructed = 0
    while constructed < 1_000:
        V = int(rng.integers(3, 65))
        d = rng.dirichlet(np.full(V, 0.5))
        d = d[d > 0] / d[d > 0].sum()
        if len(d) < 2 or np.ptp(d) == 0:
            continue
        constructed += 1
        gamma = float(rng.uniform(0.05, 1.0))
        h = float(-(d * np.log(d)).sum())

        def family(a):
            w = np.exp(a * np.log(d) - (a * np.log(d)).max())
            return w / w.sum()

        with np.errstate(divide="ignore"):
            a = brentq(lambda a: float(-(d * np.log(family(a))).sum()) - (1 + 2 * gamma) * h, 1.0, 1e4, xtol=1e-15)
        dd, qq = Distribution(d), Distribution(family(a))
        worst = max(worst, abs(criterion_adaedl(dd, gamma) - (1.0 - math.sqrt(kld(dd, qq) / 2.0))))
        assert abs(entropy(dd) - h) < 1e-12
    elapsed = time.perf_counter() - t0

    ok = violations == 0 and worst <= 1e-9 and elapsed < 60
    criterion_log(3, "Pinsker chain", ok,
                  f"{violations} violations in 1e4 pairs at 1e-12 slack; constructed-pair max error "
                  f"{worst:.2e} <= 1e-9; {elapsed:.0f}s < 60s")
    assert violations == 0
    assert worst <= 1e-9
    assert elapsed < 60


# -------------------------------------------------------------- criterion 4

def test_c4_controller(criterion_log):
    t0 = time.perf_counter()
    s1 = update_lambda(ControllerState(lam=0.5, ar_ema=0.9), 5, 3, 7)
    s2 = update_lambda(ControllerState(lam=0.5, ar_ema=1.0), 7, 7, 7)
    traces_ok = (abs(s1.lam - 0.501) <= 1e-12 and abs(s1.ar_ema - 0.75) <= 1e-12
                 and abs(s2.lam - 0.5) <= 1e-12 and abs(s2.ar_ema - 1.0) <= 1e-12)

    rng = np.random.default_rng(4)
    bad_direction = bad_fixed = bad_clamp = 0
    for _ in range(10_000):
        L = int(rng.integers(1, 17))
        st = ControllerState(lam=float(rng.uniform()), ar_ema=float(rng.uniform()),
                             alpha=float(rng.uniform(0.05, 1.0)), epsilon=float(rng.uniform(0.0, 0.5)),
                             beta1=float(rng.uniform()), beta2=float(rng.uniform()))
        for _ in range(int(rng.integers(1, 30))):
            n = int(rng.integers(1, L + 1))
            a = int(rng.integers(0, n + 1))
            new = update_lambda(st, n, a, L)
            ar = st.beta1 * st.ar_ema + (1 - st.beta1) * a / n
            step = (1 - st.beta2) * st.epsilon
            if ar < st.alpha:
                ok = new.lam > st.lam or st.lam + step >= 1.0 or step == 0
            elif a < L:
                ok = new.lam < st.lam or st.lam - step <= 0.0 or step == 0
            else:
                ok = new.lam == st.lam
            bad_direction += not ok
            bad_clamp += not 0.0 <= new.lam <= 1.0
            st = new
        fixed = ControllerState(lam=st.lam, ar_ema=float(rng.uniform(st.alpha, 1.0)), alpha=st.alpha,
                                epsilon=st.epsilon, beta1=st.beta1, beta2=st.beta2)
        for _ in range(5):
            nxt = update_lambda(fixed, L, L, L)
            bad_fixed += nxt.lam != fixed.lam
            fixed = nxt
    elapsed = time.perf_counter() - t0

    ok = traces_ok and bad_direction == bad_fixed == bad_clamp == 0 and elapsed < 30
    criterion_log(4, "controller", ok,
                  f"hand traces {'match' if traces_ok else 'DIFFER'} (lambda {s1.lam!r}, {s2.lam!r}); "
                  f"direction/fixed-point/clamp violations {bad_direction}/{bad_fixed}/{bad_clamp} "
                  f"over 1e4 sequences; {elapsed:.1f}s < 30s")
    assert traces_ok
    assert bad_direction == bad_fixed == bad_clamp == 0
    assert elapsed < 30


# ------------------------------------------------------- criteria 5 to 8

@pytest.mark.slow
def test_c5_expensive_draft(criterion_log):
    t0 = time.perf_counter()
    s = HIGH_STRENGTH
    lam_mc, lam_ada = tuned_lambda("max-confidence-spd", s), tuned_lambda("adaedl", s)
    ar = tps("autoregressive", EVAL_SEEDS, s)
    base = tps("base-spd", EVAL_SEEDS, s)
    mc = tps("max-confidence-spd", EVAL_SEEDS, s, lam=lam_mc)
    ada = tps("adaedl", EVAL_SEEDS, s, lam=lam_ada)
    elapsed = time.perf_counter() - t0

    g_base = paired_gap(ar, base)
    g_ada = paired_gap(ada, ar)
    g_mc = paired_gap(ada, mc)
    sig = [g[0] > 2 * g[1] for g in (g_base, g_ada, g_mc)]
    ok = all(sig) and elapsed < 300
    criterion_log(5, "expensive draft", ok,
                  f"{len(EVAL_SEEDS)} seeds, ratio 7, strength {s}: AR {ar.mean():.2f}, Base {base.mean():.2f}, "
                  f"MC {mc.mean():.2f} (lambda0 {lam_mc}), AdaEDL {ada.mean():.2f} (lambda0 {lam_ada}); "
                  f"AR-Base {g_base[0]:.2f}+-{g_base[1]:.2f}, Ada-AR {g_ada[0]:.2f}+-{g_ada[1]:.2f}, "
                  f"Ada-MC {g_mc[0]:.2f}+-{g_mc[1]:.2f} (need mean > 2 SE each); {elapsed:.0f}s < 300s")
    assert sig[0], "Base-SPD is not significantly slower than autoregressive"
    assert sig[1], "AdaEDL is not significantly faster than autoregressive"
    assert sig[2], "AdaEDL is not significantly faster than Max-Confidence-SPD"
    assert elapsed < 300


@pytest.mark.slow
def test_c6_temperature(criterion_log):
    t0 = time.perf_counter()
    s = MODERATE_STRENGTH
    lam_ada = {T: tuned_lambda("adaedl", s, T) for T in TEMPERATURES}
    base = {T: tps("base-spd", EVAL_SEEDS, s, T) for T in TEMPERATURES}
    ada = {T: tps("adaedl", EVAL_SEEDS, s, T, lam_ada[T]) for T in TEMPERATURES}
    elapsed = time.perf_counter() - t0

    base_means = [base[T].mean() for T in TEMPERATURES]
    monotone = all(a >= b for a, b in zip(base_means, base_means[1:]))
    gaps = {T: paired_gap(ada[T], base[T]) for T in TEMPERATURES}
    sig = all(m > 2 * se for m, se in gaps.values())
    ok = monotone and sig and elapsed < 300
    criterion_log(6, "temperature", ok,
                  f"{len(EVAL_SEEDS)} seeds, strength {s}: Base TPS over T={TEMPERATURES} "
                  f"{[round(float(x), 2) for x in base_means]} ({'non-increasing' if monotone else 'NOT monotone'}); "
                  f"AdaEDL (lambda0 {list(lam_ada.values())}) - Base {[f'{m:.2f}+-{se:.2f}' for m, se in gaps.values()]}; "
                  f"{elapsed:.0f}s < 300s")
    assert monotone
    assert sig
    assert elapsed < 300


@pytest.mark.slow
def test_c7_lambda_sensitivity(criterion_log):
    t0 = time.perf_counter()
    s = MODERATE_STRENGTH
    curves = {
        m: np.array([tps(m, LAMBDA_SEEDS, s, lam=lam).mean() for lam in LAMBDA_GRID])
        for m in ("max-confidence-spd", "adaedl")
    }
    elapsed = time.perf_counter() - t0
    deg = {m: 1.0 - c.min() / c.max() for m, c in curves.items()}
    ok = deg["adaedl"] <= deg["max-confidence-spd"] and elapsed < 600
    criterion_log(7, "lambda sensitivity", ok,
                  f"{len(LAMBDA_SEEDS)} seeds/point, strength {s}: worst-case degradation AdaEDL "
                  f"{deg['adaedl']:.4f} vs MC {deg['max-confidence-spd']:.4f}; AdaEDL TPS "
                  f"{[round(float(x), 1) for x in curves['adaedl']]}, "
                  f"MC {[round(float(x), 1) for x in curves['max-confidence-spd']]}; "
                  f"{elapsed:.0f}s < 600s")
    assert deg["adaedl"] <= deg["max-confidence-spd"]
    assert elapsed < 600


def test_c8_accepted_count_variance(criterion_log):
    t0 = time.perf_counter()
    cfg = from_dict({
        "method": "base-spd",
        "target": {"vocab_size": 256, "order": 1, "concentration": 1.0 / 256, "seed": 1008},
        "draft": {"mode": "partial-knowledge", "strength": MODERATE_STRENGTH, "seed": 2008},
        "policy": {"max_draft_length": 7},
        "prompts": {"count": 40, "length": 8, "seed": 8},
        "generation_length": 512,
        "seed": 8,
    })
    res = harness.run_point("p", cfg, keep_rounds=True)
    accepted = np.array([r.n_accepted for rep in res.reports for r in rep.rounds])
    elapsed = time.perf_counter() - t0
    support = int((np.bincount(accepted, minlength=8) > 0).sum())
    std = float(accepted.std())
    ok = len(accepted) >= 5000 and support >= 5 and std >= 1.0 and elapsed < 60
    criterion_log(8, "accepted-count variance", ok,
                  f"{len(accepted)} rounds >= 5000, support {support} >= 5 values, std {std:.3f} >= 1; "
                  f"counts {np.bincount(accepted, minlength=8).tolist()}; {elapsed:.1f}s < 60s")
    assert len(accepted) >= 5000
    assert support >= 5
    assert std >= 1.0
    assert elapsed < 60


# -------------------------------------------------------------- criterion 9

def test_c9_determinism(criterion_log, tmp_path, monkeypatch):
    t0 = time.perf_counter()
    monkeypatch.delenv(harness.OUT_DIR_ENV, raising=False)
    run_cfg = tmp_path / "run.yaml"
    run_cfg.write_text(
        "method: adaedl\ndraft: {strength: 0.5}\nprompts: {count: 3}\ngeneration_length: 96\n"
        "policy: {initial_lambda: 0.3}\n"
    )
    sweep_cfg = tmp_path / "sweep.yaml"
    sweep_cfg.write_text(
        "base: {prompts: {count: 2}, generation_length: 64}\n"
        "axes:\n  method: [base-spd, max-confidence-spd, adaedl]\n  policy.initial_lambda: [0.2, 0.6]\n"
    )
    invocations = {
        "run": ["run", "--config", str(run_cfg), "--seed", "5", "--verbose-rounds"],
        "sweep": ["sweep", "--config", str(sweep_cfg), "--seed", "5"],
        "sweep-parallel": ["sweep", "--config", str(sweep_cfg), "--seed", "5", "--workers", "2"],
    }
    outputs = {}
    for name, argv in invocations.items():
        for rep in range(2):
            out = tmp_path / f"{name}-{rep}"
            assert cli.main([*argv, "--out", str(out)]) == 0
            outputs[name, rep] = {f.name: f.read_bytes() for f in sorted(out.iterdir())}
    elapsed = time.perf_counter() - t0

    same = all(outputs[n, 0] == outputs[n, 1] for n in invocations)
    same_workers = outputs["sweep", 0] == outputs["sweep-parallel", 0]
    ok = same and same_workers and elapsed < 60
    criterion_log(9, "determinism", ok,
                  f"run and sweep outputs byte-identical on repeat: {same}; 1 vs 2 workers identical: "
                  f"{same_workers}; {elapsed:.1f}s < 60s")
    assert same
    assert same_workers
    assert elapsed < 60
