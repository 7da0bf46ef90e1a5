"""Generation loops and the simulated latency clock.

Time is simulated, never measured. A speculative round that drafts ``n``
tokens costs::

    n * t_draft_token + t_verify_round + stop_checks * t_overhead_stop_check

where ``stop_checks`` counts criterion evaluations before tokens 2..L (zero
for the static policy). One target pass costs the same for 1 or L+1
positions. When the final round overshoots the requested length, the output
is truncated but the whole round stays on the clock.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .distributions import AdjustmentSpec, Distribution, adjust_rows
from .models import MarkovModel
from .sampling import Rng, Verifier, sample, verify_accept_all, verify_round
from .stopping import MAX_LENGTH, ControllerState, PolicyConfig, should_stop, update_lambda

# Parameter-count ratios |TM| / |DM| used as cost proxies. Real wall-clock
# ratios depend on the hardware; these are only starting points.
COST_RATIO_PRESETS: dict[str, float] = {
    "llama2-7b/drafter-115m": 7e9 / 115e6,
    "llama2-7b/tinyllama-1b": 7.0,
    "pythia-6.9b/pythia-1b": 6.9,
    "pythia-6.9b/pythia-410m": 6.9e9 / 410e6,
    "pythia-6.9b/pythia-160m": 6.9e9 / 160e6,
    "pythia-6.9b/pythia-70m": 6.9e9 / 70e6,
}


@dataclass(frozen=True)
class CostModel:
    """Simulated seconds per model call."""

    t_draft_token: float = 0.04 / 7
    t_verify_round: float = 0.04
    t_target_step: float | None = None
    t_overhead_stop_check: float = 0.0

    def __post_init__(self):
        for name in ("t_draft_token", "t_verify_round", "t_overhead_stop_check"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be a finite number >= 0, got {v!r}")
        if self.t_target_step is not None and not self.t_target_step > 0:
            raise ValueError(f"t_target_step must be > 0, got {self.t_target_step!r}")
        if not self.t_verify_round > 0:
            raise ValueError("t_verify_round must be > 0")

    @property
    def target_step(self) -> float:
        return self.t_verify_round if self.t_target_step is None else self.t_target_step

    @property
    def cost_ratio(self) -> float:
        return self.t_verify_round / self.t_draft_token if self.t_draft_token > 0 else math.inf

    @classmethod
    def from_ratio(cls, ratio: float, t_verify_round: float = 0.04, **kw) -> CostModel:
        return cls(t_draft_token=t_verify_round / ratio, t_verify_round=t_verify_round, **kw)

    @classmethod
    def preset(cls, name: str, t_verify_round: float = 0.04, **kw) -> CostModel:
        try:
            ratio = COST_RATIO_PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown cost preset {name!r}; known: {sorted(COST_RATIO_PRESETS)}") from None
        return cls.from_ratio(ratio, t_verify_round, **kw)

    def round_seconds(self, n_drafted: int, stop_checks: int) -> float:
        return n_drafted * self.t_draft_token + self.t_verify_round + stop_checks * self.t_overhead_stop_check


@dataclass
class DraftRoundRecord:
    round_index: int
    n_drafted: int
    n_accepted: int
    stop_reason: str
    lambda_at_round: float
    criterion_values: list[float]
    simulated_time: float
    stop_checks: int = 0


@dataclass
class RunReport:
    total_tokens_emitted: int
    total_simulated_seconds: float
    tps: float
    acceptance_rate: float
    accepted_count_histogram: list[int]
    mean_accepted: float
    std_accepted: float
    n_rounds: int
    max_draft_length: int
    residual_fallback_count: int = 0
    final_lambda: float | None = None
    rounds: list[DraftRoundRecord] | None = None
    controller: ControllerState | None = field(default=None, repr=False)

    def to_dict(self, include_rounds: bool = True) -> dict:
        d = asdict(self)
        d.pop("controller")
        if not include_rounds or self.rounds is None:
            d.pop("rounds")
        for k, v in d.items():
            if isinstance(v, float) and math.isnan(v):
                d[k] = None
        return d


class ModelView:
    """A model with its rows pre-adjusted for sampling.

    Distributions are built lazily per context row and cached, so the engine's
    inner loop is dictionary lookups plus scalar arithmetic.
    """

    def __init__(self, model: MarkovModel, adjustment: AdjustmentSpec):
        self.model = model
        self.vocab_size = model.vocab_size
        self._mod = model.vocab_size**model.order if model.order > 0 else 1
        self._raw_table = model.table
        self._adj_table = model.table if adjustment.is_identity else adjust_rows(model.table, adjustment)
        self._same = adjustment.is_identity
        self._adj: dict[int, Distribution] = {}
        self._raw: dict[int, Distribution] = {}

    def index(self, context: Sequence[int]) -> int:
        return self.model.context_index(context)

    def advance(self, idx: int, token: int) -> int:
        return (idx * self.vocab_size + token) % self._mod

    def adjusted(self, idx: int) -> Distribution:
        d = self._adj.get(idx)
        if d is None:
            d = Distribution._trusted(np.array(self._adj_table[idx]))
            self._adj[idx] = d
        return d

    def raw(self, idx: int) -> Distribution:
        if self._same:
            return self.adjusted(idx)
        d = self._raw.get(idx)
        if d is None:
            d = Distribution._trusted(np.array(self._raw_table[idx]))
            self._raw[idx] = d
        return d


@dataclass
class _RoundResult:
    emitted: list[int]
    record: DraftRoundRecord
    residual_fallback: bool


def _run_round(
    tm: ModelView,
    dm: ModelView,
    policy: PolicyConfig,
    state: ControllerState,
    t_idx: int,
    d_idx: int,
    rng: Rng,
    cost: CostModel,
    round_index: int,
    verifier: Verifier = verify_round,
) -> _RoundResult:
    L = policy.max_draft_length
    use_raw = policy.entropy_source == "raw"
    counts_checks = policy.kind != "static"

    drafts: list[int] = []
    draft_dists: list[Distribution] = []
    criteria: list[float] = []
    checks = 0
    reason = MAX_LENGTH
    di = d_idx
    for i in range(L):
        q = dm.adjusted(di)
        decision = should_stop(policy, state, dm.raw(di) if use_raw else q, i)
        criteria.append(decision.criterion_value)
        if i > 0 and counts_checks:
            checks += 1
        if decision.stop:
            reason = decision.reason
            break
        tok = sample(q, rng)
        drafts.append(tok)
        draft_dists.append(q)
        di = dm.advance(di, tok)

    target_dists = []
    ti = t_idx
    for j, tok in enumerate(drafts):
        target_dists.append(tm.adjusted(ti))
        ti = tm.advance(ti, tok)
    target_dists.append(tm.adjusted(ti))

    outcome = verifier(drafts, draft_dists, target_dists, rng)
    n = len(drafts)
    record = DraftRoundRecord(
        round_index=round_index,
        n_drafted=n,
        n_accepted=outcome.accepted_count,
        stop_reason=reason,
        lambda_at_round=state.lam,
        criterion_values=criteria,
        simulated_time=cost.round_seconds(n, checks),
        stop_checks=checks,
    )
    return _RoundResult(outcome.emitted_tokens, record, outcome.residual_fallback)


def _summarize(
    n_emitted: int,
    seconds: float,
    records: list[DraftRoundRecord],
    L: int,
    fallbacks: int,
    keep_rounds: bool,
    controller: ControllerState | None,
) -> RunReport:
    accepted = np.array([r.n_accepted for r in records], dtype=np.int64)
    drafted = sum(r.n_drafted for r in records)
    hist = np.bincount(accepted, minlength=L + 1).tolist() if L > 0 else []
    return RunReport(
        total_tokens_emitted=n_emitted,
        total_simulated_seconds=seconds,
        tps=n_emitted / seconds,
        acceptance_rate=float(accepted.sum() / drafted) if drafted else math.nan,
        accepted_count_histogram=hist,
        mean_accepted=float(accepted.mean()) if L > 0 else math.nan,
        std_accepted=float(accepted.std()) if L > 0 else math.nan,
        n_rounds=len(records),
        max_draft_length=L,
        residual_fallback_count=fallbacks,
        final_lambda=controller.lam if controller is not None else None,
        rounds=records if keep_rounds else None,
        controller=controller,
    )


def generate_autoregressive(
    tm: MarkovModel,
    prompt: Sequence[int],
    n_tokens: int,
    adjustment: AdjustmentSpec,
    rng: Rng,
    cost: CostModel,
    keep_rounds: bool = False,
    view: ModelView | None = None,
) -> tuple[list[int], RunReport]:
    """Sample ``n_tokens`` from the target one at a time."""
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    view = view or ModelView(tm, adjustment)
    idx = view.index(prompt)
    out: list[int] = []
    for _ in range(n_tokens):
        tok = sample(view.adjusted(idx), rng)
        out.append(tok)
        idx = view.advance(idx, tok)
    step = cost.target_step
    records = [
        DraftRoundRecord(i, 0, 0, "autoregressive", math.nan, [], step) for i in range(n_tokens)
    ] if keep_rounds else []
    report = _summarize(n_tokens, n_tokens * step, records, 0, 0, keep_rounds, None)
    report.n_rounds = n_tokens
    return out, report


def generate_speculative(
    tm: MarkovModel,
    dm: MarkovModel,
    prompt: Sequence[int],
    n_tokens: int,
    policy: PolicyConfig,
    adjustment: AdjustmentSpec,
    rng: Rng,
    cost: CostModel,
    keep_rounds: bool = False,
    controller: ControllerState | None = None,
    views: tuple[ModelView, ModelView] | None = None,
) -> tuple[list[int], RunReport]:
    """Speculative decoding with the given stopping policy.

    ``controller`` seeds the threshold controller (fresh from ``policy`` when
    omitted); the final state is returned on the report.
    """
    if tm.vocab_size != dm.vocab_size:
        raise ValueError(f"target and draft vocab sizes differ: {tm.vocab_size} vs {dm.vocab_size}")
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    tv, dv = views or (ModelView(tm, adjustment), ModelView(dm, adjustment))
    state = controller or policy.initial_state()
    L = policy.max_draft_length

    t_idx, d_idx = tv.index(prompt), dv.index(prompt)
    out: list[int] = []
    records: list[DraftRoundRecord] = []
    seconds = 0.0
    fallbacks = 0
    while len(out) < n_tokens:
        res = _run_round(tv, dv, policy, state, t_idx, d_idx, rng, cost, len(records))
        rec = res.record
        records.append(rec)
        seconds += rec.simulated_time
        fallbacks += res.residual_fallback
        out.extend(res.emitted)
        for tok in res.emitted:
            t_idx = tv.advance(t_idx, tok)
            d_idx = dv.advance(d_idx, tok)
        if policy.dynamic_lambda:
            compare_to = rec.n_drafted if policy.accept_compare == "drafted" else L
            state = update_lambda(state, rec.n_drafted, rec.n_accepted, L, compare_to)
    return out[:n_tokens], _summarize(n_tokens, seconds, records, L, fallbacks, keep_rounds, state)


def empirical_output_distribution(
    tm: MarkovModel,
    dm: MarkovModel | None,
    context: Sequence[int],
    trials: int,
    seed: int,
    policy: PolicyConfig | None = None,
    adjustment: AdjustmentSpec = AdjustmentSpec(),
    verifier: str = "rejection",
    position: int = 0,
) -> Distribution:
    """Monte-Carlo law of the emitted token at ``position`` after ``context``.

    ``dm=None`` means autoregressive decoding. ``verifier="accept-always"``
    swaps in a broken verifier that skips rejection (negative control).
    Positions past the first reach tokens whose drafting depended on the
    stopping policy, so they exercise early stopping as well.
    """
    return empirical_output_distributions(
        tm, dm, context, trials, seed, policy, adjustment, verifier, position + 1
    )[position]


def empirical_output_distributions(
    tm: MarkovModel,
    dm: MarkovModel | None,
    context: Sequence[int],
    trials: int,
    seed: int,
    policy: PolicyConfig | None = None,
    adjustment: AdjustmentSpec = AdjustmentSpec(),
    verifier: str = "rejection",
    n_positions: int = 1,
) -> list[Distribution]:
    """Marginal laws of the first ``n_positions`` emitted tokens, from one set of trials."""
    V = tm.vocab_size
    if V > 16:
        raise ValueError("empirical output distributions are meant for V <= 16")
    if n_positions < 1:
        raise ValueError("n_positions must be >= 1")
    rng = Rng(seed)
    counts = np.zeros((n_positions, V), dtype=np.int64)
    tv = ModelView(tm, adjustment)
    if dm is None:
        start = tv.index(context)
        for _ in range(trials):
            idx = start
            for pos in range(n_positions):
                tok = sample(tv.adjusted(idx), rng)
                counts[pos, tok] += 1
                idx = tv.advance(idx, tok)
        return [Distribution(c / trials) for c in counts]

    verify = {"rejection": verify_round, "accept-always": verify_accept_all}[verifier]
    policy = policy or PolicyConfig(kind="static")
    dv = ModelView(dm, adjustment)
    state = policy.initial_state()
    cost = CostModel()
    t0, d0 = tv.index(context), dv.index(context)
    for _ in range(trials):
        t_idx, d_idx = t0, d0
        emitted: list[int] = []
        while len(emitted) < n_positions:
            res = _run_round(tv, dv, policy, state, t_idx, d_idx, rng, cost, 0, verify)
            emitted.extend(res.emitted)
            for tok in res.emitted:
                t_idx = tv.advance(t_idx, tok)
                d_idx = dv.advance(d_idx, tok)
        for pos in range(n_positions):
            counts[pos, emitted[pos]] += 1
    return [Distribution(c / trials) for c in counts]
