from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speclab.distributions import Distribution as D
from speclab.distributions import acceptance_prob_analytic, tvd
from speclab.sampling import RNG_ALGORITHM, Rng, sample, verify_accept_all, verify_round


class TestRng:
    def test_same_seed_same_stream(self):
        a, b = Rng(42), Rng(42)
        assert [a.uniform() for _ in range(10)] == [b.uniform() for _ in range(10)]

    def test_streams_differ(self):
        assert Rng(42, 0).uniform() != Rng(42, 1).uniform()
        assert Rng(42).spawn(3).uniform() == Rng(42, 3).uniform()

    @pytest.mark.parametrize("counter", [0, 1, 4095, 4096, 4097, 9000, 12288])
    def test_state_restore(self, counter):
        a = Rng(7, 2)
        for _ in range(counter):
            a.uniform()
        state = a.state
        assert state == (RNG_ALGORITHM, 7, 2, counter)
        b = Rng.from_state(state)
        assert [a.uniform() for _ in range(5000)] == [b.uniform() for _ in range(5000)]

    def test_rejects_unknown_algorithm(self):
        with pytest.raises(ValueError):
            Rng.from_state(("mt19937", 0, 0, 0))

    def test_uniform_range(self):
        r = Rng(0)
        u = np.array([r.uniform() for _ in range(10_000)])
        assert u.min() >= 0.0 and u.max() < 1.0


class TestSample:
    def test_one_hot(self):
        r = Rng(0)
        assert all(sample(D.one_hot(5, 2), r) == 2 for _ in range(1000))

    def test_fair_coin_frequency(self):
        r = Rng(0)
        zeros = sum(sample(D([0.5, 0.5]), r) == 0 for _ in range(100_000))
        assert 0.49 <= zeros / 100_000 <= 0.51
        assert zeros == 50110  # regression constant for seed 0

    def test_never_returns_zero_probability_token(self):
        r = Rng(3)
        d = D([0.0, 0.3, 0.0, 0.7, 0.0])
        assert {sample(d, r) for _ in range(5000)} == {1, 3}

    def test_one_uniform_per_draw(self):
        r = Rng(1)
        sample(D([0.2, 0.8]), r)
        assert r.counter == 1


class TestVerifyRound:
    def test_no_drafts_is_a_target_step(self):
        out = verify_round([], [], [D.one_hot(3, 1)], Rng(0))
        assert out.emitted_tokens == [1] and out.accepted_count == 0 and out.bonus_token_used

    def test_identical_never_rejects(self):
        r = Rng(5)
        d = D([0.1, 0.2, 0.3, 0.4])
        for _ in range(200):
            toks = [sample(d, r) for _ in range(4)]
            out = verify_round(toks, [d] * 4, [d] * 5, r)
            assert out.accepted_count == 4 and out.bonus_token_used and out.rejection_index is None
            assert out.emitted_tokens[:4] == toks

    def test_ratio_acceptance(self):
        p_dm, p_tm = D([0.8, 0.2]), D([0.5, 0.5])
        r = Rng(1)
        accepted = sum(verify_round([0], [p_dm], [p_tm, p_tm], r).accepted_count for _ in range(100_000))
        assert abs(accepted / 100_000 - 0.625) <= 0.006
        assert accepted == 62679  # regression constant for seed 1

    def test_rejection_emits_residual(self):
        # Token 0 is impossible under the target: always rejected, replaced from residual = [0, 1].
        out = verify_round([0, 0], [D([0.9, 0.1])] * 2, [D([0.0, 1.0])] * 3, Rng(0))
        assert out.accepted_count == 0 and out.rejection_index == 0
        assert out.emitted_tokens == [1] and not out.bonus_token_used

    def test_length_mismatch(self):
        d = D([0.5, 0.5])
        with pytest.raises(ValueError):
            verify_round([0], [d], [d], Rng(0))
        with pytest.raises(ValueError):
            verify_round([0, 1], [d], [d, d, d], Rng(0))

    def test_deterministic(self):
        rng_a, rng_b = Rng(9), Rng(9)
        p, q = D([0.6, 0.3, 0.1]), D([0.2, 0.3, 0.5])
        a = [verify_round([0, 1, 2], [p] * 3, [q] * 4, rng_a) for _ in range(100)]
        b = [verify_round([0, 1, 2], [p] * 3, [q] * 4, rng_b) for _ in range(100)]
        assert a == b

    def test_positional_consistency(self):
        # P(position i+1 examined) = P(positions 1..i all accepted) = prod of per-position betas.
        rng = np.random.default_rng(0)
        p_dm = D(rng.dirichlet(np.ones(4)))
        p_tm = D(rng.dirichlet(np.ones(4)))
        beta = acceptance_prob_analytic(p_dm, p_tm)
        r = Rng(11)
        n, L = 100_000, 3
        counts = np.zeros(L + 1, dtype=int)
        for _ in range(n):
            toks = [sample(p_dm, r) for _ in range(L)]
            out = verify_round(toks, [p_dm] * L, [p_tm] * (L + 1), r)
            counts[out.accepted_count] += 1
            assert len(out.accept_probs) == min(out.accepted_count + 1, L)
        reached = counts[::-1].cumsum()[::-1] / n  # P(accepted_count >= i)
        for i in range(L + 1):
            sd = np.sqrt(beta**i * (1 - beta**i) / n)
            assert abs(reached[i] - beta**i) <= 4 * sd + 1e-12

    def test_emitted_law_matches_target(self):
        rng = np.random.default_rng(1)
        for V in (2, 5, 8):
            p_dm, p_tm = D(rng.dirichlet(np.ones(V))), D(rng.dirichlet(np.ones(V)))
            r = Rng(V)
            counts = np.zeros(V)
            for _ in range(200_000):
                out = verify_round([sample(p_dm, r)], [p_dm], [p_tm, p_tm], r)
                counts[out.emitted_tokens[0]] += 1
            assert tvd(D(counts / counts.sum()), p_tm) < 0.01

    def test_accept_all_is_biased(self):
        p_dm, p_tm = D([0.1, 0.9]), D([0.9, 0.1])
        r = Rng(0)
        counts = np.zeros(2)
        for _ in range(20_000):
            counts[verify_accept_all([sample(p_dm, r)], [p_dm], [p_tm, p_tm], r).emitted_tokens[0]] += 1
        assert tvd(D(counts / counts.sum()), p_tm) > 0.5


@given(st.integers(0, 2**32), st.integers(2, 6), st.integers(0, 5))
@settings(max_examples=50, deadline=None)
def test_outcome_invariants(seed, V, n):
    rng = np.random.default_rng(seed)
    r = Rng(seed)
    drafts = [D(rng.dirichlet(np.ones(V))) for _ in range(n)]
    targets = [D(rng.dirichlet(np.ones(V))) for _ in range(n + 1)]
    toks = [sample(d, r) for d in drafts]
    out = verify_round(toks, drafts, targets, r)
    assert len(out.emitted_tokens) == out.accepted_count + 1
    assert (out.rejection_index is not None) == (out.accepted_count < n)
    assert out.emitted_tokens[: out.accepted_count] == toks[: out.accepted_count]
    assert all(0 <= t < V for t in out.emitted_tokens)
