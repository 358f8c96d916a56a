import json

import numpy as np
import pytest

from oracles import empirical_tv, enumerate_ar
from isdkit.analytics import oh_isd, tpf_isd
from isdkit.decoder import (
    DecodeTrace,
    ForwardRecord,
    StrideConfig,
    decode,
    decode_ar,
    decode_lossless,
    decode_many,
    lossless_source,
    measure_tpf_oh,
)
from isdkit.errors import InvalidConfigError, InvalidInputError
from isdkit.models import GatedResidualModel, ProposalSource, TabularAnchorModel, one_hot_model, random_model
from isdkit.prob import total_variation

MIRROR = ProposalSource.mirror()


def near_deterministic(V=4, peak=0.97):
    rows = {}
    for t in range(V + 1):
        row = np.full(V, (1 - peak) / (V - 1))
        row[(t + 1) % V if t < V else 0] = peak
        rows[(t,)] = row
    return TabularAnchorModel.from_rows(V, 1, rows)


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [dict(stride=1), dict(tau=-0.5), dict(proposal_mode="greedy"), dict(lossless=True, tau=0.1),
         dict(max_new_tokens=-1)],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(InvalidConfigError):
            StrideConfig(**kwargs)


class TestDeterministicChain:
    """One-hot anchor with mirror proposals: every proposal is accepted."""

    def test_records_and_output(self):
        m = one_hot_model(5, 1)
        tr = decode(m, MIRROR, [0], StrideConfig(stride=3, max_new_tokens=10))
        kinds = [r.kind for r in tr.records]
        assert kinds[0] == "bootstrap" and set(kinds[1:]) == {"fused"}
        assert tr.records[0].query_tokens == 3 and tr.records[0].committed_tokens == 0
        # first fused pass commits free token + 2 accepted + bonus
        assert tr.records[1].committed_tokens == 4 and tr.records[1].bonus_emitted
        assert all(r.committed_tokens == 3 for r in tr.records[2:])
        assert tr.output == [1, 2, 3, 4, 0, 1, 2, 3, 4, 0]

    def test_tpf_oh_limit(self):
        tr = decode(one_hot_model(7, 1), MIRROR, [0], StrideConfig(stride=4, max_new_tokens=4000))
        tpf, oh_fix = measure_tpf_oh(tr, "fixed")
        assert tpf == pytest.approx(4.0, rel=2e-3)
        assert oh_fix == pytest.approx(7 / 4, rel=2e-3)
        assert tr.mean_acceptance == 1.0 and tr.alpha == 1.0

    def test_matches_ar(self):
        m = one_hot_model(6, 1)
        tr = decode(m, MIRROR, [3], StrideConfig(stride=4, max_new_tokens=17))
        assert tr.output == decode_ar(m, [3], 17).output


class TestTraceInvariants:
    @pytest.fixture(params=[("sample", 3, 0.0), ("sample", 4, 0.5), ("argmax", 2, 0.0), ("argmax", 5, 0.2)])
    def trace(self, request, small_model):
        mode, N, tau = request.param
        cfg = StrideConfig(stride=N, tau=tau, proposal_mode=mode, max_new_tokens=300, seed=5)
        return decode(small_model, ProposalSource.mixture(0.3), [0], cfg), N

    def test_progress_and_alternation(self, trace):
        tr, N = trace
        for i, rec in enumerate(tr.records):
            if rec.kind == "fused":
                assert rec.committed_tokens >= 1
                assert rec.query_tokens == 2 * N - 1
            else:
                assert rec.committed_tokens == 0 and rec.query_tokens == N
                if i + 1 < len(tr.records):
                    assert tr.records[i + 1].kind == "fused"

    def test_counts(self, trace):
        tr, _ = trace
        assert sum(r.committed_tokens for r in tr.records) == len(tr.committed)
        assert tr.output == tr.committed[:300]

    def test_bonus_ledger(self, trace):
        # committed + carried bonus from the previous fused pass = N + 1
        tr, N = trace
        for prev, rec in zip(tr.records, tr.records[1:]):
            if rec.bonus_emitted:
                carried = 1 if prev.kind == "fused" else 0
                assert rec.committed_tokens + carried == N + 1

    def test_rejection_position(self, trace):
        tr, N = trace
        for prev, rec in zip(tr.records, tr.records[1:]):
            if rec.rejection_position is not None:
                k = rec.rejection_position
                assert 1 <= k <= N - 1
                free = 0 if prev.kind == "fused" else 1
                assert rec.committed_tokens == free + (k - 1) + 1


class TestDecode:
    def test_zero_tokens(self, small_model):
        tr = decode(small_model, MIRROR, [0], StrideConfig(max_new_tokens=0))
        assert tr.records == [] and tr.output == []

    def test_deterministic(self, small_model):
        cfg = StrideConfig(stride=4, max_new_tokens=50, seed=3)
        a = decode(small_model, ProposalSource.mixture(0.2), [1], cfg)
        b = decode(small_model, ProposalSource.mixture(0.2), [1], cfg)
        assert a.to_jsonl() == b.to_jsonl()

    def test_stop_token_truncates(self):
        m = one_hot_model(6, 1)
        tr = decode(m, MIRROR, [0], StrideConfig(stride=4, max_new_tokens=50, stop_tokens=frozenset({2})))
        assert tr.output == [1, 2]
        assert len(tr.committed) > len(tr.output)

    def test_stop_token_in_prompt_allowed(self):
        m = one_hot_model(6, 1)
        tr = decode(m, MIRROR, [2], StrideConfig(stride=3, max_new_tokens=4, stop_tokens=frozenset({2})))
        assert tr.output == [3, 4, 5, 0]

    def test_empty_prompt(self, small_model):
        with pytest.raises(InvalidInputError):
            decode(small_model, MIRROR, [], StrideConfig())

    def test_noise_proposals_fall_to_ar(self):
        # uniform proposals hit the peak token about 1/V of the time
        tr = decode(near_deterministic(V=20), ProposalSource.mixture(1.0), [0], StrideConfig(stride=4, max_new_tokens=3000))
        tpf, _ = measure_tpf_oh(tr)
        assert tpf < 1.1
        assert tpf == pytest.approx(tpf_isd(4, tr.mean_acceptance), rel=0.02)

    def test_jsonl(self, small_model):
        tr = decode(small_model, MIRROR, [0], StrideConfig(stride=3, max_new_tokens=20))
        lines = [json.loads(x) for x in tr.to_jsonl().splitlines()]
        assert len(lines) == tr.forwards + 1
        assert set(lines[0]) == {"kind", "query_tokens", "committed_tokens", "rejection_position", "bonus_emitted"}
        assert lines[-1]["trailer"] is True and lines[-1]["output"] == tr.output
        assert lines[-1]["summary"]["tpf"] == pytest.approx(measure_tpf_oh(tr)[0])


class TestMeasure:
    def test_ar(self, small_model):
        tr = decode_ar(small_model, [0], 25, seed=1)
        assert measure_tpf_oh(tr) == (1.0, 1.0)
        assert measure_tpf_oh(tr, "fixed") == (1.0, 1.0)

    def test_single_fused(self):
        tr = DecodeTrace(stride=3, records=[ForwardRecord("fused", 5, 2)])
        assert measure_tpf_oh(tr, "fixed") == (2.0, 2.5)

    def test_fixed_pads_propose_only(self):
        tr = DecodeTrace(stride=3, records=[ForwardRecord("bootstrap", 3, 0), ForwardRecord("fused", 5, 2)])
        assert measure_tpf_oh(tr, "variable") == (1.0, 4.0)
        assert measure_tpf_oh(tr, "fixed") == (1.0, 5.0)

    def test_errors(self):
        with pytest.raises(InvalidInputError):
            measure_tpf_oh(DecodeTrace(stride=3))
        with pytest.raises(InvalidInputError):
            measure_tpf_oh(DecodeTrace(stride=3, records=[ForwardRecord("bootstrap", 3, 0)]))
        with pytest.raises(InvalidInputError):
            measure_tpf_oh(DecodeTrace(stride=3, records=[ForwardRecord("fused", 5, 2)]), "padded")

    def test_record_invariants(self):
        with pytest.raises(InvalidInputError):
            ForwardRecord("fused", 5, 2, rejection_position=1, bonus_emitted=True)


class TestDecodeAr:
    def test_deterministic_anchor(self):
        assert decode_ar(one_hot_model(4, 1), [1], 5).output == [2, 3, 0, 1, 2]

    def test_seeded(self, small_model):
        assert decode_ar(small_model, [0], 30, seed=4).output == decode_ar(small_model, [0], 30, seed=4).output


class TestLossless:
    def test_config_checks(self, small_model):
        gated = GatedResidualModel.zeros(small_model)
        with pytest.raises(InvalidConfigError):
            lossless_source(small_model, gated, StrideConfig())
        other = random_model(4, 1, 0.5, 8)
        with pytest.raises(InvalidConfigError):
            lossless_source(other, gated, StrideConfig(lossless=True))

    def test_zero_residual_proposals_equal_base(self, small_model):
        gated = GatedResidualModel.zeros(small_model)
        chain = ProposalSource.gated_residual(gated).chain_table(small_model, 4)
        np.testing.assert_allclose(chain, MIRROR.chain_table(small_model, 4), atol=1e-15)

    def test_zero_residual_accepts_everything(self):
        # Order 0: the slot a mask cannot see carries no information, so q = p exactly.
        base = TabularAnchorModel.from_rows(4, 0, {(): [0.4, 0.3, 0.2, 0.1]})
        gated = GatedResidualModel.zeros(base)
        tr = decode_lossless(base, gated, [0], StrideConfig(stride=4, lossless=True, max_new_tokens=200))
        np.testing.assert_allclose(tr.acceptance_probs, 1.0, atol=1e-12)
        assert all(r.rejection_position is None for r in tr.records)

    def test_argmax_mode_preserves_distribution(self, small_model):
        exact = enumerate_ar(small_model, [0], 5)
        cfg = StrideConfig(stride=4, proposal_mode="argmax", max_new_tokens=5, seed=21)
        batch = decode_many(small_model, ProposalSource.mixture(0.3), [0], cfg, 1_000_000)
        assert empirical_tv(batch.outputs, exact, 4) < 0.01

    def test_negative_control_tau(self, small_model):
        # loosening the threshold must visibly break distribution preservation
        exact = enumerate_ar(small_model, [0], 5)
        gated = GatedResidualModel(small_model, np.random.default_rng(1).normal(0, 2, small_model.table.shape))
        cfg = StrideConfig(stride=3, tau=1.0, max_new_tokens=5, seed=2)
        batch = decode_many(small_model, ProposalSource.gated_residual(gated), [0], cfg, 200_000)
        assert empirical_tv(batch.outputs, exact, 4) > 0.05


class TestMutualOracle:
    """Order-0 anchor with mixture proposals has uniform per-position acceptance."""

    @pytest.mark.parametrize("N,target", [(3, 0.7), (4, 0.85)])
    def test_decoder_matches_closed_form(self, N, target):
        row = np.array([0.7, 0.1, 0.1, 0.1])
        anchor = TabularAnchorModel.from_rows(4, 0, {(): row})
        eps = (1 - target) / total_variation(row, np.full(4, 0.25))
        cfg = StrideConfig(stride=N, max_new_tokens=4000, seed=N)
        batch = decode_many(anchor, ProposalSource.mixture(eps), [0], cfg, 400)
        assert batch.mean_acceptance == pytest.approx(target, rel=5e-3)
        assert batch.tpf == pytest.approx(tpf_isd(N, target), rel=0.01)
        assert batch.oh("variable") == pytest.approx(oh_isd(N, target, "variable"), rel=0.01)
        assert batch.oh("fixed") == pytest.approx(oh_isd(N, target, "fixed"), rel=0.01)


class TestTau:
    def test_acceptance_non_decreasing(self, small_model):
        gated = GatedResidualModel(small_model, np.random.default_rng(5).normal(0, 2, small_model.table.shape))
        src = ProposalSource.gated_residual(gated)
        acc = [decode_many(small_model, src, [0], StrideConfig(stride=4, tau=t, max_new_tokens=200, seed=0), 500).mean_acceptance
               for t in (0.0, 0.1, 0.2, 0.5, 1.0)]
        assert acc == sorted(acc)
        assert acc[-1] > acc[0]
