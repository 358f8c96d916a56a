"""Introspective strided decoding over tabular models.

One forward pass of the strided decoder does two jobs at once: the
clean positions re-read last step's proposals and yield causal anchors
``p_k`` used to accept or resample them, and a fresh run of mask slots
proposes the next tokens. The loop alternates between

* a propose-only pass (``bootstrap`` the first time): the last committed
  position yields an exact AR token (the "free" token) and ``N - 1``
  masks propose the tokens after it;
* fused passes: the free token plus ``N - 1`` pending proposals are
  verified in order; the first rejection is resampled from the residual
  and ends the chain, otherwise a bonus token is drawn from the final
  anchor and the masks of the same pass become the next proposals.

Accounting follows the accepted-count ledger: the free token is
committed by the fused pass that verifies its successors, the bonus is
committed immediately. Summed over a run this is the same token count as
the renewal-cycle derivation, so TPF measured from a trace converges to
the closed form.

The engine is vectorized over independent chains so Monte Carlo checks
can run ~10^6 decodes; :func:`decode` is simply the one-chain case with
per-forward records kept.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from isdkit.errors import InvalidConfigError, InvalidInputError
from isdkit.models import GatedResidualModel, ProposalSource, TabularAnchorModel
from isdkit.prob import RngStream, accept_or_resample_batch, sample_rows

PROPOSAL_MODES = ("sample", "argmax")
NP_KINDS = ("bootstrap", "propose-only")
ACCOUNTINGS = ("variable", "fixed")


@dataclass(frozen=True)
class StrideConfig:
    stride: int = 3
    tau: float = 0.0
    proposal_mode: str = "sample"
    lossless: bool = False
    max_new_tokens: int = 64
    stop_tokens: frozenset[int] = frozenset()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.stride < 2:
            raise InvalidConfigError("stride must be >= 2; use decode_ar for plain AR decoding")
        if self.tau < 0:
            raise InvalidConfigError("tau must be >= 0")
        if self.proposal_mode not in PROPOSAL_MODES:
            raise InvalidConfigError(f"proposal_mode must be one of {PROPOSAL_MODES}")
        if self.lossless and self.tau != 0:
            raise InvalidConfigError("lossless decoding requires tau = 0")
        if self.max_new_tokens < 0:
            raise InvalidConfigError("max_new_tokens must be >= 0")
        object.__setattr__(self, "stop_tokens", frozenset(int(t) for t in self.stop_tokens))


@dataclass(frozen=True)
class ForwardRecord:
    kind: str
    query_tokens: int
    committed_tokens: int
    rejection_position: int | None = None
    bonus_emitted: bool = False

    def __post_init__(self) -> None:
        if self.committed_tokens < 0:
            raise InvalidInputError("committed_tokens must be >= 0")
        if self.bonus_emitted and self.rejection_position is not None:
            raise InvalidInputError("a record cannot both emit a bonus and reject")


@dataclass
class DecodeTrace:
    """Per-forward records of one decode run.

    ``committed`` holds every committed token (its length equals the sum
    of ``committed_tokens``); ``output`` is ``committed`` cut at
    ``max_new_tokens`` and just after the first stop token.
    """

    stride: int
    records: list[ForwardRecord] = field(default_factory=list)
    committed: list[int] = field(default_factory=list)
    output: list[int] = field(default_factory=list)
    acceptance_probs: list[float] = field(default_factory=list)
    alpha_terms: list[float] = field(default_factory=list)

    @property
    def forwards(self) -> int:
        return len(self.records)

    @property
    def mean_acceptance(self) -> float:
        return float(np.mean(self.acceptance_probs)) if self.acceptance_probs else float("nan")

    @property
    def alpha(self) -> float:
        return float(np.mean(self.alpha_terms)) if self.alpha_terms else float("nan")

    def summary(self) -> dict:
        out = {
            "forwards": self.forwards,
            "committed_tokens": len(self.committed),
            "output_tokens": len(self.output),
            "verified_positions": len(self.acceptance_probs),
        }
        if self.committed:
            out["tpf"], out["oh_variable"] = measure_tpf_oh(self, "variable")
            out["oh_fixed"] = measure_tpf_oh(self, "fixed")[1]
        if self.acceptance_probs:
            out["mean_acceptance"] = self.mean_acceptance
            out["alpha"] = self.alpha
        return out

    def to_jsonl(self) -> str:
        lines = [json.dumps(asdict(r)) for r in self.records]
        trailer = {
            "trailer": True,
            "stride": self.stride,
            "output": self.output,
            "committed": self.committed,
            "summary": self.summary(),
        }
        lines.append(json.dumps(trailer))
        return "\n".join(lines) + "\n"


def measure_tpf_oh(trace: DecodeTrace, query_accounting: str = "variable") -> tuple[float, float]:
    """Tokens per forward and query tokens per committed token.

    Under fixed accounting propose-only passes are padded to the fused
    width ``2N - 1``.
    """
    if query_accounting not in ACCOUNTINGS:
        raise InvalidInputError(f"query_accounting must be one of {ACCOUNTINGS}")
    if not trace.records:
        raise InvalidInputError("trace has no forward records")
    committed = sum(r.committed_tokens for r in trace.records)
    if committed == 0:
        raise InvalidInputError("trace committed no tokens")
    fused_width = 2 * trace.stride - 1
    queries = 0
    for r in trace.records:
        if query_accounting == "fixed" and r.kind in NP_KINDS:
            queries += fused_width
        else:
            queries += r.query_tokens
    return committed / len(trace.records), queries / committed


# ---------------------------------------------------------------------------
# Vectorized engine
# ---------------------------------------------------------------------------


class _StridedChains:
    def __init__(
        self,
        anchor: TabularAnchorModel,
        source: ProposalSource,
        prompt: Sequence[int],
        cfg: StrideConfig,
        n: int,
        gen: np.random.Generator,
        keep_records: bool,
    ):
        N, V = cfg.stride, anchor.vocab_size
        self.anchor, self.cfg, self.gen, self.N = anchor, cfg, gen, N
        # Mask slots never see the token produced at the slot before them, so
        # the chain is taken one step deeper and its first entry dropped.
        self.masks = source.chain_table(anchor, N)[:, 1:, :]
        self.stop = np.array(sorted(cfg.stop_tokens), dtype=np.int64)
        self.code = np.full(n, anchor.encode(prompt), dtype=np.int64)
        self.buf = np.full((n, cfg.max_new_tokens + N + 1), -1, dtype=np.int64)
        self.count = np.zeros(n, dtype=np.int64)
        self.stop_at = np.full(n, -1, dtype=np.int64)
        self.done = np.full(n, cfg.max_new_tokens == 0)
        self.pending = np.zeros(n, dtype=bool)
        self.started = np.zeros(n, dtype=bool)
        self.free = np.full(n, -1, dtype=np.int64)
        self.props = np.zeros((n, N - 1), dtype=np.int64)
        self.qs = np.zeros((n, N - 1, V))
        self.forwards = np.zeros(n, dtype=np.int64)
        self.sum_accept = 0.0
        self.sum_alpha = 0.0
        self.n_verified = 0
        self.records = [[] for _ in range(n)] if keep_records else None
        self.accept_log = [[] for _ in range(n)] if keep_records else None
        self.alpha_log = [[] for _ in range(n)] if keep_records else None

    def _commit(self, rows: np.ndarray, tokens: np.ndarray) -> None:
        if rows.size == 0:
            return
        self.buf[rows, self.count[rows]] = tokens
        if self.stop.size:
            hit = np.isin(tokens, self.stop) & (self.stop_at[rows] < 0)
            self.stop_at[rows[hit]] = self.count[rows[hit]]
        self.count[rows] += 1
        self.code[rows] = self.anchor.push(self.code[rows], tokens)

    def _propose(self, rows: np.ndarray, ctx: np.ndarray) -> None:
        q = self.masks[ctx]
        if self.cfg.proposal_mode == "argmax":
            toks = np.argmax(q, axis=-1)
            q = np.zeros_like(q)
            np.put_along_axis(q, toks[..., None], 1.0, axis=-1)
        else:
            V = q.shape[-1]
            toks = sample_rows(q.reshape(-1, V), self.gen.random(q.shape[0] * q.shape[1])).reshape(q.shape[:2])
        self.props[rows] = toks
        self.qs[rows] = q
        self.pending[rows] = True

    def step(self) -> None:
        act = np.flatnonzero(~self.done)
        if act.size == 0:
            return
        self.forwards[act] += 1
        # Partition before mutating: a chain does exactly one pass per step.
        fused_rows = act[self.pending[act]]
        np_rows = act[~self.pending[act]]
        if np_rows.size:
            self._propose_only(np_rows)
        if fused_rows.size:
            self._fused(fused_rows)
        self._finish(act)

    def _propose_only(self, rows: np.ndarray) -> None:
        # The last committed position yields the free token; masks propose after it.
        self.free[rows] = sample_rows(self.anchor.table[self.code[rows]], self.gen.random(rows.size))
        self._propose(rows, self.code[rows])
        if self.records is not None:
            for r in rows:
                kind = "propose-only" if self.started[r] else "bootstrap"
                self.records[r].append(ForwardRecord(kind, self.N, 0))
        self.started[rows] = True

    def _fused(self, rows: np.ndarray) -> None:
        N, table, tau = self.N, self.anchor.table, self.cfg.tau
        had_free = self.free[rows] >= 0
        self._commit(rows[had_free], self.free[rows[had_free]])
        self.free[rows] = -1
        live = np.ones(rows.size, dtype=bool)
        n_acc = np.zeros(rows.size, dtype=np.int64)
        rej_pos = np.full(rows.size, -1, dtype=np.int64)
        for j in range(N - 1):
            li = np.flatnonzero(live)
            if li.size == 0:
                break
            sub = rows[li]
            p = table[self.code[sub]]
            q = self.qs[sub, j]
            x = self.props[sub, j]
            u = self.gen.random(2 * li.size)
            acc, out, prob = accept_or_resample_batch(p, q, x, tau, u[: li.size], u[li.size:])
            alpha = np.minimum(1.0, p[np.arange(li.size), x] / q[np.arange(li.size), x])
            self.sum_accept += float(prob.sum())
            self.sum_alpha += float(alpha.sum())
            self.n_verified += li.size
            if self.accept_log is not None:
                for r, a, b in zip(sub, prob, alpha):
                    self.accept_log[r].append(float(a))
                    self.alpha_log[r].append(float(b))
            self._commit(sub, out)
            n_acc[li[acc]] += 1
            rej_pos[li[~acc]] = j + 1
            live[li[~acc]] = False

        bonus_rows = rows[live]
        if bonus_rows.size:
            ctx = self.code[bonus_rows].copy()
            self._commit(bonus_rows, sample_rows(table[ctx], self.gen.random(bonus_rows.size)))
            # The masks of this pass sit after the proposals; the bonus slot is unseen by them.
            self._propose(bonus_rows, ctx)
        self.pending[rows[~live]] = False

        if self.records is not None:
            committed = had_free.astype(np.int64) + n_acc + 1
            for i, r in enumerate(rows):
                self.records[r].append(
                    ForwardRecord(
                        "fused",
                        2 * N - 1,
                        int(committed[i]),
                        None if live[i] else int(rej_pos[i]),
                        bool(live[i]),
                    )
                )

    def _finish(self, act: np.ndarray) -> None:
        limit = self.cfg.max_new_tokens
        self.done[act] = (self.count[act] >= limit) | (self.stop_at[act] >= 0)

    def run(self) -> None:
        while not self.done.all():
            self.step()

    def output_lengths(self) -> np.ndarray:
        lengths = np.minimum(self.count, self.cfg.max_new_tokens)
        stopped = self.stop_at >= 0
        lengths[stopped] = np.minimum(lengths[stopped], self.stop_at[stopped] + 1)
        return lengths


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------


def _check_prompt(anchor: TabularAnchorModel, prompt: Sequence[int]) -> list[int]:
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise InvalidInputError("prompt must be non-empty")
    anchor.encode(prompt)
    return prompt


def decode(
    anchor: TabularAnchorModel,
    proposals: ProposalSource,
    prompt: Sequence[int],
    cfg: StrideConfig,
) -> DecodeTrace:
    """Run strided decoding once and return the full per-forward trace."""
    prompt = _check_prompt(anchor, prompt)
    chains = _StridedChains(anchor, proposals, prompt, cfg, 1, RngStream(cfg.seed).generator(), True)
    chains.run()
    count = int(chains.count[0])
    committed = [int(t) for t in chains.buf[0, :count]]
    return DecodeTrace(
        stride=cfg.stride,
        records=chains.records[0],
        committed=committed,
        output=committed[: int(chains.output_lengths()[0])],
        acceptance_probs=chains.accept_log[0],
        alpha_terms=chains.alpha_log[0],
    )


@dataclass
class DecodeBatch:
    """Aggregate of many independent decodes of the same prompt.

    ``outputs`` is ``(n, max_new_tokens)`` with ``-1`` padding after each
    run's (truncated) output.
    """

    stride: int
    outputs: np.ndarray
    committed_tokens: int
    forwards: int
    propose_only_forwards: int
    verified_positions: int
    sum_acceptance: float
    sum_alpha: float

    @property
    def tpf(self) -> float:
        return self.committed_tokens / self.forwards

    def oh(self, query_accounting: str = "variable") -> float:
        N = self.stride
        fused = self.forwards - self.propose_only_forwards
        np_width = N if query_accounting == "variable" else 2 * N - 1
        return (fused * (2 * N - 1) + self.propose_only_forwards * np_width) / self.committed_tokens

    @property
    def mean_acceptance(self) -> float:
        return self.sum_acceptance / self.verified_positions

    @property
    def alpha(self) -> float:
        return self.sum_alpha / self.verified_positions


def decode_many(
    anchor: TabularAnchorModel,
    proposals: ProposalSource,
    prompt: Sequence[int],
    cfg: StrideConfig,
    n_runs: int,
    chunk: int = 200_000,
) -> DecodeBatch:
    """Run ``n_runs`` independent decodes; chunk ``i`` uses stream ``(seed, i)``."""
    prompt = _check_prompt(anchor, prompt)
    M = cfg.max_new_tokens
    outputs = np.full((n_runs, M), -1, dtype=np.int64)
    totals = dict(committed=0, forwards=0, np_forwards=0, verified=0, acc=0.0, alpha=0.0)
    for ci, start in enumerate(range(0, n_runs, chunk)):
        n = min(chunk, n_runs - start)
        chains = _StridedChains(anchor, proposals, prompt, cfg, n, RngStream(cfg.seed, ci).generator(), False)
        np_forwards = np.zeros(n, dtype=np.int64)
        while not chains.done.all():
            np_forwards += ~chains.done & ~chains.pending
            chains.step()
        lengths = chains.output_lengths()
        block = chains.buf[:, :M].copy()
        block[np.arange(M)[None, :] >= lengths[:, None]] = -1
        outputs[start : start + n] = block
        totals["committed"] += int(chains.count.sum())
        totals["forwards"] += int(chains.forwards.sum())
        totals["np_forwards"] += int(np_forwards.sum())
        totals["verified"] += chains.n_verified
        totals["acc"] += chains.sum_accept
        totals["alpha"] += chains.sum_alpha
    return DecodeBatch(
        stride=cfg.stride,
        outputs=outputs,
        committed_tokens=totals["committed"],
        forwards=totals["forwards"],
        propose_only_forwards=totals["np_forwards"],
        verified_positions=totals["verified"],
        sum_acceptance=totals["acc"],
        sum_alpha=totals["alpha"],
    )


def decode_ar(
    anchor: TabularAnchorModel,
    prompt: Sequence[int],
    max_new_tokens: int,
    seed: int = 0,
    stop_tokens: Iterable[int] = (),
) -> DecodeTrace:
    """Plain next-token sampling; one committed token per forward.

    Returns a trace whose ``output`` is the generated sequence.
    """
    prompt = _check_prompt(anchor, prompt)
    if max_new_tokens < 0:
        raise InvalidInputError("max_new_tokens must be >= 0")
    gen = RngStream(seed).generator()
    stops = set(int(t) for t in stop_tokens)
    code = anchor.encode(prompt)
    trace = DecodeTrace(stride=1)
    while len(trace.committed) < max_new_tokens:
        tok = int(sample_rows(anchor.table[code][None, :], gen.random(1))[0])
        trace.records.append(ForwardRecord("ar", 1, 1))
        trace.committed.append(tok)
        code = anchor.push(code, tok)
        if tok in stops:
            break
    trace.output = list(trace.committed)
    return trace


def lossless_source(base: TabularAnchorModel, gated: GatedResidualModel, cfg: StrideConfig) -> ProposalSource:
    if not cfg.lossless:
        raise InvalidConfigError("lossless decoding needs cfg.lossless = True")
    if cfg.tau != 0:
        raise InvalidConfigError("lossless decoding requires tau = 0")
    if gated.base != base:
        raise InvalidConfigError("gated model must wrap the same base model used for introspection")
    return ProposalSource.gated_residual(gated)


def decode_lossless(
    base: TabularAnchorModel,
    gated: GatedResidualModel,
    prompt: Sequence[int],
    cfg: StrideConfig,
) -> DecodeTrace:
    """Proposals from the gated model, every anchor from the base model alone."""
    return decode(base, lossless_source(base, gated, cfg), prompt, cfg)


def decode_lossless_many(
    base: TabularAnchorModel,
    gated: GatedResidualModel,
    prompt: Sequence[int],
    cfg: StrideConfig,
    n_runs: int,
) -> DecodeBatch:
    return decode_many(base, lossless_source(base, gated, cfg), prompt, cfg, n_runs)
