"""Monte Carlo models of the three decoding paradigms.

These simulations only flip acceptance coins; they never touch token
distributions. They exist to check the closed forms in
:mod:`isdkit.analytics` and to drive the serving simulator.

Counters are plain sums (including the per-cycle second moments needed
for standard errors), so results from independent streams merge by
addition in any order.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from isdkit.analytics import cumulative_acceptance
from isdkit.errors import InvalidInputError
from isdkit.prob import RngStream, as_generator


@dataclass
class SimResult:
    method: str
    N: int
    p: float
    cycles: int = 0
    tokens: int = 0
    forwards: int = 0
    query_var: int = 0
    query_fix: int = 0
    # per-cycle moment sums for the ratio-estimator standard error
    sum_tt: float = 0.0
    sum_ff: float = 0.0
    sum_tf: float = 0.0

    @property
    def tpf(self) -> float:
        return self.tokens / self.forwards

    @property
    def tpf_se(self) -> float:
        """Delta-method standard error of tokens/forwards over cycles."""
        n = self.cycles
        if n < 2:
            return float("nan")
        r = self.tpf
        mean_f = self.forwards / n
        # sample variance of (t_i - r f_i)
        ss = self.sum_tt - 2 * r * self.sum_tf + r * r * self.sum_ff
        mean_d = (self.tokens - r * self.forwards) / n
        var = (ss - n * mean_d * mean_d) / (n - 1)
        return float(np.sqrt(max(var, 0.0) / n) / mean_f)

    @property
    def oh_var(self) -> float:
        return self.query_var / self.tokens

    @property
    def oh_fix(self) -> float:
        return self.query_fix / self.tokens

    @property
    def forwards_per_cycle(self) -> float:
        return self.forwards / self.cycles

    @property
    def efficiency(self) -> float:
        return self.tpf / self.oh_var

    def merge(self, other: "SimResult") -> "SimResult":
        if (self.method, self.N, self.p) != (other.method, other.N, other.p):
            raise InvalidInputError("can only merge results of the same configuration")
        out = SimResult(self.method, self.N, self.p)
        for f in fields(SimResult):
            if f.name not in ("method", "N", "p"):
                setattr(out, f.name, getattr(self, f.name) + getattr(other, f.name))
        return out

    def row(self) -> dict:
        return dict(method=self.method, N=self.N, p=self.p, cycles=self.cycles, tpf=self.tpf,
                    tpf_se=self.tpf_se, oh_var=self.oh_var, oh_fix=self.oh_fix, efficiency=self.efficiency)


def _accumulate(res: SimResult, tok: np.ndarray, fwd: np.ndarray, q_var: np.ndarray, q_fix: np.ndarray) -> SimResult:
    tok = tok.astype(np.float64)
    fwd = fwd.astype(np.float64)
    res.cycles += tok.size
    res.tokens += int(tok.sum())
    res.forwards += int(fwd.sum())
    res.query_var += int(q_var.sum())
    res.query_fix += int(q_fix.sum())
    res.sum_tt += float(tok @ tok)
    res.sum_ff += float(fwd @ fwd)
    res.sum_tf += float(tok @ fwd)
    return res


def simulate_isd(
    N: int,
    schedule: float | Sequence[float],
    cycles: int,
    rng: RngStream | np.random.Generator | int,
    max_chain: int = 100_000,
) -> SimResult:
    """Renewal cycles of one propose-only pass plus a chain of fused passes.

    A fused pass flips the ``N - 1`` acceptance coins in order. All pass:
    ``N`` tokens and the chain continues. First failure at proposal ``k``:
    ``k + 1`` tokens and the cycle ends. Chains are cut at ``max_chain``
    fused passes so ``p = 1`` terminates.
    """
    if N < 2 or cycles < 1:
        raise InvalidInputError("need N >= 2 and cycles >= 1")
    gen = as_generator(rng)
    P = cumulative_acceptance(N, schedule)
    sched = np.array(schedule, dtype=float) if np.ndim(schedule) else np.full(N - 1, float(schedule))
    tok = np.zeros(cycles, dtype=np.int64)
    n_fused = np.zeros(cycles, dtype=np.int64)
    if P[-1] == 1.0:
        # every coin is certain to pass: the chain always runs to the cap
        n_fused[:] = max_chain
        tok[:] = max_chain * N
    else:
        active = np.arange(cycles)
        for _ in range(max_chain):
            if active.size == 0:
                break
            coins = gen.random((active.size, N - 1)) < sched
            all_pass = coins.all(axis=1)
            first_fail = np.argmin(coins, axis=1) + 1
            n_fused[active] += 1
            tok[active] += np.where(all_pass, N, first_fail + 1)
            active = active[all_pass]
    fwd = n_fused + 1
    q_var = N + n_fused * (2 * N - 1)
    q_fix = fwd * (2 * N - 1)
    p_label = float(sched[0]) if np.all(sched == sched[0]) else float("nan")
    return _accumulate(SimResult("isd", N, p_label), tok, fwd, q_var, q_fix)


def sdar_block_steps(N: int, p: float, blocks: int, gen: np.random.Generator) -> np.ndarray:
    """Denoising steps per block under the Binomial-with-floor schedule."""
    remaining = np.full(blocks, N, dtype=np.int64)
    steps = np.zeros(blocks, dtype=np.int64)
    live = np.flatnonzero(remaining > 0)
    while live.size:
        h = gen.binomial(remaining[live], p)
        remaining[live] -= np.maximum(h, 1)
        steps[live] += 1
        live = live[remaining[live] > 0]
    return steps


def simulate_sdar(N: int, p: float, blocks: int, rng: RngStream | np.random.Generator | int) -> SimResult:
    """Block diffusion: denoise until all ``N`` tokens resolve, then one KV-commit pass."""
    if N < 1 or blocks < 1:
        raise InvalidInputError("need N >= 1 and blocks >= 1")
    gen = as_generator(rng)
    fwd = sdar_block_steps(N, p, blocks, gen) + 1
    tok = np.full(blocks, N, dtype=np.int64)
    q = fwd * N
    return _accumulate(SimResult("sdar", N, float(p)), tok, fwd, q, q)


def simulate_tidar(N: int, p: float, cycles: int, rng: RngStream | np.random.Generator | int) -> SimResult:
    """Branched self-speculation: one forward of ``N(N+1)`` queries per cycle."""
    if N < 1 or cycles < 1:
        raise InvalidInputError("need N >= 1 and cycles >= 1")
    gen = as_generator(rng)
    if N > 1:
        coins = gen.random((cycles, N - 1)) < p
        run = np.where(coins.all(axis=1), N - 1, np.argmin(coins, axis=1))
    else:
        run = np.zeros(cycles, dtype=np.int64)
    tok = 1 + run
    fwd = np.ones(cycles, dtype=np.int64)
    q = fwd * N * (N + 1)
    return _accumulate(SimResult("tidar", N, float(p)), tok, fwd, q, q)


def simulate(method: str, N: int, p: float, cycles: int, rng) -> SimResult:
    if method == "isd":
        return simulate_isd(N, p, cycles, rng)
    if method == "sdar":
        return simulate_sdar(N, p, cycles, rng)
    if method == "tidar":
        return simulate_tidar(N, p, cycles, rng)
    raise InvalidInputError(f"unknown method {method!r}; expected isd, sdar or tidar")


# ---------------------------------------------------------------------------
# Per-request steppers for the serving simulator
# ---------------------------------------------------------------------------


class ArStepper:
    """One token per forward, one query."""

    def __init__(self, gen: np.random.Generator | None = None):
        self.gen = gen

    def step(self) -> tuple[int, int]:
        return 1, 1


class IsdStepper:
    """Strided decoding, tokens attributed to the pass that makes them final.

    The free token is exact the moment a propose-only pass produces it,
    so every pass yields at least one token: propose-only gives 1, a
    fused pass gives ``N`` on all-accept or ``k`` on rejection at ``k``.
    Per cycle the total matches :func:`simulate_isd`.
    """

    def __init__(self, N: int, p: float, gen: np.random.Generator):
        self.N, self.p, self.gen = N, p, gen
        self.fused = False

    def step(self) -> tuple[int, int]:
        N = self.N
        if not self.fused:
            self.fused = True
            return 1, N
        coins = self.gen.random(N - 1) < self.p
        if coins.all():
            return N, 2 * N - 1
        self.fused = False
        return int(np.argmin(coins)) + 1, 2 * N - 1


class SdarStepper:
    """Denoising passes yield nothing; the KV-commit pass releases the block."""

    def __init__(self, N: int, p: float, gen: np.random.Generator):
        self.N, self.p, self.gen = N, p, gen
        self.remaining = N

    def step(self) -> tuple[int, int]:
        N = self.N
        if self.remaining == 0:
            self.remaining = N
            return N, N
        h = int(self.gen.binomial(self.remaining, self.p))
        self.remaining -= max(h, 1)
        return 0, N
