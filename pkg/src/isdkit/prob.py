"""Probability primitives for speculative accept/resample decoding.

Everything here works in linear probability space. The scalar API
(``residual_distribution``, ``accept_or_resample``, ...) operates on
:class:`Distribution` values; the decoder uses the ``*_batch`` helpers,
which apply the same math row-wise to ``(B, V)`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from isdkit.errors import InvalidInputError

NORM_ATOL = 1e-9
RESIDUAL_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class Distribution:
    """A normalized probability vector over ``V >= 2`` token ids."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.probs, dtype=np.float64)
        if arr.ndim != 1 or arr.shape[0] < 2:
            raise InvalidInputError(f"distribution must be a vector of length >= 2, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0.0):
            raise InvalidInputError("distribution entries must be finite and non-negative")
        total = arr.sum()
        if abs(total - 1.0) > NORM_ATOL:
            raise InvalidInputError(f"distribution sums to {total!r}, expected 1")
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)

    @classmethod
    def uniform(cls, vocab_size: int) -> "Distribution":
        return cls(np.full(vocab_size, 1.0 / vocab_size))

    @classmethod
    def point_mass(cls, vocab_size: int, token: int) -> "Distribution":
        arr = np.zeros(vocab_size)
        arr[token] = 1.0
        return cls(arr)

    @property
    def vocab_size(self) -> int:
        return self.probs.shape[0]

    def __len__(self) -> int:
        return self.probs.shape[0]

    def __getitem__(self, token: int) -> float:
        return float(self.probs[token])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Distribution):
            return NotImplemented
        return np.array_equal(self.probs, other.probs)

    def __hash__(self) -> int:
        return hash(self.probs.tobytes())

    def total_variation(self, other: "Distribution") -> float:
        _check_same_vocab(self, other)
        return 0.5 * float(np.abs(self.probs - other.probs).sum())

    def argmax(self) -> int:
        return int(np.argmax(self.probs))


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream identified by ``(seed, stream)``.

    Backed by numpy's Philox4x64 counter-based generator keyed through a
    ``SeedSequence(seed, spawn_key=(stream,))``. Distinct stream ids give
    statistically independent sequences; the same pair always reproduces
    the same draws on any platform numpy supports.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, index: int) -> "RngStream":
        # Children of stream s live in a disjoint id range from plain streams.
        return RngStream(self.seed, (self.stream + 1) * 1_000_003 + index)


def as_generator(rng: "RngStream | np.random.Generator | int") -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    return RngStream(int(rng)).generator()


@dataclass(frozen=True)
class AcceptanceDecision:
    accepted: bool
    token: int
    acceptance_probability: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.acceptance_probability <= 1.0:
            raise InvalidInputError("acceptance_probability must lie in [0, 1]")


def _check_same_vocab(p: Distribution, q: Distribution) -> None:
    if p.vocab_size != q.vocab_size:
        raise InvalidInputError(f"vocabulary mismatch: {p.vocab_size} vs {q.vocab_size}")


# ---------------------------------------------------------------------------
# Row-wise kernels on (..., V) arrays
# ---------------------------------------------------------------------------


def residual_batch(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """normalize(max(0, p - q)) per row; rows with mass below the floor return p."""
    diff = np.maximum(p - q, 0.0)
    mass = diff.sum(axis=-1, keepdims=True)
    degenerate = mass < RESIDUAL_FLOOR
    safe = np.where(degenerate, 1.0, mass)
    return np.where(degenerate, p, diff / safe)


def sample_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling of one token per row given uniforms ``u`` in [0, 1)."""
    cdf = np.cumsum(probs, axis=-1)
    cdf /= cdf[..., -1:]
    idx = (cdf <= u[..., None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def acceptance_batch(p_tok: np.ndarray, q_tok: np.ndarray, tau: float) -> np.ndarray:
    """min(1, (1 + tau) * p(x) / q(x)) elementwise; q(x) must be positive."""
    return np.minimum(1.0, (1.0 + tau) * p_tok / q_tok)


def accept_or_resample_batch(
    p: np.ndarray,
    q: np.ndarray,
    tokens: np.ndarray,
    tau: float,
    u_accept: np.ndarray,
    u_resample: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized accept/resample: returns (accepted, tokens_out, acceptance_prob)."""
    rows = np.arange(tokens.shape[0])
    q_tok = q[rows, tokens]
    if np.any(q_tok <= 0.0):
        raise InvalidInputError("proposed token has zero probability under q")
    prob = acceptance_batch(p[rows, tokens], q_tok, tau)
    accepted = u_accept < prob
    out = tokens.copy()
    rej = ~accepted
    if np.any(rej):
        out[rej] = sample_rows(residual_batch(p[rej], q[rej]), u_resample[rej])
    return accepted, out, prob


# ---------------------------------------------------------------------------
# Scalar API
# ---------------------------------------------------------------------------


def residual_distribution(p: Distribution, q: Distribution) -> Distribution:
    _check_same_vocab(p, q)
    return Distribution(residual_batch(p.probs[None, :], q.probs[None, :])[0])


def accept_or_resample(
    p: Distribution,
    q: Distribution,
    token: int,
    tau: float,
    rng: "RngStream | np.random.Generator | int",
) -> AcceptanceDecision:
    """Speculative acceptance of ``token`` drawn from ``q`` against anchor ``p``.

    Accepts with probability ``min(1, (1 + tau) p(token) / q(token))``;
    on rejection the returned token is drawn from the residual
    ``normalize(max(0, p - q))``.
    """
    _check_same_vocab(p, q)
    if tau < 0:
        raise InvalidInputError("tau must be >= 0")
    if not 0 <= token < p.vocab_size:
        raise InvalidInputError(f"token {token} outside vocabulary of size {p.vocab_size}")
    if q.probs[token] <= 0.0:
        raise InvalidInputError(f"token {token} has zero probability under q")
    gen = as_generator(rng)
    u = gen.random(2)
    accepted, out, prob = accept_or_resample_batch(
        p.probs[None, :], q.probs[None, :], np.array([token]), tau, u[:1], u[1:]
    )
    return AcceptanceDecision(bool(accepted[0]), int(out[0]), float(prob[0]))


def one_step_output_distribution(p: Distribution, q: Distribution, tau: float = 0.0) -> Distribution:
    """Exact marginal of the token emitted by draw-from-q then accept/resample."""
    _check_same_vocab(p, q)
    pv, qv = p.probs, q.probs
    accept = np.zeros_like(qv)
    live = qv > 0.0
    accept[live] = np.minimum(1.0, (1.0 + tau) * pv[live] / qv[live])
    accepted_mass = qv * accept
    rejected = 1.0 - accepted_mass.sum()
    out = accepted_mass + max(rejected, 0.0) * residual_batch(pv[None, :], qv[None, :])[0]
    return Distribution(out / out.sum())


def introspective_acceptance_rate(
    pairs: Iterable[tuple[Distribution, Distribution, int]],
) -> float:
    """Mean over positions of min(1, p_k(x_k) / q_k(x_k))."""
    terms = []
    for p, q, x in pairs:
        _check_same_vocab(p, q)
        if q.probs[x] <= 0.0:
            raise InvalidInputError(f"token {x} has zero probability under its proposal")
        terms.append(min(1.0, p.probs[x] / q.probs[x]))
    if not terms:
        raise InvalidInputError("introspective acceptance rate needs at least one position")
    return float(np.mean(terms))


def total_variation(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)).sum())
