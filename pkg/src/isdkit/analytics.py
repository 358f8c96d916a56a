"""Closed-form tokens-per-forward and compute-overhead models.

Covers strided decoding under variable and fixed query accounting, block
diffusion with a KV-commit pass, and branched self-speculation. ``p`` is
either a uniform per-token acceptance probability or, for the strided
decoder, a per-position schedule ``p_1..p_{N-1}`` whose running products
are the cumulative acceptances ``P_k``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import lru_cache
from math import comb
from typing import Iterable, Sequence

import numpy as np

from isdkit.errors import InvalidInputError

METHODS = ("isd-variable", "isd-fixed", "sdar", "tidar")
SWEEP_HEADER = ["method", "N", "p", "cycles", "tpf", "tpf_se", "oh_var", "oh_fix", "efficiency"]


def _check_p(p: float) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise InvalidInputError(f"acceptance probability {p} outside [0, 1]")
    return p


def cumulative_acceptance(N: int, p: float | Sequence[float]) -> np.ndarray:
    """``[P_0, P_1, ..., P_{N-1}]`` with ``P_0 = 1``."""
    if N < 2:
        raise InvalidInputError("stride N must be >= 2")
    if np.ndim(p) == 0:
        sched = np.full(N - 1, _check_p(p))
    else:
        sched = np.array([_check_p(x) for x in p])
        if sched.shape != (N - 1,):
            raise InvalidInputError(f"schedule needs N - 1 = {N - 1} entries")
    return np.concatenate([[1.0], np.cumprod(sched)])


def _isd_terms(N: int, p) -> tuple[float, float]:
    P = cumulative_acceptance(N, p)
    # 2 + P_1 + ... + P_{N-2}; the slice is empty at N = 2.
    numer = 2.0 + float(P[1 : N - 1].sum())
    return numer, float(P[N - 1])


def tpf_isd(N: int, p: float | Sequence[float]) -> float:
    numer, last = _isd_terms(N, p)
    return numer / (2.0 - last)


def oh_isd(N: int, p: float | Sequence[float], accounting: str = "variable") -> float:
    numer, last = _isd_terms(N, p)
    if accounting == "variable":
        return (3 * N - 1 - N * last) / numer
    if accounting == "fixed":
        return (2 * N - 1) * (2.0 - last) / numer
    raise InvalidInputError("accounting must be 'variable' or 'fixed'")


def sdar_expected_steps(N: int, p: float) -> float:
    """Expected denoising steps to resolve ``N`` tokens.

    Each step draws ``H ~ Binomial(R, p)`` passing tokens out of ``R``
    remaining and commits ``max(H, 1)``.
    """
    if N < 0:
        raise InvalidInputError("N must be >= 0")
    return _sdar_steps(int(N), _check_p(p))


@lru_cache(maxsize=4096)
def _sdar_steps(R: int, p: float) -> float:
    if R == 0:
        return 0.0
    total = 1.0
    for h in range(R + 1):
        w = comb(R, h) * p**h * (1.0 - p) ** (R - h)
        if w:
            total += w * _sdar_steps(R - max(h, 1), p)
    return total


def tpf_oh_sdar(N: int, p: float) -> tuple[float, float]:
    if N < 1:
        raise InvalidInputError("block size N must be >= 1")
    forwards = sdar_expected_steps(N, p) + 1.0
    return N / forwards, forwards


def tpf_oh_tidar(N: int, p: float) -> tuple[float, float]:
    if N < 1:
        raise InvalidInputError("N must be >= 1")
    p = _check_p(p)
    # Geometric sum written out so p = 1 needs no special case.
    tpf = float(sum(p**j for j in range(N)))
    return tpf, N * (N + 1) / tpf


def tpf_oh(method: str, N: int, p: float) -> tuple[float, float]:
    if method == "isd-variable":
        return tpf_isd(N, p), oh_isd(N, p, "variable")
    if method == "isd-fixed":
        return tpf_isd(N, p), oh_isd(N, p, "fixed")
    if method == "sdar":
        return tpf_oh_sdar(N, p)
    if method == "tidar":
        return tpf_oh_tidar(N, p)
    raise InvalidInputError(f"unknown method {method!r}; expected one of {METHODS}")


def efficiency(method: str, N: int, p: float) -> float:
    tpf, oh = tpf_oh(method, N, p)
    return tpf / oh


def break_even_acceptance(method: str, N: int, tol: float = 1e-6) -> float | None:
    """Acceptance probability where TPF/OH crosses 1, or ``None`` if it never does.

    Bisection on (0, 1); a crossing requires efficiency strictly below 1
    at p = 0 and strictly above 1 at p = 1.
    """
    f = lambda x: efficiency(method, N, x) - 1.0
    lo, hi = 0.0, 1.0
    if not (f(lo) < 0.0 < f(hi)):
        return None
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class ParadigmCurve:
    method: str
    N: int
    samples: list[tuple[float, float, float, float]] = field(default_factory=list)

    def rows(self) -> list[dict]:
        out = []
        for p, tpf, oh, eff in self.samples:
            oh_var, oh_fix = oh, oh
            if self.method.startswith("isd"):
                oh_var, oh_fix = oh_isd(self.N, p, "variable"), oh_isd(self.N, p, "fixed")
            out.append(
                dict(method=self.method, N=self.N, p=p, cycles=0, tpf=tpf, tpf_se=0.0,
                     oh_var=oh_var, oh_fix=oh_fix, efficiency=eff)
            )
        return out


def curve_sweep(method: str, N: int, grid: Iterable[float]) -> ParadigmCurve:
    curve = ParadigmCurve(method, N)
    for p in grid:
        p = _check_p(p)
        tpf, oh = tpf_oh(method, N, p)
        curve.samples.append((p, tpf, oh, tpf / oh))
    return curve


def solve_for_tpf(method: str, N: int, target: float, tol: float = 1e-12) -> float:
    """Acceptance probability at which ``method`` reaches TPF ``target``."""
    lo, hi = 0.0, 1.0
    g = lambda x: tpf_oh(method, N, x)[0] - target
    if g(lo) > 0 or g(hi) < 0:
        raise InvalidInputError(f"TPF {target} is not attainable by {method} at N={N}")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if g(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def write_sweep_csv(rows: Iterable[dict], out: io.TextIOBase | None = None) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_HEADER, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    text = buf.getvalue()
    if out is not None:
        out.write(text)
    return text
