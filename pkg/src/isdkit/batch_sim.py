"""Step-level serving simulation under concurrency.

Two admission/advancement policies are modelled:

``continuous``
    every request in the batch advances by whatever its commit process
    yields this step; finished requests leave and queued ones take their
    slot before the next step.
``block-sync``
    the batch is frozen for a round. Each step runs only the requests
    whose current block is unresolved (the rest sit idle in the batch),
    and the round ends when every member has resolved its block. Slots
    are refilled only at round boundaries.

Per-request commit processes reuse the steppers in
:mod:`isdkit.process_sim`. Latencies come from :class:`CostModel`, an
affine-with-knee function of the query tokens in a step; its defaults
are illustrative and say nothing about real hardware.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from isdkit.errors import InvalidConfigError, InvalidInputError
from isdkit.prob import RngStream
from isdkit.process_sim import ArStepper, IsdStepper, SdarStepper

POLICIES = ("continuous", "block-sync")
PROCESSES = ("ar", "isd", "sdar")
REPORT_HEADER = ["policy", "batch", "stationary", "aggregate_tps", "mean_request_tps", "mean_tpf", "makespan_ms"]


@dataclass(frozen=True)
class CostModel:
    """Forward latency ``base + per_query * max(0, Q - knee) + overhead`` in ms.

    ``Q`` is the total number of query tokens in the step. Below the knee
    the step is memory bound and its cost is flat.
    """

    base_ms: float = 20.0
    per_query_ms: float = 0.25
    knee_queries: int = 64
    overhead_ms: float = 4.0
    stationary_overhead_ms: float = 1.0

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise InvalidConfigError(f"cost.{f.name} must be >= 0")

    def forward_ms(self, queries: int) -> float:
        return self.base_ms + self.per_query_ms * max(0, queries - self.knee_queries)

    def step_ms(self, queries: int, stationary: bool) -> float:
        return self.forward_ms(queries) + (self.stationary_overhead_ms if stationary else self.overhead_ms)


@dataclass(frozen=True)
class Workload:
    """Requests to serve.

    ``output_len`` is an int, an explicit per-request list, or
    ``{"uniform": [lo, hi]}`` (inclusive, drawn per request).
    ``arrival`` is ``"burst"`` or ``{"poisson": rate_per_second}``.
    """

    n_requests: int
    output_len: Any = 64
    arrival: Any = "burst"
    process: str = "isd"
    N: int = 4
    p: float = 0.7
    max_batch: int = 8

    def __post_init__(self) -> None:
        if self.n_requests < 1:
            raise InvalidConfigError("workload.n_requests must be >= 1")
        if self.process not in PROCESSES:
            raise InvalidConfigError(f"workload.process must be one of {PROCESSES}")
        if self.max_batch < 1:
            raise InvalidConfigError("workload.max_batch must be >= 1")
        if self.process != "ar" and self.N < 2:
            raise InvalidConfigError("workload.N must be >= 2")
        if not 0.0 <= self.p <= 1.0:
            raise InvalidConfigError("workload.p must lie in [0, 1]")
        ol = self.output_len
        if isinstance(ol, dict):
            lo_hi = ol.get("uniform")
            if set(ol) != {"uniform"} or not isinstance(lo_hi, (list, tuple)) or len(lo_hi) != 2:
                raise InvalidConfigError("workload.output_len dict must be {'uniform': [lo, hi]}")
            if not 1 <= lo_hi[0] <= lo_hi[1]:
                raise InvalidConfigError("workload.output_len uniform bounds need 1 <= lo <= hi")
        elif isinstance(ol, (list, tuple)):
            if len(ol) != self.n_requests or min(ol) < 1:
                raise InvalidConfigError("workload.output_len list needs n_requests entries, all >= 1")
        elif not isinstance(ol, int) or ol < 1:
            raise InvalidConfigError("workload.output_len must be >= 1")
        arr = self.arrival
        if arr != "burst":
            if not (isinstance(arr, dict) and set(arr) == {"poisson"} and arr["poisson"] > 0):
                raise InvalidConfigError("workload.arrival must be 'burst' or {'poisson': rate > 0}")

    def lengths(self, gen: np.random.Generator) -> np.ndarray:
        ol = self.output_len
        if isinstance(ol, dict):
            lo, hi = ol["uniform"]
            return gen.integers(lo, hi + 1, size=self.n_requests)
        if isinstance(ol, (list, tuple)):
            return np.asarray(ol, dtype=np.int64)
        return np.full(self.n_requests, ol, dtype=np.int64)

    def arrivals_ms(self, gen: np.random.Generator) -> np.ndarray:
        if self.arrival == "burst":
            return np.zeros(self.n_requests)
        rate = float(self.arrival["poisson"])
        return np.cumsum(gen.exponential(1000.0 / rate, size=self.n_requests))

    def stepper(self, gen: np.random.Generator):
        if self.process == "ar":
            return ArStepper(gen)
        if self.process == "isd":
            return IsdStepper(self.N, self.p, gen)
        return SdarStepper(self.N, self.p, gen)


@dataclass
class ServingReport:
    policy: str
    batch: int
    stationary: bool
    request_tps: np.ndarray
    total_tokens: int
    makespan_ms: float
    steps: int
    request_forwards: int
    timeline: list[tuple[float, int]] = field(default_factory=list)

    @property
    def aggregate_tps(self) -> float:
        return 1000.0 * self.total_tokens / self.makespan_ms

    @property
    def mean_request_tps(self) -> float:
        return float(self.request_tps.mean())

    @property
    def mean_tpf(self) -> float:
        """Tokens per forward seen by one request (idle slots excluded)."""
        return self.total_tokens / self.request_forwards

    def row(self) -> dict:
        return dict(policy=self.policy, batch=self.batch, stationary=str(self.stationary).lower(),
                    aggregate_tps=self.aggregate_tps, mean_request_tps=self.mean_request_tps,
                    mean_tpf=self.mean_tpf, makespan_ms=self.makespan_ms)


@dataclass
class _Request:
    idx: int
    target: int
    arrival: float
    stepper: Any
    committed: int = 0
    admitted: float = 0.0
    finished: float = 0.0
    block_done: bool = False


def run_serving_sim(
    workload: Workload,
    policy: str = "continuous",
    cost: CostModel | None = None,
    stationary: bool = False,
    rng: RngStream | int = 0,
    keep_timeline: bool = True,
) -> ServingReport:
    """Simulate serving ``workload`` until every request has finished.

    Request ``i`` draws its commit coins from its own child stream, so the
    same seed gives each request the same process realisation under
    either policy.
    """
    if policy not in POLICIES:
        raise InvalidInputError(f"policy must be one of {POLICIES}")
    cost = cost or CostModel()
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    setup = stream.generator()
    targets = workload.lengths(setup)
    arrivals = workload.arrivals_ms(setup)
    pending = [
        _Request(i, int(targets[i]), float(arrivals[i]), workload.stepper(stream.child(i).generator()))
        for i in range(workload.n_requests)
    ]
    pending.reverse()  # pop() from the end in arrival order
    batch: list[_Request] = []
    done: list[_Request] = []
    clock = 0.0
    steps = 0
    request_forwards = 0
    timeline: list[tuple[float, int]] = []

    def admit() -> None:
        while pending and len(batch) < workload.max_batch and pending[-1].arrival <= clock:
            req = pending.pop()
            req.admitted = clock
            req.block_done = False
            batch.append(req)

    while pending or batch:
        if not batch:
            clock = max(clock, pending[-1].arrival)
        if policy == "continuous" or all(r.block_done for r in batch):
            for r in batch:
                r.block_done = False
            admit()
        running = [r for r in batch if not r.block_done]
        queries = 0
        results = []
        for r in running:
            tokens, q = r.stepper.step()
            queries += q
            results.append((r, tokens))
        clock += cost.step_ms(queries, stationary)
        steps += 1
        request_forwards += len(running)
        if keep_timeline:
            timeline.append((clock, len(batch)))
        for r, tokens in results:
            r.committed = min(r.target, r.committed + tokens)
            if _block_boundary(workload, r, tokens):
                r.block_done = True
            if r.committed >= r.target:
                r.finished = clock
                r.block_done = True
        # block-sync keeps finished requests parked in their slot until the round ends
        if policy == "continuous" or all(r.block_done for r in batch):
            done.extend(r for r in batch if r.committed >= r.target)
            batch = [r for r in batch if r.committed < r.target]

    done.sort(key=lambda r: r.idx)
    total = sum(r.committed for r in done)
    if total != int(targets.sum()):
        raise AssertionError("token conservation violated")
    request_tps = np.array([1000.0 * r.target / (r.finished - r.admitted) for r in done])
    makespan = max(r.finished for r in done)
    return ServingReport(policy, workload.max_batch, stationary, request_tps, total, makespan, steps,
                         request_forwards, timeline)


def _block_boundary(workload: Workload, req: _Request, tokens: int) -> bool:
    # SDAR resolves a block on its KV-commit pass; AR and ISD passes are
    # each their own block.
    if workload.process == "sdar":
        return tokens > 0
    return True


# ---------------------------------------------------------------------------
# Sweeps and exports
# ---------------------------------------------------------------------------


def least_squares_slope(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2 or np.ptp(x) == 0:
        return float("nan")
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class BatchSweep:
    points: list[tuple[int, float]]
    tpf: list[float]
    slope_vs_tpf: float
    slope_vs_batch: float


def throughput_vs_batch(
    template: Workload,
    batch_sizes: Sequence[int],
    policy: str = "continuous",
    cost: CostModel | None = None,
    stationary: bool = False,
    seed: int = 0,
) -> BatchSweep:
    """Aggregate throughput per batch size, each run on stream ``(seed, i)``.

    The TPF axis is the nominal batch TPF: batch size times the tokens a
    request gains per forward it actually runs. Time a request spends
    parked waiting for a synchronised round is invisible on this axis, so
    it shows up as a lower throughput slope.
    """
    sizes = list(batch_sizes)
    if sizes != sorted(sizes) or not sizes or sizes[0] < 1:
        raise InvalidInputError("batch sizes must be positive and sorted ascending")
    points, tpf = [], []
    for i, b in enumerate(sizes):
        wl = Workload(**{**asdict(template), "max_batch": b})
        rep = run_serving_sim(wl, policy, cost, stationary, RngStream(seed, i), keep_timeline=False)
        points.append((b, rep.aggregate_tps))
        tpf.append(b * rep.mean_tpf)
    tps = [v for _, v in points]
    return BatchSweep(points, tpf, least_squares_slope(tpf, tps), least_squares_slope(sizes, tps))


def write_report_csv(reports: Iterable[ServingReport], out: io.TextIOBase | None = None) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_HEADER, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        writer.writerow(rep.row())
    text = buf.getvalue()
    if out is not None:
        out.write(text)
    return text


# ---------------------------------------------------------------------------
# Config documents
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    policy: str
    stationary: bool
    workload: Workload


@dataclass
class ServeConfig:
    seed: int
    cost: CostModel
    scenarios: list[Scenario]

    def run(self, seed: int | None = None) -> list[ServingReport]:
        # Every scenario shares the seed, so request lengths and per-request
        # coin streams coincide wherever the workloads allow it.
        s = self.seed if seed is None else seed
        return [run_serving_sim(sc.workload, sc.policy, self.cost, sc.stationary, RngStream(s), keep_timeline=False)
                for sc in self.scenarios]


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise InvalidConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise InvalidConfigError(f"{where} has unknown field(s): {', '.join(sorted(unknown))}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise InvalidConfigError(f"{where}: {exc}") from None


def config_from_dict(doc: dict) -> ServeConfig:
    if not isinstance(doc, dict):
        raise InvalidConfigError("config must be a JSON object")
    unknown = set(doc) - {"seed", "cost", "scenarios"}
    if unknown:
        raise InvalidConfigError(f"config has unknown field(s): {', '.join(sorted(unknown))}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise InvalidConfigError("seed must be a non-negative integer")
    cost = _build(CostModel, doc.get("cost", {}), "cost")
    raw = doc.get("scenarios")
    if not isinstance(raw, list) or not raw:
        raise InvalidConfigError("scenarios must be a non-empty list")
    scenarios = []
    for i, sc in enumerate(raw):
        where = f"scenarios[{i}]"
        if not isinstance(sc, dict) or set(sc) - {"policy", "stationary", "workload"}:
            raise InvalidConfigError(f"{where} must hold only policy, stationary and workload")
        policy = sc.get("policy", "continuous")
        if policy not in POLICIES:
            raise InvalidConfigError(f"{where}.policy must be one of {POLICIES}")
        stationary = sc.get("stationary", False)
        if not isinstance(stationary, bool):
            raise InvalidConfigError(f"{where}.stationary must be true or false")
        scenarios.append(Scenario(policy, stationary, _build(Workload, sc.get("workload"), f"{where}.workload")))
    return ServeConfig(seed, cost, scenarios)


def load_config(path: str | Path | None = None) -> ServeConfig:
    """Read a serving config; ``None`` loads the bundled default."""
    if path is None:
        text = resources.files("isdkit").joinpath("data/serve_default.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"config is not valid JSON: {exc}") from None
    return config_from_dict(doc)
