"""Desk-scale tabular language models.

A :class:`TabularAnchorModel` is an order-``k`` Markov table that plays
the role of the causal AR model: it supplies the anchor distribution
``p`` at clean positions. A :class:`ProposalSource` supplies what mask
slots would emit (``q``), and :class:`GatedResidualModel` adds a logit
offset that is only active at mask positions.

Contexts shorter than ``k`` are left-padded with a reserved ``bos`` id
equal to ``vocab_size``. Internally every context is encoded as an
integer code in base ``V + 1`` so batches of contexts can be looked up
with a single gather.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from isdkit.errors import InvalidInputError
from isdkit.prob import NORM_ATOL, Distribution, RngStream, as_generator

BOS_LABEL = "bos"


class TabularAnchorModel:
    """Order-k conditional table ``p(x_{t+1} | x_{t-k+1..t})``."""

    def __init__(self, vocab_size: int, order: int, table: np.ndarray, *, sparse: bool = False):
        if vocab_size < 2:
            raise InvalidInputError("vocab_size must be >= 2")
        if order < 0:
            raise InvalidInputError("order must be >= 0")
        table = np.array(table, dtype=np.float64)
        n_codes = (vocab_size + 1) ** order
        if table.shape != (n_codes, vocab_size):
            raise InvalidInputError(f"table must have shape {(n_codes, vocab_size)}, got {table.shape}")
        if np.any(table < 0) or np.any(np.abs(table.sum(axis=1) - 1.0) > NORM_ATOL):
            raise InvalidInputError("every table row must be a valid distribution")
        table.setflags(write=False)
        self.vocab_size = vocab_size
        self.order = order
        self.table = table
        self.sparse = sparse

    # -- context encoding -------------------------------------------------

    @property
    def bos(self) -> int:
        return self.vocab_size

    @property
    def n_codes(self) -> int:
        return (self.vocab_size + 1) ** self.order

    def encode(self, context: Sequence[int]) -> int:
        """Code of the last ``order`` tokens of ``context`` (bos-padded)."""
        V = self.vocab_size
        for t in context:
            if not 0 <= int(t) < V:
                raise InvalidInputError(f"token {t} outside vocabulary of size {V}")
        k = self.order
        if k == 0:
            return 0
        tail = [int(t) for t in list(context)[-k:]]
        return self.code_of(tuple([self.bos] * (k - len(tail)) + tail))

    def push(self, codes: np.ndarray | int, tokens: np.ndarray | int) -> np.ndarray | int:
        """Code after appending ``tokens`` to the contexts in ``codes``."""
        return (codes * (self.vocab_size + 1) + tokens) % self.n_codes

    def contexts(self) -> list[tuple[int, ...]]:
        return reachable_contexts(self.vocab_size, self.order)

    def code_of(self, context: tuple[int, ...]) -> int:
        return code_of(context, self.vocab_size)

    def rows_for(self, codes: np.ndarray) -> np.ndarray:
        return self.table[codes]

    # -- public lookup ----------------------------------------------------

    def distribution(self, context: Sequence[int]) -> Distribution:
        return Distribution(self.table[self.encode(context)])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TabularAnchorModel):
            return NotImplemented
        return (
            self.vocab_size == other.vocab_size
            and self.order == other.order
            and np.array_equal(self.table, other.table)
        )

    def __hash__(self) -> int:
        return hash((self.vocab_size, self.order, self.table.tobytes()))

    # -- constructors -----------------------------------------------------

    @classmethod
    def from_rows(
        cls,
        vocab_size: int,
        order: int,
        rows: dict[tuple[int, ...], Sequence[float]],
        *,
        sparse: bool = False,
    ) -> "TabularAnchorModel":
        """Build from ``{context tuple: probabilities}``; bos is ``vocab_size``.

        Dense models must list every reachable context. Sparse models fall
        back to the uniform distribution for missing contexts.
        """
        n_codes = (vocab_size + 1) ** order
        table = np.full((n_codes, vocab_size), 1.0 / vocab_size)
        seen = set()
        for ctx, probs in rows.items():
            ctx = tuple(int(t) for t in ctx)
            if len(ctx) != order or any(not 0 <= t <= vocab_size for t in ctx):
                raise InvalidInputError(f"invalid context {ctx} for order {order}")
            table[code_of(ctx, vocab_size)] = Distribution(np.asarray(probs, dtype=float)).probs
            seen.add(ctx)
        if not sparse:
            missing = [c for c in reachable_contexts(vocab_size, order) if c not in seen]
            if missing:
                raise InvalidInputError(f"dense model is missing context {context_label(missing[0], vocab_size)!r}")
        return cls(vocab_size, order, table, sparse=sparse)


def reachable_contexts(vocab_size: int, order: int) -> list[tuple[int, ...]]:
    """Contexts made of j bos pads followed by order - j real tokens."""
    out = []
    for j in range(order, -1, -1):
        for real in itertools.product(range(vocab_size), repeat=order - j):
            out.append((vocab_size,) * j + real)
    return out


def code_of(context: tuple[int, ...], vocab_size: int) -> int:
    code = 0
    for t in context:
        code = code * (vocab_size + 1) + t
    return code


def context_label(context: tuple[int, ...], vocab_size: int) -> str:
    return ",".join(BOS_LABEL if t == vocab_size else str(t) for t in context)


def parse_context_label(label: str, vocab_size: int) -> tuple[int, ...]:
    if label == "":
        return ()
    out = []
    for part in label.split(","):
        part = part.strip()
        if part == BOS_LABEL:
            out.append(vocab_size)
        else:
            try:
                out.append(int(part))
            except ValueError:
                raise InvalidInputError(f"rows: bad context key {label!r}") from None
    return tuple(out)


def anchor_distribution(model: TabularAnchorModel, context: Sequence[int]) -> Distribution:
    return model.distribution(context)


def random_model(
    vocab_size: int,
    order: int,
    concentration: float,
    rng: RngStream | np.random.Generator | int,
) -> TabularAnchorModel:
    """Dense model whose reachable rows are symmetric-Dirichlet draws."""
    if vocab_size < 2 or order < 0:
        raise InvalidInputError("need vocab_size >= 2 and order >= 0")
    if concentration <= 0:
        raise InvalidInputError("concentration must be positive")
    gen = as_generator(rng)
    contexts = reachable_contexts(vocab_size, order)
    draws = gen.dirichlet(np.full(vocab_size, float(concentration)), size=len(contexts))
    draws /= draws.sum(axis=1, keepdims=True)
    return TabularAnchorModel.from_rows(vocab_size, order, dict(zip(contexts, draws)))


# ---------------------------------------------------------------------------
# Gated residual
# ---------------------------------------------------------------------------


class GatedResidualModel:
    """Base model plus a per-context logit offset applied only when gated on.

    With the gate off the base row is returned untouched, so introspection
    sees exactly the base model.
    """

    def __init__(self, base: TabularAnchorModel, residual: np.ndarray):
        residual = np.array(residual, dtype=np.float64)
        if residual.shape != base.table.shape:
            raise InvalidInputError(f"residual must have shape {base.table.shape}, got {residual.shape}")
        if not np.all(np.isfinite(residual)):
            raise InvalidInputError("residual offsets must be finite")
        residual.setflags(write=False)
        self.base = base
        self.residual = residual
        with np.errstate(divide="ignore"):
            logits = np.log(base.table) + residual
        logits -= logits.max(axis=1, keepdims=True)
        gated = np.exp(logits)
        gated /= gated.sum(axis=1, keepdims=True)
        gated.setflags(write=False)
        self.gated_table = gated

    @classmethod
    def zeros(cls, base: TabularAnchorModel) -> "GatedResidualModel":
        return cls(base, np.zeros_like(base.table))

    def rows_for(self, codes: np.ndarray, gate: bool) -> np.ndarray:
        return self.gated_table[codes] if gate else self.base.table[codes]

    def distribution(self, context: Sequence[int], gate: bool) -> Distribution:
        code = self.base.encode(context)
        if not gate:
            return Distribution(self.base.table[code])
        return Distribution(self.gated_table[code])


# ---------------------------------------------------------------------------
# Proposal sources
# ---------------------------------------------------------------------------

PROPOSAL_MODES = ("mirror", "epsilon-mixture", "independent-table", "gated-residual")


@dataclass(eq=False)
class ProposalSource:
    """What the mask slots emit.

    Deeper mask slots condition on the argmax chain of shallower
    proposals, which is how proposal quality decays with lookahead depth.
    """

    mode: str = "mirror"
    epsilon: float = 0.0
    table: TabularAnchorModel | None = None
    gated: GatedResidualModel | None = None
    _chains: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self) -> None:
        if self.mode not in PROPOSAL_MODES:
            raise InvalidInputError(f"unknown proposal mode {self.mode!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise InvalidInputError("epsilon must lie in [0, 1]")
        if self.mode == "mirror" and self.epsilon != 0.0:
            raise InvalidInputError("mirror mode takes no epsilon")
        if self.mode == "independent-table" and self.table is None:
            raise InvalidInputError("independent-table mode needs a table")
        if self.mode == "gated-residual" and self.gated is None:
            raise InvalidInputError("gated-residual mode needs a gated model")

    @classmethod
    def mirror(cls) -> "ProposalSource":
        return cls("mirror")

    @classmethod
    def mixture(cls, epsilon: float) -> "ProposalSource":
        return cls("epsilon-mixture", epsilon=epsilon)

    @classmethod
    def independent(cls, table: TabularAnchorModel) -> "ProposalSource":
        return cls("independent-table", table=table)

    @classmethod
    def gated_residual(cls, gated: GatedResidualModel) -> "ProposalSource":
        return cls("gated-residual", gated=gated)

    def _rows(self, anchor: TabularAnchorModel, codes: np.ndarray) -> np.ndarray:
        if self.mode == "independent-table":
            return self.table.rows_for(codes)
        if self.mode == "gated-residual":
            return self.gated.rows_for(codes, gate=True)
        rows = anchor.rows_for(codes)
        if self.mode == "mirror":
            return rows
        return (1.0 - self.epsilon) * rows + self.epsilon / anchor.vocab_size

    def _check_compatible(self, anchor: TabularAnchorModel) -> None:
        other = self.table if self.mode == "independent-table" else (
            self.gated.base if self.mode == "gated-residual" else None
        )
        if other is not None and (other.vocab_size, other.order) != (anchor.vocab_size, anchor.order):
            raise InvalidInputError("proposal table must share vocab size and order with the anchor")

    def chain_table(self, anchor: TabularAnchorModel, depth: int) -> np.ndarray:
        """Array ``(n_codes, depth, V)`` of proposals for every context code."""
        key = (id(anchor), depth)
        cached = self._chains.get(key)
        if cached is not None and cached[0] is anchor:
            return cached[1]
        self._check_compatible(anchor)
        codes = np.arange(anchor.n_codes)
        out = np.empty((anchor.n_codes, depth, anchor.vocab_size))
        for d in range(depth):
            rows = self._rows(anchor, codes)
            out[:, d] = rows
            codes = anchor.push(codes, np.argmax(rows, axis=1))
        out.setflags(write=False)
        self._chains[key] = (anchor, out)
        return out


def proposal_distributions(
    source: ProposalSource,
    anchor: TabularAnchorModel,
    committed_context: Sequence[int],
    n_masks: int,
) -> list[Distribution]:
    if n_masks < 1:
        raise InvalidInputError("n_masks must be >= 1")
    chain = source.chain_table(anchor, n_masks)[anchor.encode(committed_context)]
    return [Distribution(row) for row in chain]


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------


def model_to_dict(model: TabularAnchorModel) -> dict:
    rows = {}
    for ctx in model.contexts():
        row = model.table[model.code_of(ctx)]
        if model.sparse and np.all(row == 1.0 / model.vocab_size):
            continue
        rows[context_label(ctx, model.vocab_size)] = [float(x) for x in row]
    doc = {"vocab_size": model.vocab_size, "order": model.order, "rows": rows}
    if model.sparse:
        doc["fallback"] = "uniform"
    return doc


def model_from_dict(doc: dict) -> TabularAnchorModel:
    if not isinstance(doc, dict):
        raise InvalidInputError("model document must be a JSON object")
    for key in ("vocab_size", "order", "rows"):
        if key not in doc:
            raise InvalidInputError(f"model document missing field {key!r}")
    V, k = doc["vocab_size"], doc["order"]
    if not isinstance(V, int) or isinstance(V, bool) or V < 2:
        raise InvalidInputError("field 'vocab_size' must be an integer >= 2")
    if not isinstance(k, int) or isinstance(k, bool) or k < 0:
        raise InvalidInputError("field 'order' must be a non-negative integer")
    if not isinstance(doc["rows"], dict):
        raise InvalidInputError("field 'rows' must map context strings to probability arrays")
    fallback = doc.get("fallback")
    if fallback not in (None, "uniform"):
        raise InvalidInputError("field 'fallback' must be 'uniform' when present")
    rows = {}
    for label, probs in doc["rows"].items():
        ctx = parse_context_label(label, V)
        if not isinstance(probs, list) or len(probs) != V:
            raise InvalidInputError(f"rows[{label!r}] must be a list of {V} probabilities")
        try:
            Distribution(np.asarray(probs, dtype=float))
        except (InvalidInputError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"rows[{label!r}]: {exc}") from None
        rows[ctx] = probs
    try:
        return TabularAnchorModel.from_rows(V, k, rows, sparse=fallback == "uniform")
    except InvalidInputError as exc:
        raise InvalidInputError(f"rows: {exc}") from None


def save_model(model: TabularAnchorModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n")


def load_model(path: str | Path) -> TabularAnchorModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"model file is not valid JSON: {exc}") from None
    return model_from_dict(doc)


def one_hot_model(vocab_size: int, order: int, successor: Iterable[int] | None = None) -> TabularAnchorModel:
    """Deterministic model; order-1 default maps token t to (t + 1) mod V."""
    succ = list(successor) if successor is not None else None
    rows = {}
    for i, ctx in enumerate(reachable_contexts(vocab_size, order)):
        last = ctx[-1] if ctx and ctx[-1] != vocab_size else -1
        nxt = succ[i] if succ is not None else (last + 1) % vocab_size
        row = np.zeros(vocab_size)
        row[nxt] = 1.0
        rows[ctx] = row
    return TabularAnchorModel.from_rows(vocab_size, order, rows)
