"""Training-time attention masks and loss bookkeeping.

The training input is the concatenation ``[noisy | clean]`` of an
all-mask copy and the clean sequence, so masks are ``2L x 2L`` with
rows as queries and columns as keys. Two variants are built:

``idlm``
    causal within each noisy block, noisy -> clean attention to strictly
    earlier blocks, token-level causal over the clean half.
``sdar``
    bidirectional within each noisy block, the same cross attention,
    block-causal over the clean half.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from isdkit.errors import InvalidInputError

VARIANTS = ("idlm", "sdar")


@dataclass(frozen=True)
class MaskSpec:
    length: int
    block: int
    variant: str = "idlm"
    allow_ragged: bool = False

    def __post_init__(self) -> None:
        if self.length < 1 or self.block < 1:
            raise InvalidInputError("length and block size must be >= 1")
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"variant must be one of {VARIANTS}")
        if self.length % self.block and not self.allow_ragged:
            raise InvalidInputError(
                f"length {self.length} is not a multiple of block size {self.block}; pass allow_ragged to accept a short final block"
            )


def build_mask(spec: MaskSpec) -> np.ndarray:
    """Boolean ``(2L, 2L)`` mask; True means the query may attend to the key."""
    L = spec.length
    pos = np.arange(L)
    blk = pos // spec.block
    q_pos, k_pos = pos[:, None], pos[None, :]
    q_blk, k_blk = blk[:, None], blk[None, :]
    same_block = q_blk == k_blk

    if spec.variant == "idlm":
        noisy = same_block & (k_pos <= q_pos)
        clean = k_pos <= q_pos
    else:
        noisy = same_block
        clean = k_blk <= q_blk
    cross = k_blk < q_blk

    mask = np.zeros((2 * L, 2 * L), dtype=bool)
    mask[:L, :L] = noisy
    mask[:L, L:] = cross
    mask[L:, L:] = clean
    return mask


def mask_to_text(mask: np.ndarray) -> str:
    rows, cols = mask.shape
    lines = [f"{rows} {cols}"]
    lines += ["".join("1" if v else "0" for v in row) for row in mask]
    return "\n".join(lines) + "\n"


def mask_from_text(text: str) -> np.ndarray:
    lines = text.strip("\n").split("\n")
    try:
        rows, cols = (int(x) for x in lines[0].split())
    except ValueError:
        raise InvalidInputError("bitmap header must be 'rows cols'") from None
    body = lines[1:]
    if len(body) != rows or any(len(line) != cols or set(line) - {"0", "1"} for line in body):
        raise InvalidInputError("bitmap body does not match its header")
    return np.array([[c == "1" for c in line] for line in body], dtype=bool)


def write_mask(mask: np.ndarray, path: str | Path) -> None:
    Path(path).write_text(mask_to_text(mask))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass
class LossRegions:
    """Target log-probabilities (shifted next-token labels) per region."""

    mask_logprobs: Sequence[float]
    clean_logprobs: Sequence[float]
    mask_padding: Sequence[bool] | None = None
    clean_padding: Sequence[bool] | None = None


def _region_mean_nll(logprobs: Sequence[float], padding: Sequence[bool] | None, name: str) -> float:
    lp = np.asarray(logprobs, dtype=np.float64)
    keep = np.ones(lp.shape, dtype=bool) if padding is None else ~np.asarray(padding, dtype=bool)
    if keep.shape != lp.shape:
        raise InvalidInputError(f"{name} padding length does not match its log-probabilities")
    if not keep.any():
        raise InvalidInputError(f"{name} region has no non-padding positions")
    return float(-lp[keep].mean())


def loss_split(regions: LossRegions) -> tuple[float, float]:
    """Mean negative log-likelihood over the masked and clean regions."""
    l_mask = _region_mean_nll(regions.mask_logprobs, regions.mask_padding, "masked")
    l_clean = _region_mean_nll(regions.clean_logprobs, regions.clean_padding, "clean")
    return l_mask, l_clean


def auto_balanced_loss(l_mask: float, l_clean: float) -> tuple[float, float | None]:
    """Rescale the clean loss to the masked loss magnitude.

    The scale is treated as a constant, so the total is ``2 * l_mask``.
    When ``l_clean <= 0`` the scale is undefined: returns ``(l_mask, None)``.
    """
    if l_clean <= 0.0:
        return float(l_mask), None
    s_hat = l_mask / l_clean
    total = l_mask + s_hat * l_clean
    assert math.isclose(total, 2.0 * l_mask, rel_tol=1e-12, abs_tol=1e-300)
    return total, s_hat


def fixed_scale_loss(l_mask: float, l_clean: float, scale: float) -> float:
    if scale < 0:
        raise InvalidInputError("scale must be >= 0")
    return l_mask + scale * l_clean
