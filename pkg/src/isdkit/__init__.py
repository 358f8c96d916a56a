"""Strided self-speculative decoding: samplers, toy models, analytics and simulators."""

from isdkit.errors import InvalidConfigError, InvalidInputError
from isdkit.prob import Distribution, RngStream, accept_or_resample, one_step_output_distribution
from isdkit.models import ProposalSource, TabularAnchorModel, GatedResidualModel
from isdkit.decoder import StrideConfig, decode, decode_ar
from isdkit.analytics import break_even_acceptance, oh_isd, tpf_isd

__version__ = "0.1.0"

__all__ = [
    "InvalidConfigError",
    "InvalidInputError",
    "Distribution",
    "RngStream",
    "accept_or_resample",
    "one_step_output_distribution",
    "ProposalSource",
    "TabularAnchorModel",
    "GatedResidualModel",
    "StrideConfig",
    "decode",
    "decode_ar",
    "break_even_acceptance",
    "oh_isd",
    "tpf_isd",
]
