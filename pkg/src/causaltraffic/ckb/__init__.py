"""Causal knowledge base: matched-pair effects per event type and time period."""

from .build import CONFOUNDERS, BuildReport, CkbConfig, build_ckb, data_hash
from .matching import AteEstimate, NoMatchesError, estimate_ate, match_pairs
from .propensity import LogitModel, SeparationError, fit_propensity, propensity_score
from .store import (
    AteEntry,
    CausalKnowledgeBase,
    CkbFormatError,
    query,
    render_table,
    stars,
    table_row,
)

__all__ = [
    "CONFOUNDERS", "AteEntry", "AteEstimate", "BuildReport", "CausalKnowledgeBase", "CkbConfig",
    "CkbFormatError", "LogitModel", "NoMatchesError", "SeparationError", "build_ckb", "data_hash",
    "estimate_ate", "fit_propensity", "match_pairs", "propensity_score", "query", "render_table",
    "stars", "table_row",
]
