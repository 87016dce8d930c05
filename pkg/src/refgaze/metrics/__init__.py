"""Scanpath evaluation metrics.

Sequence Score and Fixation Edit Distance compare cluster-id strings of
whole scanpaths; their pack-level variants average per-word comparisons
after applying the null-pack/termination duplication rules. CC/NSS variants
compare Gaussian-convolved fixation maps at /8 image resolution.
"""
from .metrics import (
    EPS_MAP,
    METRIC_COLUMNS,
    ClusterGrid,
    build_map,
    cc_pack,
    cluster_string,
    duration_aware,
    fixation_edit_distance,
    human_consistency,
    nss_pack,
    pack_metrics,
    scanpath_string,
    sequence_score,
    whole_fed,
    whole_ss,
)

__all__ = [
    "EPS_MAP",
    "METRIC_COLUMNS",
    "ClusterGrid",
    "build_map",
    "cc_pack",
    "cluster_string",
    "duration_aware",
    "fixation_edit_distance",
    "human_consistency",
    "nss_pack",
    "pack_metrics",
    "scanpath_string",
    "sequence_score",
    "whole_fed",
    "whole_ss",
]
