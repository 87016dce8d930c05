"""Jitted string-alignment kernels.

Both kernels take caller-provided DP row workspaces so that bulk evaluations
(millions of pairs in the verification suite) do not pay one allocation per
call. Wrappers in `metrics` allocate rows for one-off use.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def nw_match_kernel(a, b, prev, cur):
    """Needleman-Wunsch global alignment score with match=1, mismatch=0,
    gap=0 (equivalently the length of the longest common subsequence)."""
    la, lb = a.shape[0], b.shape[0]
    for j in range(lb + 1):
        prev[j] = 0
    for i in range(1, la + 1):
        cur[0] = 0
        ai = a[i - 1]
        for j in range(1, lb + 1):
            best = prev[j - 1] + (1 if ai == b[j - 1] else 0)
            if prev[j] > best:
                best = prev[j]
            if cur[j - 1] > best:
                best = cur[j - 1]
            cur[j] = best
        for j in range(lb + 1):
            prev[j] = cur[j]
    return prev[lb]


@njit(cache=True)
def levenshtein_kernel(a, b, prev, cur):
    """Minimal insert/delete/substitute count between two id sequences."""
    la, lb = a.shape[0], b.shape[0]
    for j in range(lb + 1):
        prev[j] = j
    for i in range(1, la + 1):
        cur[0] = i
        ai = a[i - 1]
        for j in range(1, lb + 1):
            best = prev[j - 1] + (0 if ai == b[j - 1] else 1)
            if prev[j] + 1 < best:
                best = prev[j] + 1
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            cur[j] = best
        for j in range(lb + 1):
            prev[j] = cur[j]
    return prev[lb]


def new_workspace(max_len: int):
    return (
        np.zeros(max_len + 1, dtype=np.int64),
        np.zeros(max_len + 1, dtype=np.int64),
    )
