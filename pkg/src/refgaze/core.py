"""Domain types for fixations, packs, scanpaths, and trials.

All types are immutable after construction and safe to share across threads.
Coordinates are top-left-origin pixels matching the bounding-box convention
(x, y = upper-left corner). Durations are stored in integer milliseconds and
converted to seconds only inside loss computation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

# Corpus filter: fixations shorter than this were removed at collection time.
MIN_FIXATION_MS = 60
# Maximum number of fixations a pack may hold (model slot count).
PACK_CAPACITY = 6
# Referring-expression word-count bounds enforced on trials.
MIN_WORDS, MAX_WORDS = 2, 10


class _Absent:
    """Sentinel for "the scanpath is already over at this index" --
    distinct from a recorded-but-empty (NULL) pack."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "ABSENT"

    def __bool__(self):
        return False


ABSENT = _Absent()


class PackKind(Enum):
    NORMAL = "N"
    NULL = "0"
    TERMINAL = "T"


@dataclass(frozen=True)
class Fixation:
    """One gaze fixation: location in pixels, duration in ms, and its
    position in the pack structure (pack index, within-pack order)."""

    x: float
    y: float
    duration: int  # milliseconds
    pack_index: int
    order: int


@dataclass(frozen=True)
class Pack:
    """Ordered fixation sub-sequence triggered by one word (index 1..L),
    by the pre-expression stage (0), or by the post-expression stage (L+1).
    NULL and TERMINAL packs hold no fixations."""

    kind: PackKind
    fixations: tuple[Fixation, ...]
    word_index: int

    @staticmethod
    def normal(word_index: int, fixations) -> "Pack":
        return Pack(PackKind.NORMAL, tuple(fixations), word_index)

    @staticmethod
    def null(word_index: int) -> "Pack":
        return Pack(PackKind.NULL, (), word_index)

    @staticmethod
    def terminal(word_index: int) -> "Pack":
        return Pack(PackKind.TERMINAL, (), word_index)

    def __len__(self):
        return len(self.fixations)


@dataclass(frozen=True)
class Scanpath:
    """Sequence of packs indexed 0..T with an explicit termination state.

    `terminated` is true when the path ended with a TERMINAL pack or ran
    through the final (post-expression) stage; callers that know L should
    verify coherence through validate_scanpath.
    """

    packs: tuple[Pack, ...]
    terminated: bool

    @property
    def last_index(self) -> int:
        return len(self.packs) - 1

    def pack_count(self) -> int:
        return len(self.packs)


@dataclass(frozen=True)
class TrialRecord:
    """One trial: feature grid standing in for the image, the tokenized
    expression with word onsets, the referral target, and human scanpaths."""

    trial_id: str
    image_size: tuple[int, int]  # (width, height) pixels
    feature_grid: np.ndarray  # (d_feat, h, w) float32
    words: tuple[str, ...]
    word_onsets_ms: tuple[int, ...]
    target_bbox: tuple[float, float, float, float]  # x, y, w, h pixels
    target_category: str
    human_scanpaths: tuple[tuple[str, Scanpath], ...] = field(default_factory=tuple)

    @property
    def n_words(self) -> int:
        return len(self.words)

    @property
    def center(self) -> tuple[float, float]:
        # initial central fixation point is trial metadata, not a fixation
        return (self.image_size[0] / 2.0, self.image_size[1] / 2.0)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    def add(self, code: str, detail: str) -> None:
        self.violations.append(f"{code}: {detail}")

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self):
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)


def validate_scanpath(s: Scanpath, t: TrialRecord) -> ValidationReport:
    """Report every invariant violation of `s` with respect to trial `t`.

    Violations are data, not failures: an empty report means valid.
    """
    report = ValidationReport()
    width, height = t.image_size
    last_stage = t.n_words + 1

    for pos, pack in enumerate(s.packs):
        if pack.word_index != pos:
            report.add("pack_order", f"pack at position {pos} has word_index {pack.word_index}")
        if pack.word_index > last_stage:
            report.add("pack_range", f"word_index {pack.word_index} exceeds L+1={last_stage}")
        if pack.kind is PackKind.NORMAL:
            if not 1 <= len(pack.fixations) <= PACK_CAPACITY:
                report.add(
                    "pack_size",
                    f"NORMAL pack {pack.word_index} has {len(pack.fixations)} fixations",
                )
        elif pack.fixations:
            report.add(
                "pack_nonempty",
                f"{pack.kind.name} pack {pack.word_index} holds {len(pack.fixations)} fixations",
            )
        if pack.kind is PackKind.TERMINAL and pos != len(s.packs) - 1:
            report.add("terminal_position", f"TERMINAL pack at position {pos} is not final")
        for i, fx in enumerate(pack.fixations):
            if not (np.isfinite(fx.x) and np.isfinite(fx.y)):
                report.add("fix_nonfinite", f"pack {pack.word_index} fixation {i}")
            elif not (0 <= fx.x < width and 0 <= fx.y < height):
                report.add(
                    "out_of_bounds",
                    f"pack {pack.word_index} fixation {i} at ({fx.x}, {fx.y})",
                )
            if fx.duration < MIN_FIXATION_MS:
                report.add(
                    "duration_floor",
                    f"pack {pack.word_index} fixation {i} lasts {fx.duration} ms",
                )
            if fx.pack_index != pack.word_index:
                report.add(
                    "pack_index_mismatch",
                    f"fixation claims pack {fx.pack_index} inside pack {pack.word_index}",
                )
            if fx.order != i:
                report.add(
                    "order_gap",
                    f"pack {pack.word_index} fixation {i} has order {fx.order}",
                )

    n_terminal = sum(1 for p in s.packs if p.kind is PackKind.TERMINAL)
    if n_terminal > 1:
        report.add("terminal_count", f"{n_terminal} TERMINAL packs")
    should_terminate = bool(s.packs) and (
        s.packs[-1].kind is PackKind.TERMINAL or s.last_index == last_stage
    )
    if s.terminated != should_terminate:
        report.add(
            "termination_flag",
            f"terminated={s.terminated} but structure implies {should_terminate}",
        )
    return report


def flatten(s: Scanpath) -> tuple[Fixation, ...]:
    """All NORMAL packs' fixations concatenated in word order."""
    out = []
    for pack in s.packs:
        out.extend(pack.fixations)
    return tuple(out)


def pack_at(s: Scanpath, j: int):
    """The pack with word_index j, or ABSENT when the scanpath was already
    over at stage j. A NULL pack at j is returned as itself, not ABSENT --
    the pack-level metrics treat the two cases differently."""
    if j < 0:
        raise ValueError(f"pack index must be non-negative, got {j}")
    if j >= len(s.packs):
        return ABSENT
    return s.packs[j]


def validate_record(t: TrialRecord) -> ValidationReport:
    """Trial-level invariants (bbox inside bounds, onsets increasing,
    word-count range); scanpath checks live in validate_scanpath."""
    report = ValidationReport()
    width, height = t.image_size
    x, y, w, h = t.target_bbox
    if w <= 0 or h <= 0:
        report.add("bbox_degenerate", f"target_bbox {t.target_bbox}")
    if not (0 <= x and 0 <= y and x + w <= width and y + h <= height):
        report.add("bbox_bounds", f"target_bbox {t.target_bbox} outside {t.image_size}")
    if not MIN_WORDS <= t.n_words <= MAX_WORDS:
        report.add("word_count", f"{t.n_words} words")
    if len(t.word_onsets_ms) != t.n_words:
        report.add("onset_count", f"{len(t.word_onsets_ms)} onsets for {t.n_words} words")
    elif any(b <= a for a, b in zip(t.word_onsets_ms, t.word_onsets_ms[1:])):
        report.add("onset_order", f"onsets not strictly increasing: {t.word_onsets_ms}")
    return report
