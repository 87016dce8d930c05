"""Corpus serialization, split logic, and the deterministic synthetic
corpus generator.

Corpus files are UTF-8 line-delimited JSON: a header object (schema version,
vocab lists, grid shape), then one record object per line. Feature grids are
base64-encoded little-endian float32 so numeric round trips are bit-exact.
"""
from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import (
    MIN_FIXATION_MS,
    Fixation,
    Pack,
    PackKind,
    Scanpath,
    TrialRecord,
    validate_record,
    validate_scanpath,
)
from .errors import ConfigError, ParseError, SchemaError, ValidationError

SCHEMA_VERSION = 1

# sentinel word tokens occupy the first three vocabulary slots
BOT, EOT, PAD = "<bot>", "<eot>", "<pad>"
SENTINELS = (BOT, EOT, PAD)

CATEGORY_NAMES = (
    "circle", "square", "triangle", "star", "ring", "cross", "arrow", "heart",
    "diamond", "moon", "spiral", "wedge", "bolt", "leaf", "drop", "gear",
    "shell", "knot",
)
COLOR_NAMES = ("red", "green", "blue", "yellow")
SIDE_NAMES = ("left", "right")
FILLER_NAMES = ("the",)

# train/val/test defaults; the held-out pool splits val:test at roughly 1:2
DEFAULT_RATIOS = (0.86, 0.047, 0.093)


class OraclePolicy(Enum):
    WAIT_THEN_GO = "wait_then_go"
    SCAN = "scan"
    DIRECT = "direct"


@dataclass(frozen=True)
class SynthConfig:
    n_records: int = 100
    n_categories: int = 18
    n_objects_per_image: tuple[int, int] = (2, 4)
    seed: int = 0
    oracle_policy: OraclePolicy = OraclePolicy.WAIT_THEN_GO
    image_size: tuple[int, int] = (320, 200)
    grid_shape: tuple[int, int] = (10, 18)  # (h, w)
    scanpaths_per_record: tuple[int, int] = (1, 3)

    def validate(self) -> None:
        if self.n_records <= 0:
            raise ConfigError(f"n_records must be positive, got {self.n_records}")
        if not 2 <= self.n_categories <= len(CATEGORY_NAMES):
            raise ConfigError(f"n_categories must be in [2, {len(CATEGORY_NAMES)}]")
        lo, hi = self.n_objects_per_image
        if not 2 <= lo <= hi:
            raise ConfigError(f"bad n_objects_per_image range {self.n_objects_per_image}")
        lo, hi = self.scanpaths_per_record
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad scanpaths_per_record range {self.scanpaths_per_record}")


@dataclass
class Corpus:
    records: list[TrialRecord]
    category_vocab: list[str]
    word_vocab: list[str]
    grid_shape: tuple[int, int]
    feature_dim: int

    def __len__(self):
        return len(self.records)

    def word_index(self) -> dict[str, int]:
        return {w: i for i, w in enumerate(self.word_vocab)}

    def category_index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.category_vocab)}

    def mean_fixation_duration_ms(self) -> float:
        """Average duration over every human fixation in the corpus."""
        total, count = 0, 0
        for rec in self.records:
            for _, sp in rec.human_scanpaths:
                for pack in sp.packs:
                    for fx in pack.fixations:
                        total += fx.duration
                        count += 1
        return total / count if count else 250.0


def corpus_equal(a: Corpus, b: Corpus) -> bool:
    if (a.category_vocab, a.word_vocab, a.grid_shape, a.feature_dim) != (
        b.category_vocab, b.word_vocab, b.grid_shape, b.feature_dim
    ):
        return False
    if len(a.records) != len(b.records):
        return False
    for ra, rb in zip(a.records, b.records):
        if (
            ra.trial_id != rb.trial_id
            or ra.image_size != rb.image_size
            or ra.words != rb.words
            or ra.word_onsets_ms != rb.word_onsets_ms
            or ra.target_bbox != rb.target_bbox
            or ra.target_category != rb.target_category
            or ra.human_scanpaths != rb.human_scanpaths
            or ra.feature_grid.shape != rb.feature_grid.shape
            or not np.array_equal(ra.feature_grid, rb.feature_grid)
        ):
            return False
    return True


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_KIND_CODES = {PackKind.NORMAL: "N", PackKind.NULL: "0", PackKind.TERMINAL: "T"}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


def _scanpath_to_json(sp: Scanpath) -> list[dict]:
    return [
        {
            "j": p.word_index,
            "kind": _KIND_CODES[p.kind],
            "fix": [[fx.x, fx.y, fx.duration] for fx in p.fixations],
        }
        for p in sp.packs
    ]


def save_corpus(corpus: Corpus, path) -> None:
    header = {
        "schema_version": SCHEMA_VERSION,
        "category_vocab": corpus.category_vocab,
        "word_vocab": corpus.word_vocab,
        "grid_h": corpus.grid_shape[0],
        "grid_w": corpus.grid_shape[1],
        "feat_dim": corpus.feature_dim,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in corpus.records:
            obj = {
                "trial_id": rec.trial_id,
                "image_w": rec.image_size[0],
                "image_h": rec.image_size[1],
                "grid_h": rec.feature_grid.shape[1],
                "grid_w": rec.feature_grid.shape[2],
                "feat_dim": rec.feature_grid.shape[0],
                "features_b64": base64.b64encode(
                    np.ascontiguousarray(rec.feature_grid, dtype="<f4").tobytes()
                ).decode("ascii"),
                "words": list(rec.words),
                "word_onsets_ms": list(rec.word_onsets_ms),
                "target_bbox": list(rec.target_bbox),
                "target_category": rec.target_category,
                "scanpaths": [
                    {"subject": subject, "packs": _scanpath_to_json(sp)}
                    for subject, sp in rec.human_scanpaths
                ],
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


_RECORD_FIELDS = (
    "trial_id", "image_w", "image_h", "grid_h", "grid_w", "feat_dim",
    "features_b64", "words", "word_onsets_ms", "target_bbox",
    "target_category", "scanpaths",
)


def _parse_scanpath(obj, line_no) -> list[Pack]:
    packs = []
    for p in obj["packs"]:
        for key in ("j", "kind", "fix"):
            if key not in p:
                raise SchemaError(key, line_no)
        kind = _CODE_KINDS.get(p["kind"])
        if kind is None:
            raise SchemaError("kind", line_no, f"unknown pack kind {p['kind']!r}")
        fixations = tuple(
            Fixation(float(x), float(y), int(d), p["j"], i)
            for i, (x, y, d) in enumerate(p["fix"])
        )
        packs.append(Pack(kind, fixations, int(p["j"])))
    return packs


def load_corpus(path) -> Corpus:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty corpus file", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc), line=1) from exc
    for key in ("schema_version", "category_vocab", "word_vocab", "grid_h", "grid_w", "feat_dim"):
        if key not in header:
            raise SchemaError(key, 1)
    if header["schema_version"] != SCHEMA_VERSION:
        raise SchemaError("schema_version", 1, f"unsupported version {header['schema_version']}")

    grid_shape = (int(header["grid_h"]), int(header["grid_w"]))
    feat_dim = int(header["feat_dim"])
    records = []
    violations = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(str(exc), line=line_no) from exc
        for fld in _RECORD_FIELDS:
            if fld not in obj:
                raise SchemaError(fld, line_no)
        if (obj["grid_h"], obj["grid_w"]) != grid_shape or obj["feat_dim"] != feat_dim:
            raise SchemaError("grid_h", line_no, "record grid shape disagrees with header")
        try:
            raw = base64.b64decode(obj["features_b64"])
            grid = np.frombuffer(raw, dtype="<f4").reshape(
                feat_dim, grid_shape[0], grid_shape[1]
            ).copy()
        except (ValueError, TypeError) as exc:
            raise SchemaError("features_b64", line_no, str(exc)) from exc

        scanpaths = []
        n_words = len(obj["words"])
        for sp_obj in obj["scanpaths"]:
            if "subject" not in sp_obj or "packs" not in sp_obj:
                raise SchemaError("scanpaths", line_no)
            packs = _parse_scanpath(sp_obj, line_no)
            terminated = bool(packs) and (
                packs[-1].kind is PackKind.TERMINAL or len(packs) - 1 == n_words + 1
            )
            scanpaths.append((sp_obj["subject"], Scanpath(tuple(packs), terminated)))

        record = TrialRecord(
            trial_id=str(obj["trial_id"]),
            image_size=(int(obj["image_w"]), int(obj["image_h"])),
            feature_grid=grid,
            words=tuple(obj["words"]),
            word_onsets_ms=tuple(int(v) for v in obj["word_onsets_ms"]),
            target_bbox=tuple(float(v) for v in obj["target_bbox"]),
            target_category=str(obj["target_category"]),
            human_scanpaths=tuple(scanpaths),
        )
        rec_report = validate_record(record)
        violations.extend(f"{record.trial_id}: {v}" for v in rec_report)
        for subject, sp in record.human_scanpaths:
            sp_report = validate_scanpath(sp, record)
            violations.extend(f"{record.trial_id}/{subject}: {v}" for v in sp_report)
        word_set = set(header["word_vocab"])
        for w in record.words:
            if w not in word_set:
                violations.append(f"{record.trial_id}: word {w!r} not in vocabulary")
        if record.target_category not in header["category_vocab"]:
            violations.append(
                f"{record.trial_id}: category {record.target_category!r} not in vocabulary"
            )
        records.append(record)

    if violations:
        raise ValidationError(violations)
    return Corpus(
        records=records,
        category_vocab=list(header["category_vocab"]),
        word_vocab=list(header["word_vocab"]),
        grid_shape=grid_shape,
        feature_dim=feat_dim,
    )


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Obj:
    category: str
    color: str
    bbox: tuple[float, float, float, float]

    @property
    def center(self):
        x, y, w, h = self.bbox
        return (x + w / 2.0, y + h / 2.0)


def _matches(obj: _Obj, word: str, width: int) -> bool:
    if word in COLOR_NAMES:
        return obj.color == word
    if word == "left":
        return obj.center[0] < width / 2.0
    if word == "right":
        return obj.center[0] >= width / 2.0
    if word in CATEGORY_NAMES:
        return obj.category == word
    return True  # filler words constrain nothing


def _candidates(objects, words, width):
    out = list(objects)
    for w in words:
        out = [o for o in out if _matches(o, w, width)]
    return out


def _discriminating_index(objects, target, words, width) -> int | None:
    """First prefix length after which only the target remains."""
    for j in range(1, len(words) + 1):
        cands = _candidates(objects, words[:j], width)
        if cands == [target]:
            return j
    return None


def _sample_bbox(rng, width, height, side=None):
    w = rng.uniform(0.10, 0.28) * width
    h = rng.uniform(0.10, 0.28) * height
    if side == "left":
        x = rng.uniform(0.0, width / 2.0 - w / 2.0 - 1.0)
    elif side == "right":
        x = rng.uniform(width / 2.0 - w / 2.0 + 1.0, width - w)
    else:
        x = rng.uniform(0.0, width - w)
    y = rng.uniform(0.0, height - h)
    return (float(x), float(y), float(w), float(h))


def _disjoint(bbox, others, margin=2.0):
    x, y, w, h = bbox
    for (ox, oy, ow, oh) in others:
        if not (x + w + margin <= ox or ox + ow + margin <= x
                or y + h + margin <= oy or oy + oh + margin <= y):
            return False
    return True


def _place(rng, width, height, placed, side=None, tries=200):
    for _ in range(tries):
        bbox = _sample_bbox(rng, width, height, side=side)
        if _disjoint(bbox, placed):
            return bbox
    return None


def _build_scene(rng, cfg: SynthConfig, categories):
    """One scene plus its referring expression; None when placement failed."""
    width, height = cfg.image_size
    template = rng.choice(["color_cat", "side_color_cat", "the_color_cat"])
    cat = str(rng.choice(categories))
    color = str(rng.choice(COLOR_NAMES))
    other_cat = str(rng.choice([c for c in categories if c != cat]))
    other_color = str(rng.choice([c for c in COLOR_NAMES if c != color]))

    placed, objects = [], []

    def put(category, col, side=None):
        bbox = _place(rng, width, height, placed)
        if side is not None:
            bbox = _place(rng, width, height, placed, side=side)
        if bbox is None:
            return None
        placed.append(bbox)
        obj = _Obj(category, col, bbox)
        objects.append(obj)
        return obj

    if template == "side_color_cat":
        side = str(rng.choice(SIDE_NAMES))
        target = put(cat, color, side=side)
        twin = put(cat, color, side="right" if side == "left" else "left")
        extra = put(other_cat, other_color)
        if target is None or twin is None or extra is None:
            return None
        words = (side, color, cat)
    else:
        target = put(cat, color)
        same_cat = put(cat, other_color)
        same_color = put(other_cat, color)
        if target is None or same_cat is None or same_color is None:
            return None
        lo, hi = cfg.n_objects_per_image
        n_extra = int(rng.integers(0, max(1, hi - 2)))
        for _ in range(n_extra):
            put(str(rng.choice(categories)), str(rng.choice(COLOR_NAMES)))
        words = (color, cat) if template == "color_cat" else ("the", color, cat)

    disc = _discriminating_index(objects, target, words, width)
    if disc is None:
        return None
    return objects, target, words, disc


def _stamp_features(objects, cfg, categories) -> np.ndarray:
    width, height = cfg.image_size
    gh, gw = cfg.grid_shape
    d_feat = len(categories) + len(COLOR_NAMES) + 4 + 1
    grid = np.zeros((d_feat, gh, gw), dtype=np.float32)
    for obj in objects:
        x, y, w, h = obj.bbox
        c0 = int(np.floor(x / width * gw))
        c1 = max(c0 + 1, int(np.ceil((x + w) / width * gw)))
        r0 = int(np.floor(y / height * gh))
        r1 = max(r0 + 1, int(np.ceil((y + h) / height * gh)))
        sig = np.zeros(d_feat, dtype=np.float32)
        sig[categories.index(obj.category)] = 1.0
        sig[len(categories) + COLOR_NAMES.index(obj.color)] = 1.0
        base = len(categories) + len(COLOR_NAMES)
        cx, cy = obj.center
        sig[base:base + 4] = (cx / width, cy / height, w / width, h / height)
        sig[base + 4] = 1.0
        grid[:, r0:min(r1, gh), c0:min(c1, gw)] = sig[:, None, None]
    return grid


def _duration(rng) -> int:
    return int(np.clip(round(rng.normal(250.0, 40.0)), MIN_FIXATION_MS, 600))


def _clamp_point(x, y, width, height):
    return (float(np.clip(x, 0.0, width - 1e-3)), float(np.clip(y, 0.0, height - 1e-3)))


def _point_in_bbox(rng, bbox):
    x, y, w, h = bbox
    return (
        float(rng.uniform(x + 0.15 * w, x + 0.85 * w)),
        float(rng.uniform(y + 0.15 * h, y + 0.85 * h)),
    )


def _make_pack(word_index, points, rng):
    fixations = tuple(
        Fixation(px, py, _duration(rng), word_index, i)
        for i, (px, py) in enumerate(points)
    )
    return Pack.normal(word_index, fixations)


def _oracle_scanpath(rng, policy, objects, target, words, disc, cfg) -> Scanpath:
    width, height = cfg.image_size
    cx, cy = width / 2.0, height / 2.0
    tx, ty = target.center
    L = len(words)
    packs = []

    if policy is OraclePolicy.SCAN:
        start = _clamp_point(cx + rng.normal(0, 8), cy + rng.normal(0, 8), width, height)
        packs.append(_make_pack(0, [start], rng))
        for j in range(1, disc):
            cands = _candidates(objects, words[:j], width)
            obj = cands[int(rng.integers(0, len(cands)))]
            ox, oy = obj.center
            pt = _clamp_point(ox + rng.normal(0, 4), oy + rng.normal(0, 4), width, height)
            packs.append(_make_pack(j, [pt], rng))
        n_go = int(rng.integers(1, 3))
        pts = []
        for i in range(1, n_go + 1):
            if i == n_go:
                pts.append(_point_in_bbox(rng, target.bbox))
            else:
                frac = i / n_go
                pts.append(_clamp_point(
                    cx + frac * (tx - cx) + rng.normal(0, 6),
                    cy + frac * (ty - cy) + rng.normal(0, 6),
                    width, height,
                ))
        packs.append(_make_pack(disc, pts, rng))
        for j in range(disc + 1, L + 2):
            packs.append(_make_pack(j, [_point_in_bbox(rng, target.bbox)], rng))
        return Scanpath(tuple(packs), terminated=True)

    # WAIT_THEN_GO and DIRECT wait silently until the discriminating word
    for j in range(disc):
        packs.append(Pack.null(j))
    if policy is OraclePolicy.DIRECT:
        pts = [_point_in_bbox(rng, target.bbox)]
    else:
        n_go = int(rng.integers(1, 4))
        pts = []
        for i in range(1, n_go + 1):
            if i == n_go:
                pts.append(_point_in_bbox(rng, target.bbox))
            else:
                frac = i / n_go
                pts.append(_clamp_point(
                    cx + frac * (tx - cx) + rng.normal(0, 6),
                    cy + frac * (ty - cy) + rng.normal(0, 6),
                    width, height,
                ))
    packs.append(_make_pack(disc, pts, rng))
    packs.append(Pack.terminal(disc + 1))
    return Scanpath(tuple(packs), terminated=True)


def synthesize_corpus(cfg: SynthConfig) -> Corpus:
    """Deterministic toy corpus with scripted "human" scanpaths.

    Expressions are template-generated from object attributes so the target
    becomes identifiable only after its discriminating word; every scripted
    scanpath ends with a fixation inside the target bbox (mirroring the
    trimming applied to the real recordings).
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    categories = list(CATEGORY_NAMES[: cfg.n_categories])
    word_vocab = (
        list(SENTINELS) + list(FILLER_NAMES) + list(SIDE_NAMES)
        + list(COLOR_NAMES) + categories
    )
    records = []
    attempts = 0
    while len(records) < cfg.n_records:
        attempts += 1
        if attempts > cfg.n_records * 50:
            raise ConfigError("scene construction failed; ranges too tight")
        scene = _build_scene(rng, cfg, categories)
        if scene is None:
            continue
        objects, target, words, disc = scene
        idx = len(records)
        lo, hi = cfg.scanpaths_per_record
        n_sp = int(rng.integers(lo, hi + 1))
        scanpaths = tuple(
            (f"s{k:02d}", _oracle_scanpath(rng, cfg.oracle_policy, objects, target, words, disc, cfg))
            for k in range(n_sp)
        )
        records.append(TrialRecord(
            trial_id=f"t{idx:05d}",
            image_size=cfg.image_size,
            feature_grid=_stamp_features(objects, cfg, categories),
            words=words,
            word_onsets_ms=tuple(200 + 300 * j for j in range(len(words))),
            target_bbox=target.bbox,
            target_category=target.category,
            human_scanpaths=scanpaths,
        ))
    return Corpus(
        records=records,
        category_vocab=categories,
        word_vocab=word_vocab,
        grid_shape=cfg.grid_shape,
        feature_dim=len(categories) + len(COLOR_NAMES) + 4 + 1,
    )


def split_corpus(corpus: Corpus, ratios=DEFAULT_RATIOS, seed: int = 0):
    """Record-level partition into (train, val, test); deterministic in seed."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(corpus.records)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(n * ratios[0]))
    n_val = int(math.floor(n * ratios[1]))
    chunks = (
        order[:n_train],
        order[n_train:n_train + n_val],
        order[n_train + n_val:],
    )

    def subset(idx):
        return Corpus(
            records=[corpus.records[i] for i in sorted(idx)],
            category_vocab=corpus.category_vocab,
            word_vocab=corpus.word_vocab,
            grid_shape=corpus.grid_shape,
            feature_dim=corpus.feature_dim,
        )

    return subset(chunks[0]), subset(chunks[1]), subset(chunks[2])
