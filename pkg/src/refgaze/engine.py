"""Training loops, the optimizer, and autoregressive inference."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .core import Fixation, Pack, PackKind, Scanpath, TrialRecord
from .data import Corpus
from .diffcore import autodiff as ad, backward
from .errors import ConfigError, NumericError
from .metrics import ClusterGrid, whole_ss
from .model import (
    MIN_DURATION_S,
    TOKEN_EOS,
    TOKEN_FIX,
    GazeModel,
)
from .objectives import pretrain_loss, token_targets, total_loss

PHASE_PRETRAIN, PHASE_TRAIN = "PRETRAIN", "TRAIN"

_DEFAULTS = {
    PHASE_PRETRAIN: dict(
        epochs=200, batch_size=128,
        learning_rates={"stub": 1e-5, "vl": 1e-5, "ground": 1e-5},
    ),
    PHASE_TRAIN: dict(
        epochs=200, batch_size=64,
        learning_rates={"stub": 1e-7, "vl": 1e-5, "ground": 1e-4, "rest": 1e-4},
    ),
}


@dataclass
class TrainConfig:
    phase: str = PHASE_TRAIN
    epochs: int | None = None
    batch_size: int | None = None
    learning_rates: dict | None = None  # group name -> lr
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    duration_enabled: bool = True
    grad_clip: float = 1.0
    eval_every: int = 10   # early-stopping cadence on validation SS
    patience: int = 3
    ground_average: str = "qualifying"

    def __post_init__(self):
        if self.phase not in (PHASE_PRETRAIN, PHASE_TRAIN):
            raise ConfigError(f"unknown phase {self.phase!r}")
        defaults = _DEFAULTS[self.phase]
        if self.epochs is None:
            self.epochs = defaults["epochs"]
        if self.batch_size is None:
            self.batch_size = defaults["batch_size"]
        if self.learning_rates is None:
            self.learning_rates = dict(defaults["learning_rates"])
        if self.epochs < 0 or self.batch_size <= 0:
            raise ConfigError("epochs must be >= 0 and batch_size positive")
        if any(lr < 0 for lr in self.learning_rates.values()):
            raise ConfigError("negative learning rate")

    def config_hash(self) -> str:
        blob = json.dumps(self.__dict__, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class RunLog:
    seed: int
    config_hash: str
    entries: list = field(default_factory=list)

    def append(self, **kwargs) -> None:
        if self.entries and kwargs.get("epoch", 0) <= self.entries[-1]["epoch"]:
            raise ConfigError("epoch indices must be monotone")
        self.entries.append(kwargs)

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"seed": self.seed, "config_hash": self.config_hash},
                                sort_keys=True) + "\n")
            for e in self.entries:
                fh.write(json.dumps(e, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# optimizer: adaptive moments with decoupled weight decay
# ---------------------------------------------------------------------------


def _global_grad_norm(params, names) -> float:
    total = 0.0
    for name in names:
        g = params[name].grad
        if g is not None:
            total += float((g.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def adamw_step(params, group_lrs: dict, group_of, betas=(0.9, 0.999),
               eps=1e-8, weight_decay=1e-4, grad_clip=1.0) -> dict:
    """One update over every parameter whose group appears in group_lrs.
    Gradients are rescaled to a global norm of at most grad_clip first.
    Returns {"grad_norm", "clipped"}."""
    names = [n for n in params.names() if group_of(n) in group_lrs]
    norm = _global_grad_norm(params, names)
    scale = 1.0
    clipped = False
    if grad_clip is not None and norm > grad_clip > 0:
        scale = grad_clip / norm
        clipped = True
    b1, b2 = betas
    for name in names:
        node = params[name]
        g = node.grad
        if g is None:
            continue
        g = g.astype(np.float32) * scale
        state = params.opt_state.setdefault(
            name, {"m": np.zeros_like(node.value), "v": np.zeros_like(node.value), "t": 0})
        state["t"] += 1
        t = state["t"]
        state["m"] = b1 * state["m"] + (1 - b1) * g
        state["v"] = b2 * state["v"] + (1 - b2) * (g * g)
        mhat = state["m"] / (1 - b1**t)
        vhat = state["v"] / (1 - b2**t)
        lr = group_lrs[group_of(name)]
        node.value = node.value - lr * (mhat / (np.sqrt(vhat) + eps)
                                        + weight_decay * node.value)
    return {"grad_norm": norm, "clipped": clipped}


# ---------------------------------------------------------------------------
# teacher-forcing items
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PackItem:
    """One independent minibatch item: a single (scanpath, stage) pack with
    its ground-truth fixation history."""

    record_index: int
    scanpath_index: int
    j: int
    pack: Pack
    history: tuple[Fixation, ...]
    grounding: bool  # last word uttered, or ground truth terminated


def training_items(corpus: Corpus) -> list[PackItem]:
    items = []
    for ri, rec in enumerate(corpus.records):
        L = rec.n_words
        for si, (_, sp) in enumerate(rec.human_scanpaths):
            history: list[Fixation] = []
            for j, pack in enumerate(sp.packs):
                items.append(PackItem(
                    record_index=ri, scanpath_index=si, j=j, pack=pack,
                    history=tuple(history),
                    grounding=(j >= L or pack.kind is PackKind.TERMINAL),
                ))
                history.extend(pack.fixations)
    return items


class _BatchBuilder:
    """Caches per-(record, stage) token arrays and per-record targets."""

    def __init__(self, model: GazeModel, corpus: Corpus):
        self.model = model
        self.corpus = corpus
        self.cat_index = corpus.category_index()
        self._tokens: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        width, height = model.image_size
        self.norm_boxes = np.array(
            [[r.target_bbox[0] / width, r.target_bbox[1] / height,
              r.target_bbox[2] / width, r.target_bbox[3] / height]
             for r in corpus.records], dtype=np.float32)
        self.cat_ids = np.array(
            [self.cat_index[r.target_category] for r in corpus.records], dtype=np.int64)

    def tokens_for(self, record_index: int, j: int):
        key = (record_index, j)
        if key not in self._tokens:
            rec = self.corpus.records[record_index]
            self._tokens[key] = self.model.tokenize_prefix(rec.words, j)
        return self._tokens[key]

    def stage_batch(self, items):
        grids = np.stack(
            [self.corpus.records[it.record_index].feature_grid for it in items])
        toks, masks = zip(*(self.tokens_for(it.record_index, it.j) for it in items))
        return grids, np.stack(toks), np.stack(masks)


def _check_finite(breakdown, params, fallback) -> None:
    if not np.isfinite(breakdown.total):
        raise NumericError(
            f"non-finite loss {breakdown.total}", last_good=fallback)


# ---------------------------------------------------------------------------
# pre-training: grounding objectives on complete expressions
# ---------------------------------------------------------------------------


def pretrain(model: GazeModel, corpus: Corpus, cfg: TrainConfig) -> RunLog:
    """Optimize l_reg + l_giou + l_target at stage j = L. Only the encoder
    side (stubs, visuo-linguistic encoder, grounding heads) is updated; the
    pack decoder and fixation heads stay untouched."""
    if cfg.phase != PHASE_PRETRAIN:
        raise ConfigError(f"pretrain called with phase {cfg.phase!r}")
    log = RunLog(seed=cfg.seed, config_hash=cfg.config_hash())
    builder = _BatchBuilder(model, corpus)
    indices = np.arange(len(corpus.records))
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        last_good = model.params.copy()
        order = np.random.default_rng([cfg.seed, 11, epoch]).permutation(indices)
        sums, steps, grad_norms, clipped = {}, 0, [], 0
        for start in range(0, len(order), cfg.batch_size):
            batch_idx = order[start:start + cfg.batch_size]
            rec_items = [(int(ri), corpus.records[int(ri)].n_words) for ri in batch_idx]
            grids = np.stack([corpus.records[ri].feature_grid for ri, _ in rec_items])
            toks, masks = zip(*(builder.tokens_for(ri, L) for ri, L in rec_items))
            drop_rng = np.random.default_rng([cfg.seed, 13, epoch, steps])
            g_vis = model.encode_visual(grids)
            g_lang = model.encode_language(np.stack(toks), drop_rng=drop_rng)
            vl = model.encode_visuolinguistic(g_vis, g_lang, np.stack(masks),
                                              drop_rng=drop_rng)
            breakdown = pretrain_loss(
                vl, builder.norm_boxes[batch_idx], builder.cat_ids[batch_idx])
            _check_finite(breakdown, model.params, last_good)
            backward(breakdown.node, params=model.params)
            info = adamw_step(
                model.params, cfg.learning_rates, GazeModel.param_group,
                betas=cfg.betas, eps=cfg.adam_eps,
                weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
            grad_norms.append(info["grad_norm"])
            clipped += int(info["clipped"])
            for k, v in breakdown.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1
        log.append(
            epoch=epoch,
            **{k: v / max(steps, 1) for k, v in sums.items()},
            grad_norm=float(np.mean(grad_norms)) if grad_norms else 0.0,
            clipped_steps=clipped,
            wall_s=time.perf_counter() - t0,
        )
    return log


# ---------------------------------------------------------------------------
# training: teacher-forced packs as independent minibatch items
# ---------------------------------------------------------------------------


def train(model: GazeModel, corpus: Corpus, cfg: TrainConfig,
          val_corpus: Corpus | None = None) -> RunLog:
    """Teacher forcing over every (scanpath, stage) pack. Fixation context
    comes from the ground-truth history; grounding losses switch on per item
    once the expression is complete or the ground truth has terminated.

    With a validation corpus, mean-mode inference SS is evaluated every
    eval_every epochs and training stops after `patience` non-improving
    evaluations."""
    if cfg.phase != PHASE_TRAIN:
        raise ConfigError(f"train called with phase {cfg.phase!r}")
    log = RunLog(seed=cfg.seed, config_hash=cfg.config_hash())
    items = training_items(corpus)
    builder = _BatchBuilder(model, corpus)
    best_ss, stale = -np.inf, 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        last_good = model.params.copy()
        order = np.random.default_rng([cfg.seed, 17, epoch]).permutation(len(items))
        sums, steps, grad_norms, clipped = {}, 0, [], 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [items[i] for i in order[start:start + cfg.batch_size]]
            grids, toks, masks = builder.stage_batch(batch)
            drop_rng = np.random.default_rng([cfg.seed, 19, epoch, steps])
            vl, pred = model.forward_stage(
                grids, toks, masks, [it.history for it in batch],
                mode="TEACHER", drop_rng=drop_rng)
            rec_idx = np.array([it.record_index for it in batch])
            breakdown = total_loss(
                vl, pred, [it.pack for it in batch],
                [it.grounding for it in batch],
                builder.norm_boxes[rec_idx], builder.cat_ids[rec_idx],
                duration_enabled=cfg.duration_enabled,
                ground_average=cfg.ground_average)
            _check_finite(breakdown, model.params, last_good)
            backward(breakdown.node, params=model.params)
            info = adamw_step(
                model.params, cfg.learning_rates, GazeModel.param_group,
                betas=cfg.betas, eps=cfg.adam_eps,
                weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
            grad_norms.append(info["grad_norm"])
            clipped += int(info["clipped"])
            for k, v in breakdown.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1
        entry = dict(
            epoch=epoch,
            **{k: v / max(steps, 1) for k, v in sums.items()},
            grad_norm=float(np.mean(grad_norms)) if grad_norms else 0.0,
            clipped_steps=clipped,
            wall_s=time.perf_counter() - t0,
        )
        if val_corpus is not None and (epoch + 1) % cfg.eval_every == 0:
            val_ss = validation_ss(model, val_corpus)
            entry["val_ss"] = val_ss
            if val_ss > best_ss + 1e-6:
                best_ss, stale = val_ss, 0
            else:
                stale += 1
            if stale >= cfg.patience:
                log.append(**entry)
                break
        log.append(**entry)
    return log


def token_accuracy(model: GazeModel, corpus: Corpus, batch_size: int = 128) -> float:
    """Teacher-forced per-slot token accuracy over all training items."""
    items = training_items(corpus)
    builder = _BatchBuilder(model, corpus)
    hits, total = 0, 0
    for start in range(0, len(items), batch_size):
        batch = items[start:start + batch_size]
        grids, toks, masks = builder.stage_batch(batch)
        _, pred = model.forward_stage(
            grids, toks, masks, [it.history for it in batch], mode="TEACHER")
        classes = np.argmax(pred.token_probs.value, axis=-1)
        for b, it in enumerate(batch):
            target = token_targets(it.pack, model.cfg.pack_slots)
            hits += int((classes[b] == target).sum())
            total += target.size
    return hits / total if total else 0.0


def mean_loc_l1(model: GazeModel, corpus: Corpus, batch_size: int = 128) -> float:
    """Teacher-forced mean per-pack location L1 (pixels) over NORMAL packs."""
    items = [it for it in training_items(corpus) if it.pack.kind is PackKind.NORMAL]
    builder = _BatchBuilder(model, corpus)
    vals = []
    for start in range(0, len(items), batch_size):
        batch = items[start:start + batch_size]
        grids, toks, masks = builder.stage_batch(batch)
        _, pred = model.forward_stage(
            grids, toks, masks, [it.history for it in batch], mode="TEACHER")
        for b, it in enumerate(batch):
            l = len(it.pack.fixations)
            gt = np.array([[fx.x, fx.y] for fx in it.pack.fixations])
            diff = np.abs(pred.loc_mean.value[b, :l] - gt)
            vals.append(float(diff.sum() / l))
    return float(np.mean(vals)) if vals else 0.0


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def infer_scanpath(model: GazeModel, record: TrialRecord, mode: str = "MEAN",
                   seed: int = 0) -> Scanpath:
    """Autoregressive pack generation for stages j = 0..L+1.

    Per stage the token head is read greedily per slot: the kept fixations
    are the leading FIX slots, and an EOS anywhere in the pack terminates
    the scanpath (an all-EOS readout yields a TERMINAL pack). Without an
    EOS the run stops after stage L+1, so it always terminates within L+2
    packs of at most L_P fixations each.
    """
    if mode not in ("MEAN", "SAMPLE"):
        raise ConfigError(f"inference mode must be MEAN or SAMPLE, got {mode!r}")
    rng = np.random.default_rng([seed, 23]) if mode == "SAMPLE" else None
    L = record.n_words
    grids = record.feature_grid[None]
    history: list[Fixation] = []
    packs: list[Pack] = []
    for j in range(L + 2):
        toks, mask = model.tokenize_prefix(record.words, j)
        _, pred = model.forward_stage(
            grids, toks[None], mask[None], [tuple(history)],
            mode=mode, sample_rng=rng)
        classes = np.argmax(pred.token_probs.value[0], axis=-1)
        n_fix = 0
        for c in classes:
            if c != TOKEN_FIX:
                break
            n_fix += 1
        has_eos = bool(np.any(classes == TOKEN_EOS))
        if n_fix > 0:
            draws = pred.sampled[0]
            fixations = tuple(
                Fixation(
                    x=float(draws[i, 0]), y=float(draws[i, 1]),
                    duration=max(int(round(draws[i, 2] * 1000.0)),
                                 int(MIN_DURATION_S * 1000)),
                    pack_index=j, order=i,
                )
                for i in range(n_fix)
            )
            packs.append(Pack.normal(j, fixations))
            history.extend(fixations)
            if has_eos:
                if j + 1 <= L + 1:
                    packs.append(Pack.terminal(j + 1))
                return Scanpath(tuple(packs), terminated=True)
        else:
            if has_eos:
                packs.append(Pack.terminal(j))
                return Scanpath(tuple(packs), terminated=True)
            packs.append(Pack.null(j))
    return Scanpath(tuple(packs), terminated=True)


def sample_scanpaths(model: GazeModel, record: TrialRecord, n: int = 10,
                     seed: int = 0) -> list[Scanpath]:
    """n independent SAMPLE-mode runs with per-run derived seeds."""
    if n < 1:
        raise ConfigError(f"need n >= 1 scanpaths, got {n}")
    return [
        infer_scanpath(model, record, mode="SAMPLE", seed=int(s))
        for s in np.random.SeedSequence(seed).generate_state(n)
    ]


def validation_ss(model: GazeModel, corpus: Corpus,
                  grid: ClusterGrid | None = None) -> float:
    """Mean whole-scanpath SS of mean-mode inference against each human."""
    grid = grid or ClusterGrid(*corpus.grid_shape)
    vals = []
    for rec in corpus.records:
        sp = infer_scanpath(model, rec, mode="MEAN")
        for _, human in rec.human_scanpaths:
            vals.append(whole_ss(sp, human, grid, rec.image_size))
    return float(np.mean(vals)) if vals else 0.0
