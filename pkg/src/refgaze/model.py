"""The gaze prediction network.

Per comprehension stage j the model hears the expression prefix, encodes the
image grid and the prefix with small trainable stub encoders, fuses them in
a transformer encoder carrying two extra grounding tokens (bounding-box and
target-category slots), encodes the fixation history, and decodes one pack
of up to L_P fixations in parallel.

The pretrained-backbone encoders this design normally rides on are replaced
by shape-compatible stubs (linear grid projection; embedding table plus one
encoder layer) so the full wiring stays intact and trainable from scratch at
desk scale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import BOT, EOT, PAD, SENTINELS
from .diffcore import ParamStore, autodiff as ad
from .diffcore.nn import LayerParams, linear, xavier_uniform
from .errors import ConfigError, ContractError, ShapeError

# token classes emitted per pack slot
TOKEN_FIX, TOKEN_PAD, TOKEN_EOS = 0, 1, 2
TOKEN_NAMES = ("FIX", "PAD", "EOS")

MIN_DURATION_S = 0.06  # sampling floor, mirrors the 60 ms corpus filter


@dataclass
class ModelConfig:
    d: int = 256
    n_enc_layers: int = 6
    n_dec_layers: int = 6
    n_heads: int = 8
    n_heads_stub: int = 4
    pack_slots: int = 6          # L_P: fixations decoded per pack
    context_len: int = 36        # L_C: fixation-history window
    l_lang: int = 32
    grid_h: int = 10
    grid_w: int = 18
    d_vis_stub: int = 64
    d_lang_stub: int = 64
    dropout_enc: float = 0.1
    dropout_dec: float = 0.2
    dropout_heads: float = 0.4
    dropout_ground: float = 0.2
    ffn_mult: int = 4
    toy_scale: bool = False      # shrink switch for tests: d=64, 2+2 layers, 4 heads

    def __post_init__(self):
        if self.toy_scale:
            self.d = 64
            self.n_enc_layers = 2
            self.n_dec_layers = 2
            self.n_heads = 4
        if self.d % self.n_heads != 0:
            raise ConfigError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.d_lang_stub % self.n_heads_stub != 0:
            raise ConfigError(
                f"d_lang_stub={self.d_lang_stub} not divisible by "
                f"n_heads_stub={self.n_heads_stub}"
            )
        if self.d % 2 != 0 or self.d_vis_stub % 2 or self.d_lang_stub % 2:
            raise ConfigError("embedding dims must be even for sinusoidal codes")
        if self.context_len < self.pack_slots:
            raise ConfigError(
                f"context_len={self.context_len} < pack_slots={self.pack_slots}"
            )

    @property
    def n_cells(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def vl_width(self) -> int:
        return self.n_cells + self.l_lang + 2


def toy_config(**overrides) -> ModelConfig:
    return ModelConfig(toy_scale=True, **overrides)


@dataclass
class VLState:
    """Visuo-linguistic encoding plus the grounding-head readouts."""

    f_vlg: ad.Node      # (B, hw + l_lang + 2, d)
    bbox_pred: ad.Node  # (B, 4) normalized (0,1) x, y, w, h
    tgt_dist: ad.Node   # (B, n_categories), rows sum to 1
    key_mask: np.ndarray  # (B, hw + l_lang + 2) bool, False at language padding


@dataclass
class PackPrediction:
    """Per-slot token distribution and Gaussian location/duration params."""

    token_probs: ad.Node  # (B, L_P, 3) over (FIX, PAD, EOS)
    loc_mean: ad.Node     # (B, L_P, 2) raw pixels
    loc_logvar: ad.Node   # (B, L_P, 2) log pixel^2
    dur_mean: ad.Node     # (B, L_P, 1) seconds
    dur_logvar: ad.Node   # (B, L_P, 1) log s^2
    sampled: np.ndarray | None = None  # (B, L_P, 3): x px, y px, duration s


def sinusoid_1d(pos: np.ndarray, d: int) -> np.ndarray:
    """Fixed sinusoidal code, base-10000 geometric frequency ladder;
    position 0 encodes to [0, 1, 0, 1, ...]."""
    pos = np.asarray(pos, dtype=np.float64)
    half = d // 2
    freq = np.power(10000.0, -np.arange(half, dtype=np.float64) * 2.0 / d)
    angle = pos[..., None] * freq
    out = np.empty(pos.shape + (d,), dtype=np.float32)
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


class GazeModel:
    """Parameter owner and forward passes. One instance per vocabulary and
    image geometry; read-shared across threads at inference."""

    def __init__(self, cfg: ModelConfig, word_vocab, category_vocab,
                 feat_dim: int, image_size, seed: int = 0):
        if tuple(word_vocab[:3]) != SENTINELS:
            raise ConfigError(f"word_vocab must start with {SENTINELS}")
        self.cfg = cfg
        self.word_vocab = list(word_vocab)
        self.word_index = {w: i for i, w in enumerate(word_vocab)}
        self.category_vocab = list(category_vocab)
        self.feat_dim = int(feat_dim)
        self.image_size = (int(image_size[0]), int(image_size[1]))
        self.params = ParamStore()
        self._layers: dict[str, LayerParams] = {}
        self._build(seed)

    # -- construction -------------------------------------------------------

    def _build(self, seed: int) -> None:
        cfg, p = self.cfg, self.params
        rng = np.random.default_rng([seed, 0xC0FFEE])

        p.create("vis.proj.w", xavier_uniform(rng, self.feat_dim, cfg.d_vis_stub))
        p.create("vis.pos", (0.02 * rng.standard_normal(
            (cfg.n_cells, cfg.d_vis_stub))).astype(np.float32))

        p.create("lang.embed", (0.02 * rng.standard_normal(
            (len(self.word_vocab), cfg.d_lang_stub))).astype(np.float32))
        p.create("lang.pos", (0.02 * rng.standard_normal(
            (cfg.l_lang, cfg.d_lang_stub))).astype(np.float32))
        self._layers["lang.enc0"] = LayerParams(
            p, "lang.enc0", cfg.d_lang_stub, cfg.ffn_mult * cfg.d_lang_stub, rng)

        p.create("vl.proj_vis.w", xavier_uniform(rng, cfg.d_vis_stub, cfg.d))
        p.create("vl.proj_vis.b", np.zeros(cfg.d, np.float32))
        p.create("vl.proj_lang.w", xavier_uniform(rng, cfg.d_lang_stub, cfg.d))
        p.create("vl.proj_lang.b", np.zeros(cfg.d, np.float32))
        p.create("vl.bbox_tok", (0.02 * rng.standard_normal(cfg.d)).astype(np.float32))
        p.create("vl.tgt_tok", (0.02 * rng.standard_normal(cfg.d)).astype(np.float32))
        for i in range(cfg.n_enc_layers):
            self._layers[f"vl.enc{i}"] = LayerParams(
                p, f"vl.enc{i}", cfg.d, cfg.ffn_mult * cfg.d, rng)

        p.create("ground.bbox.w", xavier_uniform(rng, cfg.d, 4))
        p.create("ground.bbox.b", np.zeros(4, np.float32))
        p.create("ground.tgt.w", xavier_uniform(rng, cfg.d, len(self.category_vocab)))
        p.create("ground.tgt.b", np.zeros(len(self.category_vocab), np.float32))

        p.create("ctx.proj.w", xavier_uniform(rng, 4 * cfg.d, cfg.d))
        p.create("ctx.proj.b", np.zeros(cfg.d, np.float32))

        p.create("dec.seg_ctxt", (0.02 * rng.standard_normal(cfg.d)).astype(np.float32))
        p.create("dec.seg_curr", (0.02 * rng.standard_normal(cfg.d)).astype(np.float32))
        p.create("dec.query", (0.02 * rng.standard_normal(
            (cfg.pack_slots, cfg.d))).astype(np.float32))
        for i in range(cfg.n_dec_layers):
            self._layers[f"dec.layer{i}"] = LayerParams(
                p, f"dec.layer{i}", cfg.d, cfg.ffn_mult * cfg.d, rng, cross=True)

        p.create("fix.token.w1", xavier_uniform(rng, cfg.d, cfg.d))
        p.create("fix.token.b1", np.zeros(cfg.d, np.float32))
        p.create("fix.token.w2", xavier_uniform(rng, cfg.d, 3))
        p.create("fix.token.b2", np.zeros(3, np.float32))
        for head in ("x_mean", "x_logvar", "y_mean", "y_logvar",
                     "dur_mean", "dur_logvar"):
            p.create(f"fix.{head}.w", xavier_uniform(rng, cfg.d, 1))
            p.create(f"fix.{head}.b", np.zeros(1, np.float32))

    def rebind(self, params: ParamStore) -> None:
        """Adopt a loaded checkpoint (same architecture)."""
        if set(params.names()) != set(self.params.names()):
            raise ConfigError("checkpoint parameter names do not match model")
        self.params = params
        for lp in self._layers.values():
            lp.store = params

    @staticmethod
    def param_group(name: str) -> str:
        """Learning-rate group: stub encoders / visuo-linguistic encoder /
        grounding heads / everything else."""
        if name.startswith(("vis.", "lang.")):
            return "stub"
        if name.startswith("vl."):
            return "vl"
        if name.startswith("ground."):
            return "ground"
        return "rest"

    # -- tokenizer ----------------------------------------------------------

    def tokenize_prefix(self, words, j: int):
        """Token index sequence of length l_lang for comprehension stage j,
        plus its padding mask.

        Stage 0 hears nothing ([BOT, EOT]); stages 1..L append the heard
        words; stage L+1 (expression over) carries a doubled end token.
        """
        cfg = self.cfg
        L = len(words)
        if not 0 <= j <= L + 1:
            raise ContractError(f"stage j={j} outside [0, {L + 1}]")
        if L + 3 > cfg.l_lang:
            raise ContractError(f"{L} words exceed token budget l_lang={cfg.l_lang}")
        try:
            heard = [self.word_index[w] for w in words[: min(j, L)]]
        except KeyError as exc:
            raise IndexError(f"word {exc.args[0]!r} not in vocabulary") from exc
        toks = [self.word_index[BOT]] + heard + [self.word_index[EOT]]
        if j == L + 1:
            toks.append(self.word_index[EOT])
        mask = np.zeros(cfg.l_lang, dtype=bool)
        mask[: len(toks)] = True
        out = np.full(cfg.l_lang, self.word_index[PAD], dtype=np.int64)
        out[: len(toks)] = toks
        return out, mask

    # -- encoders -----------------------------------------------------------

    def encode_visual(self, grids: np.ndarray) -> ad.Node:
        """(B, d_feat, h, w) feature grids -> (B, h*w, d_vis_stub)."""
        cfg = self.cfg
        grids = np.asarray(grids)
        if grids.ndim != 4 or grids.shape[1:] != (self.feat_dim, cfg.grid_h, cfg.grid_w):
            raise ShapeError(
                f"expected grids (B, {self.feat_dim}, {cfg.grid_h}, {cfg.grid_w}), "
                f"got {grids.shape}"
            )
        b = grids.shape[0]
        cells = grids.reshape(b, self.feat_dim, cfg.n_cells).transpose(0, 2, 1)
        content = ad.matmul(ad.constant(cells), self.params["vis.proj.w"])
        return ad.add(content, self.params["vis.pos"])

    def encode_language(self, tokens: np.ndarray, drop_rng=None) -> ad.Node:
        """(B, l_lang) token indices -> contextual (B, l_lang, d_lang_stub)."""
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] != cfg.l_lang:
            raise ShapeError(f"expected tokens (B, {cfg.l_lang}), got {tokens.shape}")
        mask = tokens != self.word_index[PAD]
        x = ad.add(ad.embedding(self.params["lang.embed"], tokens),
                   self.params["lang.pos"])
        x = self._layers["lang.enc0"].encode(
            x, cfg.n_heads_stub, self_mask=mask,
            rate=cfg.dropout_enc, rng=drop_rng)
        return x

    def encode_visuolinguistic(self, g_vis: ad.Node, g_lang: ad.Node,
                               lang_mask: np.ndarray, drop_rng=None) -> VLState:
        """Fuse modalities behind the two grounding tokens; returns the full
        encoding plus sigmoid bbox and softmax category readouts."""
        cfg = self.cfg
        b = g_vis.value.shape[0]
        f_vis = linear(g_vis, self.params["vl.proj_vis.w"], self.params["vl.proj_vis.b"])
        f_lang = linear(g_lang, self.params["vl.proj_lang.w"], self.params["vl.proj_lang.b"])

        def tile_token(name):
            tok = ad.reshape(self.params[name], (1, 1, cfg.d))
            return ad.add(tok, ad.constant(np.zeros((b, 1, cfg.d), np.float32)))

        x = ad.concat([tile_token("vl.bbox_tok"), tile_token("vl.tgt_tok"),
                       f_vis, f_lang], axis=1)
        key_mask = np.concatenate(
            [np.ones((b, 2 + cfg.n_cells), dtype=bool), lang_mask], axis=1)
        for i in range(cfg.n_enc_layers):
            x = self._layers[f"vl.enc{i}"].encode(
                x, cfg.n_heads, self_mask=key_mask,
                rate=cfg.dropout_enc, rng=drop_rng)

        bbox_in = ad.dropout(ad.getitem(x, (slice(None), 0)), cfg.dropout_ground, drop_rng)
        tgt_in = ad.dropout(ad.getitem(x, (slice(None), 1)), cfg.dropout_ground, drop_rng)
        bbox = ad.sigmoid(linear(bbox_in, self.params["ground.bbox.w"],
                                 self.params["ground.bbox.b"]))
        tgt = ad.softmax(linear(tgt_in, self.params["ground.tgt.w"],
                                self.params["ground.tgt.b"]), axis=-1)
        return VLState(f_vlg=x, bbox_pred=bbox, tgt_dist=tgt, key_mask=key_mask)

    def encode_fixation_context(self, histories) -> tuple[ad.Node, np.ndarray]:
        """Histories (one fixation list per batch item, all packs < j) ->
        context tensor (B, L_C, d) plus validity mask.

        Each fixation contributes sinusoidal codes of location (2d), pack
        number (d), and order (d), concatenated and projected to d. Windows
        are zero-padded; overlong histories keep the most recent L_C
        fixations.
        """
        cfg = self.cfg
        b = len(histories)
        feats = np.zeros((b, cfg.context_len, 4 * cfg.d), dtype=np.float32)
        valid = np.zeros((b, cfg.context_len), dtype=bool)
        for bi, history in enumerate(histories):
            kept = list(history)[-cfg.context_len:]
            if not kept:
                continue
            xs = np.array([fx.x for fx in kept], dtype=np.float64)
            ys = np.array([fx.y for fx in kept], dtype=np.float64)
            ks = np.array([fx.pack_index for fx in kept], dtype=np.float64)
            order = np.array([fx.order for fx in kept], dtype=np.float64)
            code = np.concatenate([
                sinusoid_1d(xs, cfg.d), sinusoid_1d(ys, cfg.d),
                sinusoid_1d(ks, cfg.d), sinusoid_1d(order, cfg.d),
            ], axis=-1)
            feats[bi, : len(kept)] = code
            valid[bi, : len(kept)] = True
        ctx = linear(ad.constant(feats), self.params["ctx.proj.w"],
                     self.params["ctx.proj.b"])
        # zero out padded slots so invalid columns carry no signal anywhere
        ctx = ad.mul(ctx, ad.constant(valid[..., None].astype(np.float32)))
        return ctx, valid

    # -- decoder and prediction heads ---------------------------------------

    def decode_pack(self, ctx: ad.Node, ctx_valid: np.ndarray, vl: VLState,
                    drop_rng=None) -> ad.Node:
        """Self-attend over [context ; pack queries] with segment codes,
        cross-attend onto f_vlg, return the L_P query outputs (B, L_P, d)."""
        cfg = self.cfg
        b = ctx.value.shape[0]
        c_seg = ad.add(ctx, ad.reshape(self.params["dec.seg_ctxt"], (1, 1, cfg.d)))
        queries = ad.add(
            ad.reshape(self.params["dec.query"], (1, cfg.pack_slots, cfg.d)),
            ad.reshape(self.params["dec.seg_curr"], (1, 1, cfg.d)),
        )
        q_seg = ad.add(queries, ad.constant(np.zeros((b, cfg.pack_slots, cfg.d), np.float32)))
        x = ad.concat([c_seg, q_seg], axis=1)
        self_mask = np.concatenate(
            [ctx_valid, np.ones((b, cfg.pack_slots), dtype=bool)], axis=1)
        for i in range(cfg.n_dec_layers):
            x = self._layers[f"dec.layer{i}"].decode(
                x, vl.f_vlg, cfg.n_heads,
                self_mask=self_mask, cross_mask=vl.key_mask,
                rate=cfg.dropout_dec, rng=drop_rng)
        return ad.getitem(x, (slice(None), slice(cfg.context_len, None)))

    def predict_fixations(self, f_pack: ad.Node, mode: str = "TEACHER",
                          sample_rng=None, drop_rng=None) -> PackPrediction:
        """Token distribution plus Gaussian location (raw pixels) and
        duration (seconds) parameters for each pack slot.

        SAMPLE draws mean + sigma * eps and clamps to image bounds and the
        duration floor; MEAN returns the clamped means; TEACHER returns the
        distributions only (training reads them symbolically).
        """
        if mode not in ("TEACHER", "SAMPLE", "MEAN"):
            raise ContractError(f"unknown prediction mode {mode!r}")
        cfg, p = self.cfg, self.params
        width, height = self.image_size
        h = ad.dropout(f_pack, cfg.dropout_heads, drop_rng)

        tok_h = ad.gelu(linear(h, p["fix.token.w1"], p["fix.token.b1"]))
        token_probs = ad.softmax(linear(tok_h, p["fix.token.w2"], p["fix.token.b2"]),
                                 axis=-1)

        def head(name):
            return linear(h, p[f"fix.{name}.w"], p[f"fix.{name}.b"])

        # raw head outputs are scaled so the pixel range of the image maps
        # to O(1) weights; logvar offsets start sigma at 5% of the range
        x_mean = ad.add(ad.mul(head("x_mean"), ad.constant(float(width))),
                        ad.constant(width / 2.0))
        y_mean = ad.add(ad.mul(head("y_mean"), ad.constant(float(height))),
                        ad.constant(height / 2.0))
        x_logvar = ad.add(head("x_logvar"), ad.constant(2.0 * math.log(0.05 * width)))
        y_logvar = ad.add(head("y_logvar"), ad.constant(2.0 * math.log(0.05 * height)))
        dur_mean = ad.add(ad.mul(head("dur_mean"), ad.constant(0.25)), ad.constant(0.25))
        dur_logvar = ad.add(head("dur_logvar"), ad.constant(2.0 * math.log(0.05)))

        pred = PackPrediction(
            token_probs=token_probs,
            loc_mean=ad.concat([x_mean, y_mean], axis=-1),
            loc_logvar=ad.concat([x_logvar, y_logvar], axis=-1),
            dur_mean=dur_mean,
            dur_logvar=dur_logvar,
        )
        if mode == "TEACHER":
            return pred

        mu = np.concatenate(
            [pred.loc_mean.value, pred.dur_mean.value], axis=-1).astype(np.float64)
        if mode == "SAMPLE":
            if sample_rng is None:
                raise ContractError("SAMPLE mode needs a random generator")
            logvar = np.concatenate(
                [pred.loc_logvar.value, pred.dur_logvar.value], axis=-1)
            eps = sample_rng.standard_normal(mu.shape)
            draw = mu + np.exp(0.5 * logvar.astype(np.float64)) * eps
        else:
            draw = mu
        draw[..., 0] = np.clip(draw[..., 0], 0.0, width - 1e-3)
        draw[..., 1] = np.clip(draw[..., 1], 0.0, height - 1e-3)
        draw[..., 2] = np.maximum(draw[..., 2], MIN_DURATION_S)
        pred.sampled = draw
        return pred

    # -- full stage forward --------------------------------------------------

    def forward_stage(self, grids: np.ndarray, tokens: np.ndarray,
                      lang_mask: np.ndarray, histories, mode: str = "TEACHER",
                      sample_rng=None, drop_rng=None):
        """One comprehension stage for a batch: encode, fuse, decode one
        pack. Returns (VLState, PackPrediction)."""
        g_vis = self.encode_visual(grids)
        g_lang = self.encode_language(tokens, drop_rng=drop_rng)
        vl = self.encode_visuolinguistic(g_vis, g_lang, lang_mask, drop_rng=drop_rng)
        ctx, ctx_valid = self.encode_fixation_context(histories)
        f_pack = self.decode_pack(ctx, ctx_valid, vl, drop_rng=drop_rng)
        pred = self.predict_fixations(f_pack, mode=mode, sample_rng=sample_rng,
                                      drop_rng=drop_rng)
        return vl, pred
