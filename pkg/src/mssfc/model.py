"""Full network assembly: siamese encoder, per-stage differential fusion,
query decoder and the mask head.

Swap symmetry is a hard contract here: feeding (img_b, img_a) must swap the
two extraction masks bit-exactly. Three constructions guarantee it:
the building-extraction query is one shared parameter used for both
temporal slots, the decoder's temporal token block is the elementwise sum
of both projected streams (IEEE addition commutes), and the differential
fusion conv is symmetric in its two gated inputs (see blocks.MdfmBlock).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .blocks import DmfeBlock, MdfmBlock
from .layers import AttentionLayer, Conv2dLayer, LayerNorm, LinearLayer
from .tensor import (ParamStore, Rng, ShapeError, Tensor, channel_dot,
                     concat_h, expand, flatten_hw, scale, sigmoid, split_h,
                     upsample)


@dataclass
class ModelConfig:
    in_channels: int = 3
    base_channels: int = 16
    stage_channels: tuple = (16, 32, 64, 128)
    decoder_dim: int = 128
    decoder_layers: int = 4
    heads: int = 4
    image_size: int = 64
    query_pool: str = "avg"
    key_pool: str = "max"
    vbar_source: str = "proj"
    lambda_t1: float = 1.0
    lambda_t2: float = 1.0
    lambda_cd: float = 2.0
    lr: float = 3e-4
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.99
    batch: int = 8
    epochs: int = 10
    seed: int = 42

    @property
    def stages(self) -> int:
        return len(self.stage_channels)

    def validate(self):
        for c in self.stage_channels:
            if c % 4:
                raise ShapeError(f"stage channels must be divisible by 4, got {c}")
        if self.decoder_dim % self.heads:
            raise ShapeError("decoder_dim must be divisible by heads")
        if self.decoder_layers != self.stages:
            raise ShapeError("decoder layer i cross-attends stage i: "
                             "decoder_layers must equal the stage count")
        div = 2 ** (self.stages + 1)
        if self.image_size < 32 or self.image_size % div:
            raise ShapeError(f"image_size must be >= 32 and divisible by {div}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "stage_channels" in d:
            d["stage_channels"] = tuple(d["stage_channels"])
        return cls(**d).validate()


@dataclass
class EncoderPyramids:
    f1: list
    f2: list
    fdiff: list


@dataclass
class MaskTriple:
    m1: Tensor
    m2: Tensor
    m_cd: Tensor


def sinusoidal_pos2d(d: int, h: int, w: int, dtype=np.float32) -> np.ndarray:
    """2-D sinusoidal position table, shape (1, d, h*w, 1)."""
    if d % 4:
        raise ShapeError(f"position encoding needs dim divisible by 4, got {d}")
    quarter = d // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.empty((d, h, w))
    out[0::4] = np.sin(freqs[:, None, None] * ys)
    out[1::4] = np.cos(freqs[:, None, None] * ys)
    out[2::4] = np.sin(freqs[:, None, None] * xs)
    out[3::4] = np.cos(freqs[:, None, None] * xs)
    return out.reshape(1, d, h * w, 1).astype(dtype)


class _DecoderLayer:
    """Pre-normalized residual block: self-attn, cross-attn, projection."""

    def __init__(self, store, name, d, heads, rng):
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        self.self_attn = AttentionLayer(store, f"{name}.self_attn", d, heads, rng)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)
        self.cross_attn = AttentionLayer(store, f"{name}.cross_attn", d, heads, rng)
        self.ln3 = LayerNorm(store, f"{name}.ln3", d)
        self.mlp_proj = LinearLayer(store, f"{name}.mlp_proj", d, d, rng)

    def __call__(self, e, tokens):
        e = e + self.self_attn(self.ln1(e))
        e = e + self.cross_attn(self.ln2(e), tokens)
        return e + self.mlp_proj(self.ln3(e))


class Model:
    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.store = ParamStore(dtype)
        rng = Rng(cfg.seed)
        d = cfg.decoder_dim

        self.stem = Conv2dLayer(self.store, "enc.stem", cfg.in_channels,
                                cfg.base_channels, 3, rng, stride=2)
        self.stage_convs = []
        self.dmfe = []
        self.mdfm = []
        prev = cfg.base_channels
        for s, c in enumerate(cfg.stage_channels):
            self.stage_convs.append(Conv2dLayer(
                self.store, f"enc.stage{s}.conv", prev, c, 3, rng,
                stride=1 if s == 0 else 2))
            self.dmfe.append(DmfeBlock(self.store, f"enc.stage{s}.dmfe", c, rng,
                                       query_pool=cfg.query_pool,
                                       key_pool=cfg.key_pool,
                                       vbar_source=cfg.vbar_source))
            self.mdfm.append(MdfmBlock(self.store, f"enc.stage{s}.mdfm", c, rng))
            prev = c

        self.token_proj = [Conv2dLayer(self.store, f"dec.token_proj{s}", c, d, 1, rng)
                           for s, c in enumerate(cfg.stage_channels)]
        self.stream_emb = self.store.create("dec.stream_emb",
                                            rng.normal(0.0, 0.02, (1, d, 3, 1)))
        self.query_bx = self.store.create("dec.query_bx",
                                          rng.normal(0.0, 0.02, (1, d, 1, 1)))
        self.query_cd = self.store.create("dec.query_cd",
                                          rng.normal(0.0, 0.02, (1, d, 1, 1)))
        self.layers = [_DecoderLayer(self.store, f"dec.layer{i}", d, cfg.heads, rng)
                       for i in range(cfg.decoder_layers)]
        self.final_ln = LayerNorm(self.store, "dec.final_ln", d)
        self.e_proj = LinearLayer(self.store, "dec.e_proj", d, d, rng)
        self.pixel_proj = [Conv2dLayer(self.store, f"head.pixel_proj{s}", c, d, 1, rng)
                           for s, c in enumerate(cfg.stage_channels)]
        self._pos_cache = {}

    # -- encoder -----------------------------------------------------------

    def _features(self, img: Tensor):
        x = self.stem(img)
        feats = []
        for conv, dmfe in zip(self.stage_convs, self.dmfe):
            x = dmfe(conv(x))
            feats.append(x)
        return feats

    def encode(self, img_t1: Tensor, img_t2: Tensor) -> EncoderPyramids:
        n, c, h, w = img_t1.shape
        if img_t2.shape != img_t1.shape:
            raise ShapeError(f"temporal images differ: {img_t1.shape} vs {img_t2.shape}")
        div = 2 ** (self.cfg.stages + 1)
        if h % div or w % div:
            raise ShapeError(f"input {h}x{w} must be divisible by {div}")
        f1 = self._features(img_t1)
        f2 = self._features(img_t2)
        fdiff = [m(a, b) for m, a, b in zip(self.mdfm, f1, f2)]
        return EncoderPyramids(f1, f2, fdiff)

    # -- decoder -----------------------------------------------------------

    def _pos(self, h, w) -> Tensor:
        key = (h, w)
        if key not in self._pos_cache:
            self._pos_cache[key] = Tensor(
                sinusoidal_pos2d(self.cfg.decoder_dim, h, w, self.store.dtype))
        return self._pos_cache[key]

    def tokenize_stage(self, pyr: EncoderPyramids, s: int) -> Tensor:
        proj = self.token_proj[s]
        n, _, h, w = pyr.f1[s].shape
        d = self.cfg.decoder_dim
        length = h * w
        t1 = flatten_hw(proj(pyr.f1[s]))
        t2 = flatten_hw(proj(pyr.f2[s]))
        td = flatten_hw(proj(pyr.fdiff[s]))
        emb1, emb2, embd = split_h(self.stream_emb.tensor, [1, 1, 1])
        pos = self._pos(h, w)
        shape = (n, d, length, 1)
        temporal = (t1 + t2) + expand(pos + expand(emb1 + emb2, pos.shape), shape)
        diff = td + expand(pos + expand(embd, pos.shape), shape)
        return concat_h([temporal, diff])

    def decode(self, pyr: EncoderPyramids):
        n = pyr.f1[0].shape[0]
        d = self.cfg.decoder_dim
        q_bx = expand(self.query_bx.tensor, (n, d, 1, 1))
        q_cd = expand(self.query_cd.tensor, (n, d, 1, 1))
        e = concat_h([q_bx, q_bx, q_cd])
        for i, layer in enumerate(self.layers):
            e = layer(e, self.tokenize_stage(pyr, i))
        e1, e2, e_cd = split_h(self.e_proj(self.final_ln(e)), [1, 1, 1])
        return e1, e2, e_cd

    # -- segmentation head ---------------------------------------------------

    def _pixel_features(self, feats):
        acc = None
        for s, f in enumerate(feats):
            t = upsample(self.pixel_proj[s](f), 2 ** s, "bilinear")
            acc = t if acc is None else acc + t
        return acc

    def predict_masks(self, pyr: EncoderPyramids, e1, e2, e_cd):
        """Returns (MaskTriple, full-resolution logits triple)."""
        masks, logits = [], []
        inv_sqrt_d = 1.0 / float(np.sqrt(self.cfg.decoder_dim))
        for feats, e in ((pyr.f1, e1), (pyr.f2, e2), (pyr.fdiff, e_cd)):
            lh = scale(channel_dot(self._pixel_features(feats), e), inv_sqrt_d)
            masks.append(upsample(sigmoid(lh), 2, "bilinear"))
            logits.append(upsample(lh, 2, "bilinear"))
        return MaskTriple(*masks), tuple(logits)

    def forward(self, img_t1: Tensor, img_t2: Tensor):
        pyr = self.encode(img_t1, img_t2)
        e1, e2, e_cd = self.decode(pyr)
        masks, logits = self.predict_masks(pyr, e1, e2, e_cd)
        return masks, logits, pyr
