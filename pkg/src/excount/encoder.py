"""Joint image+exemplar tokenizer and transformer encoder.

The image and every exemplar patch are cut into p x p tokens and projected by
one shared linear map. Exemplar tokens carry their scale-embedding map as a
fourth input channel; image tokens feed zeros through the same channel. The
joint sequence (image tokens first) runs through pre-norm self-attention
blocks, which makes every layer simultaneously self- and cross-attention:
the score matrix of the last block splits into four quadrants

    [ image->image   image->exemplar ]
    [ exemplar->image exemplar->exemplar ]

and the exemplar->image quadrant, row-softmaxed, head- and exemplar-averaged
and rescaled by the magnitude embedding, becomes a per-token match map that is
appended to the image features as one extra channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .geometry import ExemplarSet
from .tensor import Tensor


@dataclass
class TokenSequence:
    """Projected joint token sequence: image tokens first, then exemplars."""

    tokens: Tensor  # [(n_q + n_e), dim]
    n_q: int
    n_e: int
    grid: tuple[int, int]  # image-token grid (rows, cols)

    def __post_init__(self):
        if self.grid[0] * self.grid[1] != self.n_q:
            raise ValueError(f"grid {self.grid} does not cover {self.n_q} image tokens")


@dataclass
class DecoupledAttention:
    """Quadrants of the last block's pre-softmax score matrix (head-averaged).

    ``match_map`` is only present when produced by a full encoder pass; the
    raw quadrant split is also usable standalone via ``decouple_attention``.
    """

    a_query: np.ndarray  # [n_q, n_q]
    a_class: np.ndarray  # [n_q, n_e]
    a_match: np.ndarray  # [n_e, n_q]
    a_exp: np.ndarray  # [n_e, n_e]
    match_map: Optional[np.ndarray] = None  # [grid_h, grid_w]

    def reassemble(self) -> np.ndarray:
        top = np.concatenate([self.a_query, self.a_class], axis=1)
        bottom = np.concatenate([self.a_match, self.a_exp], axis=1)
        return np.concatenate([top, bottom], axis=0)


def decouple_attention(scores: np.ndarray, n_q: int, n_e: int) -> DecoupledAttention:
    """Slice an (n_q + n_e) square score matrix into its four role quadrants."""
    n = n_q + n_e
    if scores.shape != (n, n):
        raise ValueError(f"decouple_attention: scores {scores.shape} != ({n}, {n})")
    return DecoupledAttention(
        a_query=scores[:n_q, :n_q].copy(),
        a_class=scores[:n_q, n_q:].copy(),
        a_match=scores[n_q:, :n_q].copy(),
        a_exp=scores[n_q:, n_q:].copy(),
    )


def sincos_position_embedding(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """Fixed 2-d sine/cosine position table, [grid_h * grid_w, dim], row-major.

    Half the channels encode the row index, half the column index, each with
    the usual geometric frequency ladder. Deterministic and resolution-flexible.
    """
    if dim % 4:
        raise ValueError(f"position embedding needs dim divisible by 4, got {dim}")
    half = dim // 2

    def axis_embed(pos: np.ndarray) -> np.ndarray:
        freqs = 1.0 / (10000.0 ** (np.arange(half // 2, dtype=np.float64) / (half // 2)))
        args = pos[:, None] * freqs[None, :]
        return np.concatenate([np.sin(args), np.cos(args)], axis=1)

    rows = np.repeat(np.arange(grid_h, dtype=np.float64), grid_w)
    cols = np.tile(np.arange(grid_w, dtype=np.float64), grid_h)
    return np.concatenate([axis_embed(rows), axis_embed(cols)], axis=1)


def _patchify(raster: np.ndarray, p: int) -> np.ndarray:
    """[H, W, C] -> [H/p * W/p, p*p*C] row-major token matrix."""
    h, w, c = raster.shape
    gh, gw = h // p, w // p
    x = raster.reshape(gh, p, gw, p, c)
    return x.transpose(0, 2, 1, 3, 4).reshape(gh * gw, p * p * c)


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Encoder:
    """Tokenizer + pre-norm transformer stack with decoupled-attention taps.

    After ``encode`` the instance keeps the last block's per-head queries,
    keys and raw scores (``last_q``, ``last_k``, ``last_scores_mean``) for
    verification against an independent recomputation. Inference with frozen
    weights is safe under concurrent callers only if those taps are ignored.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        d = config.dim
        p = config.patch_size
        in_dim = 4 * p * p  # RGB + scale channel
        self.params: dict[str, Tensor] = {}

        def param(name: str, value: np.ndarray) -> Tensor:
            t = Tensor(value, requires_grad=True)
            self.params[name] = t
            return t

        self.w_patch = param("patch_proj.weight", _uniform(rng, (in_dim, d), in_dim))
        self.b_patch = param("patch_proj.bias", np.zeros(d))
        self.segment = param("segment.weight", _uniform(rng, (2, d), d))
        self.blocks = []
        for i in range(config.depth):
            blk = {
                "ln1_g": param(f"blocks.{i}.ln1.gamma", np.ones(d)),
                "ln1_b": param(f"blocks.{i}.ln1.beta", np.zeros(d)),
                "w_qkv": param(f"blocks.{i}.attn.qkv.weight", _uniform(rng, (d, 3 * d), d)),
                "b_qkv": param(f"blocks.{i}.attn.qkv.bias", np.zeros(3 * d)),
                "w_out": param(f"blocks.{i}.attn.out.weight", _uniform(rng, (d, d), d)),
                "b_out": param(f"blocks.{i}.attn.out.bias", np.zeros(d)),
                "ln2_g": param(f"blocks.{i}.ln2.gamma", np.ones(d)),
                "ln2_b": param(f"blocks.{i}.ln2.beta", np.zeros(d)),
                "w_fc1": param(f"blocks.{i}.mlp.fc1.weight", _uniform(rng, (d, config.mlp_ratio * d), d)),
                "b_fc1": param(f"blocks.{i}.mlp.fc1.bias", np.zeros(config.mlp_ratio * d)),
                "w_fc2": param(
                    f"blocks.{i}.mlp.fc2.weight",
                    _uniform(rng, (config.mlp_ratio * d, d), config.mlp_ratio * d),
                ),
                "b_fc2": param(f"blocks.{i}.mlp.fc2.bias", np.zeros(d)),
            }
            self.blocks.append(blk)
        # verification taps filled by encode()
        self.last_q: Optional[np.ndarray] = None
        self.last_k: Optional[np.ndarray] = None
        self.last_scores_mean: Optional[np.ndarray] = None

    # -- tokenization --------------------------------------------------------

    def tokenize_joint(self, image: np.ndarray, exemplars: ExemplarSet) -> TokenSequence:
        """Project image and exemplar patches into one joint token sequence."""
        cfg = self.config
        p = cfg.patch_size
        h, w = image.shape[:2]
        if h % p or w % p:
            raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
        if exemplars.patch_hw != cfg.exemplar_size:
            raise ValueError(
                f"exemplar patches are {exemplars.patch_hw} px, config expects {cfg.exemplar_size}"
            )
        grid = (h // p, w // p)
        n_q = grid[0] * grid[1]

        img4 = np.concatenate([image, np.zeros((h, w, 1))], axis=2)
        rows = [_patchify(img4, p)]
        # Scale channel is divided by (h + w) of the resize target so its
        # magnitude stays comparable to the [0, 1] colour channels.
        e = cfg.exemplar_size
        for patch, smap in zip(exemplars.patches, exemplars.scale_maps):
            ex4 = np.concatenate([patch, (smap / (2.0 * e))[:, :, None]], axis=2)
            rows.append(_patchify(ex4, p))
        x = Tensor(np.concatenate(rows, axis=0))
        tokens = T.add(T.matmul(x, self.w_patch), self.b_patch)

        eg = cfg.exemplar_tokens_per_side
        n_e = len(exemplars) * eg * eg
        pos = np.concatenate(
            [sincos_position_embedding(grid[0], grid[1], cfg.dim)]
            + [sincos_position_embedding(eg, eg, cfg.dim)] * len(exemplars),
            axis=0,
        )
        seg_onehot = np.zeros((n_q + n_e, 2))
        seg_onehot[:n_q, 0] = 1.0
        seg_onehot[n_q:, 1] = 1.0
        tokens = T.add(tokens, Tensor(pos))
        tokens = T.add(tokens, T.matmul(Tensor(seg_onehot), self.segment))
        return TokenSequence(tokens=tokens, n_q=n_q, n_e=n_e, grid=grid)

    # -- transformer stack ----------------------------------------------------

    def _attention(self, x: Tensor, blk: dict, capture: bool):
        cfg = self.config
        n = x.shape[0]
        dh = cfg.dim // cfg.heads
        qkv = T.add(T.matmul(x, blk["w_qkv"]), blk["b_qkv"])  # [n, 3d]
        qkv = T.reshape(qkv, (n, 3, cfg.heads, dh))
        qkv = T.transpose(qkv, (1, 2, 0, 3))  # [3, heads, n, dh]
        q = T.reshape(T.narrow(qkv, 0, 0, 1), (cfg.heads, n, dh))
        k = T.reshape(T.narrow(qkv, 0, 1, 1), (cfg.heads, n, dh))
        v = T.reshape(T.narrow(qkv, 0, 2, 1), (cfg.heads, n, dh))
        scores = T.matmul(q, T.transpose(k, (0, 2, 1)))  # raw q.k^T, [heads, n, n]
        attn = T.softmax_rows(scores, temperature=np.sqrt(dh))
        ctx = T.matmul(attn, v)  # [heads, n, dh]
        ctx = T.reshape(T.transpose(ctx, (1, 0, 2)), (n, cfg.dim))
        out = T.add(T.matmul(ctx, blk["w_out"]), blk["b_out"])
        if capture:
            self.last_q = q.data.copy()
            self.last_k = k.data.copy()
        return out, scores

    def encode(self, seq: TokenSequence, magnitude: float):
        """Run the block stack; return enhanced image features and attention.

        Returns ``(features, attn)`` where ``features`` is a Tensor of shape
        [n_q, dim + 1] (the extra channel is the match map) and ``attn`` holds
        the head-averaged score quadrants plus the aggregated match map.
        """
        cfg = self.config
        if cfg.depth < 1:
            raise ValueError("encoder depth must be >= 1")
        x = seq.tokens
        scores = None
        for i, blk in enumerate(self.blocks):
            last = i == cfg.depth - 1
            h1 = T.layernorm(x, blk["ln1_g"], blk["ln1_b"])
            att, scores = self._attention(h1, blk, capture=last)
            x = T.add(x, att)
            h2 = T.layernorm(x, blk["ln2_g"], blk["ln2_b"])
            m = T.matmul(h2, blk["w_fc1"])
            m = T.gelu(T.add(m, blk["b_fc1"]))
            m = T.add(T.matmul(m, blk["w_fc2"]), blk["b_fc2"])
            x = T.add(x, m)
            if not np.isfinite(x.data).all():
                raise FloatingPointError(f"non-finite activations after block {i}")

        n_q, n_e = seq.n_q, seq.n_e
        dh = cfg.dim // cfg.heads
        # head-averaged raw scores -> quadrants (analysis view, no gradient)
        scores_mean = scores.data.mean(axis=0)
        self.last_scores_mean = scores_mean.copy()
        attn_info = decouple_attention(scores_mean, n_q, n_e)

        # differentiable match map: softmax over exemplar->image rows,
        # averaged over heads and exemplar tokens, rescaled by the magnitude
        match_rows = T.narrow(scores, 1, n_q, n_e)  # [heads, n_e, n]
        match_rows = T.narrow(match_rows, 2, 0, n_q)  # [heads, n_e, n_q]
        match = T.softmax_rows(match_rows, temperature=np.sqrt(dh))
        match = T.tmean(T.tmean(match, axis=0), axis=0)  # [n_q]
        match = T.scale(match, magnitude)
        attn_info.match_map = match.data.reshape(seq.grid).copy()

        img_tokens = T.narrow(x, 0, 0, n_q)
        features = T.concat([img_tokens, T.reshape(match, (n_q, 1))], axis=1)
        return features, attn_info
