"""Image encoder, expression encoder, feature fusion and expression decoder.

All four blocks keep their parameters in one flat ``name -> Tensor`` dict
with prefixes ``img.``, ``expr.``, ``fuse.`` and ``dec.``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..expr import PAD, VOCAB_SIZE
from . import layers as L
from .tensor import Tensor, as_tensor, concat, embedding, mean_pool, no_grad, reshape, softmax, stack, transpose


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 4
    embed_dim: int = 16
    stages: int = 2
    blocks_per_stage: int = 2
    window: int = 4
    heads: int = 4
    out_dim: int = 128
    in_chans: int = 4
    mlp_ratio: int = 2
    per_band_encoders: bool = False

    def __post_init__(self):
        for name in ("patch_size", "embed_dim", "stages", "window", "heads", "out_dim", "in_chans", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for level in range(self.stages):
            if self.stage_width(level) % self.heads:
                raise ValueError(f"stage {level + 1} width {self.stage_width(level)} not divisible by heads")

    def stage_width(self, level: int) -> int:
        """Channel width of 0-based stage ``level``."""
        return self.embed_dim * 2 ** level

    def stage_shapes(self, H: int, W: int) -> list[tuple[int, int, int]]:
        """(H_l, W_l, C_l) per stage; raises if the input does not tile."""
        p = self.patch_size
        div = p * 2 ** (self.stages - 1)
        if H % div or W % div:
            raise ValueError(f"input {H}x{W} not divisible by patch_size * 2^(stages-1) = {div}")
        shapes = []
        for level in range(self.stages):
            h, w = H // p // 2 ** level, W // p // 2 ** level
            if h % self.window or w % self.window:
                raise ValueError(f"window {self.window} does not divide stage {level + 1} resolution {h}x{w}")
            shapes.append((h, w, self.stage_width(level)))
        return shapes


@dataclass(frozen=True)
class SeqModelConfig:
    layers: int = 2
    heads: int = 4
    hidden: int = 64
    vocab: int = VOCAB_SIZE
    max_len: int = 64
    ffn_ratio: int = 2
    fusion_heads: int = 4

    def __post_init__(self):
        if self.hidden % self.heads or self.hidden % self.fusion_heads:
            raise ValueError("heads must divide hidden")
        if self.vocab != VOCAB_SIZE:
            raise ValueError(f"vocab is fixed at {VOCAB_SIZE}")


# -- image encoder --------------------------------------------------------------


def init_image_encoder(cfg: EncoderConfig, rng, prefix: str = "img", in_chans: int | None = None) -> L.Params:
    params: L.Params = {}
    c_in = cfg.in_chans if in_chans is None else in_chans
    p = cfg.patch_size
    L.init_linear(params, f"{prefix}.patch", p * p * c_in, cfg.embed_dim, rng)
    L.init_norm(params, f"{prefix}.patch_norm", cfg.embed_dim)
    for level in range(cfg.stages):
        width = cfg.stage_width(level)
        if level > 0:
            L.init_norm(params, f"{prefix}.s{level}.merge_norm", 2 * width)
            L.init_linear(params, f"{prefix}.s{level}.merge", 2 * width, width, rng, bias=False)
        for blk in range(cfg.blocks_per_stage):
            name = f"{prefix}.s{level}.b{blk}"
            L.init_norm(params, f"{name}.norm1", width)
            L.init_attention(params, f"{name}.attn", width, rng)
            L.init_norm(params, f"{name}.norm2", width)
            L.init_ffn(params, f"{name}.mlp", width, cfg.mlp_ratio * width, rng)
    last = cfg.stage_width(cfg.stages - 1)
    L.init_norm(params, f"{prefix}.head_norm", last)
    L.init_linear(params, f"{prefix}.head", last, cfg.out_dim, rng)
    return params


def _to_windows(x: Tensor, ws: int) -> Tensor:
    B, h, w, C = x.shape
    x = reshape(x, (B, h // ws, ws, w // ws, ws, C))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (B * (h // ws) * (w // ws), ws * ws, C))


def _from_windows(x: Tensor, B: int, h: int, w: int, ws: int) -> Tensor:
    C = x.shape[-1]
    x = reshape(x, (B, h // ws, w // ws, ws, ws, C))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (B, h, w, C))


def _patchify(x: Tensor, p: int) -> Tensor:
    B, H, W, C = x.shape
    x = reshape(x, (B, H // p, p, W // p, p, C))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (B, H // p, W // p, p * p * C))


def _merge(x: Tensor) -> Tensor:
    """Concatenate each 2x2 neighbourhood: (B, h, w, C) -> (B, h/2, w/2, 4C)."""
    B, h, w, C = x.shape
    x = reshape(x, (B, h // 2, 2, w // 2, 2, C))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (B, h // 2, w // 2, 4 * C))


def _image_batch(images) -> Tensor:
    """Accept a Raster, a list of Rasters, a (B, H, W, C) array or a Tensor."""
    if isinstance(images, Tensor):
        return images
    if hasattr(images, "hwc"):
        images = [images]
    if isinstance(images, (list, tuple)):
        return Tensor(np.stack([np.asarray(r.hwc(), dtype=np.float64) for r in images]))
    arr = np.asarray(images, dtype=np.float64)
    return Tensor(arr[None] if arr.ndim == 3 else arr)


def _single_encoder(x: Tensor, cfg: EncoderConfig, params: L.Params, prefix: str):
    B, H, W, _ = x.shape
    shapes = cfg.stage_shapes(H, W)
    x = L.norm(params, f"{prefix}.patch_norm", L.linear(params, f"{prefix}.patch", _patchify(x, cfg.patch_size)))
    pyramid = []
    for level, (h, w, width) in enumerate(shapes):
        if level > 0:
            x = L.linear(params, f"{prefix}.s{level}.merge", L.norm(params, f"{prefix}.s{level}.merge_norm", _merge(x)))
        for blk in range(cfg.blocks_per_stage):
            name = f"{prefix}.s{level}.b{blk}"
            win = _to_windows(L.norm(params, f"{name}.norm1", x), cfg.window)
            att = L.multi_head_attention(params, f"{name}.attn", win, win, win, cfg.heads)
            x = x + _from_windows(att, B, h, w, cfg.window)
            x = x + L.ffn(params, f"{name}.mlp", L.norm(params, f"{name}.norm2", x))
        pyramid.append(x)
    pooled = mean_pool(reshape(L.norm(params, f"{prefix}.head_norm", x), (B, -1, x.shape[-1])), axis=1)
    return pyramid, L.linear(params, f"{prefix}.head", pooled)


def image_encoder_forward(images, cfg: EncoderConfig, params: L.Params):
    """Return (pyramid, F_img).

    ``pyramid[l]`` is (B, H_l, W_l, C_l) with resolution halving and width
    doubling per stage; ``F_img`` is (B, out_dim).
    """
    x = _image_batch(images)
    if x.ndim != 4:
        raise ValueError(f"expected (B, H, W, C) input, got {x.shape}")
    if not cfg.per_band_encoders:
        if x.shape[-1] != cfg.in_chans:
            raise ValueError(f"encoder expects {cfg.in_chans} bands, got {x.shape[-1]}")
        return _single_encoder(x, cfg, params, "img")
    # one encoder per band, fused by attention in band-index order
    n_bands = x.shape[-1]
    pyramids, feats = [], []
    for b in range(n_bands):
        pyr, f = _single_encoder(x[..., b:b + 1], cfg, params, f"img.band{b}")
        pyramids.append(pyr)
        feats.append(f)
    tokens = stack(feats, axis=1)  # (B, nb, d)
    query = mean_pool(tokens, axis=1)
    query = reshape(query, (query.shape[0], 1, query.shape[1]))
    fused = query + L.multi_head_attention(params, "img.bands", query, tokens, tokens, cfg.heads)
    pyramid = [concat([p[level] for p in pyramids], axis=-1) for level in range(cfg.stages)]
    return pyramid, reshape(fused, (fused.shape[0], fused.shape[2]))


def init_image_params(cfg: EncoderConfig, rng) -> L.Params:
    if not cfg.per_band_encoders:
        return init_image_encoder(cfg, rng)
    params: L.Params = {}
    for b in range(cfg.in_chans):
        params.update(init_image_encoder(cfg, rng, prefix=f"img.band{b}", in_chans=1))
    L.init_attention(params, "img.bands", cfg.out_dim, rng)
    return params


# -- sequence models --------------------------------------------------------------


def _init_seq_stack(params, prefix, cfg: SeqModelConfig, rng, cross: bool):
    L.init_embedding(params, f"{prefix}.tok", cfg.vocab, cfg.hidden, rng)
    L.init_embedding(params, f"{prefix}.pos", cfg.max_len, cfg.hidden, rng)
    for i in range(cfg.layers):
        name = f"{prefix}.l{i}"
        L.init_norm(params, f"{name}.norm1", cfg.hidden)
        L.init_attention(params, f"{name}.self", cfg.hidden, rng)
        if cross:
            L.init_norm(params, f"{name}.norm_x", cfg.hidden)
            L.init_attention(params, f"{name}.cross", cfg.hidden, rng)
        L.init_norm(params, f"{name}.norm2", cfg.hidden)
        L.init_ffn(params, f"{name}.ffn", cfg.hidden, cfg.ffn_ratio * cfg.hidden, rng)
    L.init_norm(params, f"{prefix}.final_norm", cfg.hidden)


def _embed(params, prefix, tokens: np.ndarray, cfg: SeqModelConfig) -> Tensor:
    B, n = tokens.shape
    if n > cfg.max_len:
        raise ValueError(f"sequence length {n} exceeds max_len {cfg.max_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise ValueError("token outside vocabulary")
    pos = params[f"{prefix}.pos"][:n]
    return embedding(params[f"{prefix}.tok"], tokens) + pos


def _as_token_batch(tokens) -> np.ndarray:
    if isinstance(tokens, np.ndarray):
        arr = tokens
    else:
        seqs = [tuple(t) for t in tokens]
        if seqs and isinstance(seqs[0], (int, np.integer)):
            seqs = [tuple(tokens)]
        width = max((len(s) for s in seqs), default=0)
        arr = np.full((len(seqs), width), PAD, dtype=np.int64)
        for i, s in enumerate(seqs):
            arr[i, :len(s)] = s
    arr = np.asarray(arr, dtype=np.int64)
    return arr[None] if arr.ndim == 1 else arr


def expression_encoder_forward(tokens, cfg: SeqModelConfig, params: L.Params) -> Tensor:
    """Pooled (B, hidden) representation; PAD positions are masked out of attention and pooling."""
    tokens = _as_token_batch(tokens)
    keep = tokens != PAD
    x = _embed(params, "expr", tokens, cfg)
    mask = keep[:, None, None, :]
    for i in range(cfg.layers):
        name = f"expr.l{i}"
        h = L.norm(params, f"{name}.norm1", x)
        x = x + L.multi_head_attention(params, f"{name}.self", h, h, h, cfg.heads, mask)
        x = x + L.ffn(params, f"{name}.ffn", L.norm(params, f"{name}.norm2", x))
    x = L.norm(params, "expr.final_norm", x)
    return mean_pool(x, axis=1, mask=keep)


def init_fusion(params: L.Params, enc: EncoderConfig, cfg: SeqModelConfig, rng):
    L.init_linear(params, "fuse.img", enc.out_dim, cfg.hidden, rng)
    L.init_attention(params, "fuse.attn", cfg.hidden, rng)
    L.init_ffn(params, "fuse.ffn", cfg.hidden, cfg.ffn_ratio * cfg.hidden, rng)


def feature_fusion(F_img, F_exp, params: L.Params, cfg: SeqModelConfig) -> Tensor:
    """Expression features attend over the (image, expression) pair, then a two-layer FFN."""
    F_img, F_exp = as_tensor(F_img), as_tensor(F_exp)
    if F_img.ndim != 2 or F_exp.ndim != 2 or F_img.shape[0] != F_exp.shape[0]:
        raise ValueError(f"fusion expects (B, d) inputs, got {F_img.shape} and {F_exp.shape}")
    if F_exp.shape[1] != cfg.hidden:
        raise ValueError(f"F_exp width {F_exp.shape[1]} != hidden {cfg.hidden}")
    B = F_img.shape[0]
    img_tok = reshape(L.linear(params, "fuse.img", F_img), (B, 1, cfg.hidden))
    exp_tok = reshape(F_exp, (B, 1, cfg.hidden))
    pair = concat([img_tok, exp_tok], axis=1)
    x = exp_tok + L.multi_head_attention(params, "fuse.attn", exp_tok, pair, pair, cfg.fusion_heads)
    x = x + L.ffn(params, "fuse.ffn", x)
    return reshape(x, (B, cfg.hidden))


def decoder_logits(prefix, memory, cfg: SeqModelConfig, params: L.Params) -> Tensor:
    """Next-token logits (B, L, V) for each prefix position.

    ``memory`` is (B, M, hidden) or (B, hidden) for a single fused vector.
    """
    tokens = _as_token_batch(prefix)
    memory = as_tensor(memory)
    if memory.ndim == 2:
        memory = reshape(memory, (memory.shape[0], 1, memory.shape[1]))
    B, n = tokens.shape
    if memory.shape[0] != B:
        raise ValueError(f"memory batch {memory.shape[0]} != prefix batch {B}")
    keep = tokens != PAD
    self_mask = L.causal_mask(n)[None, None] & keep[:, None, None, :]
    # a PAD query row would otherwise see no key at all
    self_mask = self_mask | np.eye(n, dtype=bool)[None, None]
    x = _embed(params, "dec", tokens, cfg)
    for i in range(cfg.layers):
        name = f"dec.l{i}"
        h = L.norm(params, f"{name}.norm1", x)
        x = x + L.multi_head_attention(params, f"{name}.self", h, h, h, cfg.heads, self_mask)
        h = L.norm(params, f"{name}.norm_x", x)
        x = x + L.multi_head_attention(params, f"{name}.cross", h, memory, memory, cfg.heads)
        x = x + L.ffn(params, f"{name}.ffn", L.norm(params, f"{name}.norm2", x))
    x = L.norm(params, "dec.final_norm", x)
    return L.linear(params, "dec.out", x)


def decoder_probs(prefix, memory, cfg: SeqModelConfig, params: L.Params) -> Tensor:
    return softmax(decoder_logits(prefix, memory, cfg, params), axis=-1)


@dataclass
class SatFormulaModel:
    """Parameter container tying the four blocks together."""

    enc_cfg: EncoderConfig
    seq_cfg: SeqModelConfig
    params: L.Params

    @classmethod
    def create(cls, enc_cfg: EncoderConfig, seq_cfg: SeqModelConfig, seed: int) -> "SatFormulaModel":
        rng = np.random.default_rng(seed)
        params = init_image_params(enc_cfg, rng)
        _init_seq_stack(params, "expr", seq_cfg, rng, cross=False)
        init_fusion(params, enc_cfg, seq_cfg, rng)
        _init_seq_stack(params, "dec", seq_cfg, rng, cross=True)
        L.init_linear(params, "dec.out", seq_cfg.hidden, seq_cfg.vocab, rng)
        return cls(enc_cfg, seq_cfg, params)

    def group(self, prefix: str) -> L.Params:
        return {k: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def encode_image(self, images):
        return image_encoder_forward(images, self.enc_cfg, self.params)

    def encode_expr(self, tokens) -> Tensor:
        return expression_encoder_forward(tokens, self.seq_cfg, self.params)

    def fuse(self, F_img, F_exp) -> Tensor:
        return feature_fusion(F_img, F_exp, self.params, self.seq_cfg)

    def decoder_forward(self, prefix, F_exp, F_img) -> Tensor:
        """Next-token distributions (B, L, V) given expression and image features."""
        return decoder_probs(prefix, self.fuse(F_img, F_exp), self.seq_cfg, self.params)

    def next_token_log_probs(self, prefixes, F_fused) -> np.ndarray:
        """(B, V) log-probabilities for the token after each prefix (no graph)."""
        tokens = _as_token_batch(prefixes)
        with no_grad():
            fused = as_tensor(F_fused)
            if fused.ndim == 1:
                fused = Tensor(np.broadcast_to(fused.data, (tokens.shape[0], fused.shape[0])))
            logits = decoder_logits(tokens, fused, self.seq_cfg, self.params).data
        lengths = (tokens != PAD).sum(axis=1)
        last = logits[np.arange(tokens.shape[0]), lengths - 1]
        m = last.max(axis=-1, keepdims=True)
        return last - m - np.log(np.exp(last - m).sum(axis=-1, keepdims=True))

    def config_dict(self) -> dict:
        return {"encoder": asdict(self.enc_cfg), "seq": asdict(self.seq_cfg)}
