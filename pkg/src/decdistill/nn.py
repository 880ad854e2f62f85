"""Transformer encoder/decoder with exposed attention maps.

Plain post-norm DETR layout: positional embeddings are added to attention
queries and keys only, object queries are added to the decoder state before
every attention. All decoder query groups run through the decoder together;
a block-diagonal self-attention mask keeps groups from seeing each other.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import DiffArray, ParamStore
from .matching import Prediction

CLASS_PRIOR = 0.1


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 1
    n_dec_layers: int = 4
    n_queries: int = 12
    n_classes: int = 5
    grid_h: int = 8
    grid_w: int = 8
    c_in: int = 3
    patch_size: int = 2
    ffn_dim: int = 128
    # also add the sine embedding to the projected tokens so attention values carry position
    pos_in_tokens: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        for f in ("d_model", "n_heads", "n_dec_layers", "n_queries", "n_classes", "grid_h", "grid_w", "c_in",
                  "patch_size", "ffn_dim"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        if self.n_enc_layers < 0:
            raise ValueError("n_enc_layers must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def hw(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.c_in * self.patch_size**2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class EncoderOutput:
    tokens: DiffArray  # (B, HW, d)
    pos: np.ndarray  # (HW, d)


@dataclass
class AttentionRecord:
    self_attn: list[DiffArray]  # per layer (B, M, N_total, N_total)
    cross_attn: list[DiffArray]  # per layer (B, M, N_total, HW)


@dataclass
class DecoderOutputs:
    logits: list[DiffArray]  # per layer (B, N_total, K)
    probs: list[DiffArray]
    boxes: list[DiffArray]  # per layer (B, N_total, 4), sigmoid cx, cy, w, h
    attention: AttentionRecord
    group_slices: dict[str, slice]

    @property
    def n_layers(self) -> int:
        return len(self.logits)

    def group_probs(self, name: str) -> list[DiffArray]:
        s = self.group_slices[name]
        return [p[:, s] for p in self.probs]

    def group_boxes(self, name: str) -> list[DiffArray]:
        s = self.group_slices[name]
        return [b[:, s] for b in self.boxes]

    def group_self_attn(self, name: str) -> list[DiffArray]:
        s = self.group_slices[name]
        return [a[:, :, s, s] for a in self.attention.self_attn]

    def group_cross_attn(self, name: str) -> list[DiffArray]:
        s = self.group_slices[name]
        return [a[:, :, s] for a in self.attention.cross_attn]

    def predictions(self, name: str, b: int) -> list[Prediction]:
        """Per-layer numpy predictions of one group in scene `b`."""
        s = self.group_slices[name]
        return [Prediction(p.values[b, s], x.values[b, s]) for p, x in zip(self.probs, self.boxes)]


# -- parameters --------------------------------------------------------------


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _add_attn(ps: ParamStore, rng, prefix: str, d: int) -> None:
    for name in ("q", "k", "v", "o"):
        ps.add(f"{prefix}.w{name}", _xavier(rng, d, d))
        ps.add(f"{prefix}.b{name}", np.zeros(d))


def _add_norm(ps: ParamStore, prefix: str, d: int) -> None:
    ps.add(f"{prefix}.g", np.ones(d))
    ps.add(f"{prefix}.b", np.zeros(d))


def _add_ffn(ps: ParamStore, rng, prefix: str, d: int, hidden: int) -> None:
    ps.add(f"{prefix}.w1", _xavier(rng, d, hidden))
    ps.add(f"{prefix}.b1", np.zeros(hidden))
    ps.add(f"{prefix}.w2", _xavier(rng, hidden, d))
    ps.add(f"{prefix}.b2", np.zeros(d))


def query_param_name(group: int = 0) -> str:
    return "query_embed" if group == 0 else f"query_embed_g{group}"


def init_params(cfg: ModelConfig, seed: int = 0, n_query_groups: int = 1) -> ParamStore:
    """Xavier-uniform weights, zero biases, unit norms, N(0, 1) query embeddings."""
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    ps = ParamStore()
    ps.add("backbone.proj.w", _xavier(rng, cfg.patch_dim, d))
    ps.add("backbone.proj.b", np.zeros(d))
    for i in range(cfg.n_enc_layers):
        p = f"enc.{i}"
        _add_attn(ps, rng, f"{p}.self_attn", d)
        _add_norm(ps, f"{p}.norm1", d)
        _add_ffn(ps, rng, f"{p}.ffn", d, cfg.ffn_dim)
        _add_norm(ps, f"{p}.norm2", d)
    for i in range(cfg.n_dec_layers):
        p = f"dec.{i}"
        _add_attn(ps, rng, f"{p}.self_attn", d)
        _add_norm(ps, f"{p}.norm1", d)
        _add_attn(ps, rng, f"{p}.cross_attn", d)
        _add_norm(ps, f"{p}.norm2", d)
        _add_ffn(ps, rng, f"{p}.ffn", d, cfg.ffn_dim)
        _add_norm(ps, f"{p}.norm3", d)
    _add_norm(ps, "dec.norm", d)
    ps.add("head.cls.w", _xavier(rng, d, cfg.n_classes))
    ps.add("head.cls.b", np.full(cfg.n_classes, -math.log((1 - CLASS_PRIOR) / CLASS_PRIOR)))
    ps.add("head.box.w1", _xavier(rng, d, d))
    ps.add("head.box.b1", np.zeros(d))
    ps.add("head.box.w2", _xavier(rng, d, d))
    ps.add("head.box.b2", np.zeros(d))
    ps.add("head.box.w3", _xavier(rng, d, 4))
    ps.add("head.box.b3", np.zeros(4))
    for g in range(n_query_groups):
        ps.add(query_param_name(g), rng.standard_normal((cfg.n_queries, d)))
    return ps


def add_query_group(ps: ParamStore, cfg: ModelConfig, group: int, seed: int) -> None:
    """Create an extra learned query set if it does not exist yet."""
    name = query_param_name(group)
    if name not in ps:
        rng = np.random.default_rng([seed, group])
        ps.add(name, rng.standard_normal((cfg.n_queries, cfg.d_model)).astype(ps["query_embed"].dtype))


def _sub(ps: Mapping[str, DiffArray], prefix: str) -> dict[str, DiffArray]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in ps.items() if k.startswith(prefix + ".")}


# -- attention --------------------------------------------------------------------


def attention_weights(queries, keys, mask=None) -> DiffArray:
    """Row-wise softmax of scaled dot products; masked entries get weight 0."""
    queries, keys = ag.as_array(queries), ag.as_array(keys)
    if queries.shape[-1] != keys.shape[-1]:
        raise ValueError(f"query dim {queries.shape[-1]} != key dim {keys.shape[-1]}")
    scale = 1.0 / math.sqrt(queries.shape[-1])
    scores = ag.matmul(queries, ag.transpose(keys, _swap_last(keys.ndim))) * scale
    return ag.softmax(scores, axis=-1, mask=mask)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _split_heads(x: DiffArray, n_heads: int) -> DiffArray:
    *lead, n, d = x.shape
    x = ag.reshape(x, (*lead, n, n_heads, d // n_heads))
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return ag.transpose(x, axes)


def _merge_heads(x: DiffArray) -> DiffArray:
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    x = ag.transpose(x, axes)
    *lead, n, m, dh = x.shape
    return ag.reshape(x, (*lead, n, m * dh))


def multi_head_attention(x_q, x_k, x_v, proj: Mapping[str, DiffArray], n_heads: int, mask=None):
    """Returns (output (..., N_q, d), weights (..., M, N_q, N_kv))."""
    x_q, x_k, x_v = ag.as_array(x_q), ag.as_array(x_k), ag.as_array(x_v)
    d = proj["wq"].shape[0]
    if x_q.shape[-1] != d or x_k.shape[-1] != d or x_v.shape[-1] != d:
        raise ValueError("attention input dims do not match projection size")
    if d % n_heads:
        raise ValueError("model dim not divisible by head count")
    if x_k.shape[-2] != x_v.shape[-2]:
        raise ValueError("keys and values differ in length")
    q = _split_heads(x_q @ proj["wq"] + proj["bq"], n_heads)
    k = _split_heads(x_k @ proj["wk"] + proj["bk"], n_heads)
    v = _split_heads(x_v @ proj["wv"] + proj["bv"], n_heads)
    w = attention_weights(q, k, mask)
    out = _merge_heads(w @ v) @ proj["wo"] + proj["bo"]
    return out, w


def build_group_mask(*group_sizes: int) -> np.ndarray:
    """Block-diagonal boolean mask (True = may attend) over concatenated groups."""
    if any(n < 0 for n in group_sizes):
        raise ValueError("group sizes must be >= 0")
    total = sum(group_sizes)
    mask = np.zeros((total, total), dtype=bool)
    start = 0
    for n in group_sizes:
        mask[start : start + n, start : start + n] = True
        start += n
    return mask


# -- encoder ------------------------------------------------------------------------


def sine_position_embedding(h: int, w: int, d: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed 2-D sinusoidal embedding, (h*w, d); first half encodes y, second half x."""
    if d % 4:
        raise ValueError("d_model must be divisible by 4 for 2-D sine embeddings")
    n = d // 2
    y = (np.arange(h) + 1.0) / h * 2 * math.pi
    x = (np.arange(w) + 1.0) / w * 2 * math.pi
    dim_t = temperature ** (2 * (np.arange(n) // 2) / n)
    py = y[:, None] / dim_t
    px = x[:, None] / dim_t
    py = np.stack([np.sin(py[:, 0::2]), np.cos(py[:, 1::2])], axis=2).reshape(h, n)
    px = np.stack([np.sin(px[:, 0::2]), np.cos(px[:, 1::2])], axis=2).reshape(w, n)
    pos = np.concatenate([np.repeat(py[:, None, :], w, axis=1), np.repeat(px[None, :, :], h, axis=0)], axis=2)
    return pos.reshape(h * w, d)


def patchify(grids: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) scene grids -> (B, H/p * W/p, p*p*C) non-overlapping patch features."""
    grids = np.asarray(grids)
    if grids.ndim == 3:
        grids = grids[None]
    B, H, W, C = grids.shape
    if H % patch or W % patch:
        raise ValueError(f"grid {H}x{W} not divisible by patch size {patch}")
    x = grids.reshape(B, H // patch, patch, W // patch, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (H // patch) * (W // patch), patch * patch * C)


def _ffn(x, p):
    return ag.relu(x @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]


def _norm(x, p):
    return ag.layer_norm(x, p["g"], p["b"])


def _dtype(params: ParamStore):
    return params["backbone.proj.w"].dtype


def encoder_forward(features, params: ParamStore, cfg: ModelConfig, pos: np.ndarray | None = None) -> EncoderOutput:
    """Linear patch projection followed by `n_enc_layers` post-norm self-attention blocks."""
    dt = _dtype(params)
    feats = np.asarray(features.values if isinstance(features, DiffArray) else features, dtype=dt)
    if feats.ndim == 2:
        feats = feats[None]
    if feats.shape[1] != cfg.hw or feats.shape[2] != cfg.patch_dim:
        raise ValueError(f"expected (B, {cfg.hw}, {cfg.patch_dim}) features, got {feats.shape}")
    if pos is None:
        pos = sine_position_embedding(cfg.grid_h, cfg.grid_w, cfg.d_model)
    pos = np.asarray(pos, dtype=dt)
    x = ag.constant(feats) @ params["backbone.proj.w"] + params["backbone.proj.b"]
    if cfg.pos_in_tokens:
        x = x + pos
    for i in range(cfg.n_enc_layers):
        p = _sub(params, f"enc.{i}")
        qk = x + pos
        sa, _ = multi_head_attention(qk, qk, x, _sub(p, "self_attn"), cfg.n_heads)
        x = _norm(x + sa, _sub(p, "norm1"))
        x = _norm(x + _ffn(x, _sub(p, "ffn")), _sub(p, "norm2"))
    return EncoderOutput(x, pos)


# -- decoder ------------------------------------------------------------------------


def decode_groups(
    enc: EncoderOutput,
    groups: Sequence[tuple[str, object]],
    params: ParamStore,
    cfg: ModelConfig,
) -> DecoderOutputs:
    """Run all query groups jointly; groups never attend to each other."""
    dt = _dtype(params)
    names, sizes, qs = [], [], []
    for name, q in groups:
        q = q if isinstance(q, DiffArray) else ag.constant(np.asarray(q, dtype=dt))
        if q.ndim != 2 or q.shape[1] != cfg.d_model:
            raise ValueError(
                f"query transplant requires equal hidden size: group {name!r} has dim {q.shape[-1]}, "
                f"decoder expects {cfg.d_model}"
            )
        names.append(name)
        sizes.append(q.shape[0])
        qs.append(q)
    slices, start = {}, 0
    for name, n in zip(names, sizes):
        slices[name] = slice(start, start + n)
        start += n
    qpos = qs[0] if len(qs) == 1 else ag.concatenate(qs, axis=0)
    mask = build_group_mask(*sizes)
    mem = enc.tokens
    mem_k = mem + enc.pos
    B = mem.shape[0]
    tgt = ag.constant(np.zeros((B, start, cfg.d_model), dtype=dt))
    head = _sub(params, "head")
    dnorm = _sub(params, "dec.norm")
    logits, probs, boxes, sa_maps, ca_maps = [], [], [], [], []
    for i in range(cfg.n_dec_layers):
        p = _sub(params, f"dec.{i}")
        q = tgt + qpos
        sa, sa_w = multi_head_attention(q, q, tgt, _sub(p, "self_attn"), cfg.n_heads, mask=mask)
        tgt = _norm(tgt + sa, _sub(p, "norm1"))
        ca, ca_w = multi_head_attention(tgt + qpos, mem_k, mem, _sub(p, "cross_attn"), cfg.n_heads)
        tgt = _norm(tgt + ca, _sub(p, "norm2"))
        tgt = _norm(tgt + _ffn(tgt, _sub(p, "ffn")), _sub(p, "norm3"))
        hs = _norm(tgt, dnorm)
        lg = hs @ head["cls.w"] + head["cls.b"]
        h1 = ag.relu(hs @ head["box.w1"] + head["box.b1"])
        h2 = ag.relu(h1 @ head["box.w2"] + head["box.b2"])
        bx = ag.sigmoid(h2 @ head["box.w3"] + head["box.b3"])
        logits.append(lg)
        probs.append(ag.sigmoid(lg))
        boxes.append(bx)
        sa_maps.append(sa_w)
        ca_maps.append(ca_w)
    return DecoderOutputs(logits, probs, boxes, AttentionRecord(sa_maps, ca_maps), slices)


def decoder_forward(
    enc: EncoderOutput,
    student_queries,
    aux_queries=None,
    params: ParamStore | None = None,
    cfg: ModelConfig | None = None,
) -> DecoderOutputs:
    """Student group, optionally followed by one auxiliary group (or a list of them)."""
    groups: list[tuple[str, object]] = [("student", student_queries)]
    if aux_queries is not None:
        if isinstance(aux_queries, (list, tuple)):
            groups += [(f"aux{i}" if i else "aux", q) for i, q in enumerate(aux_queries)]
        else:
            groups.append(("aux", aux_queries))
    return decode_groups(enc, groups, params, cfg)


def forward(params: ParamStore, cfg: ModelConfig, grids: np.ndarray, groups=None) -> DecoderOutputs:
    """Scene grids (B, H, W, C) -> decoder outputs; default group is the model's own queries."""
    enc = encoder_forward(patchify(grids, cfg.patch_size), params, cfg)
    if groups is None:
        groups = [("student", params["query_embed"])]
    return decode_groups(enc, groups, params, cfg)


# -- parameter groups ----------------------------------------------------------------


def inheritable_names(params: ParamStore) -> list[str]:
    """Encoder, decoder, prediction-head and (primary) query parameters."""
    keep = ("backbone.", "enc.", "dec.", "head.")
    return [k for k in params if k.startswith(keep) or k == "query_embed"]
