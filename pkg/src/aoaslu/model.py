"""Encoder-decoder with attention-over-attention cross attention and a pointer head.

Shapes use B (batch), S (encoder length: tokens plus one end sentinel),
T (decoder steps), H (heads), d (width), L (categories). Every decoder layer
is post-LN: self-attention, AoA cross-attention, feed-forward.

AoA for step t, per head::

    CAM_t  = rows [cached history; softmax(q_t K_enc^T / sqrt(d_k))]
    SAM_t  = softmax(q_t K_dec^T / sqrt(d_k))              over steps <= t
    A_t    = softmax(q_t K_enc^T / sqrt(d_k) + SAM_t CAM_t / sqrt(d_k))

The pointer head scores the S encoder positions against a fusion of encoder
states and raw token embeddings, then the L categories and EOS.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import CacheDesyncError, ConfigError, EmptyUtteranceError, ShapeError, TruncationError
from .tensor import Tensor

PAD_ID, UNK_ID, SOS_ID, EOS_ID = 0, 1, 2, 3


@dataclass
class ModelConfig:
    d: int = 128
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 512
    alpha: float = 0.5
    vocab_size: int = 8
    n_categories: int = 1
    max_len: int = 64
    dropout_p: float = 0.1
    aoa_enabled: bool = True
    aoa_mix_weight: float = 1.0
    sam_source: str = "dedicated"
    residual: bool = True
    init_std: float = 0.02
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("d", "n_heads", "n_enc_layers", "n_dec_layers", "d_ff", "vocab_size",
                     "n_categories", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.sam_source not in ("dedicated", "self"):
            raise ConfigError(f"sam_source must be 'dedicated' or 'self', got {self.sam_source!r}")

    @property
    def d_k(self) -> int:
        return self.d // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**values)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map; the order is also the checkpoint order."""
    d, ff = cfg.d, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "token_embeddings": (cfg.vocab_size, d),
        "category_embeddings": (cfg.n_categories, d),
        "category_weights": (cfg.n_categories, d),
        "eos_weights": (1, d),
        "pointer.w": (d, d),
        "pointer.b": (d,),
    }

    def proj(prefix):
        shapes[prefix + ".w"] = (d, d)
        shapes[prefix + ".b"] = (d,)

    def norm(prefix):
        shapes[prefix + ".g"] = (d,)
        shapes[prefix + ".b"] = (d,)

    def ffn(prefix):
        shapes[prefix + ".w1"] = (d, ff)
        shapes[prefix + ".b1"] = (ff,)
        shapes[prefix + ".w2"] = (ff, d)
        shapes[prefix + ".b2"] = (d,)

    for i in range(cfg.n_enc_layers):
        for p in "qkvo":
            proj(f"enc.{i}.self.{p}")
        norm(f"enc.{i}.ln1")
        ffn(f"enc.{i}.ffn")
        norm(f"enc.{i}.ln2")
    for i in range(cfg.n_dec_layers):
        for p in "qkvo":
            proj(f"dec.{i}.self.{p}")
        norm(f"dec.{i}.ln1")
        for p in ("q", "k", "kdec", "v", "o"):
            proj(f"dec.{i}.aoa.{p}")
        norm(f"dec.{i}.ln2")
        ffn(f"dec.{i}.ffn")
        norm(f"dec.{i}.ln3")
    return shapes


class ModelParams:
    """Named, ordered collection of trainable tensors."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self):
        return len(self.tensors)

    def named(self):
        return self.tensors.items()

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors.items():
            src = arrays[k]
            if src.shape != t.shape:
                raise ShapeError(f"{k}: expected {t.shape}, got {src.shape}")
            t.data = np.array(src, dtype=t.dtype)

    def astype(self, dtype) -> ModelParams:
        return ModelParams({k: Tensor(t.data, requires_grad=True, name=k, dtype=dtype)
                            for k, t in self.tensors.items()})


_SPLIT_SEPARATORS = re.compile(r"[_\-.\s/]+")
_CAMEL = re.compile(r"[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z]+|[A-Z]+|\d+")


def split_category_name(name: str) -> list[str]:
    """``AddToPlaylist`` -> ``[add, to, playlist]``; also splits ``_``, ``-`` and ``.``."""
    words = []
    for chunk in _SPLIT_SEPARATORS.split(name):
        words.extend(w.lower() for w in _CAMEL.findall(chunk))
    return words


def init_category_embeddings(category_names, token_embeddings, tokenizer, rng=None, std=0.02):
    """Mean of the in-vocabulary word embeddings of each category name.

    Names with no known word fall back to a seeded N(0, std^2) vector.
    """
    if not category_names:
        raise ConfigError("cannot initialise embeddings for an empty category list")
    table = token_embeddings.data if isinstance(token_embeddings, Tensor) else np.asarray(token_embeddings)
    rng = rng if rng is not None else np.random.default_rng(0)
    out = np.empty((len(category_names), table.shape[1]), dtype=table.dtype)
    for i, name in enumerate(category_names):
        ids = [tokenizer.get(w) for w in split_category_name(name)]
        ids = [j for j in ids if j is not None]
        if ids:
            out[i] = table[ids].mean(axis=0)
        else:
            out[i] = rng.normal(0.0, std, table.shape[1])
    return out


def init_params(cfg: ModelConfig, tokenizer=None, category_names=None, seed: int | None = None) -> ModelParams:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dtype = T.get_dtype()
    tensors = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, cfg.init_std, shape)
        tensors[name] = Tensor(arr, requires_grad=True, name=name, dtype=dtype)
    if tokenizer is not None and category_names is not None:
        if len(category_names) != cfg.n_categories:
            raise ConfigError(f"{len(category_names)} category names for n_categories={cfg.n_categories}")
        tensors["category_embeddings"].data = init_category_embeddings(
            category_names, tensors["token_embeddings"], tokenizer, rng, cfg.init_std
        ).astype(dtype)
    return ModelParams(tensors)


_PE_CACHE: dict = {}


def positional_encoding(n: int, d: int, dtype) -> np.ndarray:
    key = (d, np.dtype(dtype).name)
    table = _PE_CACHE.get(key)
    if table is None or table.shape[0] < n:
        size = max(n, 128)
        pos = np.arange(size)[:, None]
        i = np.arange(d)[None, :]
        angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
        table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)
        _PE_CACHE[key] = table
    return table[:n]


def _linear(x, p, prefix):
    return T.add(T.matmul(x, p[prefix + ".w"]), p[prefix + ".b"])


def _heads(x, n_heads):
    b, t, d = x.shape
    return T.transpose(T.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge(x):
    b, h, t, dk = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dk))


def _add_norm(x, sub, p, prefix, cfg, rng):
    sub = T.dropout(sub, cfg.dropout_p, rng)
    y = T.add(x, sub) if cfg.residual else sub
    return T.layer_norm(y, p[prefix + ".g"], p[prefix + ".b"], cfg.ln_eps)


def _ffn(x, p, prefix):
    h = T.gelu(T.add(T.matmul(x, p[prefix + ".w1"]), p[prefix + ".b1"]))
    return T.add(T.matmul(h, p[prefix + ".w2"]), p[prefix + ".b2"])


def _scores(q, k, d_k):
    return T.scale(T.matmul(q, T.swapaxes(k)), 1.0 / math.sqrt(d_k))


def causal_mask(n_new: int, n_past: int) -> np.ndarray:
    """[n_new, n_past + n_new] mask; new row i sees keys up to n_past + i."""
    return np.arange(n_past + n_new)[None, :] <= (n_past + np.arange(n_new))[:, None]


def _record(probe, key, t):
    if probe is not None:
        probe.setdefault(key, []).append(t.data)


@dataclass
class EncoderOutput:
    h_e: Tensor
    token_embeds: Tensor
    input_ids: np.ndarray
    key_mask: np.ndarray
    lengths: np.ndarray
    k_enc: list = field(default_factory=list)
    v_enc: list = field(default_factory=list)
    _pointer_keys: Tensor | None = None

    @property
    def n_positions(self) -> int:
        return self.h_e.shape[1]

    @property
    def cross_mask(self) -> np.ndarray:
        return self.key_mask[:, None, None, :]


def check_input(ids, cfg: ModelConfig) -> None:
    if len(ids) == 0:
        raise EmptyUtteranceError("cannot encode an empty utterance")
    if len(ids) > cfg.max_len:
        raise TruncationError(f"utterance has {len(ids)} tokens, max_len is {cfg.max_len}")
    if max(ids) >= cfg.vocab_size or min(ids) < 0:
        raise IndexError(f"token id outside [0, {cfg.vocab_size})")


def encode_batch(batch_ids, params: ModelParams, cfg: ModelConfig, rng=None, probe=None) -> EncoderOutput:
    """Encode a batch of token-id lists; an EOS sentinel is appended to each."""
    for ids in batch_ids:
        check_input(ids, cfg)
    lengths = np.array([len(ids) for ids in batch_ids])
    S = int(lengths.max()) + 1
    input_ids = np.full((len(batch_ids), S), PAD_ID, dtype=np.intp)
    for b, ids in enumerate(batch_ids):
        input_ids[b, :len(ids)] = ids
        input_ids[b, len(ids)] = EOS_ID
    key_mask = np.arange(S)[None, :] <= lengths[:, None]

    emb = T.gather_rows(params["token_embeddings"], input_ids)
    pe = positional_encoding(S, cfg.d, emb.dtype)
    x = T.add(T.scale(emb, math.sqrt(cfg.d)), T.as_tensor(pe, like=emb))
    x = T.dropout(x, cfg.dropout_p, rng)
    mask4 = key_mask[:, None, None, :]
    H = cfg.n_heads
    for i in range(cfg.n_enc_layers):
        pre = f"enc.{i}."
        q = _heads(_linear(x, params, pre + "self.q"), H)
        k = _heads(_linear(x, params, pre + "self.k"), H)
        v = _heads(_linear(x, params, pre + "self.v"), H)
        probs = T.softmax(_scores(q, k, cfg.d_k), mask4)
        _record(probe, "enc_self", probs)
        ctx = _merge(T.matmul(probs, v))
        x = _add_norm(x, _linear(ctx, params, pre + "self.o"), params, pre + "ln1", cfg, rng)
        x = _add_norm(x, _ffn(x, params, pre + "ffn"), params, pre + "ln2", cfg, rng)

    enc = EncoderOutput(h_e=x, token_embeds=emb, input_ids=input_ids, key_mask=key_mask, lengths=lengths)
    for i in range(cfg.n_dec_layers):
        pre = f"dec.{i}.aoa."
        enc.k_enc.append(_heads(_linear(x, params, pre + "k"), H))
        enc.v_enc.append(_heads(_linear(x, params, pre + "v"), H))
    return enc


def encode(token_ids, params: ModelParams, cfg: ModelConfig, rng=None) -> EncoderOutput:
    return encode_batch([list(token_ids)], params, cfg, rng)


@dataclass
class LayerCache:
    k: np.ndarray | None = None
    v: np.ndarray | None = None
    kdec: np.ndarray | None = None
    cam: np.ndarray | None = None

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[2]


@dataclass
class DecoderCache:
    """Per-layer self-attention K/V, AoA decoder keys and CAM history rows."""

    layers: list[LayerCache]

    @classmethod
    def empty(cls, cfg: ModelConfig) -> DecoderCache:
        return cls([LayerCache() for _ in range(cfg.n_dec_layers)])

    @property
    def length(self) -> int:
        return self.layers[0].length


def _cat_cached(cached, new, axis=2):
    if cached is None:
        return new
    return T.concat([T.as_tensor(cached, like=new), new], axis=axis)


def _append(cached, new):
    return new if cached is None else np.concatenate([cached, new], axis=2)


def aoa_attention(q, k_enc, v_enc, enc_mask, dec_keys, cam_history, d_k, mix_weight=1.0,
                  aoa_enabled=True, sam=None, probe=None):
    """Attention-over-attention for ``q`` holding the newest decoder queries.

    ``q``: [B,H,Tq,dk]; ``dec_keys``: [B,H,Tp+Tq,dk] (all causal keys so far);
    ``cam_history``: [B,H,Tp,S] raw cross-attention rows of earlier steps or
    None. ``sam`` overrides the SAM computation (self-attention reuse).

    Returns ``(context [B,H,Tq,dk], fresh CAM rows [B,H,Tq,S], A [B,H,Tq,S])``.
    """
    n_new = q.shape[2]
    n_past = 0 if cam_history is None else cam_history.shape[2]
    scores = _scores(q, k_enc, d_k)
    cam = T.softmax(scores, enc_mask)
    _record(probe, "cam", cam)
    if aoa_enabled:
        total = sam.shape[-1] if sam is not None else dec_keys.shape[2]
        if total != n_past + n_new:
            raise CacheDesyncError(
                f"CAM history has {n_past} rows but {total - n_new} earlier decoder steps"
            )
        if sam is None:
            sam = T.softmax(_scores(q, dec_keys, d_k), causal_mask(n_new, n_past))
        _record(probe, "sam", sam)
        cam_all = _cat_cached(cam_history, cam)
        mix = T.matmul(sam, cam_all)
        _record(probe, "mix", mix)
        attn = T.softmax(T.add(scores, T.scale(mix, mix_weight / math.sqrt(d_k))), enc_mask)
    else:
        attn = cam
    _record(probe, "aoa", attn)
    return T.matmul(attn, v_enc), cam, attn


def _decoder_layer(x, enc, p, i, cfg, cache: LayerCache | None, rng, probe):
    pre = f"dec.{i}."
    H, dk = cfg.n_heads, cfg.d_k
    n_new = x.shape[1]
    n_past = 0 if cache is None else cache.length
    q = _heads(_linear(x, p, pre + "self.q"), H)
    k = _heads(_linear(x, p, pre + "self.k"), H)
    v = _heads(_linear(x, p, pre + "self.v"), H)
    k_all = _cat_cached(cache.k if cache else None, k)
    v_all = _cat_cached(cache.v if cache else None, v)
    self_probs = T.softmax(_scores(q, k_all, dk), causal_mask(n_new, n_past))
    _record(probe, "dec_self", self_probs)
    h = _add_norm(x, _linear(_merge(T.matmul(self_probs, v_all)), p, pre + "self.o"), p, pre + "ln1", cfg, rng)

    qa = _heads(_linear(h, p, pre + "aoa.q"), H)
    kdec_all, kdec = None, None
    if cfg.aoa_enabled and cfg.sam_source == "dedicated":
        kdec = _heads(_linear(h, p, pre + "aoa.kdec"), H)
        kdec_all = _cat_cached(cache.kdec if cache else None, kdec)
    ctx, cam, _ = aoa_attention(
        qa, enc.k_enc[i], enc.v_enc[i], enc.cross_mask, kdec_all,
        cache.cam if cache else None, dk, cfg.aoa_mix_weight, cfg.aoa_enabled,
        sam=self_probs if cfg.sam_source == "self" else None, probe=probe,
    )
    h = _add_norm(h, _linear(_merge(ctx), p, pre + "aoa.o"), p, pre + "ln2", cfg, rng)
    h = _add_norm(h, _ffn(h, p, pre + "ffn"), p, pre + "ln3", cfg, rng)

    if cache is not None:
        cache.k = _append(cache.k, k.data)
        cache.v = _append(cache.v, v.data)
        if kdec is not None:
            cache.kdec = _append(cache.kdec, kdec.data)
        cache.cam = _append(cache.cam, cam.data)
    return h


def decoder_input_rows(prev_labels: np.ndarray, enc: EncoderOutput, cfg: ModelConfig) -> np.ndarray:
    """Rows of ``[token_embeddings; category_embeddings]`` for previous labels.

    ``prev_labels`` is [B,T] in the batch label layout (``S`` positions, then
    categories); -1 stands for SOS. A position label feeds the embedding of
    the token it points at.
    """
    S = enc.n_positions
    labels = np.asarray(prev_labels, dtype=np.intp)
    rows = np.empty_like(labels)
    is_sos = labels < 0
    is_pos = (labels >= 0) & (labels < S)
    is_cat = labels >= S
    if (labels[is_cat] - S >= cfg.n_categories).any():
        raise ValueError("EOS or out-of-range label fed back into the decoder")
    rows[is_sos] = SOS_ID
    b_idx = np.broadcast_to(np.arange(labels.shape[0])[:, None], labels.shape)
    rows[is_pos] = enc.input_ids[b_idx[is_pos], labels[is_pos]]
    rows[is_cat] = cfg.vocab_size + labels[is_cat] - S
    return rows


def decode_hidden(prev_labels, enc: EncoderOutput, params: ModelParams, cfg: ModelConfig,
                  cache: DecoderCache | None = None, rng=None, probe=None) -> Tensor:
    """Decoder states for the newest ``prev_labels`` columns.

    Without a cache the full prefix is processed causally (teacher forcing or
    full recompute). With a cache, only the new columns are run and the
    cache is extended in place.
    """
    labels = np.asarray(prev_labels)
    offset = 0 if cache is None else cache.length
    if cache is not None and len(cache.layers) != cfg.n_dec_layers:
        raise CacheDesyncError("decoder cache layer count does not match the model")
    if cache is not None and any(layer.length != offset for layer in cache.layers):
        raise CacheDesyncError("decoder cache layers disagree on the step count")
    table = T.concat([params["token_embeddings"], params["category_embeddings"]], axis=0)
    emb = T.gather_rows(table, decoder_input_rows(labels, enc, cfg))
    pe = positional_encoding(offset + labels.shape[1], cfg.d, emb.dtype)[offset:]
    x = T.add(T.scale(emb, math.sqrt(cfg.d)), T.as_tensor(pe, like=emb))
    x = T.dropout(x, cfg.dropout_p, rng)
    for i in range(cfg.n_dec_layers):
        x = _decoder_layer(x, enc, params, i, cfg, cache.layers[i] if cache else None, rng, probe)
    return x


def pointer_keys(enc: EncoderOutput, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """alpha * MLP(H_e) + (1 - alpha) * E_X, memoised on ``enc``."""
    if enc._pointer_keys is None:
        mlp = T.gelu(_linear(enc.h_e, params, "pointer"))
        enc._pointer_keys = T.add(T.scale(mlp, cfg.alpha), T.scale(enc.token_embeds, 1.0 - cfg.alpha))
    return enc._pointer_keys


def pointer_logits(h_d: Tensor, enc: EncoderOutput, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """[B,T,S + L + 1] logits: encoder positions, categories, EOS."""
    pos = T.matmul(h_d, T.swapaxes(pointer_keys(enc, params, cfg)))
    cat = T.matmul(h_d, T.swapaxes(params["category_weights"]))
    eos = T.matmul(h_d, T.swapaxes(params["eos_weights"]))
    return T.concat([pos, cat, eos], axis=-1)


def position_mask(enc: EncoderOutput, n_categories: int) -> np.ndarray:
    """[B, S + L + 1] mask of labels that exist for each batch row."""
    B, S = enc.key_mask.shape
    return np.concatenate([enc.key_mask, np.ones((B, n_categories + 1), dtype=bool)], axis=1)
