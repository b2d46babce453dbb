"""Transformer encoder over amino-acid tokens with pluggable attention mode.

Pre-LN blocks, learned absolute position table, bias-free linear projections,
and a final layer norm applied before both the MLM head and embedding
extraction. The position table is a materialized per-position matrix so its
row count (the context capacity) can be extended by cyclic copying.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from .attention import GLOBAL, LOCAL, AttentionSpec, visibility_mask
from .checkpoint import read_checkpoint, write_checkpoint
from .errors import ConfigError, ContractError, InputError, LengthError
from .quant import QuantizedTensor, qmatmul
from .tensor_ops import gelu

CANONICAL_RESIDUES = "ACDEFGHIKLMNPQRSTVWY"
EXTRA_RESIDUES = "XBZUO"  # X catches anything unknown; B/Z/U/O keep their own tokens

CLS_TOKEN = "<cls>"
PAD_TOKEN = "<pad>"
EOS_TOKEN = "<eos>"
MASK_TOKEN = "<mask>"

INIT_STD = 0.02


class TokenVocab:
    """Dense, stable token-id table: specials first, then residues."""

    def __init__(self, tokens: tuple[str, ...]):
        self.tokens = tuple(tokens)
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise ConfigError("vocabulary contains duplicate tokens")
        for special in (CLS_TOKEN, PAD_TOKEN, EOS_TOKEN, MASK_TOKEN):
            if special not in self._ids:
                raise ConfigError(f"vocabulary is missing {special}")
        self.cls_id = self._ids[CLS_TOKEN]
        self.pad_id = self._ids[PAD_TOKEN]
        self.eos_id = self._ids[EOS_TOKEN]
        self.mask_id = self._ids[MASK_TOKEN]
        self.unknown_id = self._ids["X"]
        self.residue_ids = tuple(
            i for i, tok in enumerate(self.tokens) if len(tok) == 1
        )
        self.canonical_ids = tuple(self._ids[ch] for ch in CANONICAL_RESIDUES)

    @classmethod
    def default(cls) -> "TokenVocab":
        specials = (CLS_TOKEN, PAD_TOKEN, EOS_TOKEN, MASK_TOKEN)
        return cls(specials + tuple(CANONICAL_RESIDUES) + tuple(EXTRA_RESIDUES))

    @property
    def size(self) -> int:
        return len(self.tokens)

    def residue_id(self, ch: str) -> int:
        return self._ids.get(ch, self.unknown_id)

    def is_residue(self, token_id: int) -> bool:
        return len(self.tokens[token_id]) == 1

    def __eq__(self, other) -> bool:
        return isinstance(other, TokenVocab) and self.tokens == other.tokens

    def __hash__(self) -> int:
        return hash(self.tokens)


DEFAULT_VOCAB = TokenVocab.default()

# layers / heads / embedding dimension for each size tier.
PRESET_SHAPES = {
    "T6": (6, 20, 320),
    "T12": (12, 20, 480),
    "T30": (30, 20, 640),
    "T33": (33, 20, 1280),
    "T36": (36, 40, 2560),
    "T48": (48, 40, 5120),
    "toy": (2, 4, 32),
}


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    num_heads: int
    embed_dim: int
    max_positions: int
    ffn_dim: int
    attention: AttentionSpec
    vocab: TokenVocab = field(default_factory=TokenVocab.default)

    def __post_init__(self):
        if min(self.num_layers, self.num_heads, self.embed_dim, self.ffn_dim) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.max_positions < 3:
            raise ConfigError("max_positions must hold at least CLS + one residue + EOS")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.attention.num_heads != self.num_heads:
            raise ConfigError("attention spec head count disagrees with model")
        if self.attention.head_dim * self.attention.num_heads != self.embed_dim:
            raise ConfigError("attention head_dim * num_heads must equal embed_dim")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


def preset_config(
    name: str,
    mode: str = GLOBAL,
    window_k: int | None = None,
    max_positions: int | None = None,
) -> ModelConfig:
    """Build the named size preset; 'toy' is the 2-layer test workhorse."""
    if name not in PRESET_SHAPES:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESET_SHAPES)}")
    layers, heads, dim = PRESET_SHAPES[name]
    if max_positions is None:
        max_positions = 64 if name == "toy" else 1024
    spec = AttentionSpec(
        mode=mode,
        num_heads=heads,
        head_dim=dim // heads,
        window_k=window_k if mode == LOCAL else None,
    )
    return ModelConfig(
        num_layers=layers,
        num_heads=heads,
        embed_dim=dim,
        max_positions=max_positions,
        ffn_dim=4 * dim,
        attention=spec,
    )


def param_names(config: ModelConfig) -> list[str]:
    """Canonical parameter order, shared by init, checkpoints, and optimizers."""
    names = ["token_embedding", "position_embedding"]
    for i in range(config.num_layers):
        p = f"layers.{i}"
        names += [
            f"{p}.attn_ln.gain",
            f"{p}.attn_ln.bias",
            f"{p}.q_proj",
            f"{p}.k_proj",
            f"{p}.v_proj",
            f"{p}.o_proj",
            f"{p}.ffn_ln.gain",
            f"{p}.ffn_ln.bias",
            f"{p}.ffn_in",
            f"{p}.ffn_out",
        ]
    names += ["final_ln.gain", "final_ln.bias", "mlm_head"]
    return names


def param_shape(name: str, config: ModelConfig) -> tuple[int, ...]:
    d = config.embed_dim
    if name == "token_embedding":
        return (config.vocab.size, d)
    if name == "position_embedding":
        return (config.max_positions, d)
    if name == "mlm_head":
        return (d, config.vocab.size)
    if name.endswith((".gain", ".bias")):
        return (d,)
    if name.endswith((".q_proj", ".k_proj", ".v_proj", ".o_proj")):
        return (d, d)
    if name.endswith(".ffn_in"):
        return (d, config.ffn_dim)
    if name.endswith(".ffn_out"):
        return (config.ffn_dim, d)
    raise ConfigError(f"unknown parameter name {name!r}")


@dataclass(frozen=True)
class EncoderModel:
    """Immutable weight set; forward is a pure function of (model, tokens)."""

    config: ModelConfig
    params: dict[str, Any]          # name -> ndarray or QuantizedTensor
    adapters: dict[str, Any] = field(default_factory=dict)  # name -> LoraAdapter

    @property
    def dtype(self):
        for v in self.params.values():
            if isinstance(v, np.ndarray):
                return v.dtype
        return np.float32

    def is_quantized(self) -> bool:
        return any(isinstance(v, QuantizedTensor) for v in self.params.values())


def build_model(config: ModelConfig, seed: int) -> EncoderModel:
    """Initialize weights from a seeded normal(0, 0.02).

    Layer-norm affine pairs start at the identity (gain 1, bias 0); the normal
    init applies to embeddings, projections, and the MLM head.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Any] = {}
    for name in param_names(config):
        shape = param_shape(name, config)
        if name.endswith(".gain"):
            params[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            params[name] = rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)
    return EncoderModel(config=config, params=params)


def tokenize(seq: str, config: ModelConfig) -> list[int]:
    """CLS + residue ids + EOS; unknown characters map to the X token."""
    vocab = config.vocab
    if len(seq) > config.max_positions - 2:
        raise LengthError(
            f"sequence of {len(seq)} residues exceeds capacity "
            f"{config.max_positions - 2}; segment it first"
        )
    ids = [vocab.cls_id]
    ids.extend(vocab.residue_id(ch) for ch in seq)
    ids.append(vocab.eos_id)
    return ids


def detokenize(token_ids, vocab: TokenVocab = DEFAULT_VOCAB) -> str:
    """Residue string for a token-id list; structural tokens are dropped."""
    return "".join(vocab.tokens[i] for i in token_ids if len(vocab.tokens[i]) == 1)


def _project(model: EncoderModel, name: str, x: np.ndarray) -> np.ndarray:
    w = model.params[name]
    if isinstance(w, QuantizedTensor):
        out = qmatmul(x, w)
    else:
        out = x @ w
    adapter = model.adapters.get(name)
    if adapter is not None and np.any(adapter.B):
        out = out + (adapter.alpha / adapter.rank) * ((x @ adapter.A.T) @ adapter.B.T)
    return out


def _ln_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * gain + bias, (xhat, inv_std)


def _split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, num_heads, d // num_heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    nh, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, nh * dh)


def _masked_softmax(scores: np.ndarray, visible: np.ndarray) -> np.ndarray:
    masked = np.where(visible[None, :, :], scores, -np.inf)
    m = masked.max(axis=-1, keepdims=True)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(invalid="ignore"):
        e = np.exp(masked - safe_m)
    e = np.where(np.isfinite(masked), e, 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    return np.where(denom > 0, e / np.where(denom > 0, denom, 1.0), 0.0)


def forward(model: EncoderModel, token_ids, want_cache: bool = False):
    """Last-layer hidden states after the final layer norm, one row per token.

    With want_cache=True also returns the intermediate activations the
    training module needs for its hand-derived backward pass.
    """
    cfg = model.config
    vocab = cfg.vocab
    tok = np.asarray(token_ids, dtype=np.int64)
    if tok.ndim != 1 or tok.size == 0:
        raise InputError("token input must be a nonempty 1-d id list")
    if tok.size > cfg.max_positions:
        raise LengthError(f"{tok.size} tokens exceed capacity {cfg.max_positions}")
    if (tok < 0).any() or (tok >= vocab.size).any():
        raise InputError("token id out of vocabulary")
    n = tok.size
    pad = tok == vocab.pad_id
    P = model.params
    x = P["token_embedding"][tok] + P["position_embedding"][:n]
    visible = visibility_mask(n, pad, cfg.attention.mode, cfg.attention.window_k)
    scale = 1.0 / math.sqrt(cfg.head_dim)
    layer_caches = []
    for i in range(cfg.num_layers):
        p = f"layers.{i}"
        x_in = x
        h1, ln1_cache = _ln_forward(x_in, P[f"{p}.attn_ln.gain"], P[f"{p}.attn_ln.bias"])
        qh = _split_heads(_project(model, f"{p}.q_proj", h1), cfg.num_heads)
        kh = _split_heads(_project(model, f"{p}.k_proj", h1), cfg.num_heads)
        vh = _split_heads(_project(model, f"{p}.v_proj", h1), cfg.num_heads)
        scores = (qh @ kh.transpose(0, 2, 1)) * scale
        probs = _masked_softmax(scores, visible)
        ctx = _merge_heads(probs @ vh)
        x_mid = x_in + _project(model, f"{p}.o_proj", ctx)
        h2, ln2_cache = _ln_forward(x_mid, P[f"{p}.ffn_ln.gain"], P[f"{p}.ffn_ln.bias"])
        u = _project(model, f"{p}.ffn_in", h2)
        act = gelu(u)
        x = x_mid + _project(model, f"{p}.ffn_out", act)
        if want_cache:
            layer_caches.append(
                dict(x_in=x_in, h1=h1, ln1=ln1_cache, qh=qh, kh=kh, vh=vh,
                     probs=probs, ctx=ctx, x_mid=x_mid, h2=h2, ln2=ln2_cache,
                     u=u, act=act)
            )
    hidden, lnf_cache = _ln_forward(x, P["final_ln.gain"], P["final_ln.bias"])
    if not want_cache:
        return hidden
    cache = dict(tok=tok, pad=pad, x_final=x, lnf=lnf_cache, hidden=hidden,
                 layers=layer_caches)
    return hidden, cache


def mlm_logits(model: EncoderModel, hidden: np.ndarray) -> np.ndarray:
    return _project(model, "mlm_head", hidden)


def extend_context(
    model: EncoderModel, new_capacity: int, strategy: str = "copy", seed: int = 0
) -> EncoderModel:
    """Grow the position table to new_capacity rows.

    strategy="copy" repeats the existing table cyclically (row p takes old row
    p mod old_capacity), preserving the prefix bit-exactly; strategy="random"
    draws fresh rows from the init distribution. All other weights, and the
    attention spec, are untouched.
    """
    old = model.config.max_positions
    if new_capacity <= old:
        raise ContractError(f"new capacity {new_capacity} must exceed current {old}")
    table = model.params["position_embedding"]
    if strategy == "copy":
        tail = table[np.arange(old, new_capacity) % old]
    elif strategy == "random":
        rng = np.random.default_rng(seed)
        tail = rng.normal(0.0, INIT_STD, size=(new_capacity - old, table.shape[1])).astype(
            table.dtype
        )
    else:
        raise ConfigError(f"unknown extension strategy {strategy!r}")
    new_table = np.concatenate([table, tail], axis=0)
    new_config = replace(model.config, max_positions=new_capacity)
    new_params = dict(model.params)
    new_params["position_embedding"] = new_table
    return EncoderModel(config=new_config, params=new_params, adapters=dict(model.adapters))


def with_attention(model: EncoderModel, mode: str, window_k: int | None = None) -> EncoderModel:
    """Same weights under a different attention mode (weights are mode-agnostic)."""
    spec = AttentionSpec(
        mode=mode,
        num_heads=model.config.num_heads,
        head_dim=model.config.head_dim,
        window_k=window_k if mode == LOCAL else None,
    )
    return replace(model, config=replace(model.config, attention=spec))


def model_astype(model: EncoderModel, dtype) -> EncoderModel:
    """Cast all dense weights (and adapters) to dtype; quantized tensors are kept."""
    params = {
        k: (v if isinstance(v, QuantizedTensor) else v.astype(dtype))
        for k, v in model.params.items()
    }
    adapters = {k: ad.astype(dtype) for k, ad in model.adapters.items()}
    return EncoderModel(config=model.config, params=params, adapters=adapters)


def config_to_json(config: ModelConfig) -> dict:
    return {
        "num_layers": config.num_layers,
        "num_heads": config.num_heads,
        "embed_dim": config.embed_dim,
        "max_positions": config.max_positions,
        "ffn_dim": config.ffn_dim,
        "attention": {
            "mode": config.attention.mode,
            "window_k": config.attention.window_k,
        },
        "vocab": list(config.vocab.tokens),
    }


def config_from_json(data: dict) -> ModelConfig:
    spec = AttentionSpec(
        mode=data["attention"]["mode"],
        num_heads=data["num_heads"],
        head_dim=data["embed_dim"] // data["num_heads"],
        window_k=data["attention"].get("window_k"),
    )
    return ModelConfig(
        num_layers=data["num_layers"],
        num_heads=data["num_heads"],
        embed_dim=data["embed_dim"],
        max_positions=data["max_positions"],
        ffn_dim=data["ffn_dim"],
        attention=spec,
        vocab=TokenVocab(tuple(data["vocab"])),
    )


def model_tag(model: EncoderModel) -> str:
    cfg = model.config
    mode = cfg.attention.mode
    if mode == LOCAL:
        mode = f"local{cfg.attention.window_k}"
    tag = f"L{cfg.num_layers}-H{cfg.num_heads}-d{cfg.embed_dim}-p{cfg.max_positions}-{mode}"
    if model.is_quantized():
        tag += "-int4"
    return tag


def save_model(model: EncoderModel, path) -> None:
    """Serialize config, weights, and any LoRA adapters into one container."""
    config = {"model": config_to_json(model.config)}
    tensors: dict[str, Any] = dict(model.params)
    if model.adapters:
        lora_meta = {}
        for name in sorted(model.adapters):
            ad = model.adapters[name]
            tensors[f"adapters.{name}.A"] = ad.A
            tensors[f"adapters.{name}.B"] = ad.B
            lora_meta[name] = {"rank": ad.rank, "alpha": ad.alpha}
        config["lora"] = lora_meta
    write_checkpoint(path, tensors, config)


def load_model(path) -> EncoderModel:
    tensors, config = read_checkpoint(path)
    model_config = config_from_json(config["model"])
    params = {}
    for name in param_names(model_config):
        if name not in tensors:
            raise ConfigError(f"checkpoint is missing tensor {name!r}")
        params[name] = tensors[name]
    adapters = {}
    for target, meta in config.get("lora", {}).items():
        from .training import LoraAdapter  # deferred: training imports encoder

        adapters[target] = LoraAdapter(
            target=target,
            rank=meta["rank"],
            alpha=meta["alpha"],
            A=tensors[f"adapters.{target}.A"],
            B=tensors[f"adapters.{target}.B"],
        )
    return EncoderModel(config=model_config, params=params, adapters=adapters)
