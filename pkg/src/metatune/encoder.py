"""A small post-norm transformer encoder built on the autodiff tensors.

The forward pass returns every layer's hidden states so downstream losses can
tap intermediate layers.  Embeddings (token + position + segment) feed layer 1
directly; with zero layers the encoder is the embedding sum itself, which keeps
pooled sentence embeddings linear in the embedding tables.

Padding is handled with an additive attention bias of -1e9 on masked key
columns.  After the stabilized softmax those attention weights underflow to
exactly zero, so the content of padded positions cannot influence any active
position's output.

Segment ids are derived from the token ids themselves: everything after the
first [SEP] belongs to segment 1.  This supports pair inputs without widening
the batch schema.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import CLS_ID, SEP_ID, TokenBatch
from .errors import CheckpointError, ConfigError, ShapeError, VocabularyError
from .tensor import Tensor

INIT_SCALE = 0.02
MASK_BIAS = -1e9

_PER_LAYER = (
    "attn_wq", "attn_bq", "attn_wk", "attn_bk", "attn_wv", "attn_bv",
    "attn_wo", "attn_bo", "ln1_g", "ln1_b",
    "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln2_g", "ln2_b",
)

# Parameters that exist only for the meta-training stage and are removed
# before per-domain fine-tuning.
_DOMAIN_PARAM_PREFIXES = ("domain_emb", "domain_head_", "adv_head_")


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    num_layers: int = 4
    d_model: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    max_len: int = 32

    def validate(self) -> None:
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must cover the four reserved ids")
        if self.num_layers < 0:
            raise ConfigError("num_layers must be >= 0")
        if self.d_model < 1 or self.num_heads < 1 or self.ffn_dim < 1:
            raise ConfigError("d_model, num_heads, and ffn_dim must be positive")
        if self.d_model % self.num_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by num_heads {self.num_heads}"
            )
        if self.max_len < 2:
            raise ConfigError("max_len must leave room for [CLS] plus one token")


class EncoderState:
    """Named parameter tensors plus the label/domain head bookkeeping."""

    def __init__(self, config: EncoderConfig, num_classes: int, num_domains: int,
                 taps: tuple[int, ...], params: dict[str, Tensor]):
        self.config = config
        self.num_classes = num_classes
        self.num_domains = num_domains
        self.taps = tuple(taps)
        self.params = params

    def parameter(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise ConfigError(f"state has no parameter {name!r}") from None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "EncoderState":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return EncoderState(self.config, self.num_classes, self.num_domains, self.taps, params)

    def has_domain_parameters(self) -> bool:
        return any(is_domain_parameter(n) for n in self.params)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())


def is_domain_parameter(name: str) -> bool:
    return name.startswith(_DOMAIN_PARAM_PREFIXES)


def init_encoder_state(config: EncoderConfig, num_classes: int, num_domains: int,
                       taps: tuple[int, ...] = (), rng: np.random.Generator | None = None,
                       adversary: bool = False) -> EncoderState:
    """Draw all weights from N(0, 0.02^2) in a fixed order; biases start at zero.

    ``taps`` lists the 1-based layers that receive a domain head.  The draw
    order never changes, so two states built with the same seed share every
    parameter they have in common even if one carries extra heads.
    """
    config.validate()
    if num_classes < 2:
        raise ConfigError("need at least 2 classes")
    if num_domains < 1:
        raise ConfigError("need at least 1 domain")
    for tap in taps:
        if not 1 <= tap <= config.num_layers:
            raise ConfigError(f"tap {tap} outside layers 1..{config.num_layers}")
    if len(set(taps)) != len(taps):
        raise ConfigError("taps must be distinct")
    rng = rng if rng is not None else np.random.default_rng(0)
    d, f = config.d_model, config.ffn_dim

    def normal(*shape):
        return Tensor(rng.normal(0.0, INIT_SCALE, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    params: dict[str, Tensor] = {
        "tok_emb": normal(config.vocab_size, d),
        "pos_emb": normal(config.max_len, d),
        "seg_emb": normal(2, d),
    }
    for i in range(1, config.num_layers + 1):
        params[f"layer{i}.attn_wq"] = normal(d, d)
        params[f"layer{i}.attn_bq"] = zeros(d)
        params[f"layer{i}.attn_wk"] = normal(d, d)
        params[f"layer{i}.attn_bk"] = zeros(d)
        params[f"layer{i}.attn_wv"] = normal(d, d)
        params[f"layer{i}.attn_bv"] = zeros(d)
        params[f"layer{i}.attn_wo"] = normal(d, d)
        params[f"layer{i}.attn_bo"] = zeros(d)
        params[f"layer{i}.ln1_g"] = ones(d)
        params[f"layer{i}.ln1_b"] = zeros(d)
        params[f"layer{i}.ffn_w1"] = normal(d, f)
        params[f"layer{i}.ffn_b1"] = zeros(f)
        params[f"layer{i}.ffn_w2"] = normal(f, d)
        params[f"layer{i}.ffn_b2"] = zeros(d)
        params[f"layer{i}.ln2_g"] = ones(d)
        params[f"layer{i}.ln2_b"] = zeros(d)
    params["label_head_w"] = normal(d, num_classes)
    params["label_head_b"] = zeros(num_classes)
    if taps:
        params["domain_emb"] = normal(num_domains, d)
        for tap in sorted(taps):
            params[f"domain_head_l{tap}_w"] = normal(d, num_domains)
            params[f"domain_head_l{tap}_b"] = zeros(num_domains)
    if adversary:
        params["adv_head_w"] = normal(d, num_domains)
        params["adv_head_b"] = zeros(num_domains)
    return EncoderState(config, num_classes, num_domains, tuple(sorted(taps)), params)


def segment_ids(ids: np.ndarray) -> np.ndarray:
    """0 up to and including the first [SEP], 1 afterwards."""
    is_sep = (ids == SEP_ID).astype(np.int64)
    return np.clip(np.cumsum(is_sep, axis=1) - is_sep, 0, 1)


def forward_states(state: EncoderState, ids: np.ndarray, mask: np.ndarray) -> list[Tensor]:
    """All hidden states: index 0 is the embedding sum, index l is layer l's output."""
    cfg = state.config
    b, t = ids.shape
    if t > cfg.max_len:
        raise ShapeError(f"sequence length {t} exceeds max_len {cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise VocabularyError(
            f"token ids must lie in [0, {cfg.vocab_size}), got range "
            f"[{ids.min()}, {ids.max()}]"
        )
    h = cfg.num_heads
    d = cfg.d_model
    dh = d // h
    scale = 1.0 / np.sqrt(dh)
    # Masked key columns get a -1e9 bias: after the shifted softmax their
    # attention weights underflow to exactly 0, so padding cannot leak.
    key_bias = Tensor((1.0 - mask[:, None, None, :]) * MASK_BIAS)

    x = state.parameter("tok_emb")[ids] \
        + state.parameter("pos_emb")[np.arange(t)] \
        + state.parameter("seg_emb")[segment_ids(ids)]
    states = [x]
    for i in range(1, cfg.num_layers + 1):
        p = lambda name: state.parameter(f"layer{i}.{name}")
        q = (x @ p("attn_wq") + p("attn_bq")).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
        k = (x @ p("attn_wk") + p("attn_bk")).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
        v = (x @ p("attn_wv") + p("attn_bv")).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale + key_bias
        ctx = T.softmax(scores, axis=-1) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, t, d)
        attn_out = ctx @ p("attn_wo") + p("attn_bo")
        x = T.layer_norm(x + attn_out, p("ln1_g"), p("ln1_b"))
        ffn_out = T.gelu(x @ p("ffn_w1") + p("ffn_b1")) @ p("ffn_w2") + p("ffn_b2")
        x = T.layer_norm(x + ffn_out, p("ln2_g"), p("ln2_b"))
        states.append(x)
    return states


def encode(state: EncoderState, batch: TokenBatch) -> list[Tensor]:
    """Hidden states of layers 1..num_layers, each [B x T x d]."""
    return forward_states(state, batch.ids, batch.mask)[1:]


def cls_feature(hidden_last: Tensor) -> Tensor:
    """The [CLS] column of the last layer, used by the label head."""
    return hidden_last[:, 0, :]


def layer_pool(hidden: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over active non-[CLS] positions; feeds the per-layer domain heads."""
    return T.masked_mean_pool(hidden[:, 1:, :], np.asarray(mask)[:, 1:])


def sentence_embedding(state: EncoderState, batch: TokenBatch,
                       include_cls: bool = True) -> np.ndarray:
    """Frozen mean of last-layer states over active positions (no graph is built).

    Unlike layer_pool this includes the [CLS] position by default; the flag
    exists because the two pooling policies are intentionally different.
    """
    with T.no_grad():
        last = forward_states(state, batch.ids, batch.mask)[-1]
        mask = batch.mask.astype(np.float64)
        if not include_cls:
            return T.masked_mean_pool(last[:, 1:, :], mask[:, 1:]).data
        return T.masked_mean_pool(last, mask).data


# -- checkpoints -----------------------------------------------------------------

_MAGIC = b"MTENC01\n"


def save_checkpoint(state: EncoderState, path: str | Path) -> None:
    """Flat archive: JSON manifest (config, heads, named shapes) + raw float64.

    Writing the same state twice produces identical bytes.
    """
    manifest = {
        "config": dataclasses.asdict(state.config),
        "num_classes": state.num_classes,
        "num_domains": state.num_domains,
        "taps": list(state.taps),
        "params": [[name, list(p.data.shape)] for name, p in state.params.items()],
    }
    header = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for p in state.params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> EncoderState:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    blob = path.read_bytes()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path} is not an encoder checkpoint")
    offset = len(_MAGIC)
    (header_len,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    try:
        manifest = json.loads(blob[offset: offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest: {e}") from None
    offset += header_len
    config = EncoderConfig(**manifest["config"])
    params: dict[str, Tensor] = {}
    for name, shape in manifest["params"]:
        n = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated at parameter {name!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape)
        params[name] = Tensor(arr.copy(), requires_grad=True)
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return EncoderState(config, manifest["num_classes"], manifest["num_domains"],
                        tuple(manifest["taps"]), params)


def checkpoint_parameter_names(path: str | Path) -> list[str]:
    """Names recorded in a checkpoint manifest, without loading the tensors."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path} is not an encoder checkpoint")
    (header_len,) = struct.unpack_from("<Q", blob, len(_MAGIC))
    manifest = json.loads(blob[len(_MAGIC) + 8: len(_MAGIC) + 8 + header_len].decode("utf-8"))
    return [name for name, _ in manifest["params"]]
