"""Decoder-only transformer built from composable blocks.

Pre-norm residual blocks with grouped-query attention and a gated
feed-forward, so parameter and MAC arithmetic lines up with the Llama-family
shapes the pruning presets describe. The whole-model forward is exactly the
fold of per-block forwards between embedding and head, which is what makes
layer removal a pure list operation.
"""

from __future__ import annotations

import sys
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# matrix roles of one block, in storage order; norms are vectors, not matrices
MATRIX_ROLES = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")
NORM_ROLES = ("attn_norm", "ffn_norm")
BLOCK_ROLES = ("attn_norm",) + MATRIX_ROLES[:4] + ("ffn_norm",) + MATRIX_ROLES[4:]

PRESET_DIR = Path(__file__).parent / "presets"


@dataclass(frozen=True)
class TransformerSpec:
    vocab_size: int
    hidden_size: int
    num_layers: int
    num_heads: int
    num_kv_heads: int
    head_dim: int
    ffn_hidden: int
    max_seq_len: int
    tie_embeddings: bool = False
    pos_encoding: str = "rope"

    def __post_init__(self):
        if self.hidden_size != self.num_heads * self.head_dim:
            raise ValueError(
                f"hidden_size {self.hidden_size} != num_heads*head_dim "
                f"{self.num_heads}*{self.head_dim}"
            )
        if self.num_heads % self.num_kv_heads != 0:
            raise ValueError(f"num_kv_heads {self.num_kv_heads} must divide num_heads {self.num_heads}")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if self.vocab_size < 1 or self.max_seq_len < 1 or self.ffn_hidden < 1:
            raise ValueError("vocab_size, max_seq_len and ffn_hidden must be positive")
        if self.pos_encoding not in ("rope", "none"):
            raise ValueError(f"unknown pos_encoding {self.pos_encoding!r}")

    @property
    def kv_dim(self) -> int:
        return self.num_kv_heads * self.head_dim

    def matrix_shape(self, role: str) -> tuple[int, int]:
        """(out, in) shape of one block matrix."""
        h, kv, f = self.hidden_size, self.kv_dim, self.ffn_hidden
        return {
            "wq": (h, h),
            "wk": (kv, h),
            "wv": (kv, h),
            "wo": (h, h),
            "w_gate": (f, h),
            "w_up": (f, h),
            "w_down": (h, f),
        }[role]

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "hidden_size": self.hidden_size,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "num_kv_heads": self.num_kv_heads,
            "head_dim": self.head_dim,
            "ffn_hidden": self.ffn_hidden,
            "max_seq_len": self.max_seq_len,
            "tie_embeddings": self.tie_embeddings,
            "pos_encoding": self.pos_encoding,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerSpec":
        return cls(**d)


def load_preset(name: str, vocab_size: int | None = None) -> TransformerSpec:
    """Load a shipped spec preset (e.g. 'llama-3.1-8b-like', 'toy-8x64').

    Presets carrying vocab_size 0 derive it from the tokenizer; pass the
    tokenizer's size through `vocab_size` for those.
    """
    path = PRESET_DIR / f"{name}.toml"
    if not path.exists():
        available = sorted(p.stem for p in PRESET_DIR.glob("*.toml"))
        raise FileNotFoundError(f"no preset {name!r}; available: {available}")
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    fields = dict(doc["spec"])
    if fields.get("vocab_size", 0) == 0:
        if vocab_size is None:
            raise ValueError(
                f"preset {name!r} derives vocab_size from a tokenizer; pass vocab_size"
            )
        fields["vocab_size"] = vocab_size
    return TransformerSpec.from_dict(fields)


@dataclass
class Block:
    attn_norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ffn_norm: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor

    def named(self) -> list[tuple[str, Tensor]]:
        return [(role, getattr(self, role)) for role in BLOCK_ROLES]

    def matrices(self) -> list[tuple[str, Tensor]]:
        return [(role, getattr(self, role)) for role in MATRIX_ROLES]


class TransformerModel:
    """Spec plus concrete parameter state.

    With tie_embeddings set, `lm_head` IS the embedding tensor: one storage,
    updates through either name visible through both.
    """

    def __init__(self, spec: TransformerSpec, embedding: Tensor, blocks: list[Block],
                 final_norm: Tensor, lm_head: Tensor):
        if len(blocks) != spec.num_layers:
            raise ValueError(f"{len(blocks)} blocks for a {spec.num_layers}-layer spec")
        if spec.tie_embeddings and lm_head is not embedding:
            raise ValueError("tie_embeddings set but lm_head is separate storage")
        self.spec = spec
        self.embedding = embedding
        self.blocks = blocks
        self.final_norm = final_norm
        self.lm_head = lm_head

    @classmethod
    def build(cls, spec: TransformerSpec, seed: int = 0, dtype=np.float32) -> "TransformerModel":
        rng = T.seeded_rng(seed)
        init_std = 0.02

        def mat(shape):
            return Tensor(rng.normal(0.0, init_std, size=shape), requires_grad=True, dtype=dtype)

        def ones(n):
            return Tensor(np.ones(n), requires_grad=True, dtype=dtype)

        embedding = mat((spec.vocab_size, spec.hidden_size))
        blocks = []
        for _ in range(spec.num_layers):
            blocks.append(Block(
                attn_norm=ones(spec.hidden_size),
                wq=mat(spec.matrix_shape("wq")),
                wk=mat(spec.matrix_shape("wk")),
                wv=mat(spec.matrix_shape("wv")),
                wo=mat(spec.matrix_shape("wo")),
                ffn_norm=ones(spec.hidden_size),
                w_gate=mat(spec.matrix_shape("w_gate")),
                w_up=mat(spec.matrix_shape("w_up")),
                w_down=mat(spec.matrix_shape("w_down")),
            ))
        final_norm = ones(spec.hidden_size)
        lm_head = embedding if spec.tie_embeddings else mat((spec.vocab_size, spec.hidden_size))
        return cls(spec, embedding, blocks, final_norm, lm_head)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        """Name -> tensor; a tied head appears once, under 'embedding'."""
        params: dict[str, Tensor] = {"embedding": self.embedding}
        for i, block in enumerate(self.blocks):
            for role, tensor in block.named():
                params[f"blocks.{i}.{role}"] = tensor
        params["final_norm"] = self.final_norm
        if not self.spec.tie_embeddings:
            params["lm_head"] = self.lm_head
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def fingerprint(self) -> str:
        crc = 0
        for name, p in sorted(self.named_parameters().items()):
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(p.data).tobytes(), crc)
        return f"{self.spec.num_layers}L-{crc:08x}"

    def clone(self) -> "TransformerModel":
        return remove_layers(self, set())

    # -- forward ------------------------------------------------------------

    def forward(self, tokens: np.ndarray, capture_hidden: bool = False,
                adapters: dict | None = None):
        """Logits [batch, seq, vocab]; optionally the residual-stream taps.

        Captured hidden states are the inputs to every block plus the stream
        after the final block (n+1 entries), before the final norm.
        """
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ShapeError(f"tokens must be [batch, seq], got {tokens.shape}")
        if tokens.shape[1] > self.spec.max_seq_len:
            raise ShapeError(
                f"sequence length {tokens.shape[1]} exceeds max {self.spec.max_seq_len}"
            )
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.spec.vocab_size):
            raise ShapeError("token id out of vocabulary range")
        x = T.embedding(self.embedding, tokens)
        captured = [x.data] if capture_hidden else None
        for i, block in enumerate(self.blocks):
            block_adapters = adapters.get(i) if adapters else None
            x = block_forward(x, block, self.spec, block_adapters)
            if capture_hidden:
                captured.append(x.data)
        h = T.rms_norm(x, self.final_norm)
        logits = _adapted_linear(h, self.lm_head, None)
        if capture_hidden:
            return logits, captured
        return logits


def _adapted_linear(x: Tensor, w: Tensor, adapter) -> Tensor:
    y = T.linear(x, w)
    if adapter is not None:
        y = y + adapter.scaling * T.linear(T.linear(x, adapter.a), adapter.b)
    return y


def _split_heads(x: Tensor, n_heads: int, head_dim: int) -> Tensor:
    b, t, _ = x.shape
    return T.transpose(T.reshape(x, (b, t, n_heads, head_dim)), (0, 2, 1, 3))


_NEG_INF = -1e9


def block_forward(x: Tensor, block: Block, spec: TransformerSpec,
                  adapters: dict | None = None) -> Tensor:
    """One residual block: x + attn(norm(x)), then x + ffn(norm(x))."""
    ad = adapters or {}
    b, t, _ = x.shape

    h = T.rms_norm(x, block.attn_norm)
    q = _split_heads(_adapted_linear(h, block.wq, ad.get("wq")), spec.num_heads, spec.head_dim)
    k = _split_heads(_adapted_linear(h, block.wk, ad.get("wk")), spec.num_kv_heads, spec.head_dim)
    v = _split_heads(_adapted_linear(h, block.wv, ad.get("wv")), spec.num_kv_heads, spec.head_dim)
    if spec.pos_encoding == "rope":
        q = T.rope_rotate(q)
        k = T.rope_rotate(k)
    groups = spec.num_heads // spec.num_kv_heads
    k = T.repeat_heads(k, groups)
    v = T.repeat_heads(v, groups)
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(spec.head_dim))
    mask = np.triu(np.full((t, t), _NEG_INF, dtype=x.dtype), k=1)
    attn = T.softmax(scores + Tensor(mask))
    ctx = T.transpose(T.matmul(attn, v), (0, 2, 1, 3))
    ctx = T.reshape(ctx, (b, t, spec.hidden_size))
    x = x + _adapted_linear(ctx, block.wo, ad.get("wo"))

    h2 = T.rms_norm(x, block.ffn_norm)
    gated = T.silu(_adapted_linear(h2, block.w_gate, ad.get("w_gate"))) * _adapted_linear(
        h2, block.w_up, ad.get("w_up")
    )
    return x + _adapted_linear(gated, block.w_down, ad.get("w_down"))


# ---------------------------------------------------------------------------
# layer removal
# ---------------------------------------------------------------------------


def remove_layers(model: TransformerModel, indices: set[int]) -> TransformerModel:
    """New model without the given blocks; survivors keep order, bit-identical.

    Indices refer to the model's current block positions. The input model is
    left untouched.
    """
    n = model.spec.num_layers
    index_list = sorted(indices)
    if len(index_list) != len(set(index_list)):
        raise ValueError("duplicate layer index in removal set")
    for i in index_list:
        if not 0 <= i < n:
            raise ValueError(f"layer index {i} out of range for {n} layers")
    if len(index_list) >= n and n > 0:
        raise ValueError("refusing to remove every layer")

    def copy_tensor(p: Tensor) -> Tensor:
        return Tensor(p.data.copy(), requires_grad=p.requires_grad)

    removed = set(index_list)
    new_spec = replace(model.spec, num_layers=n - len(removed))
    embedding = copy_tensor(model.embedding)
    blocks = []
    for i, block in enumerate(model.blocks):
        if i in removed:
            continue
        blocks.append(Block(**{role: copy_tensor(t) for role, t in block.named()}))
    final_norm = copy_tensor(model.final_norm)
    lm_head = embedding if model.spec.tie_embeddings else copy_tensor(model.lm_head)
    return TransformerModel(new_spec, embedding, blocks, final_norm, lm_head)


# ---------------------------------------------------------------------------
# closed-form statistics
# ---------------------------------------------------------------------------


def params_per_layer(spec: TransformerSpec) -> int:
    mats = sum(out * inner for out, inner in (spec.matrix_shape(r) for r in MATRIX_ROLES))
    return mats + 2 * spec.hidden_size


def count_params(spec: TransformerSpec, removed_layers: int = 0,
                 count_tied_twice: bool = False) -> int:
    """Exact scalar count for a spec with `removed_layers` blocks dropped.

    Tied embeddings count once unless `count_tied_twice` asks for the
    double-counted reading.
    """
    layers = spec.num_layers - removed_layers
    if layers < 0:
        raise ValueError("removed_layers exceeds layer count")
    embed = spec.vocab_size * spec.hidden_size
    head = embed if (not spec.tie_embeddings or count_tied_twice) else 0
    return embed + head + spec.hidden_size + layers * params_per_layer(spec)


def macs_per_layer(spec: TransformerSpec, seq_len: int) -> int:
    proj = sum(out * inner for out, inner in (spec.matrix_shape(r) for r in MATRIX_ROLES[:4]))
    ffn = sum(out * inner for out, inner in (spec.matrix_shape(r) for r in MATRIX_ROLES[4:]))
    attn = 2 * seq_len * seq_len * spec.num_heads * spec.head_dim
    return seq_len * (proj + ffn) + attn


def count_macs(spec: TransformerSpec, seq_len: int = 64, removed_layers: int = 0) -> int:
    """Forward-pass multiply-accumulates: one MAC per scalar multiply in the
    matmuls (projections, attention score/value products, feed-forward, head);
    normalizations and activations excluded."""
    layers = spec.num_layers - removed_layers
    if layers < 0:
        raise ValueError("removed_layers exceeds layer count")
    head = seq_len * spec.hidden_size * spec.vocab_size
    return layers * macs_per_layer(spec, seq_len) + head


def estimate_memory_bytes(spec: TransformerSpec, batch: int = 1, seq_len: int = 64,
                          bytes_per_scalar: int = 4) -> int:
    """Analytic high-water estimate: parameter bytes plus the widest live
    activation set of one forward (stream, attention scores, logits)."""
    params = count_params(spec) * bytes_per_scalar
    stream = batch * seq_len * spec.hidden_size * 2
    scores = batch * spec.num_heads * seq_len * seq_len
    logits = batch * seq_len * spec.vocab_size
    return params + (stream + scores + logits) * bytes_per_scalar


# ---------------------------------------------------------------------------
# smoke-test sampler
# ---------------------------------------------------------------------------


def greedy_generate(model: TransformerModel, prompt: list[int], max_new_tokens: int) -> list[int]:
    """Deterministic argmax continuation; ties break to the lowest token id."""
    if not prompt:
        raise ValueError("prompt must be nonempty")
    if len(prompt) + max_new_tokens > model.spec.max_seq_len:
        raise ValueError(
            f"prompt {len(prompt)} + {max_new_tokens} new tokens exceeds "
            f"max sequence length {model.spec.max_seq_len}"
        )
    out = list(prompt)
    with T.no_grad():
        for _ in range(max_new_tokens):
            logits = model.forward(np.asarray([out]))
            out.append(int(np.argmax(logits.data[0, -1])))
    return out
