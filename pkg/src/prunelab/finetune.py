"""Post-pruning recovery: low-rank adapters, partial-layer freezing, training.

Adapters follow the zero-init contract: A starts Gaussian, B starts zero, so
an attached-but-untrained adapter changes nothing. Merging folds
scaling * B @ A into the base weight and discards the adapter.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import SftDataset, batch_records
from .model import MATRIX_ROLES, TransformerModel, TransformerSpec, remove_layers
from .optim import AdamW, AdamWConfig
from .tensor import Tensor, backward, cross_entropy, seeded_rng


class FinetuneError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, curve: list):
        super().__init__(message)
        self.curve = curve


# ---------------------------------------------------------------------------
# low-rank adapters
# ---------------------------------------------------------------------------

# every block matrix gets a pair by default; subsets via the roles argument
DEFAULT_ADAPTER_ROLES = MATRIX_ROLES
ADAPTER_INIT_STD = 0.02


@dataclass
class AdapterPair:
    layer_index: int
    role: str
    rank: int
    a: Tensor  # (rank, in_dim), Gaussian init
    b: Tensor  # (out_dim, rank), zero init
    scaling: float

    def delta(self) -> np.ndarray:
        return self.scaling * (self.b.data @ self.a.data)

    def trainable_count(self) -> int:
        return self.a.size + self.b.size


@dataclass
class AdapterSet:
    pairs: list[AdapterPair]
    rank: int
    alpha: float

    def by_layer(self) -> dict[int, dict[str, AdapterPair]]:
        table: dict[int, dict[str, AdapterPair]] = {}
        for pair in self.pairs:
            table.setdefault(pair.layer_index, {})[pair.role] = pair
        return table

    def parameters(self) -> list[Tensor]:
        params = []
        for pair in self.pairs:
            params.extend([pair.a, pair.b])
        return params

    def trainable_count(self) -> int:
        return sum(pair.trainable_count() for pair in self.pairs)


class AdaptedModel:
    """View of a frozen base model with adapter deltas on chosen matrices."""

    def __init__(self, base: TransformerModel, adapters: AdapterSet):
        self.base = base
        self.adapters = adapters
        self._by_layer = adapters.by_layer()

    @property
    def spec(self) -> TransformerSpec:
        return self.base.spec

    def forward(self, tokens, capture_hidden: bool = False):
        return self.base.forward(tokens, capture_hidden=capture_hidden, adapters=self._by_layer)

    def parameters(self) -> list[Tensor]:
        return self.adapters.parameters()

    def trainable_parameters(self) -> list[Tensor]:
        return self.adapters.parameters()


def attach_adapters(
    model: TransformerModel,
    roles: tuple[str, ...] | None = None,
    rank: int = 8,
    alpha: float = 16.0,
    seed: int = 0,
) -> AdaptedModel:
    """Freeze the base model and attach rank-d pairs to the chosen matrices
    of every block (default: all of them)."""
    roles = tuple(roles) if roles else DEFAULT_ADAPTER_ROLES
    unknown = [r for r in roles if r not in MATRIX_ROLES]
    if unknown:
        raise FinetuneError(f"unknown adapter targets {unknown}; valid: {MATRIX_ROLES}")
    rng = seeded_rng(seed)
    scaling = alpha / rank
    pairs = []
    for i, block in enumerate(model.blocks):
        for role in roles:
            w = getattr(block, role)
            out_dim, in_dim = w.shape
            if rank > min(out_dim, in_dim):
                raise FinetuneError(
                    f"rank {rank} exceeds min dim of blocks.{i}.{role} {w.shape}"
                )
            a = Tensor(
                rng.normal(0.0, ADAPTER_INIT_STD, size=(rank, in_dim)),
                requires_grad=True,
                dtype=w.data.dtype,
            )
            b = Tensor(np.zeros((out_dim, rank)), requires_grad=True, dtype=w.data.dtype)
            pairs.append(AdapterPair(i, role, rank, a, b, scaling))
    for p in model.parameters():
        p.requires_grad = False
    return AdaptedModel(model, AdapterSet(pairs, rank, alpha))


def merge_adapters(adapted: AdaptedModel) -> TransformerModel:
    """Fold every delta into its base weight; returns a plain model whose
    forward matches the adapted view within float rounding."""
    merged = remove_layers(adapted.base, set())  # deep copy, re-ties head
    for pair in adapted.adapters.pairs:
        w = getattr(merged.blocks[pair.layer_index], pair.role)
        w.data = (w.data + pair.delta().astype(w.data.dtype)).astype(w.data.dtype)
    unfreeze_all(merged)
    return merged


def adapter_param_count(
    spec: TransformerSpec, roles: tuple[str, ...] | None = None, rank: int = 8
) -> int:
    """Closed form: layers * sum over targets of rank*(in+out)."""
    roles = tuple(roles) if roles else DEFAULT_ADAPTER_ROLES
    per_layer = 0
    for role in roles:
        out_dim, in_dim = spec.matrix_shape(role)
        per_layer += rank * (in_dim + out_dim)
    return spec.num_layers * per_layer


# ---------------------------------------------------------------------------
# partial-layer freezing
# ---------------------------------------------------------------------------

FREEZE_MODES = ("adapter", "lm_head_only", "lm_head_last_k", "full")


@dataclass
class FreezePolicy:
    mode: str
    last_k: int = 0
    allow_tied_embedding_updates: bool = False

    def __post_init__(self):
        if self.mode not in FREEZE_MODES:
            raise FinetuneError(f"unknown freeze mode {self.mode!r}; valid: {FREEZE_MODES}")
        if self.mode == "lm_head_last_k" and self.last_k not in (1, 2, 3):
            raise FinetuneError("lm_head_last_k trains 1, 2 or 3 trailing blocks")

    def trainable_names(self, model: TransformerModel) -> set[str]:
        spec = model.spec
        if self.mode == "full":
            return set(model.named_parameters())
        if self.mode == "adapter":
            raise FinetuneError("adapter mode freezes via attach_adapters, not apply_freeze")
        if spec.tie_embeddings and not self.allow_tied_embedding_updates:
            raise FinetuneError(
                "lm_head is tied to the embedding table: head-only fine-tuning would "
                "train the embeddings too; pass allow_tied_embedding_updates=True to accept"
            )
        head_name = "embedding" if spec.tie_embeddings else "lm_head"
        names = {head_name}
        if self.mode == "lm_head_last_k":
            if self.last_k > spec.num_layers:
                raise FinetuneError(
                    f"policy trains last {self.last_k} blocks but model has {spec.num_layers}"
                )
            for i in range(spec.num_layers - self.last_k, spec.num_layers):
                block = model.blocks[i]
                names.update(f"blocks.{i}.{role}" for role, _ in block.named())
            names.add("final_norm")  # trained whenever any block is
        return names


def apply_freeze(model: TransformerModel, policy: FreezePolicy) -> set[str]:
    """Set requires-gradient flags per the policy; returns the trainable names."""
    trainable = policy.trainable_names(model)
    for name, p in model.named_parameters().items():
        p.requires_grad = name in trainable
    return trainable


def unfreeze_all(model: TransformerModel) -> None:
    for p in model.parameters():
        p.requires_grad = True


def freeze_trainable_count(spec: TransformerSpec, policy: FreezePolicy) -> int:
    """Closed-form trainable-scalar count for a partial policy on a spec."""
    from .model import count_params, params_per_layer

    if policy.mode == "full":
        return count_params(spec)
    if policy.mode == "adapter":
        raise FinetuneError("use adapter_param_count for adapter policies")
    if spec.tie_embeddings and not policy.allow_tied_embedding_updates:
        raise FinetuneError("tied embeddings reject lm_head policies without override")
    head = spec.vocab_size * spec.hidden_size
    if policy.mode == "lm_head_only":
        return head
    return head + policy.last_k * params_per_layer(spec) + spec.hidden_size


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 2
    batch_size: int = 64
    learning_rate: float = 1e-5
    warmup_steps: int = 100
    adapter_rank: int = 8
    seed: int = 0
    max_seq_len: int = 512
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if self.epochs < 0:
            raise FinetuneError("epochs must be >= 0")
        if min(self.batch_size, self.warmup_steps + 1, self.adapter_rank, self.max_seq_len) < 1:
            raise FinetuneError("batch_size, adapter_rank and max_seq_len must be positive")
        if self.learning_rate <= 0:
            raise FinetuneError("learning_rate must be positive")


@dataclass
class TrainResult:
    curve: list[tuple[int, float, float]]  # (step, loss, lr)
    steps: int
    initial_loss: float | None
    final_loss: float | None

    def save_curve(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "lr"])
            writer.writerows(self.curve)
        return path


def train(target, dataset: SftDataset, config: TrainConfig) -> TrainResult:
    """Masked next-token fine-tuning with AdamW and linear warmup.

    `target` is a TransformerModel (freeze flags decide what moves) or an
    AdaptedModel (only adapter pairs move). Frozen parameters are
    bit-identical before and after. A non-finite loss aborts with the curve
    preserved on the raised TrainingDiverged.
    """
    if not dataset.records:
        raise FinetuneError("empty fine-tuning dataset")
    trainable = [p for p in target.parameters() if p.requires_grad]
    if config.epochs > 0 and not trainable:
        raise FinetuneError("nothing to train: every parameter is frozen")
    optimizer = AdamW(
        trainable,
        AdamWConfig(
            learning_rate=config.learning_rate,
            betas=config.betas,
            weight_decay=config.weight_decay,
            warmup_steps=config.warmup_steps,
        ),
    )
    rng = seeded_rng(config.seed)
    curve: list[tuple[int, float, float]] = []
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(dataset.records))
        for start in range(0, len(order), config.batch_size):
            batch = [dataset.records[i] for i in order[start : start + config.batch_size]]
            tokens, mask = batch_records(batch)
            if tokens.shape[1] > config.max_seq_len:
                tokens = tokens[:, : config.max_seq_len]
                mask = mask[:, : config.max_seq_len]
            if mask[:, 1:].sum() == 0:
                continue
            try:
                logits = target.forward(tokens[:, :-1])
                loss = cross_entropy(logits, tokens[:, 1:], mask=mask[:, 1:])
                loss_value = loss.item()
                grads = backward(loss)
            except T.NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite loss at step {step}: {exc}", curve) from exc
            if not math.isfinite(loss_value):
                raise TrainingDiverged(f"non-finite loss at step {step}", curve)
            lr = optimizer.step(grads)
            step += 1
            curve.append((step, loss_value, lr))
    return TrainResult(
        curve=curve,
        steps=step,
        initial_loss=curve[0][1] if curve else None,
        final_loss=curve[-1][1] if curve else None,
    )


@dataclass
class LmTrainConfig:
    """Base language-model training over raw corpus windows."""

    steps: int = 300
    batch_size: int = 8
    seq_len: int = 64
    learning_rate: float = 1e-3
    warmup_steps: int = 30
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if min(self.steps, self.batch_size, self.seq_len) < 1:
            raise FinetuneError("steps, batch_size and seq_len must be positive")


def train_lm(model: TransformerModel, docs: list[list[int]], config: LmTrainConfig) -> TrainResult:
    """Next-token training on random document windows; seeded and abortable
    on divergence, like `train`."""
    usable = [d for d in docs if len(d) >= 2]
    if not usable:
        raise FinetuneError("corpus has no documents with at least two tokens")
    optimizer = AdamW(
        [p for p in model.parameters() if p.requires_grad],
        AdamWConfig(
            learning_rate=config.learning_rate,
            warmup_steps=config.warmup_steps,
            weight_decay=config.weight_decay,
        ),
    )
    rng = seeded_rng(config.seed)
    curve: list[tuple[int, float, float]] = []
    width = config.seq_len + 1
    for step in range(1, config.steps + 1):
        tokens = np.zeros((config.batch_size, width), dtype=np.int64)
        mask = np.zeros((config.batch_size, width - 1), dtype=np.float64)
        for row in range(config.batch_size):
            doc = usable[int(rng.integers(len(usable)))]
            if len(doc) > width:
                off = int(rng.integers(len(doc) - width + 1))
                window = doc[off : off + width]
            else:
                window = doc
            tokens[row, : len(window)] = window
            mask[row, : len(window) - 1] = 1.0
        try:
            logits = model.forward(tokens[:, :-1])
            loss = cross_entropy(logits, tokens[:, 1:], mask=mask)
            loss_value = loss.item()
            grads = backward(loss)
        except T.NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite loss at step {step}: {exc}", curve) from exc
        if not math.isfinite(loss_value):
            raise TrainingDiverged(f"non-finite loss at step {step}", curve)
        lr = optimizer.step(grads)
        curve.append((step, loss_value, lr))
    return TrainResult(
        curve=curve,
        steps=len(curve),
        initial_loss=curve[0][1] if curve else None,
        final_loss=curve[-1][1] if curve else None,
    )


def run_recovery(model: TransformerModel, spec) -> tuple[TransformerModel, dict]:
    """Pipeline hook: fine-tune a freshly pruned model per a FinetuneSpec.

    lora: attach -> train -> merge back. partial: freeze to head+last-k,
    train, unfreeze. Returns the recovered model and a summary dict.
    """
    config = spec.train_config or TrainConfig()
    if spec.method == "lora":
        adapted = attach_adapters(model, roles=spec.roles, rank=spec.rank, alpha=spec.alpha)
        result = train(adapted, spec.dataset, config)
        merged = merge_adapters(adapted)
        unfreeze_all(model)
        summary = {
            "method": "lora",
            "rank": spec.rank,
            "trainable": adapted.adapters.trainable_count(),
        }
        recovered = merged
    elif spec.method == "partial":
        policy = FreezePolicy("lm_head_last_k", last_k=spec.last_k)
        trainable_names = apply_freeze(model, policy)
        result = train(model, spec.dataset, config)
        unfreeze_all(model)
        summary = {
            "method": "partial",
            "last_k": spec.last_k,
            "trainable": sum(
                p.size for name, p in model.named_parameters().items() if name in trainable_names
            ),
        }
        recovered = model
    else:
        raise FinetuneError(f"run_recovery cannot handle method {spec.method!r}")
    summary.update(
        steps=result.steps,
        initial_loss=result.initial_loss,
        final_loss=result.final_loss,
        curve=list(result.curve),
        train_config=asdict(config),
    )
    return recovered, summary
