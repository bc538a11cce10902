"""The seven layer-importance metrics and the layer-similarity matrix.

Every data-driven metric is a pure function of (model, calibration set);
positional metrics (reverse-order, random) never touch weights or
activations. Scores are oriented so that LOW means prune-first, with ties
broken toward the lower layer index.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evalkit
from .data import CalibrationSet
from .model import TransformerModel, remove_layers
from .tensor import backward, cross_entropy, seeded_rng

METRIC_NAMES = (
    "reverse-order",
    "random",
    "magnitude-l1",
    "magnitude-l2",
    "taylor",
    "ppl",
    "bi",
)

DATA_DRIVEN = ("taylor", "ppl", "bi")


class MetricError(ValueError):
    pass


@dataclass
class LayerScoreSet:
    metric: str
    scores: list[float]
    prune_lowest: bool = True  # all seven metrics orient this way
    calibration_fingerprint: dict | None = None
    model_fingerprint: str | None = None
    extras: dict = field(default_factory=dict)

    @property
    def num_layers(self) -> int:
        return len(self.scores)

    def prune_order(self) -> list[int]:
        """Layer indices from prune-first to prune-last; stable on ties."""
        keyed = self.scores if self.prune_lowest else [-s for s in self.scores]
        return sorted(range(len(keyed)), key=lambda i: (keyed[i], i))

    def bottom_k(self, k: int) -> list[int]:
        if not 0 <= k <= self.num_layers:
            raise MetricError(f"k={k} out of range for {self.num_layers} layers")
        return sorted(self.prune_order()[:k])

    def to_dict(self) -> dict:
        order = self.prune_order()
        ranks = {layer: rank for rank, layer in enumerate(order)}
        return {
            "metric": self.metric,
            "prune_lowest": self.prune_lowest,
            "scores": [
                {"layer": i, "score": s, "rank": ranks[i]} for i, s in enumerate(self.scores)
            ],
            "calibration_fingerprint": self.calibration_fingerprint,
            "model_fingerprint": self.model_fingerprint,
            "extras": self.extras,
        }

    def save_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    def save_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        ranks = {layer: rank for rank, layer in enumerate(self.prune_order())}
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "score", "rank"])
            for i, s in enumerate(self.scores):
                writer.writerow([i, repr(float(s)), ranks[i]])
        return path


# ---------------------------------------------------------------------------
# positional metrics (never read weights or activations)
# ---------------------------------------------------------------------------


def reverse_order_scores(num_layers: int) -> LayerScoreSet:
    """Importance falls with depth: layer i scores its distance from the end,
    so pruning k layers always takes the final k."""
    if num_layers < 1:
        raise MetricError("need at least one layer")
    return LayerScoreSet("reverse-order", [float(num_layers - 1 - i) for i in range(num_layers)])


def random_scores(num_layers: int, seed: int = 0) -> LayerScoreSet:
    """A seeded permutation defines the prune order."""
    if num_layers < 1:
        raise MetricError("need at least one layer")
    order = seeded_rng(seed).permutation(num_layers)
    scores = [0.0] * num_layers
    for rank, layer in enumerate(order):
        scores[int(layer)] = float(rank)
    return LayerScoreSet("random", scores, extras={"seed": seed})


# ---------------------------------------------------------------------------
# weight- and activation-driven metrics
# ---------------------------------------------------------------------------


def magnitude_scores(model: TransformerModel, p: int = 1) -> LayerScoreSet:
    """Per layer: sum of entrywise p-norms over the block's weight matrices
    (norm scale vectors excluded)."""
    if p not in (1, 2):
        raise MetricError(f"p must be 1 or 2, got {p}")
    scores = []
    for block in model.blocks:
        total = 0.0
        for _, w in block.matrices():
            arr = w.data.astype(np.float64)
            total += float(np.abs(arr).sum() if p == 1 else np.sqrt((arr * arr).sum()))
        scores.append(total)
    return LayerScoreSet(
        f"magnitude-l{p}", scores, model_fingerprint=model.fingerprint()
    )


def _calibration_lm_loss(model: TransformerModel, calib: CalibrationSet):
    """Language-model loss over the calibration batch: per-sequence mean NLL,
    summed across sequences (one graph, one backward)."""
    if not calib.sequences:
        raise MetricError("empty calibration set")
    width = max(len(s) for s in calib.sequences)
    if width < 2:
        raise MetricError("calibration sequences too short to score")
    tokens = np.zeros((len(calib.sequences), width), dtype=np.int64)
    weights = np.zeros((len(calib.sequences), width - 1), dtype=np.float64)
    for i, seq in enumerate(calib.sequences):
        tokens[i, : len(seq)] = seq
        positions = len(seq) - 1
        if positions > 0:
            weights[i, :positions] = 1.0 / positions
    logits = model.forward(tokens[:, :-1])
    return cross_entropy(logits, tokens[:, 1:], mask=weights, reduction="sum")


def taylor_scores(model: TransformerModel, calib: CalibrationSet) -> LayerScoreSet:
    """First-order loss-change estimate: per layer, sum over its matrices of
    sum(|gradient * weight|), gradients from one accumulated backward."""
    loss = _calibration_lm_loss(model, calib)
    grads = backward(loss)
    scores = []
    for block in model.blocks:
        total = 0.0
        for _, w in block.matrices():
            g = grads.get(w)
            if g is not None:
                total += float(np.abs(g.astype(np.float64) * w.data.astype(np.float64)).sum())
        scores.append(total)
    return LayerScoreSet(
        "taylor",
        scores,
        calibration_fingerprint=calib.fingerprint(),
        model_fingerprint=model.fingerprint(),
    )


def _capture_streams(model: TransformerModel, calib: CalibrationSet) -> list[np.ndarray]:
    """Residual-stream tap points per calibration sequence: (n+1, T, D) each."""
    if not calib.sequences:
        raise MetricError("empty calibration set")
    from .tensor import no_grad

    streams = []
    with no_grad():
        for seq in calib.sequences:
            _, hidden = model.forward(np.asarray([seq]), capture_hidden=True)
            streams.append(np.stack([h[0] for h in hidden]).astype(np.float64))
    return streams


def _mean_pairwise_cosine(streams: list[np.ndarray]) -> np.ndarray:
    """Mean cosine between tap points i and j over every (sample, position);
    zero-norm rows are skipped with a warning."""
    taps = streams[0].shape[0]
    sums = np.zeros((taps, taps))
    counts = np.zeros((taps, taps))
    skipped = 0
    for stream in streams:
        norms = np.linalg.norm(stream, axis=-1)  # (taps, T)
        valid = norms > 0.0
        skipped += int((~valid).sum())
        safe = np.where(valid, norms, 1.0)
        unit = stream / safe[..., None]
        for t in range(stream.shape[1]):
            v = valid[:, t]
            cos = unit[:, t, :] @ unit[:, t, :].T
            pair_valid = np.outer(v, v)
            sums += np.where(pair_valid, cos, 0.0)
            counts += pair_valid
    if skipped:
        warnings.warn(f"skipped {skipped} zero-norm hidden rows in cosine averages")
    if (counts == 0).any():
        raise MetricError("all hidden rows degenerate for some layer pair")
    return sums / counts


def bi_scores(model: TransformerModel, calib: CalibrationSet) -> LayerScoreSet:
    """Block influence: 1 minus the mean cosine between each block's input
    and output rows; low influence means the block barely changes the stream."""
    mean_cos = _mean_pairwise_cosine(_capture_streams(model, calib))
    scores = [float(1.0 - mean_cos[i, i + 1]) for i in range(model.spec.num_layers)]
    return LayerScoreSet(
        "bi",
        scores,
        calibration_fingerprint=calib.fingerprint(),
        model_fingerprint=model.fingerprint(),
    )


def layer_similarity(model: TransformerModel, calib: CalibrationSet) -> np.ndarray:
    """n x n mean-cosine matrix between the hidden states entering each layer."""
    n = model.spec.num_layers
    mean_cos = _mean_pairwise_cosine(_capture_streams(model, calib))
    return mean_cos[:n, :n]


def ppl_scores(model: TransformerModel, calib: CalibrationSet) -> LayerScoreSet:
    """Perplexity of the model with each single layer removed, on the
    calibration set; the unpruned baseline rides along in extras."""
    if model.spec.num_layers < 2:
        raise MetricError("ppl metric needs at least two layers")
    baseline = evalkit.perplexity(model, calib.sequences)
    scores = []
    for i in range(model.spec.num_layers):
        pruned = remove_layers(model, {i})
        scores.append(float(evalkit.perplexity(pruned, calib.sequences)))
    return LayerScoreSet(
        "ppl",
        scores,
        calibration_fingerprint=calib.fingerprint(),
        model_fingerprint=model.fingerprint(),
        extras={"baseline_ppl": float(baseline)},
    )


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def compute_scores(
    metric: str,
    model: TransformerModel,
    calib: CalibrationSet | None = None,
    seed: int = 0,
) -> LayerScoreSet:
    if metric not in METRIC_NAMES:
        raise MetricError(f"unknown metric {metric!r}; expected one of {METRIC_NAMES}")
    if metric in DATA_DRIVEN and calib is None:
        raise MetricError(f"metric {metric!r} needs a calibration set")
    if metric == "reverse-order":
        return reverse_order_scores(model.spec.num_layers)
    if metric == "random":
        return random_scores(model.spec.num_layers, seed)
    if metric == "magnitude-l1":
        return magnitude_scores(model, p=1)
    if metric == "magnitude-l2":
        return magnitude_scores(model, p=2)
    if metric == "taylor":
        return taylor_scores(model, calib)
    if metric == "ppl":
        return ppl_scores(model, calib)
    return bi_scores(model, calib)


def save_similarity_csv(matrix: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer"] + [str(j) for j in range(matrix.shape[1])])
        for i, row in enumerate(matrix):
            writer.writerow([i] + [repr(float(v)) for v in row])
    return path
