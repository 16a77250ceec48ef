"""Frozen point classifier used as the discriminative expert.

Inputs pass through ``psi_transform`` (standardization with training-set
statistics) and a tanh MLP. The activations of the last hidden layer double as
the feature space for distribution distances.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import grad as G
from . import rng
from .diffusion import FORMAT_VERSION, CheckpointError
from .grad import Tensor
from .scenarios import LabeledDataset


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise G.ShapeError("mean and std must be vectors of equal length")
        if np.any(self.std <= 0):
            raise ValueError("standard deviations must be positive")

    @classmethod
    def of(cls, points: np.ndarray) -> "NormStats":
        return cls(points.mean(axis=0), points.std(axis=0))


def psi_transform(x, stats: NormStats) -> Tensor:
    """``(x - mean) / std`` per dimension, differentiable in ``x``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 2 or x.shape[1] != stats.mean.shape[0]:
        raise G.ShapeError(f"points of shape {x.shape}, stats for dim {stats.mean.shape[0]}")
    return G.affine_const(x, 1.0 / stats.std, -stats.mean)


@dataclass
class ClassifierModel:
    K: int
    stats: NormStats
    layers: List[Tuple[np.ndarray, np.ndarray]]
    hidden: Tuple[int, ...] = (32, 32)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        widths = [self.data_dim, *self.hidden, self.K]
        if len(self.layers) != len(widths) - 1:
            raise CheckpointError(f"expected {len(widths) - 1} layers, got {len(self.layers)}")
        for (W, b), a, c in zip(self.layers, widths[:-1], widths[1:]):
            if W.shape != (a, c) or b.shape != (c,):
                raise CheckpointError(f"layer shapes {W.shape}/{b.shape}, expected ({a}, {c})")

    @property
    def data_dim(self) -> int:
        return self.stats.mean.shape[0]


def _hidden_forward(model: ClassifierModel, x, params=None) -> Tuple[Tensor, Tuple[Tensor, Tensor]]:
    if params is None:
        params = [(Tensor(W), Tensor(b)) for W, b in model.layers]
    h = psi_transform(x, model.stats)
    for W, b in params[:-1]:
        h = G.tanh(G.add_broadcast(G.matmul(h, W), b))
    return h, params[-1]


def predict_logits(model: ClassifierModel, x, params=None) -> Tensor:
    h, (W, b) = _hidden_forward(model, x, params)
    return G.add_broadcast(G.matmul(h, W), b)


def predict_class(model: ClassifierModel, x) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return np.argmax(predict_logits(model, x).data, axis=1)


def penultimate_features(model: ClassifierModel, x) -> np.ndarray:
    return _hidden_forward(model, x)[0].data


def accuracy(model: ClassifierModel, ds: LabeledDataset) -> float:
    if len(ds) == 0:
        raise ValueError("accuracy of an empty dataset")
    return float(np.mean(predict_class(model, ds.points) == ds.labels))


@dataclass
class ClassifierTrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 5e-3
    hidden: Tuple[int, ...] = (32, 32)


def train_classifier(
    ds: LabeledDataset,
    cfg: ClassifierTrainConfig = ClassifierTrainConfig(),
    seed: int = 0,
    num_classes: Optional[int] = None,
) -> ClassifierModel:
    """Minibatch Adam on softmax cross-entropy; deterministic given ``seed``."""
    return fit_classifier(ds, cfg, seed, num_classes)[0]


def fit_classifier(
    ds: LabeledDataset,
    cfg: ClassifierTrainConfig = ClassifierTrainConfig(),
    seed: int = 0,
    num_classes: Optional[int] = None,
) -> Tuple[ClassifierModel, List[float]]:
    """Like ``train_classifier`` but also returns the mean loss of every epoch."""
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    K = int(num_classes if num_classes is not None else ds.labels.max() + 1)
    if K < 2:
        raise ValueError("a classifier needs at least two classes")
    missing = sorted(set(range(K)) - set(ds.labels.tolist()))
    if missing:
        raise ValueError(f"classes {missing} have no training points")

    g = rng.stream(seed, "classifier")
    stats = NormStats.of(ds.points)
    widths = [ds.dim, *cfg.hidden, K]
    weights = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        weights[f"W{i}"] = g.standard_normal((a, b)) * math.sqrt(1.0 / a)
        weights[f"b{i}"] = np.zeros(b)
    n_layers = len(widths) - 1
    model = ClassifierModel(K, stats, [(weights[f"W{i}"], weights[f"b{i}"]) for i in range(n_layers)], tuple(cfg.hidden))

    state = G.AdamState()
    n = len(ds)
    losses = []
    for _ in range(cfg.epochs):
        order = g.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            leaves = {k: Tensor(v, requires_grad=True) for k, v in weights.items()}
            params = [(leaves[f"W{i}"], leaves[f"b{i}"]) for i in range(n_layers)]
            loss = G.softmax_cross_entropy(predict_logits(model, ds.points[idx], params), ds.labels[idx])
            grads = G.backward(loss)
            weights, _ = G.adam_step(weights, {k: grads[v] for k, v in leaves.items()}, state, cfg.lr)
            total += float(loss.data) * len(idx)
        losses.append(total / n)
    layers = [(weights[f"W{i}"], weights[f"b{i}"]) for i in range(n_layers)]
    return ClassifierModel(K, stats, layers, tuple(cfg.hidden)), losses


def classifier_to_dict(model: ClassifierModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "classifier",
        "K": model.K,
        "data_dim": model.data_dim,
        "hidden": list(model.hidden),
        "norm_stats": {"mean": model.stats.mean.tolist(), "std": model.stats.std.tolist()},
        "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in model.layers],
    }


def classifier_from_dict(d: dict) -> ClassifierModel:
    if d.get("kind") != "classifier":
        raise CheckpointError(f"checkpoint kind is {d.get('kind')!r}, expected 'classifier'")
    if d.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {d.get('format_version')!r}")
    try:
        stats = NormStats(d["norm_stats"]["mean"], d["norm_stats"]["std"])
        if stats.mean.shape[0] != int(d["data_dim"]):
            raise CheckpointError("norm_stats width disagrees with data_dim")
        layers = [(np.array(l["W"], dtype=np.float64), np.array(l["b"], dtype=np.float64)) for l in d["layers"]]
        return ClassifierModel(int(d["K"]), stats, layers, tuple(d["hidden"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid classifier checkpoint: {exc}") from exc


def dumps_classifier(model: ClassifierModel) -> str:
    return json.dumps(classifier_to_dict(model))


def loads_classifier(text: str) -> ClassifierModel:
    return classifier_from_dict(json.loads(text))
