"""Labeled synthetic point clouds with caption vocabularies.

Three built-in scenarios mimic situations where a text-conditioned generator
misses the intended class:

``ambiguity``
    The caption ``tiger cat`` is mostly attached to tigers, so prompting with
    it yields tigers rather than tiger cats.
``finegrained``
    Four sparrow species sit close together on an arc and are nearly always
    captioned just ``sparrow``; the species words are rare.
``bias``
    Most waterbirds appear in front of a "water" background, modelled as a
    shift along axis 1, so a classifier learns the background.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import rng

EMPTY = ""
Caption = Tuple[str, ...]


class ScenarioError(ValueError):
    pass


@dataclass
class ClassSpec:
    id: int
    label: str
    mean: np.ndarray
    cov: np.ndarray
    # optional "background" shift applied to a fraction of samples
    offset: Optional[np.ndarray] = None
    offset_prob: float = 0.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if self.offset is not None:
            self.offset = np.asarray(self.offset, dtype=np.float64)


@dataclass
class ScenarioSpec:
    name: str
    dim: int
    classes: List[ClassSpec]
    vocab: List[str]
    caption_dist: List[List[Tuple[Caption, float]]]

    def __post_init__(self):
        self.caption_dist = [[(tuple(toks), float(p)) for toks, p in dist] for dist in self.caption_dist]
        if EMPTY not in self.vocab:
            self.vocab = [EMPTY] + list(self.vocab)
        self.validate()

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def labels(self) -> List[str]:
        return [c.label for c in self.classes]

    def class_index(self, label: str) -> int:
        for c in self.classes:
            if c.label == label:
                return c.id
        raise ScenarioError(f"no class labelled {label!r} in scenario {self.name!r}")

    def validate(self) -> None:
        if self.vocab[0] != EMPTY:
            raise ScenarioError("the empty token must be vocab entry 0")
        if len(set(self.vocab)) != len(self.vocab):
            raise ScenarioError("duplicate vocab entries")
        ids = [c.id for c in self.classes]
        if ids != list(range(len(ids))):
            raise ScenarioError(f"class ids must be 0..K-1 in order, got {ids}")
        if len(self.caption_dist) != len(self.classes):
            raise ScenarioError("need one caption distribution per class")
        vocab = set(self.vocab)
        for c, dist in zip(self.classes, self.caption_dist):
            if c.mean.shape != (self.dim,) or c.cov.shape != (self.dim, self.dim):
                raise ScenarioError(f"class {c.label!r}: mean/cov do not match dim={self.dim}")
            if c.offset is not None and c.offset.shape != (self.dim,):
                raise ScenarioError(f"class {c.label!r}: offset does not match dim={self.dim}")
            if not 0.0 <= c.offset_prob <= 1.0:
                raise ScenarioError(f"class {c.label!r}: offset_prob outside [0, 1]")
            total = sum(p for _, p in dist)
            if abs(total - 1.0) > 1e-9:
                raise ScenarioError(f"class {c.label!r}: caption probabilities sum to {total}")
            for toks, p in dist:
                if p < 0 or not toks:
                    raise ScenarioError(f"class {c.label!r}: bad caption {toks!r} / {p}")
                missing = [t for t in toks if t not in vocab]
                if missing:
                    raise ScenarioError(f"caption tokens {missing} not in vocab")
        for c in self.classes:
            _check_spd(c.cov, c.label)


def _check_spd(cov: np.ndarray, label: str) -> None:
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
        raise ScenarioError(f"class {label!r}: covariance is not symmetric")
    if np.linalg.eigvalsh(cov).min() <= 0:
        raise ScenarioError(f"class {label!r}: covariance is not positive definite")


@dataclass
class LabeledDataset:
    points: np.ndarray
    labels: np.ndarray
    captions: List[Caption]

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.captions = [tuple(c) for c in self.captions]
        if not (len(self.points) == len(self.labels) == len(self.captions)):
            raise ScenarioError("points, labels and captions differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.points[idx], self.labels[idx], [self.captions[i] for i in idx])

    def of_class(self, k: int) -> "LabeledDataset":
        return self.subset(np.flatnonzero(self.labels == k))

    @staticmethod
    def concat(parts: Sequence["LabeledDataset"]) -> "LabeledDataset":
        parts = [p for p in parts if len(p)]
        return LabeledDataset(
            np.concatenate([p.points for p in parts]),
            np.concatenate([p.labels for p in parts]),
            [c for p in parts for c in p.captions],
        )


def sample_dataset(spec: ScenarioSpec, n_per_class: int, seed: int) -> LabeledDataset:
    """Draw ``n_per_class`` points and captions for every class, class by class."""
    if n_per_class < 1:
        raise ScenarioError("n_per_class must be at least 1")
    spec.validate()
    points, labels, captions = [], [], []
    for c, dist in zip(spec.classes, spec.caption_dist):
        g = rng.stream(seed, f"data/{spec.name}/{c.label}")
        chol = np.linalg.cholesky(c.cov)
        x = c.mean + g.standard_normal((n_per_class, spec.dim)) @ chol.T
        if c.offset is not None and c.offset_prob > 0:
            shifted = g.random(n_per_class) < c.offset_prob
            x = x + shifted[:, None] * c.offset
        probs = np.array([p for _, p in dist])
        picks = g.choice(len(dist), size=n_per_class, p=probs / probs.sum())
        points.append(x)
        labels.append(np.full(n_per_class, c.id))
        captions.extend(dist[i][0] for i in picks)
    return LabeledDataset(np.concatenate(points), np.concatenate(labels), captions)


def train_test_split(ds: LabeledDataset, test_frac: float, seed: int) -> Tuple[LabeledDataset, LabeledDataset]:
    """Stratified split; each class puts ``max(1, floor(test_frac * n_c))`` points in test."""
    if not 0.0 < test_frac < 1.0:
        raise ScenarioError("test_frac must lie strictly between 0 and 1")
    train_idx, test_idx = [], []
    for k in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == k)
        if len(idx) < 2:
            raise ScenarioError(f"class {k} has fewer than 2 points")
        perm = rng.stream(seed, "split", int(k)).permutation(idx)
        n_test = min(max(1, int(math.floor(test_frac * len(idx)))), len(idx) - 1)
        test_idx.append(np.sort(perm[:n_test]))
        train_idx.append(np.sort(perm[n_test:]))
    return ds.subset(np.concatenate(train_idx)), ds.subset(np.concatenate(test_idx))


# --- built-in scenarios ----------------------------------------------------

def _ambiguity() -> ScenarioSpec:
    eye = np.eye(2)
    classes = [
        ClassSpec(0, "tiger", [-4.0, 0.0], eye),
        ClassSpec(1, "tiger_cat", [4.0, 0.0], eye),
        ClassSpec(2, "house_cat", [0.0, 4.0], eye),
    ]
    captions = [
        [(("tiger", "cat"), 0.8), (("tiger",), 0.2)],
        [(("tiger", "cat"), 0.2), (("striped", "cat"), 0.8)],
        [(("cat",), 0.5), (("house", "cat"), 0.5)],
    ]
    vocab = [EMPTY, "tiger", "cat", "striped", "house"]
    return ScenarioSpec("ambiguity", 2, classes, vocab, captions)


FINEGRAINED_SPECIES = ("grasshopper", "savannah", "song", "field")


# caption noise of the fine-grained scenario: a point is captioned with its own
# species name rarely, with a neighbouring species' name about as often, and
# otherwise only as "sparrow"
FINEGRAINED_OWN_P = 0.06
FINEGRAINED_NEIGHBOUR_P = 0.03


def _finegrained() -> ScenarioSpec:
    radius, gap = 2.0, 1.2
    step = 2.0 * math.asin(gap / (2.0 * radius))  # chord between neighbours equals gap
    n = len(FINEGRAINED_SPECIES)
    classes, captions = [], []
    for i, word in enumerate(FINEGRAINED_SPECIES):
        angle = math.pi / 2 + (i - 1.5) * step
        mean = [radius * math.cos(angle), radius * math.sin(angle)]
        classes.append(ClassSpec(i, f"{word}_sparrow", mean, 0.09 * np.eye(2)))
        dist = [((word, "sparrow"), FINEGRAINED_OWN_P)]
        for j in (i - 1, i + 1):
            if 0 <= j < n:
                dist.append(((FINEGRAINED_SPECIES[j], "sparrow"), FINEGRAINED_NEIGHBOUR_P))
        dist.append((("sparrow",), 1.0 - sum(p for _, p in dist)))
        captions.append(dist)
    vocab = [EMPTY, "sparrow", *FINEGRAINED_SPECIES]
    return ScenarioSpec("finegrained", 2, classes, vocab, captions)


BIAS_OFFSET = np.array([0.0, 3.0])
BIAS_THRESHOLD = 1.5


def _bias() -> ScenarioSpec:
    # std 0.5 puts both modes of axis 1 three deviations from BIAS_THRESHOLD
    cov = 0.25 * np.eye(2)
    classes = [
        ClassSpec(0, "waterbird", [-1.5, 0.0], cov, offset=BIAS_OFFSET, offset_prob=0.9),
        ClassSpec(1, "landbird", [1.5, 0.0], cov),
    ]
    captions = [
        [(("waterbird",), 0.5), (("bird",), 0.5)],
        [(("landbird",), 0.5), (("bird",), 0.5)],
    ]
    vocab = [EMPTY, "bird", "waterbird", "landbird"]
    return ScenarioSpec("bias", 2, classes, vocab, captions)


_BUILTIN = {"ambiguity": _ambiguity, "finegrained": _finegrained, "bias": _bias}


def builtin_scenario(kind: str) -> ScenarioSpec:
    try:
        return _BUILTIN[kind]()
    except KeyError:
        raise ScenarioError(f"unknown scenario {kind!r}; choose from {sorted(_BUILTIN)}") from None


def builtin_names() -> List[str]:
    return sorted(_BUILTIN)


# --- persistence -----------------------------------------------------------

_SPEC_KEYS = {"name", "dim", "vocab", "classes", "captions"}
_CLASS_KEYS = {"label", "mean", "cov", "offset", "offset_prob"}


def scenario_to_dict(spec: ScenarioSpec) -> dict:
    classes = []
    for c in spec.classes:
        entry = {"label": c.label, "mean": c.mean.tolist(), "cov": c.cov.tolist()}
        if c.offset is not None:
            entry["offset"] = c.offset.tolist()
            entry["offset_prob"] = c.offset_prob
        classes.append(entry)
    return {
        "name": spec.name,
        "dim": spec.dim,
        "vocab": list(spec.vocab),
        "classes": classes,
        "captions": [[{"tokens": list(t), "prob": p} for t, p in dist] for dist in spec.caption_dist],
    }


def scenario_from_dict(d: dict) -> ScenarioSpec:
    unknown = set(d) - _SPEC_KEYS
    if unknown:
        raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
    classes = []
    for i, c in enumerate(d["classes"]):
        bad = set(c) - _CLASS_KEYS
        if bad:
            raise ScenarioError(f"unknown class keys: {sorted(bad)}")
        classes.append(
            ClassSpec(i, c["label"], c["mean"], c["cov"], offset=c.get("offset"), offset_prob=c.get("offset_prob", 0.0))
        )
    captions = [[(tuple(e["tokens"]), e["prob"]) for e in dist] for dist in d["captions"]]
    vocab = d.get("vocab") or sorted({t for dist in captions for toks, _ in dist for t in toks})
    return ScenarioSpec(d["name"], int(d.get("dim", 2)), classes, list(vocab), captions)


def save_scenario(spec: ScenarioSpec, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(spec), indent=2) + "\n", encoding="utf-8")


def load_scenario(path) -> ScenarioSpec:
    return scenario_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def resolve_scenario(name_or_path: str) -> ScenarioSpec:
    if name_or_path in _BUILTIN:
        return builtin_scenario(name_or_path)
    p = Path(name_or_path)
    if p.suffix == ".json" and p.exists():
        return load_scenario(p)
    raise ScenarioError(f"unknown scenario {name_or_path!r}; choose from {sorted(_BUILTIN)} or a .json file")


def dataset_to_csv(ds: LabeledDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{j}" for j in range(ds.dim)] + ["label", "caption"])
    for x, y, cap in zip(ds.points, ds.labels, ds.captions):
        w.writerow([repr(float(v)) for v in x] + [int(y), " ".join(cap)])
    return buf.getvalue()


def save_dataset(ds: LabeledDataset, path) -> None:
    Path(path).write_text(dataset_to_csv(ds), encoding="utf-8")


def load_dataset(path) -> LabeledDataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ScenarioError(f"{path}: empty dataset file")
    header = rows[0]
    if header[-2:] != ["label", "caption"] or not all(h == f"x{j}" for j, h in enumerate(header[:-2])):
        raise ScenarioError(f"{path}: unexpected header {header}")
    dim = len(header) - 2
    pts = np.array([[float(v) for v in r[:dim]] for r in rows[1:]], dtype=np.float64).reshape(-1, dim)
    labels = np.array([int(r[dim]) for r in rows[1:]], dtype=np.int64)
    caps = [tuple(r[dim + 1].split()) for r in rows[1:]]
    return LabeledDataset(pts, labels, caps)


def vocab_of(ds: LabeledDataset) -> List[str]:
    """Empty token first, then caption tokens in order of first appearance."""
    seen: Dict[str, None] = {EMPTY: None}
    for cap in ds.captions:
        for t in cap:
            seen.setdefault(t, None)
    return list(seen)
