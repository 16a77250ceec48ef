"""Evaluation: generated-sample accuracy, augmentation study, distribution distances.

Distances follow the usual FID/KID recipes on two feature sets: the Frechet
distance between fitted Gaussians (unbiased covariances, matrix square root
through the symmetric form ``S_x^1/2 S_y S_x^1/2``) and the unbiased squared
MMD under the cubic polynomial kernel ``(a.b / d + 1)^3``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import rng
from .classifier import ClassifierModel, ClassifierTrainConfig, accuracy, penultimate_features, predict_class, train_classifier
from .diffusion import ConditionalDenoiser, sample
from .forge import ForgeConfig, ForgeResult, forge
from .scenarios import BIAS_THRESHOLD, LabeledDataset

KERNEL_NEG_TOL = 1e-6

ACCURACY_HEADER = ("scenario", "class", "method", "n", "top1")
DISTANCE_HEADER = ("scenario", "method", "frechet_raw", "frechet_feat", "kernel")
ABLATION_HEADER = ("bsz", "top1")
AUGMENT_HEADER = ("k_real", "real_only", "baseline_aug", "forged_aug")


@dataclass
class GaussianMoments:
    mean: np.ndarray
    cov: np.ndarray


def moments(X) -> GaussianMoments:
    X = np.asarray(X, dtype=np.float64)
    cov = np.atleast_2d(np.cov(X, rowvar=False, ddof=1))
    return GaussianMoments(X.mean(axis=0), 0.5 * (cov + cov.T))


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_from_moments(a: GaussianMoments, b: GaussianMoments) -> float:
    root_a = _psd_sqrt(a.cov)
    middle = root_a @ b.cov @ root_a
    tr_cross = float(np.sum(np.sqrt(np.clip(np.linalg.eigvalsh(0.5 * (middle + middle.T)), 0.0, None))))
    diff = a.mean - b.mean
    d2 = float(diff @ diff) + float(np.trace(a.cov) + np.trace(b.cov)) - 2.0 * tr_cross
    return max(d2, 0.0)


def _check_sets(X, Y, min_n: int) -> Tuple[np.ndarray, np.ndarray]:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"feature widths differ: {X.shape[1]} vs {Y.shape[1]}")
    if len(X) < min_n or len(Y) < min_n:
        raise ValueError(f"need at least {min_n} points per set, got {len(X)} and {len(Y)}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("non-finite values in input sets")
    return X, Y


def frechet_distance(X, Y) -> float:
    """Squared Frechet distance between Gaussians fitted to ``X`` and ``Y``."""
    X, Y = _check_sets(X, Y, np.atleast_2d(np.asarray(X)).shape[1] + 1)
    return frechet_from_moments(moments(X), moments(Y))


def poly_kernel(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d = A.shape[1]
    return (A @ B.T / d + 1.0) ** 3


def kernel_distance(X, Y) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel; may dip slightly below 0."""
    X, Y = _check_sets(X, Y, 2)
    m, n = len(X), len(Y)
    kxx, kyy, kxy = poly_kernel(X, X), poly_kernel(Y, Y), poly_kernel(X, Y)
    within_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    within_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(within_x + within_y - 2.0 * kxy.mean())


# --- generation accuracy ------------------------------------------------------

@dataclass
class EvalRow:
    scenario: str
    cls: int
    method: str
    n_samples: int
    top1_accuracy: float
    frechet_raw: float = float("nan")
    frechet_feat: float = float("nan")
    kernel_dist: float = float("nan")


@dataclass
class DistanceRow:
    scenario: str
    method: str
    frechet_raw: float
    frechet_feat: float
    kernel: float


@dataclass
class EvalReport:
    rows: List[EvalRow] = field(default_factory=list)
    distances: List[DistanceRow] = field(default_factory=list)
    samples: Dict[Tuple[int, str], np.ndarray] = field(default_factory=dict, repr=False)

    def accuracy(self, cls: int, method: str) -> float:
        for r in self.rows:
            if r.cls == cls and r.method == method:
                return r.top1_accuracy
        raise KeyError((cls, method))

    def row(self, cls: int, method: str) -> EvalRow:
        return next(r for r in self.rows if r.cls == cls and r.method == method)

    def accuracy_csv(self) -> str:
        return _csv(ACCURACY_HEADER, [(r.scenario, r.cls, r.method, r.n_samples, repr(r.top1_accuracy)) for r in self.rows])

    def distances_csv(self) -> str:
        return _csv(DISTANCE_HEADER, [(d.scenario, d.method, repr(d.frechet_raw), repr(d.frechet_feat), repr(d.kernel)) for d in self.distances])


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _distances(gen: np.ndarray, real: np.ndarray, classifier: ClassifierModel) -> Tuple[float, float, float]:
    fr = frechet_distance(gen, real) if min(len(gen), len(real)) > gen.shape[1] else float("nan")
    fg, fr_ = penultimate_features(classifier, gen), penultimate_features(classifier, real)
    ff = frechet_distance(fg, fr_) if min(len(fg), len(fr_)) > fg.shape[1] else float("nan")
    return fr, ff, kernel_distance(fg, fr_)


def eval_generation_accuracy(
    model: ConditionalDenoiser,
    classifier: ClassifierModel,
    classes: Sequence[int],
    prompts: Mapping[int, Mapping[str, Sequence[str]]],
    forged: Mapping[int, ForgeResult],
    n: int = 100,
    seed: int = 0,
    w: float = 7.0,
    real: Optional[LabeledDataset] = None,
    scenario: str = "",
) -> EvalReport:
    """Top-1 accuracy of baseline and forged generations for every class.

    Both methods draw the same initial noise for a class. With ``real`` given,
    distance columns compare each class's generations to its real points and
    the report also carries pooled distances per method.
    """
    report = EvalReport()
    for c in classes:
        if c not in prompts or not {"baseline", "forged"} <= set(prompts[c]):
            raise KeyError(f"class {c} lacks a baseline or forged prompt")
        if c not in forged:
            raise KeyError(f"class {c} has no forged token")
    pooled: Dict[str, List[np.ndarray]] = {"baseline": [], "forged": []}
    pooled_real = []
    for c in classes:
        class_seed = rng.child_seed(seed, "eval", c)
        generators = {"baseline": model, "forged": forged[c].apply(model)}
        real_c = real.of_class(c).points if real is not None else None
        if real_c is not None:
            pooled_real.append(real_c)
        for method in ("baseline", "forged"):
            x = sample(generators[method], prompts[c][method], w=w, n=n, seed=class_seed)
            report.samples[(c, method)] = x
            pooled[method].append(x)
            acc = float(np.mean(predict_class(classifier, x) == c))
            row = EvalRow(scenario, c, method, n, acc)
            if real_c is not None and len(real_c) >= 2:
                row.frechet_raw, row.frechet_feat, row.kernel_dist = _distances(x, real_c, classifier)
            report.rows.append(row)
    if pooled_real:
        real_all = np.concatenate(pooled_real)
        for method in ("baseline", "forged"):
            fr, ff, kd = _distances(np.concatenate(pooled[method]), real_all, classifier)
            report.distances.append(DistanceRow(scenario, method, fr, ff, kd))
    return report


# --- augmentation study -------------------------------------------------------

@dataclass
class AugmentRow:
    k_real: int
    real_only: float
    baseline_aug: float
    forged_aug: float


def augmentation_study(
    model: ConditionalDenoiser,
    forged: Mapping[int, ForgeResult],
    prompts: Mapping[int, Mapping[str, Sequence[str]]],
    train_pool: LabeledDataset,
    test: LabeledDataset,
    k_values: Sequence[int] = (0, 3, 9, 15),
    n_gen: int = 100,
    seed: int = 0,
    w: float = 7.0,
    clf_cfg: ClassifierTrainConfig = ClassifierTrainConfig(),
) -> List[AugmentRow]:
    """Test accuracy of classifiers trained on ``k`` real points per class plus generated ones.

    For each ``k`` three classifiers are trained: real only (reported as 0.0
    when ``k == 0``), real + baseline generations, real + forged generations.
    """
    classes = sorted(forged)
    K = len(classes)
    if classes != list(range(K)):
        raise ValueError("forged tokens must cover classes 0..K-1")
    need = max(k_values)
    for c in classes:
        have = int(np.sum(train_pool.labels == c))
        if have < need:
            raise ValueError(f"class {c} has {have} real training points, need {need}")

    generated = {}
    for method in ("baseline", "forged"):
        parts = []
        for c in classes:
            gen_model = forged[c].apply(model) if method == "forged" else model
            x = sample(gen_model, prompts[c][method], w=w, n=n_gen, seed=rng.child_seed(seed, "augment/gen", c))
            parts.append(LabeledDataset(x, np.full(n_gen, c), [("<generated>",)] * n_gen))
        generated[method] = LabeledDataset.concat(parts)

    order = {c: rng.stream(seed, "augment/real", c).permutation(np.flatnonzero(train_pool.labels == c)) for c in classes}
    rows = []
    for k in k_values:
        real_k = train_pool.subset(np.concatenate([order[c][:k] for c in classes])) if k > 0 else None
        clf_seed = rng.child_seed(seed, "augment/clf", k)

        def fit(ds):
            return accuracy(train_classifier(ds, clf_cfg, seed=clf_seed, num_classes=K), test)

        real_only = fit(real_k) if real_k is not None and k >= 1 else 0.0
        accs = {}
        for method in ("baseline", "forged"):
            ds = LabeledDataset.concat([generated[method]] + ([real_k] if real_k is not None else []))
            accs[method] = fit(ds)
        rows.append(AugmentRow(k, real_only, accs["baseline"], accs["forged"]))
    return rows


def augment_csv(rows: Sequence[AugmentRow]) -> str:
    return _csv(AUGMENT_HEADER, [(r.k_real, repr(r.real_only), repr(r.baseline_aug), repr(r.forged_aug)) for r in rows])


# --- batch-size ablation ------------------------------------------------------

def batch_size_ablation(
    model: ConditionalDenoiser,
    classifier: ClassifierModel,
    base_cfg: ForgeConfig,
    baseline_prompt: Sequence[str],
    batch_sizes: Sequence[int] = (1, 2, 3, 4, 5, 6),
    n: int = 100,
    seed: int = 0,
) -> List[Tuple[str, float]]:
    """Forge once per batch size and score each token; first row is the untouched baseline."""
    if not batch_sizes or any(int(b) < 1 for b in batch_sizes):
        raise ValueError(f"invalid batch sizes {list(batch_sizes)}")
    c = base_cfg.target_class
    eval_seed = rng.child_seed(seed, "ablation/eval")
    w = base_cfg.guidance_w

    def score(gen_model, prompt):
        x = sample(gen_model, prompt, w=w, n=n, seed=eval_seed)
        return float(np.mean(predict_class(classifier, x) == c))

    rows = [("baseline", score(model, baseline_prompt))]
    for b in batch_sizes:
        cfg = ForgeConfig(**{**base_cfg.to_dict(), "batch_size": int(b)})
        result = forge(model, classifier, cfg)
        rows.append((str(int(b)), score(result.apply(model), cfg.prompts[0])))
    return rows


def ablation_csv(rows: Sequence[Tuple[str, float]]) -> str:
    return _csv(ABLATION_HEADER, [(b, repr(a)) for b, a in rows])


# --- bias probe ---------------------------------------------------------------

def offset_fraction(points, axis: int = 1, threshold: float = BIAS_THRESHOLD) -> float:
    """Share of points beyond ``threshold`` on ``axis`` (the background-offset region)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return float(np.mean(points[:, axis] > threshold))


def bias_probe(
    model: ConditionalDenoiser,
    result: ForgeResult,
    prompt: Optional[Sequence[str]] = None,
    n: int = 100,
    seed: int = 0,
    w: float = 7.0,
) -> float:
    prompt = result.config.prompts[0] if prompt is None else prompt
    x = sample(result.apply(model), prompt, w=w, n=n, seed=seed)
    return offset_fraction(x)
