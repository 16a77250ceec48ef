"""Run configuration and end-to-end experiment helpers.

A ``RunConfig`` is a flat set of keys stored as JSON. Every stage below takes
the config and the artifacts of earlier stages, so the CLI verbs and the
narrative demos share one code path.
"""
from __future__ import annotations

import json
import platform
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from . import __version__
from .classifier import ClassifierModel, ClassifierTrainConfig, fit_classifier
from .diffusion import FORMAT_VERSION, ConditionalDenoiser, DenoiserTrainConfig, init_denoiser, train_denoiser
from .forge import ForgeConfig, ForgeResult, forge
from .metrics import EvalReport, augmentation_study, batch_size_ablation, eval_generation_accuracy
from .scenarios import LabeledDataset, ScenarioSpec, resolve_scenario, sample_dataset, train_test_split


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scenario: str = "ambiguity"  # built-in name or path to a scenario JSON
    seed: int = 0
    n_per_class: int = 500
    test_frac: float = 0.25
    # denoiser
    emb_dim: int = 8
    denoiser_hidden: List[int] = field(default_factory=lambda: [64, 64])
    cond_scale: float = 100.0
    denoiser_epochs: int = 600
    denoiser_lr: float = 3e-3
    denoiser_batch: int = 128
    p_uncond: float = 0.1
    # classifier
    classifier_hidden: List[int] = field(default_factory=lambda: [32, 32])
    classifier_epochs: int = 200
    classifier_lr: float = 5e-3
    # forging
    base_token: str = "cat"  # "@label": start from the last word of the class label
    guidance_w: float = 7.0
    forge_batch_size: int = 5
    forge_lr: float = 0.0005
    lr_rule: bool = False
    max_steps: int = 200
    patience: int = 20
    # evaluation
    eval_n: int = 100
    augment_k: List[int] = field(default_factory=list)
    augment_n_gen: int = 100
    ablate_bsz: List[int] = field(default_factory=lambda: [1, 2, 3, 4, 5, 6])

    def __post_init__(self):
        if self.n_per_class < 2 or not 0.0 < self.test_frac < 1.0:
            raise ConfigError("n_per_class must be >= 2 and test_frac in (0, 1)")
        if self.denoiser_epochs < 1 or self.classifier_epochs < 1:
            raise ConfigError("epoch counts must be positive")
        if not 0.0 <= self.p_uncond < 1.0:
            raise ConfigError("p_uncond must lie in [0, 1)")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if not self.ablate_bsz or any(int(b) < 1 for b in self.ablate_bsz):
            raise ConfigError(f"invalid ablate_bsz {self.ablate_bsz}; batch sizes must be >= 1")
        if any(int(k) < 0 for k in self.augment_k):
            raise ConfigError("augment_k values must be non-negative")
        self.denoiser_hidden = [int(h) for h in self.denoiser_hidden]
        self.classifier_hidden = [int(h) for h in self.classifier_hidden]
        self.augment_k = [int(k) for k in self.augment_k]
        self.ablate_bsz = [int(b) for b in self.ablate_bsz]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d)

    def with_overrides(self, **kw) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **kw})

    def forge_config(self, spec: ScenarioSpec, cls: int, **kw) -> ForgeConfig:
        label = spec.classes[cls].label
        base = dict(
            base_token=label_tokens(label)[-1] if self.base_token == LABEL_BASE else self.base_token,
            token_name=token_name(label),
            batch_size=self.forge_batch_size,
            guidance_w=self.guidance_w,
            lr=self.forge_lr,
            lr_rule=self.lr_rule,
            max_steps=self.max_steps,
            patience=self.patience,
            seed=self.seed,
        )
        base.update(kw)
        return ForgeConfig.for_label(cls, label_tokens(label), **base)


LABEL_BASE = "@label"


def token_name(label: str) -> str:
    return f"<{label}>"


def label_tokens(label: str) -> Tuple[str, ...]:
    """Plain-vocabulary prompt for a class: its label split on underscores."""
    return tuple(label.split("_"))


def versions() -> dict:
    return {
        "tokenforge": __version__,
        "format_version": FORMAT_VERSION,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }


def _finite_or_none(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite_or_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_or_none(v) for v in obj]
    return obj


def dumps_json(obj) -> str:
    """Sorted, indented, strict JSON; undefined numbers become ``null``."""
    return json.dumps(_finite_or_none(obj), indent=1, sort_keys=True, allow_nan=False) + "\n"


# --- stages -----------------------------------------------------------------

def make_data(cfg: RunConfig) -> Tuple[ScenarioSpec, LabeledDataset]:
    spec = resolve_scenario(cfg.scenario)
    return spec, sample_dataset(spec, cfg.n_per_class, cfg.seed)


def split(cfg: RunConfig, ds: LabeledDataset) -> Tuple[LabeledDataset, LabeledDataset]:
    return train_test_split(ds, cfg.test_frac, cfg.seed)


def fit_denoiser(cfg: RunConfig, spec_vocab: Sequence[str], train: LabeledDataset) -> Tuple[ConditionalDenoiser, List[float]]:
    model = init_denoiser(
        spec_vocab, data_dim=train.dim, emb_dim=cfg.emb_dim, hidden=tuple(cfg.denoiser_hidden),
        seed=cfg.seed, cond_scale=cfg.cond_scale,
    )
    tcfg = DenoiserTrainConfig(cfg.denoiser_epochs, cfg.denoiser_batch, cfg.denoiser_lr, cfg.p_uncond)
    return train_denoiser(model, train, tcfg, seed=cfg.seed)


def classifier_config(cfg: RunConfig) -> ClassifierTrainConfig:
    return ClassifierTrainConfig(cfg.classifier_epochs, 64, cfg.classifier_lr, tuple(cfg.classifier_hidden))


def fit_expert(cfg: RunConfig, train: LabeledDataset, num_classes: int) -> Tuple[ClassifierModel, List[float]]:
    return fit_classifier(train, classifier_config(cfg), seed=cfg.seed, num_classes=num_classes)


def forge_all(
    cfg: RunConfig, spec: ScenarioSpec, model: ConditionalDenoiser, classifier: ClassifierModel
) -> Dict[int, ForgeResult]:
    return {c: forge(model, classifier, cfg.forge_config(spec, c)) for c in range(spec.num_classes)}


def class_prompts(spec: ScenarioSpec, forged: Mapping[int, ForgeResult]) -> Dict[int, Dict[str, Tuple[str, ...]]]:
    """Baseline prompt is the label alone; the forged prompt prepends the token."""
    return {
        c: {"baseline": label_tokens(spec.classes[c].label), "forged": tuple(forged[c].config.prompts[0])}
        for c in forged
    }


@dataclass
class EvalOutcome:
    report: EvalReport
    augment: list
    summary: dict


def evaluate(
    cfg: RunConfig,
    spec: ScenarioSpec,
    model: ConditionalDenoiser,
    classifier: ClassifierModel,
    forged: Mapping[int, ForgeResult],
    train: LabeledDataset,
    test: LabeledDataset,
) -> EvalOutcome:
    missing = sorted(set(range(spec.num_classes)) - set(forged))
    if missing:
        raise ConfigError(f"no forged token for classes {[spec.classes[c].label for c in missing]}")
    prompts = class_prompts(spec, forged)
    classes = list(range(spec.num_classes))
    report = eval_generation_accuracy(
        model, classifier, classes, prompts, forged, n=cfg.eval_n, seed=cfg.seed, w=cfg.guidance_w,
        real=test, scenario=spec.name,
    )
    augment = []
    if cfg.augment_k:
        augment = augmentation_study(
            model, forged, prompts, train, test, k_values=cfg.augment_k, n_gen=cfg.augment_n_gen,
            seed=cfg.seed, w=cfg.guidance_w, clf_cfg=classifier_config(cfg),
        )
    summary = {
        "scenario": spec.name,
        "seed": cfg.seed,
        "classes": {
            spec.classes[c].label: {
                "baseline": report.accuracy(c, "baseline"),
                "forged": report.accuracy(c, "forged"),
                "stop_rule": forged[c].stop_rule,
                "steps": forged[c].steps_taken,
            }
            for c in classes
        },
        "distances": {d.method: {"frechet_raw": d.frechet_raw, "frechet_feat": d.frechet_feat, "kernel": d.kernel} for d in report.distances},
    }
    if augment:
        summary["augment"] = [asdict(r) for r in augment]
    return EvalOutcome(report, augment, summary)


def ablate(
    cfg: RunConfig, spec: ScenarioSpec, model: ConditionalDenoiser, classifier: ClassifierModel, target: int
) -> List[Tuple[str, float]]:
    base = cfg.forge_config(spec, target)
    return batch_size_ablation(
        model, classifier, base, label_tokens(spec.classes[target].label), cfg.ablate_bsz, n=cfg.eval_n, seed=cfg.seed
    )


@dataclass
class PipelineRun:
    spec: ScenarioSpec
    train: LabeledDataset
    test: LabeledDataset
    model: ConditionalDenoiser
    classifier: ClassifierModel
    forged: Dict[int, ForgeResult]
    outcome: EvalOutcome


def run_pipeline(cfg: RunConfig) -> PipelineRun:
    """Data, both models, one token per class and the evaluation protocols."""
    spec, ds = make_data(cfg)
    train, test = split(cfg, ds)
    model, _ = fit_denoiser(cfg, spec.vocab, train)
    classifier, _ = fit_expert(cfg, train, spec.num_classes)
    forged = forge_all(cfg, spec, model, classifier)
    outcome = evaluate(cfg, spec, model, classifier, forged, train, test)
    return PipelineRun(spec, train, test, model, classifier, forged, outcome)
