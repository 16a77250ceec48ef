"""Discriminative class-token optimization.

A new token is added to the denoiser's vocabulary and only its embedding is
trained. Each step generates a small batch with a prompt containing the
token, classifies the result with the frozen classifier and minimizes the
cross-entropy toward the target class. The gradient is taken through the
final sampler step only: steps ``T..2`` run untracked, ``x_1`` is detached,
and the last guided prediction plus DDIM update are replayed on a fresh graph.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import grad as G
from . import rng
from .classifier import ClassifierModel, predict_logits
from .diffusion import (
    ConditionalDenoiser,
    TokenTable,
    ddim_step,
    denoise_loop,
    embed_prompt,
    guided_predict,
    initial_noise,
)
from .grad import Tensor
from .scenarios import EMPTY

STOP_RULES = ("all_correct", "patience_met", "step_cap")
LOG_COLUMNS = ("step", "loss", "batch_acc", "grad_norm", "prompt")


class ForgeError(ValueError):
    pass


@dataclass
class ForgeConfig:
    target_class: int
    prompts: Tuple[Tuple[str, ...], Tuple[str, ...]]
    base_token: str = EMPTY
    token_name: str = "<S_c>"
    batch_size: int = 5
    guidance_w: float = 7.0
    lr: float = 0.0005
    lr_rule: bool = False
    max_steps: int = 200
    patience: int = 20
    min_correct_frac: float = 0.5
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.prompts = tuple(tuple(p) for p in self.prompts)
        if len(self.prompts) != 2:
            raise ForgeError("exactly two training prompts are required")
        for p in self.prompts:
            if self.token_name not in p:
                raise ForgeError(f"prompt {list(p)} lacks the token {self.token_name!r}")
        if self.batch_size < 1:
            raise ForgeError("batch_size must be at least 1")
        if not 0.0 < self.min_correct_frac <= 1.0:
            raise ForgeError("min_correct_frac must lie in (0, 1]")
        if not 0 <= self.patience < self.max_steps:
            raise ForgeError("patience must be smaller than max_steps")
        if self.clip_norm <= 0 or self.lr <= 0 or self.guidance_w < 0:
            raise ForgeError("clip_norm and lr must be positive, guidance_w non-negative")

    @property
    def effective_lr(self) -> float:
        """``0.00025 * batch_size`` when ``lr_rule`` is set, else ``lr``."""
        return 0.00025 * self.batch_size if self.lr_rule else self.lr

    @classmethod
    def for_label(cls, target_class: int, label_tokens: Sequence[str], **kw) -> "ForgeConfig":
        """Two prompts around a class name: ``[S, *label]`` and the same padded with the empty token."""
        name = kw.get("token_name", cls.token_name)
        p1 = (name, *label_tokens)
        return cls(target_class=target_class, prompts=(p1, (*p1, EMPTY)), **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prompts"] = [list(p) for p in self.prompts]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ForgeConfig":
        return cls(**d)


@dataclass
class StepRecord:
    step: int
    loss: float
    batch_acc: float
    grad_norm: float
    prompt: int  # 1 or 2


@dataclass
class ForgeResult:
    token_name: str
    base_token: str
    target_class: int
    embedding_trajectory: List[np.ndarray]
    log: List[StepRecord]
    stop_rule: str
    steps_taken: int
    config: ForgeConfig

    @property
    def embedding(self) -> np.ndarray:
        return self.embedding_trajectory[-1]

    def snapshot(self, step: int) -> np.ndarray:
        if not 0 <= step < len(self.embedding_trajectory):
            raise IndexError(f"no snapshot for step {step}; have 0..{len(self.embedding_trajectory) - 1}")
        return self.embedding_trajectory[step]

    def apply(self, model: ConditionalDenoiser, step: Optional[int] = None) -> ConditionalDenoiser:
        """Copy of ``model`` whose vocabulary includes the forged token."""
        vec = self.embedding if step is None else self.snapshot(step)
        return model.with_token(self.token_name, vec)

    def to_dict(self) -> dict:
        return {
            "token_name": self.token_name,
            "base_token": self.base_token,
            "target_class": self.target_class,
            "stop_rule": self.stop_rule,
            "steps_taken": self.steps_taken,
            "config": self.config.to_dict(),
            "trajectory": [v.tolist() for v in self.embedding_trajectory],
            "log": [asdict(r) for r in self.log],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForgeResult":
        return cls(
            token_name=d["token_name"],
            base_token=d["base_token"],
            target_class=int(d["target_class"]),
            embedding_trajectory=[np.array(v, dtype=np.float64) for v in d["trajectory"]],
            log=[StepRecord(**r) for r in d["log"]],
            stop_rule=d["stop_rule"],
            steps_taken=int(d["steps_taken"]),
            config=ForgeConfig.from_dict(d["config"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def loads(cls, text: str) -> "ForgeResult":
        return cls.from_dict(json.loads(text))

    def log_csv(self) -> str:
        return log_to_csv(self.log)


def log_to_csv(log: Sequence[StepRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in log:
        w.writerow([r.step, repr(r.loss), repr(r.batch_acc), repr(r.grad_norm), r.prompt])
    return buf.getvalue()


def log_from_csv(text: str) -> List[StepRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if tuple(rows[0]) != LOG_COLUMNS:
        raise ForgeError(f"unexpected log header {rows[0]}")
    return [StepRecord(int(a), float(b), float(c), float(d), int(e)) for a, b, c, d, e in rows[1:]]


def init_token(table: TokenTable, new_name: str, base_token: str) -> int:
    """Add ``new_name`` to ``table`` as a copy of ``base_token``; returns its index."""
    if base_token not in table:
        raise ForgeError(f"unknown base token {base_token!r}")
    if new_name in table:
        raise ForgeError(f"token {new_name!r} already exists")
    return table.add(new_name, table[base_token].copy())


def generate_batch_grad_last(
    model: ConditionalDenoiser,
    prompt: Sequence[str],
    w: float,
    batch_size: int,
    seed: int,
    token: Tensor,
    token_name: str,
) -> Tensor:
    """Generate ``x_0`` with a gradient path to ``token`` through the last step only.

    ``model``'s table must already hold ``token_name``; its stored value is
    used for the untracked steps and must equal ``token.data``.
    """
    if token_name not in prompt:
        raise ForgeError(f"prompt {list(prompt)} lacks the token {token_name!r}")
    if not np.array_equal(model.table[token_name], token.data):
        raise ForgeError("stored token embedding differs from the trainable tensor")
    sched = model.schedule
    x = initial_noise(batch_size, model.data_dim, seed)
    x1 = denoise_loop(model, x, embed_prompt(model.table, prompt), w, sched.T, 2)
    cond = embed_prompt(model.table, prompt, overrides={token_name: token})
    x1 = Tensor(x1)
    eps_bar = guided_predict(model, x1, 1, cond, w, null=Tensor(model.table[EMPTY]))
    return ddim_step(x1, 1, eps_bar, sched)


@dataclass
class ForgeState:
    model: ConditionalDenoiser  # working copy that holds the token
    token_name: str
    adam: G.AdamState = field(default_factory=G.AdamState)
    log: List[StepRecord] = field(default_factory=list)
    trajectory: List[np.ndarray] = field(default_factory=list)

    @property
    def embedding(self) -> np.ndarray:
        return self.model.table[self.token_name]


def start_forge(model: ConditionalDenoiser, cfg: ForgeConfig) -> ForgeState:
    table = model.table.copy()
    init_token(table, cfg.token_name, cfg.base_token)
    state = ForgeState(model.replace_table(table), cfg.token_name)
    state.trajectory.append(state.embedding.copy())
    return state


def forge_step(
    state: ForgeState,
    classifier: ClassifierModel,
    cfg: ForgeConfig,
    step_index: int,
) -> StepRecord:
    """One optimization step; appends to ``state.log`` and ``state.trajectory``."""
    which = step_index % 2
    prompt = cfg.prompts[which]
    v = Tensor(state.embedding.copy(), requires_grad=True)
    seed = rng.child_seed(cfg.seed, "forge/batch", step_index)
    x0 = generate_batch_grad_last(state.model, prompt, cfg.guidance_w, cfg.batch_size, seed, v, cfg.token_name)
    logits = predict_logits(classifier, x0)
    targets = np.full(cfg.batch_size, cfg.target_class)
    loss = G.softmax_cross_entropy(logits, targets)
    grads = G.backward(loss)
    if set(grads) - {v}:
        raise ForgeError("gradient reached parameters other than the forged token")
    g = grads.get(v, np.zeros_like(v.data))
    norm = G.global_norm({"v": g})
    clipped = G.clip_global_norm({"v": g}, cfg.clip_norm)
    new, _ = G.adam_step({"v": v.data}, clipped, state.adam, cfg.effective_lr)
    state.model.table.entries[cfg.token_name] = new["v"]
    state.trajectory.append(new["v"].copy())
    acc = float(np.mean(np.argmax(logits.data, axis=1) == cfg.target_class))
    rec = StepRecord(step_index + 1, float(loss.data), acc, norm, which + 1)
    state.log.append(rec)
    return rec


def should_stop(log: Sequence[StepRecord], cfg: ForgeConfig) -> Optional[str]:
    """First stop rule that fires on ``log``, checked in order, else ``None``.

    1. every sample of the latest batch was classified as the target;
    2. the loss has not dropped below its running best for ``patience``
       steps and the latest batch is at least ``min_correct_frac`` correct;
    3. ``max_steps`` steps were taken.
    """
    if not log:
        raise ForgeError("empty log")
    last = log[-1]
    if last.batch_acc >= 1.0:
        return "all_correct"
    best, best_at = float("inf"), -1
    for i, r in enumerate(log):
        if r.loss < best:
            best, best_at = r.loss, i
    if len(log) - 1 - best_at >= cfg.patience and last.batch_acc >= cfg.min_correct_frac:
        return "patience_met"
    if len(log) >= cfg.max_steps:
        return "step_cap"
    return None


def replay_stop(log: Sequence[StepRecord], cfg: ForgeConfig) -> Tuple[Optional[str], int]:
    """Re-derive the stop rule and step count from a recorded log."""
    for n in range(1, len(log) + 1):
        rule = should_stop(log[:n], cfg)
        if rule is not None:
            return rule, n
    return None, len(log)


def forge(model: ConditionalDenoiser, classifier: ClassifierModel, cfg: ForgeConfig) -> ForgeResult:
    """Train the class token until a stop rule fires. Inputs are left untouched."""
    if not 0 <= cfg.target_class < classifier.K:
        raise ForgeError(f"target class {cfg.target_class} outside classifier range 0..{classifier.K - 1}")
    state = start_forge(model, cfg)
    rule = None
    step = 0
    while rule is None:
        forge_step(state, classifier, cfg, step)
        step += 1
        rule = should_stop(state.log, cfg)
    return ForgeResult(
        token_name=cfg.token_name,
        base_token=cfg.base_token,
        target_class=cfg.target_class,
        embedding_trajectory=state.trajectory,
        log=state.log,
        stop_rule=rule,
        steps_taken=step,
        config=cfg,
    )
