"""Token-conditioned denoising diffusion on low-dimensional points.

The denoiser is an MLP on ``[x_t, time features, condition]`` where the
condition is the mean of the prompt's token embeddings. Sampling is the
deterministic DDIM update driven by classifier-free guidance.

Step indexing runs forward: ``t = 0`` is clean data and the sampler walks
``t = T, T-1, ..., 1``; the last call (``t = 1``) produces ``x_0``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import grad as G
from . import rng
from .grad import Tensor
from .scenarios import EMPTY, LabeledDataset

FORMAT_VERSION = 1
Prompt = Sequence[str]


class CheckpointError(ValueError):
    pass


# --- schedule ----------------------------------------------------------------

@dataclass
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.alpha_bar.shape != (self.T + 1,):
            raise ValueError(f"alpha_bar needs T+1={self.T + 1} entries, got {self.alpha_bar.shape}")
        if self.alpha_bar[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if np.any(np.diff(self.alpha_bar) >= 0) or self.alpha_bar[-1] <= 0:
            raise ValueError("alpha_bar must decrease strictly and stay positive")

    def check_step(self, t: int, lo: int = 0) -> None:
        if not lo <= t <= self.T:
            raise ValueError(f"step {t} outside [{lo}, {self.T}]")


def make_schedule(T: int = 50, s: float = 0.008) -> NoiseSchedule:
    """Cosine schedule: ``alpha_bar_t = f(t) / f(0)``, clamped to ``[1e-5, 1]``."""
    if T < 2:
        raise ValueError("need at least 2 steps")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
    ab = np.clip(f / f[0], 1e-5, 1.0)
    ab[0] = 1.0
    return NoiseSchedule(T, ab)


def forward_noise(x0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """``x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise G.ShapeError(f"x0 {x0.shape} and eps {eps.shape} differ")
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > sched.T):
        raise ValueError(f"step {t} outside [0, {sched.T}]")
    ab = sched.alpha_bar[t_arr]
    if ab.ndim == 1 and x0.ndim == 2:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# --- tokens ------------------------------------------------------------------

class TokenTable:
    """Ordered map from token name to embedding vector; ``""`` is the null prompt."""

    def __init__(self, entries: Mapping[str, Iterable[float]], emb_dim: Optional[int] = None):
        self.entries: Dict[str, np.ndarray] = {k: np.array(v, dtype=np.float64) for k, v in entries.items()}
        if EMPTY not in self.entries:
            raise ValueError("token table must contain the empty token")
        dims = {v.shape for v in self.entries.values()}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ValueError(f"embeddings must be vectors of one width, got {dims}")
        self.emb_dim = next(iter(dims))[0]
        if emb_dim is not None and emb_dim != self.emb_dim:
            raise ValueError(f"expected width {emb_dim}, found {self.emb_dim}")

    @classmethod
    def random(cls, names: Sequence[str], emb_dim: int, std: float, g: np.random.Generator) -> "TokenTable":
        names = list(names)
        if EMPTY not in names:
            names = [EMPTY] + names
        return cls({n: std * g.standard_normal(emb_dim) for n in names})

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.entries[name]
        except KeyError:
            raise KeyError(f"unknown token {name!r}") from None

    def names(self) -> List[str]:
        return list(self.entries)

    def index(self, name: str) -> int:
        return self.names().index(name)

    def add(self, name: str, vec) -> int:
        if name in self.entries:
            raise ValueError(f"token {name!r} already exists")
        vec = np.array(vec, dtype=np.float64)
        if vec.shape != (self.emb_dim,):
            raise G.ShapeError(f"embedding of shape {vec.shape}, table width {self.emb_dim}")
        self.entries[name] = vec
        return len(self.entries) - 1

    def copy(self) -> "TokenTable":
        return TokenTable({k: v.copy() for k, v in self.entries.items()})

    def matrix(self) -> np.ndarray:
        return np.stack(list(self.entries.values()))


def embed_prompt(table: TokenTable, prompt: Prompt, overrides: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    """Mean of the prompt's token embeddings.

    ``overrides`` substitutes tensors (typically trainable leaves) for the
    table entries of the named tokens.
    """
    if not prompt:
        raise ValueError("prompt must contain at least one token")
    overrides = overrides or {}
    parts = []
    for tok in prompt:
        if tok in overrides:
            parts.append(overrides[tok])
        elif tok in table:
            parts.append(Tensor(table[tok]))
        else:
            raise KeyError(f"unknown token {tok!r}")
    total = parts[0]
    for p in parts[1:]:
        total = G.add(total, p)
    if len(parts) == 1:
        return total
    return G.scale(total, 1.0 / len(parts))


# --- denoiser ----------------------------------------------------------------

@dataclass
class ConditionalDenoiser:
    table: TokenTable
    schedule: NoiseSchedule
    layers: List[Tuple[np.ndarray, np.ndarray]]
    data_dim: int = 2
    time_emb_dim: int = 8
    hidden: Tuple[int, ...] = (64, 64)
    # fixed gain on the pooled condition; embeddings live at ~1/cond_scale magnitude
    cond_scale: float = 100.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.cond_scale <= 0:
            raise ValueError("cond_scale must be positive")
        widths = [self.input_width, *self.hidden, self.data_dim]
        if len(self.layers) != len(widths) - 1:
            raise CheckpointError(f"expected {len(widths) - 1} layers, got {len(self.layers)}")
        for (W, b), fan_in, fan_out in zip(self.layers, widths[:-1], widths[1:]):
            if W.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise CheckpointError(f"layer shapes {W.shape}/{b.shape}, expected ({fan_in}, {fan_out})")
        if self.time_emb_dim % 2:
            raise ValueError("time_emb_dim must be even")

    @property
    def emb_dim(self) -> int:
        return self.table.emb_dim

    @property
    def input_width(self) -> int:
        return self.data_dim + self.time_emb_dim + self.table.emb_dim

    def with_token(self, name: str, vec) -> "ConditionalDenoiser":
        """Shallow copy sharing the weights, with one extra token."""
        table = self.table.copy()
        table.add(name, vec)
        return self.replace_table(table)

    def replace_table(self, table: TokenTable) -> "ConditionalDenoiser":
        return ConditionalDenoiser(
            table, self.schedule, self.layers, self.data_dim, self.time_emb_dim, self.hidden, self.cond_scale
        )


def init_denoiser(
    vocab: Sequence[str],
    data_dim: int = 2,
    emb_dim: int = 8,
    time_emb_dim: int = 8,
    hidden: Sequence[int] = (64, 64),
    T: int = 50,
    seed: int = 0,
    cond_scale: float = 100.0,
) -> ConditionalDenoiser:
    g = rng.stream(seed, "denoiser/init")
    table = TokenTable.random(vocab, emb_dim, 1.0 / cond_scale, g)
    widths = [data_dim + time_emb_dim + emb_dim, *hidden, data_dim]
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        std = math.sqrt(1.0 / a) * (0.1 if i == len(widths) - 2 else 1.0)
        layers.append((std * g.standard_normal((a, b)), np.zeros(b)))
    return ConditionalDenoiser(table, make_schedule(T), layers, data_dim, time_emb_dim, tuple(hidden), cond_scale)


def time_features(t, T: int, dim: int) -> np.ndarray:
    """Sinusoidal features with periods spaced geometrically between 1 and T."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    periods = T ** (np.arange(half) / max(half - 1, 1))
    ang = t[:, None] / periods[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _mlp(layers, h: Tensor, act=G.silu) -> Tensor:
    for i, (W, b) in enumerate(layers):
        h = G.add_broadcast(G.matmul(h, W), b)
        if i < len(layers) - 1:
            h = act(h)
    return h


def denoise_predict(model: ConditionalDenoiser, x_t, t, cond, params=None) -> Tensor:
    """Noise prediction for a batch of points.

    ``t`` is one step or one per row; ``cond`` is a single condition vector or
    one per row. ``params`` optionally replaces the stored weights with
    tensors (used when training).
    """
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    cond = cond if isinstance(cond, Tensor) else Tensor(cond)
    if x_t.data.ndim != 2 or x_t.shape[1] != model.data_dim:
        raise G.ShapeError(f"x_t has shape {x_t.shape}, model expects [m, {model.data_dim}]")
    m = x_t.shape[0]
    if cond.data.ndim == 1:
        if cond.shape[0] != model.emb_dim:
            raise G.ShapeError(f"condition width {cond.shape[0]}, model expects {model.emb_dim}")
        cond = G.repeat_rows(cond, m)
    elif cond.shape != (m, model.emb_dim):
        raise G.ShapeError(f"condition of shape {cond.shape}, expected ({m}, {model.emb_dim})")
    t_arr = np.broadcast_to(np.asarray(t), (m,))
    feats = Tensor(time_features(t_arr, model.schedule.T, model.time_emb_dim))
    h = G.concat_features([x_t, feats, G.scale(cond, model.cond_scale)])
    if params is None:
        params = [(Tensor(W), Tensor(b)) for W, b in model.layers]
    return _mlp(params, h)


def guided_predict(model: ConditionalDenoiser, x_t, t, cond, w: float, null=None) -> Tensor:
    """Classifier-free guidance: ``(1 + w) eps(x_t, cond) - w eps(x_t, null)``."""
    if w < 0:
        raise ValueError("guidance scale must be non-negative")
    eps_c = denoise_predict(model, x_t, t, cond)
    if w == 0:
        return eps_c
    null = Tensor(model.table[EMPTY]) if null is None else null
    eps_u = denoise_predict(model, x_t, t, null)
    return G.sub(G.scale(eps_c, 1.0 + w), G.scale(eps_u, w))


def ddim_step(x_t, t: int, eps_bar, sched: NoiseSchedule) -> Tensor:
    """Deterministic DDIM update from step ``t`` to ``t - 1``."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"step {t} outside [1, {sched.T}]")
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    eps_bar = eps_bar if isinstance(eps_bar, Tensor) else Tensor(eps_bar)
    ab_t, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t - 1]
    x0_hat = G.scale(G.sub(x_t, G.scale(eps_bar, math.sqrt(1.0 - ab_t))), 1.0 / math.sqrt(ab_t))
    return G.add(G.scale(x0_hat, math.sqrt(ab_prev)), G.scale(eps_bar, math.sqrt(1.0 - ab_prev)))


def initial_noise(n: int, dim: int, seed: int) -> np.ndarray:
    """``x_T`` for items ``0..n-1``; item ``i`` always gets the same draw for a given seed."""
    return np.stack([rng.stream(seed, "x_T", i).standard_normal(dim) for i in range(n)])


def denoise_loop(model: ConditionalDenoiser, x: np.ndarray, cond: Tensor, w: float, t_start: int, t_stop: int) -> np.ndarray:
    """Run steps ``t_start, ..., t_stop`` without gradient tracking."""
    cond = Tensor(cond.data)
    null = Tensor(model.table[EMPTY])
    for t in range(t_start, t_stop - 1, -1):
        eps_bar = guided_predict(model, x, t, cond, w, null=null)
        x = ddim_step(x, t, eps_bar, model.schedule).data
    return x


def sample(model: ConditionalDenoiser, prompt: Prompt, w: float = 7.0, n: int = 100, seed: int = 0) -> np.ndarray:
    """Deterministic guided generation of ``n`` points."""
    if n < 1:
        raise ValueError("n must be at least 1")
    cond = embed_prompt(model.table, prompt)
    x = initial_noise(n, model.data_dim, seed)
    return denoise_loop(model, x, cond, w, model.schedule.T, 1)


# --- training ----------------------------------------------------------------

@dataclass
class DenoiserTrainConfig:
    epochs: int = 400
    batch_size: int = 128
    lr: float = 2e-3
    p_uncond: float = 0.1
    # cosine decay of the learning rate to zero over all updates
    cosine_decay: bool = True


def pooling_matrix(model: ConditionalDenoiser, captions: Sequence[Sequence[str]]) -> np.ndarray:
    """Row ``i`` averages the embeddings of caption ``i`` when multiplied by the table matrix."""
    index = {n: i for i, n in enumerate(model.table.names())}
    P = np.zeros((len(captions), len(index)))
    for r, cap in enumerate(captions):
        if not cap:
            raise ValueError(f"caption {r} is empty")
        for tok in cap:
            if tok not in index:
                raise KeyError(f"caption token {tok!r} not in the token table")
            P[r, index[tok]] += 1.0 / len(cap)
    return P


def train_denoiser(
    model: ConditionalDenoiser,
    ds: LabeledDataset,
    cfg: DenoiserTrainConfig = DenoiserTrainConfig(),
    seed: int = 0,
    fixed_t: Optional[int] = None,
) -> Tuple[ConditionalDenoiser, List[float]]:
    """Fit the noise-prediction objective with condition dropout.

    Returns the trained model (a new object) and the mean loss of every epoch.
    """
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    if ds.dim != model.data_dim:
        raise G.ShapeError(f"dataset dim {ds.dim}, model dim {model.data_dim}")
    g = rng.stream(seed, "denoiser/train")
    sched = model.schedule
    names = model.table.names()
    P_all = pooling_matrix(model, ds.captions)
    null_row = np.zeros(len(names))
    null_row[names.index(EMPTY)] = 1.0

    emb = {"emb": model.table.matrix()}
    weights = {}
    for i, (W, b) in enumerate(model.layers):
        weights[f"W{i}"], weights[f"b{i}"] = W.copy(), b.copy()
    n_layers = len(model.layers)
    w_state, emb_state = G.AdamState(), G.AdamState()
    losses = []
    n = len(ds)
    total_steps = cfg.epochs * math.ceil(n / cfg.batch_size)
    for _ in range(cfg.epochs):
        order = g.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            m = len(idx)
            x0 = ds.points[idx]
            t = np.full(m, fixed_t) if fixed_t is not None else g.integers(1, sched.T + 1, size=m)
            eps = g.standard_normal(x0.shape)
            P = P_all[idx].copy()
            P[g.random(m) < cfg.p_uncond] = null_row
            x_t = forward_noise(x0, t, eps, sched)

            E = Tensor(emb["emb"], requires_grad=True)
            leaves = {k: Tensor(v, requires_grad=True) for k, v in weights.items()}
            layer_t = [(leaves[f"W{i}"], leaves[f"b{i}"]) for i in range(n_layers)]
            pred = denoise_predict(model, x_t, t, G.matmul(Tensor(P), E), params=layer_t)
            loss = G.mean_sq_err(pred, eps)
            grads = G.backward(loss)
            lr = cfg.lr
            if cfg.cosine_decay:
                lr *= 0.5 * (1.0 + math.cos(math.pi * w_state.step_count / total_steps)) + 1e-3
            weights, _ = G.adam_step(weights, {k: grads[v] for k, v in leaves.items()}, w_state, lr)
            # embeddings are stored 1/cond_scale smaller, so their steps shrink alike
            emb, _ = G.adam_step(emb, {"emb": grads[E]}, emb_state, lr / model.cond_scale)
            total += float(loss.data) * m
        losses.append(total / n)

    table = TokenTable({name: emb["emb"][i].copy() for i, name in enumerate(names)})
    layers = [(weights[f"W{i}"], weights[f"b{i}"]) for i in range(n_layers)]
    trained = ConditionalDenoiser(table, sched, layers, model.data_dim, model.time_emb_dim, model.hidden, model.cond_scale)
    return trained, losses


# --- persistence -------------------------------------------------------------

def denoiser_to_dict(model: ConditionalDenoiser) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "denoiser",
        "data_dim": model.data_dim,
        "emb_dim": model.emb_dim,
        "time_emb_dim": model.time_emb_dim,
        "hidden": list(model.hidden),
        "cond_scale": model.cond_scale,
        "schedule": {"T": model.schedule.T, "alpha_bar": model.schedule.alpha_bar.tolist()},
        "table": {k: v.tolist() for k, v in model.table.entries.items()},
        "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in model.layers],
    }


def denoiser_from_dict(d: dict) -> ConditionalDenoiser:
    if d.get("kind", "denoiser") != "denoiser":
        raise CheckpointError(f"checkpoint kind is {d.get('kind')!r}, expected 'denoiser'")
    if d.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {d.get('format_version')!r}")
    try:
        sched = NoiseSchedule(int(d["schedule"]["T"]), d["schedule"]["alpha_bar"])
        table = TokenTable(d["table"], emb_dim=int(d["emb_dim"]))
        layers = [(np.array(l["W"], dtype=np.float64), np.array(l["b"], dtype=np.float64)) for l in d["layers"]]
        return ConditionalDenoiser(
            table, sched, layers, int(d["data_dim"]), int(d["time_emb_dim"]), tuple(d["hidden"]), float(d["cond_scale"])
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid denoiser checkpoint: {exc}") from exc


def dumps_denoiser(model: ConditionalDenoiser) -> str:
    return json.dumps(denoiser_to_dict(model))


def loads_denoiser(text: str) -> ConditionalDenoiser:
    return denoiser_from_dict(json.loads(text))
