"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines appear in the "acceptance criteria" section of the pytest summary.
"""
import json
import time

import numpy as np
import pytest

from tokenforge import classifier as C
from tokenforge import diffusion as D
from tokenforge import forge as F
from tokenforge import grad as G
from tokenforge import metrics as M
from tokenforge import pipeline as P
from tokenforge.cli import main as cli_main
from tokenforge.grad import Tensor

from conftest import check_op_grad, load_config, max_rel_err, numeric_grad, verdict
from test_cli import TINY, tree_bytes
from test_forge import _log, cfg_for, stub_classifier
from test_metrics import brute_kid, kid_null_stats

SEEDS = range(5)


# --- 1: autodiff --------------------------------------------------------------

def _op_cases(g):
    """Builders and random inputs for every differentiable operation."""
    m, k = int(g.integers(2, 5)), int(g.integers(2, 5))
    u = lambda *s: g.uniform(-2, 2, s)
    targets = g.integers(0, k, m)
    return [
        ("matmul", G.matmul, [u(m, k), u(k, 3)]),
        ("add_broadcast", G.add_broadcast, [u(m, k), u(k)]),
        ("add", G.add, [u(m, k), u(m, k)]),
        ("sub", G.sub, [u(m, k), u(m, k)]),
        ("scale", lambda a: G.scale(a, np.linspace(-1, 2, k)), [u(m, k)]),
        ("affine_const", lambda a: G.affine_const(a, np.linspace(0.5, 2, k), np.linspace(-1, 1, k)), [u(m, k)]),
        ("silu", G.silu, [u(m, k)]),
        ("tanh", G.tanh, [u(m, k)]),
        ("concat", lambda a, b: G.concat_features([a, b]), [u(m, k), u(m, 2)]),
        ("repeat_rows", lambda v: G.repeat_rows(v, m), [u(k)]),
        ("sum_all", G.sum_all, [u(m, k)]),
        ("mean_sq_err", G.mean_sq_err, [u(m, k), u(m, k)]),
        ("softmax_ce", lambda a: G.softmax_cross_entropy(a, targets), [u(m, k)]),
    ]


def _denoiser_case(g):
    model = D.init_denoiser(["", "a"], emb_dim=3, hidden=(5, 5), T=10, seed=int(g.integers(1 << 30)), cond_scale=1.5)
    layers = [(W + 0.3 * g.standard_normal(W.shape), b + 0.1 * g.standard_normal(b.shape)) for W, b in model.layers]
    model = D.ConditionalDenoiser(model.table, model.schedule, layers, 2, 8, (5, 5), 1.5)
    x, c, t = g.uniform(-2, 2, (3, 2)), g.uniform(-1, 1, 3), int(g.integers(1, 11))
    target = g.normal(size=(3, 2))
    flat = [a for pair in layers for a in pair] + [x, c]

    def loss(arrs):
        params = list(zip(arrs[:-2:2], arrs[1:-2:2]))
        return G.mean_sq_err(D.denoise_predict(model, arrs[-2], t, arrs[-1], params=params), target)

    return flat, loss


def _classifier_case(g):
    dims = [2, 5, 5, 3]
    layers = [(g.uniform(-1, 1, (a, b)), g.uniform(-0.5, 0.5, b)) for a, b in zip(dims[:-1], dims[1:])]
    model = C.ClassifierModel(3, C.NormStats(g.normal(size=2), g.uniform(0.5, 2, 2)), layers, (5, 5))
    x, y = g.uniform(-3, 3, (4, 2)), g.integers(0, 3, 4)
    flat = [a for pair in layers for a in pair] + [x]

    def loss(arrs):
        params = list(zip(arrs[:-1:2], arrs[1:-1:2]))
        return G.softmax_cross_entropy(C.predict_logits(model, arrs[-1], params=params), y)

    return flat, loss


def _model_worst(flat, loss):
    leaves = [Tensor(a, requires_grad=True) for a in flat]
    grads = G.backward(loss(leaves))
    worst = 0.0
    for k in range(len(flat)):

        def f(v, k=k):
            arrs = [Tensor(a) for a in flat]
            arrs[k] = Tensor(v)
            return float(loss(arrs).data)

        worst = max(worst, max_rel_err(grads[leaves[k]], numeric_grad(f, flat[k])))
    return worst


def test_c1_autodiff_soundness():
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    for i in range(50):
        g = np.random.default_rng(1000 + i)
        if i % 15 == 13:
            worst = max(worst, _model_worst(*_denoiser_case(g)))
        elif i % 15 == 14:
            worst = max(worst, _model_worst(*_classifier_case(g)))
        else:
            cases = _op_cases(g)
            _, build, inputs = cases[i % 15]
            worst = max(worst, check_op_grad(build, inputs))
        n += 1
    secs = time.perf_counter() - t0
    verdict(1, worst < 1e-5 and secs < 30, f"{n} cases, max rel err {worst:.2e}, {secs:.1f}s")


# --- 2: sampler identities ----------------------------------------------------

def test_c2_sampler_identity():
    t0 = time.perf_counter()
    g = np.random.default_rng(2)
    s = D.make_schedule(50)
    x0, eps = g.normal(size=(100, 2)), g.normal(size=(100, 2))
    recon = float(np.max(np.abs(D.ddim_step(D.forward_noise(x0, 1, eps, s), 1, eps, s).data - x0)))
    model = D.init_denoiser(["", "a"], seed=3)
    layers = [(W + 0.1 * g.standard_normal(W.shape), b) for W, b in model.layers]
    model = D.ConditionalDenoiser(model.table, model.schedule, layers, 2, 8, model.hidden, model.cond_scale)
    cond = D.embed_prompt(model.table, ("a",))
    xt = g.normal(size=(50, 2))
    same = D.guided_predict(model, xt, 17, cond, 0.0).data.tobytes() == D.denoise_predict(model, xt, 17, cond).data.tobytes()
    secs = time.perf_counter() - t0
    verdict(2, recon < 1e-9 and same and secs < 5, f"inversion err {recon:.1e}, w=0 bit-identical {same}, {secs:.2f}s")


# --- 3: metric oracles --------------------------------------------------------

def test_c3_metric_oracles():
    t0 = time.perf_counter()
    gm, I = M.GaussianMoments, np.eye(2)
    cases = [
        M.frechet_from_moments(gm(np.zeros(2), I), gm(np.zeros(2), I)) - 0.0,
        M.frechet_from_moments(gm(np.zeros(2), I), gm(np.array([1.0, 0.0]), I)) - 1.0,
        M.frechet_from_moments(gm(np.zeros(1), np.eye(1)), gm(np.zeros(1), 4 * np.eye(1))) - 1.0,
    ]
    fd_err = max(abs(c) for c in cases)
    g = np.random.default_rng(3)
    kid_err = max(abs(M.kernel_distance(X, Y) - brute_kid(X, Y))
                  for X, Y in ((g.normal(size=(3, 2)), g.normal(size=(3, 2)) + 0.3) for _ in range(10)))
    mean, se = kid_null_stats(reps=200, n=500)
    secs = time.perf_counter() - t0
    ok = fd_err < 1e-9 and kid_err < 1e-12 and abs(mean) < 3 * se and secs < 60
    verdict(3, ok, f"frechet err {fd_err:.1e}, kid brute err {kid_err:.1e}, null mean {mean:.2e} (3se {3 * se:.2e}), {secs:.1f}s")


# --- 4 and 6: ambiguity pipelines ---------------------------------------------

@pytest.fixture(scope="module")
def ambiguity_runs(ambiguity_run):
    runs = [ambiguity_run(s) for s in SEEDS]
    return runs, max(ambiguity_run.seconds.values())


def test_c4_ambiguity_forged_beats_baseline(ambiguity_runs):
    runs, per_seed = ambiguity_runs
    gains = []
    for run in runs:
        c = run.spec.class_index("tiger_cat")
        rep = run.outcome.report
        gains.append(rep.accuracy(c, "forged") - rep.accuracy(c, "baseline"))
    wins = sum(gn >= 0.20 for gn in gains)
    detail = f"tiger_cat gains {[round(x, 2) for x in gains]}, {wins}/5 >= 0.20, slowest pipeline {per_seed:.0f}s"
    verdict(4, wins >= 4 and per_seed < 600, detail)


def test_c6_forged_quality_not_degraded(ambiguity_runs):
    runs, _ = ambiguity_runs
    ratios = []
    for run in runs:
        dist = {d.method: d.frechet_feat for d in run.outcome.report.distances}
        ratios.append(dist["forged"] / dist["baseline"])
    med = float(np.median(ratios))
    verdict(6, med <= 1.1, f"feature Frechet forged/baseline {[round(r, 2) for r in ratios]}, median {med:.2f}")


# --- 5: fine-grained augmentation ---------------------------------------------

def test_c5_finegrained_augmentation():
    t0 = time.perf_counter()
    passes, lines = 0, []
    for s in SEEDS:
        run = P.run_pipeline(load_config("finegrained", seed=s))
        rows = {r.k_real: r for r in run.outcome.augment}
        ok = all(rows[k].forged_aug >= rows[k].baseline_aug for k in (3, 9, 15))
        passes += ok
        lines.append("/".join(f"{rows[k].forged_aug - rows[k].baseline_aug:+.2f}" for k in (3, 9, 15)))
    per_seed = (time.perf_counter() - t0) / len(SEEDS)
    detail = f"forged-baseline at k=3/9/15 per seed {lines}, {passes}/5 seeds pass, {per_seed:.0f}s per seed"
    verdict(5, passes >= 4 and per_seed < 600, detail)


# --- 7: gradient skipping contract --------------------------------------------

def test_c7_gradient_skipping(ambiguity_run):
    run = ambiguity_run(0)
    before = (D.dumps_denoiser(run.model), C.dumps_classifier(run.classifier))
    fcfg = load_config("ambiguity").forge_config(run.spec, run.spec.class_index("tiger_cat"))
    state = F.start_forge(run.model, fcfg)
    v = Tensor(state.embedding.copy(), requires_grad=True)
    x0 = F.generate_batch_grad_last(state.model, fcfg.prompts[0], fcfg.guidance_w, fcfg.batch_size, 0, v, fcfg.token_name)
    loss = G.softmax_cross_entropy(C.predict_logits(run.classifier, x0), np.full(fcfg.batch_size, fcfg.target_class))
    only_token = set(G.backward(loss)) == {v}
    F.forge(run.model, run.classifier, fcfg)
    after = (D.dumps_denoiser(run.model), C.dumps_classifier(run.classifier))
    verdict(7, only_token and before == after, f"grad map is the token only: {only_token}, checkpoints unchanged: {before == after}")


# --- 8: stop rules ------------------------------------------------------------

def test_c8_stop_rules():
    m = D.init_denoiser(["", "a", "b"], emb_dim=4, hidden=(8, 8), T=10, seed=3, cond_scale=1.0)
    r1 = F.forge(m, stub_classifier(target=0), cfg_for())
    cfg = cfg_for()
    flat = _log([1.0] * 30, [0.6] * 30)
    fired = next(i + 1 for i in range(30) if F.should_stop(flat[: i + 1], cfg))
    r3 = F.forge(m, stub_classifier(target=0), cfg_for(target_class=1))
    ok = (
        (r1.stop_rule, r1.steps_taken) == ("all_correct", 1)
        and (F.should_stop(flat[:fired], cfg), fired) == ("patience_met", cfg.patience + 1)
        and (r3.stop_rule, r3.steps_taken) == ("step_cap", 200)
    )
    detail = (f"rule1 {r1.stop_rule}@{r1.steps_taken}, rule2 patience_met@{fired}, "
              f"rule3 {r3.stop_rule}@{r3.steps_taken}")
    verdict(8, ok, detail)


# --- 9: batch-size ablation ---------------------------------------------------

def test_c9_batch_size_ablation(ambiguity_run):
    run = ambiguity_run(0)
    cfg = load_config("ambiguity", seed=0)
    rows = P.ablate(cfg, run.spec, run.model, run.classifier, run.spec.class_index("tiger_cat"))
    text = M.ablation_csv(rows).splitlines()
    base = rows[0][1]
    schema = text[0] == "bsz,top1" and [r[0] for r in rows] == ["baseline", "1", "2", "3", "4", "5", "6"]
    beats = all(a > base for _, a in rows[1:])
    verdict(9, schema and beats, f"baseline {base:.2f}, forged {[round(a, 2) for _, a in rows[1:]]}, schema ok {schema}")


# --- 10: determinism of full commands -----------------------------------------

def _all_verbs(root, cfg):
    d = lambda k: root / k
    models = ["--denoiser", d("den") / "denoiser.json", "--classifier", d("clf") / "classifier.json"]
    train, test = d("data") / "train.csv", d("data") / "test.csv"
    cmds = [
        ["gen-data", "--config", cfg, "--out", d("data")],
        ["train-denoiser", "--config", cfg, "--data", train, "--out", d("den")],
        ["train-classifier", "--config", cfg, "--data", train, "--out", d("clf")],
    ]
    cmds += [["forge", "--config", cfg, *models, "--target", l, "--out", d(l)] for l in ("tiger", "tiger_cat", "house_cat")]
    tokens = [d(l) / "forge.json" for l in ("tiger", "tiger_cat", "house_cat")]
    cmds += [
        ["sample", "--config", cfg, "--denoiser", d("den") / "denoiser.json", "--prompt", "<tiger> tiger",
         "--token", tokens[0], "--svg", "--real", test, "--out", d("sample")],
        ["eval", "--config", cfg, *models, "--train", train, "--test", test, "--tokens", *tokens, "--out", d("eval")],
        ["ablate-bsz", "--config", cfg, *models, "--target", "tiger_cat", "--out", d("ablate")],
    ]
    return [cli_main([str(a) for a in c]) for c in cmds]


def test_c10_command_determinism(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    codes = _all_verbs(tmp_path / "a", cfg) + _all_verbs(tmp_path / "b", cfg)
    a = {k: v for k, v in tree_bytes(tmp_path / "a").items()}
    # resolved configs echo input paths, which differ between the two roots
    b = {k: v.replace(str(tmp_path / "b").encode(), str(tmp_path / "a").encode()) for k, v in tree_bytes(tmp_path / "b").items()}
    diff = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = all(c == 0 for c in codes) and not diff and len(a) > 0
    verdict(10, ok, f"{len(codes)} commands, {len(a)} files compared, differing: {diff or 'none'}")
