import numpy as np
import pytest

from tokenforge import classifier as C
from tokenforge import diffusion as D
from tokenforge import forge as F
from tokenforge import grad as G
from tokenforge.forge import ForgeConfig, StepRecord
from tokenforge.grad import Tensor

from conftest import max_rel_err, numeric_grad

TOKEN = "<S>"


def stub_classifier(K=2, target=0, gain=100.0, hidden=(4,)):
    """Classifier whose logits ignore the input and favour ``target``."""
    widths = [2, *hidden, K]
    layers = [(np.zeros((a, b)), np.zeros(b)) for a, b in zip(widths[:-1], widths[1:])]
    b = np.zeros(K)
    b[target] = gain
    layers[-1] = (layers[-1][0], b)
    return C.ClassifierModel(K, C.NormStats(np.zeros(2), np.ones(2)), layers, hidden)


def linear_classifier(direction=(1.0, 0.0)):
    """Two classes split by the sign of ``direction . x``; depends on the input."""
    d = np.asarray(direction)
    W0 = np.stack([d, -d], axis=1)
    return C.ClassifierModel(2, C.NormStats(np.zeros(2), np.ones(2)), [(np.eye(2) * 0.01, np.zeros(2)), (W0 * 200, np.zeros(2))], (2,))


@pytest.fixture(scope="module")
def toy_model():
    m = D.init_denoiser(["", "a", "b"], emb_dim=4, hidden=(16, 16), T=10, seed=3, cond_scale=1.0)
    g = np.random.default_rng(0)
    layers = [(W + 0.2 * g.standard_normal(W.shape), b) for W, b in m.layers]
    return D.ConditionalDenoiser(m.table, m.schedule, layers, 2, 8, (16, 16), 1.0)


def cfg_for(**kw):
    base = dict(target_class=0, prompts=((TOKEN, "a"), (TOKEN, "a", "")), base_token="a", token_name=TOKEN)
    base.update(kw)
    return ForgeConfig(**base)


def test_init_token_copies_base(toy_model):
    t = toy_model.table.copy()
    F.init_token(t, TOKEN, "a")
    assert np.array_equal(t[TOKEN], t["a"]) and t[TOKEN] is not t["a"]
    F.init_token(t, "<generic>", "")
    assert np.array_equal(t["<generic>"], t[""])
    with pytest.raises(F.ForgeError):
        F.init_token(t, TOKEN, "a")
    with pytest.raises(F.ForgeError):
        F.init_token(t, "<x>", "missing")


def test_config_validation():
    with pytest.raises(F.ForgeError):
        cfg_for(prompts=((TOKEN, "a"),))
    with pytest.raises(F.ForgeError):
        cfg_for(prompts=(("a",), (TOKEN, "a")))
    for bad in (dict(batch_size=0), dict(min_correct_frac=0.0), dict(patience=200), dict(clip_norm=0.0)):
        with pytest.raises(F.ForgeError):
            cfg_for(**bad)
    assert cfg_for().effective_lr == 0.0005
    assert cfg_for(lr_rule=True).effective_lr == pytest.approx(0.00125)
    assert ForgeConfig.from_dict(cfg_for().to_dict()) == cfg_for()


def test_for_label_builds_two_prompts():
    cfg = ForgeConfig.for_label(1, ("tiger", "cat"), token_name=TOKEN)
    assert cfg.prompts == ((TOKEN, "tiger", "cat"), (TOKEN, "tiger", "cat", ""))


def _grad_last(model, prompt, w, seed=5, n=3):
    work = model.table.copy()
    F.init_token(work, TOKEN, "a")
    m2 = model.replace_table(work)
    v = Tensor(work[TOKEN].copy(), requires_grad=True)
    return m2, v, F.generate_batch_grad_last(m2, prompt, w, n, seed, v, TOKEN)


def test_gradient_reaches_only_the_token(toy_model):
    _, v, x0 = _grad_last(toy_model, (TOKEN, "a"), 7.0)
    grads = G.backward(G.sum_all(x0))
    assert set(grads) == {v}


def test_truncated_gradient_matches_fd(toy_model):
    m2, v, x0 = _grad_last(toy_model, (TOKEN, "b"), 0.0)
    probe = np.random.default_rng(2).normal(size=x0.shape)
    g = G.backward(G.sum_all(G.scale(x0, probe)))[v]
    # x_1 comes from the untracked steps and stays fixed
    x1 = D.denoise_loop(m2, D.initial_noise(3, 2, 5), D.embed_prompt(m2.table, (TOKEN, "b")), 0.0, 10, 2)

    def f(vec):
        cond = D.embed_prompt(m2.table, (TOKEN, "b"), overrides={TOKEN: Tensor(vec)})
        eps = D.guided_predict(m2, x1, 1, cond, 0.0)
        return float(np.sum(D.ddim_step(x1, 1, eps, m2.schedule).data * probe))

    assert max_rel_err(g, numeric_grad(f, v.data)) < 1e-4


def test_grad_last_matches_sample_bitwise(toy_model):
    m2, _, x0 = _grad_last(toy_model, (TOKEN, "a"), 7.0, seed=11, n=4)
    assert x0.data.tobytes() == D.sample(m2, (TOKEN, "a"), w=7.0, n=4, seed=11).tobytes()


def test_grad_last_requires_token(toy_model):
    m2, v, _ = _grad_last(toy_model, (TOKEN, "a"), 7.0)
    with pytest.raises(F.ForgeError):
        F.generate_batch_grad_last(m2, ("a",), 7.0, 2, 0, v, TOKEN)


def test_always_correct_stub_stops_at_step_one(toy_model):
    res = F.forge(toy_model, stub_classifier(target=0), cfg_for())
    assert res.stop_rule == "all_correct" and res.steps_taken == 1
    assert len(res.embedding_trajectory) == 2
    # loss ~ exp(-100): the update is zero and v keeps its initial value
    assert res.log[0].loss < 1e-40
    assert np.array_equal(res.embedding, res.embedding_trajectory[0])


def test_round_robin_and_trajectory_length(toy_model):
    cfg = cfg_for(max_steps=6, patience=5, target_class=1)
    res = F.forge(toy_model, stub_classifier(target=0), cfg)
    assert res.stop_rule == "step_cap" and res.steps_taken == 6
    assert [r.prompt for r in res.log] == [1, 2, 1, 2, 1, 2]
    assert [r.step for r in res.log] == list(range(1, 7))
    assert len(res.embedding_trajectory) == res.steps_taken + 1


def test_forge_leaves_models_untouched_and_is_deterministic(toy_model):
    clf = linear_classifier()
    before = (D.dumps_denoiser(toy_model), C.dumps_classifier(clf))
    cfg = cfg_for(max_steps=8, patience=3, seed=4)
    a = F.forge(toy_model, clf, cfg)
    assert (D.dumps_denoiser(toy_model), C.dumps_classifier(clf)) == before
    assert TOKEN not in toy_model.table
    b = F.forge(toy_model, clf, cfg)
    assert a.dumps() == b.dumps()
    assert F.replay_stop(a.log, cfg) == (a.stop_rule, a.steps_taken)


def test_forge_step_records_preclip_norm(toy_model):
    clf = linear_classifier()
    cfg = cfg_for(clip_norm=1e-6, max_steps=5, patience=2)
    state = F.start_forge(toy_model, cfg)
    v0 = state.embedding.copy()
    rec = F.forge_step(state, clf, cfg, 0)
    assert rec.grad_norm > 1e-6
    # a clipped first Adam step still moves each entry by about lr
    step = np.abs(state.embedding - v0)
    assert np.all(step <= cfg.lr * (1 + 1e-6))


def test_clip_example_norm_five():
    g = {"v": np.array([3.0, 4.0, 0.0]) * 1.0}
    out = G.clip_global_norm(g, 1.0)
    assert abs(G.global_norm(g) - 5.0) < 1e-15
    assert abs(G.global_norm(out) - 1.0) < 1e-12


def test_target_outside_classifier_range(toy_model):
    with pytest.raises(F.ForgeError):
        F.forge(toy_model, stub_classifier(K=2), cfg_for(target_class=2))


def _log(losses, accs):
    return [StepRecord(i + 1, l, a, 0.0, 1 + i % 2) for i, (l, a) in enumerate(zip(losses, accs))]


def test_should_stop_rules():
    cfg = cfg_for()
    assert F.should_stop(_log([1.0], [1.0]), cfg) == "all_correct"
    flat = _log([1.0] * 21, [0.6] * 21)
    assert F.should_stop(flat[:20], cfg) is None
    assert F.should_stop(flat, cfg) == "patience_met"
    assert F.replay_stop(flat, cfg) == ("patience_met", 21)
    # accuracy below min_correct_frac keeps going until the cap
    low = _log([1.0] * 200, [0.2] * 200)
    assert F.should_stop(low[:199], cfg) is None
    assert F.should_stop(low, cfg) == "step_cap"
    # an equal loss is not an improvement
    tie = _log([2.0, 1.0] + [1.0] * 20, [0.5] * 22)
    assert F.replay_stop(tie, cfg) == ("patience_met", 22)
    # rule order: all_correct wins over patience
    assert F.should_stop(_log([1.0] * 20 + [1.0], [0.6] * 20 + [1.0]), cfg) == "all_correct"
    with pytest.raises(F.ForgeError):
        F.should_stop([], cfg)


def test_result_serialization(toy_model, tmp_path):
    res = F.forge(toy_model, linear_classifier(), cfg_for(max_steps=4, patience=2))
    back = F.ForgeResult.loads(res.dumps())
    assert back.dumps() == res.dumps()
    assert np.array_equal(back.snapshot(0), res.embedding_trajectory[0])
    with pytest.raises(IndexError):
        res.snapshot(len(res.embedding_trajectory))
    csv_text = res.log_csv()
    assert csv_text.splitlines()[0] == "step,loss,batch_acc,grad_norm,prompt"
    replayed = F.log_from_csv(csv_text)
    assert F.replay_stop(replayed, res.config) == (res.stop_rule, res.steps_taken)
    applied = res.apply(toy_model, step=0)
    assert np.array_equal(applied.table[TOKEN], applied.table["a"])


def test_monotone_intent_over_ten_seeds(ambiguity_run):
    run = ambiguity_run(0)
    fails = 0
    for seed in range(10):
        cfg = ForgeConfig.for_label(1, ("tiger", "cat"), base_token="cat", token_name="<tc>", seed=seed)
        log = F.forge(run.model, run.classifier, cfg).log
        first = np.mean([r.batch_acc for r in log[:3]])
        last = np.mean([r.batch_acc for r in log[-3:]])
        fails += last < first
    assert fails / 10 < 0.1
