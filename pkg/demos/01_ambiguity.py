# %% [markdown]
# # Ambiguous captions and a forged class token
#
# Three Gaussian classes. The caption "tiger cat" is written mostly for the
# tiger class, so prompting the denoiser with it lands on tigers. Forging a
# token against a classifier pulls the generations back onto tiger_cat.
#
# Run: `python3 demos/01_ambiguity.py` (about half a minute). SVG scatters are
# written to `demos/out/`.

# %%
from pathlib import Path

import numpy as np

from tokenforge import pipeline as P
from tokenforge.classifier import predict_class
from tokenforge.diffusion import sample
from tokenforge.forge import forge
from tokenforge.svg import scatter_svg

OUT = Path(__file__).resolve().parent / "out"
OUT.mkdir(exist_ok=True)
cfg = P.RunConfig.load(Path(__file__).resolve().parents[1] / "configs" / "ambiguity.json")

# %% data and the two frozen models
spec, ds = P.make_data(cfg)
train, test = P.split(cfg, ds)
model, losses = P.fit_denoiser(cfg, spec.vocab, train)
clf, _ = P.fit_expert(cfg, train, spec.num_classes)
print(f"denoiser loss {losses[0]:.3f} -> {losses[-1]:.3f}")

# %% what the plain prompt produces
target = spec.class_index("tiger_cat")
plain = sample(model, ("tiger", "cat"), w=cfg.guidance_w, n=200, seed=1)
print("plain prompt, share per class:", np.bincount(predict_class(clf, plain), minlength=3) / len(plain))

# %% forge the token for tiger_cat
result = forge(model, clf, cfg.forge_config(spec, target))
print(f"stopped by {result.stop_rule} after {result.steps_taken} steps")
for r in result.log[:: max(1, len(result.log) // 8)]:
    print(f"  step {r.step:3d} loss {r.loss:.3f} batch acc {r.batch_acc:.1f} |g| {r.grad_norm:.3f}")

# %% samples from intermediate snapshots
for k in sorted({0, len(result.embedding_trajectory) // 2, len(result.embedding_trajectory) - 1}):
    x = sample(result.apply(model, step=k), result.config.prompts[0], w=cfg.guidance_w, n=200, seed=1)
    (OUT / f"ambiguity_step{k:03d}.svg").write_text(scatter_svg(x, test, spec.labels(), title=f"snapshot {k}"))
    print(f"snapshot {k:3d}: tiger_cat share {np.mean(predict_class(clf, x) == target):.2f}")
