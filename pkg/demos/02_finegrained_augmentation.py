# %% [markdown]
# # Fine-grained classes and synthetic training data
#
# Four close classes on a circle. Nearly every caption is the shared word
# "sparrow"; the species words are rare. We train small classifiers on k real
# points per class plus 100 generated points per class, generated either from
# the plain species prompt or from the forged token.
#
# Run: `python3 demos/02_finegrained_augmentation.py` (about a minute).

# %%
from pathlib import Path

from tokenforge import pipeline as P
from tokenforge.diffusion import sample
from tokenforge.svg import scatter_svg

ROOT = Path(__file__).resolve().parents[1]
OUT = Path(__file__).resolve().parent / "out"
OUT.mkdir(exist_ok=True)
cfg = P.RunConfig.load(ROOT / "configs" / "finegrained.json")

# %% the whole pipeline in one call
run = P.run_pipeline(cfg)
for label, row in run.outcome.summary["classes"].items():
    print(f"{label:>16}: baseline {row['baseline']:.2f}  forged {row['forged']:.2f}  ({row['stop_rule']}, {row['steps']} steps)")

# %% augmentation table
print(f"{'k':>3} {'real only':>10} {'+baseline':>10} {'+forged':>10}")
for r in run.outcome.augment:
    print(f"{r.k_real:>3} {r.real_only:>10.3f} {r.baseline_aug:>10.3f} {r.forged_aug:>10.3f}")

# %% [markdown]
# Guided generations here are spread much wider than the real classes, so both
# augmented classifiers are trained on points that sit off the data. See the
# README section on the acceptance suite for how this shows up across seeds.

# %%
for c, res in run.forged.items():
    x = sample(res.apply(run.model), res.config.prompts[0], w=cfg.guidance_w, n=150, seed=c)
    (OUT / f"finegrained_{run.spec.classes[c].label}.svg").write_text(
        scatter_svg(x, run.test, run.spec.labels(), title=" ".join(res.config.prompts[0]))
    )
