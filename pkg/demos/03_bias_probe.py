# %% [markdown]
# # What a forged token learns from a biased classifier
#
# Most waterbird points sit on a shifted "background" (axis 1 above 1.5).
# A token forged against a classifier trained on this data keeps generating
# that background, even though the background is not part of the class itself.
#
# Run: `python3 demos/03_bias_probe.py` (about 15 seconds).

# %%
from pathlib import Path

from tokenforge import pipeline as P
from tokenforge.diffusion import sample
from tokenforge.forge import forge
from tokenforge.metrics import bias_probe, offset_fraction

cfg = P.RunConfig.load(Path(__file__).resolve().parents[1] / "configs" / "bias.json")
spec, ds = P.make_data(cfg)
train, test = P.split(cfg, ds)
model, _ = P.fit_denoiser(cfg, spec.vocab, train)
clf, _ = P.fit_expert(cfg, train, spec.num_classes)

# %%
for c, cls in enumerate(spec.classes):
    res = forge(model, clf, cfg.forge_config(spec, c))
    real = offset_fraction(test.of_class(c).points)
    plain = offset_fraction(sample(model, (cls.label,), w=cfg.guidance_w, n=200, seed=0))
    forged = bias_probe(model, res, n=200, seed=0, w=cfg.guidance_w)
    print(f"{cls.label:>10}: real {real:.2f}  plain prompt {plain:.2f}  forged token {forged:.2f}")
