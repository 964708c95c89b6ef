# %% [markdown]
# # Transferring a transition by analogy
#
# A : B :: C : D.  The latent code of the A -> B transition is decoded on
# top of a new context C.  On the synthetic data the right answer is known:
# C continued under A's mode and style.

# %%
import os

import numpy as np

from mtvae import data, evaluation as ev, models, render, train

OUT = os.environ.get("MTVAE_OUT", "out")
STEPS = int(os.environ.get("MTVAE_STEPS", 1500))
spec = data.SyntheticSpec()
splits = data.gen_synthetic(spec)
mc = models.ModelConfig(variant=models.MTVAE_ADD, dim=spec.dim)
res = train.train(mc, splits["train"], train.TrainConfig(learning_rate=1e-3, total_steps=STEPS, seed=0))
model = ev.Model(mc, res.checkpoint.params)

# %%
result = ev.analogy_suite(model, splits["test"], spec, n_cases=50)
print(f"velocity error <= {result.tolerance}: {result.pass_rate:.0%}; mode agreement {result.mode_agreement:.0%}")
print("median velocity error", np.median(result.errors))

# %% [markdown]
# One case drawn out: the red frames of the second strip are D.

# %%
test = splits["test"].records
a, c = test[0], test[1]
sa, sc = a.labels["split"], c.labels["split"]
D = models.analogy_transfer(model.params, mc, a.frames[:sa], a.frames[sa:], c.frames[:sc])
render.render(a.frames, os.path.join(OUT, "analogy_AB.svg"), split=sa)
render.render(np.concatenate([c.frames[:sc], D]), os.path.join(OUT, "analogy_CD.svg"), split=sc)
print("A mode", a.labels["mode"], "| D classified as", data.mode_classify(c.frames[:sc], D, spec)[0])

# %% [markdown]
# For the deterministic LSTM the analogy is plain feature arithmetic,
# e_D = e_B + (e_C - e_A), so C = A hands back e_B exactly.

# %%
pc = models.ModelConfig(variant=models.PREDICTION_LSTM, dim=spec.dim)
pp = models.init_params(pc, 0)
A, B = a.frames[:sa], a.frames[sa:]
print("identity holds:", np.array_equal(models.analogy_feature(pp, pc, A, B, A), models.encode(pp, B)))
