# %% [markdown]
# # Training MT-VAE(add) next to a deterministic baseline
#
# A short run (about two minutes per model on one core) is enough to see the
# qualitative gap: the deterministic LSTM predicts one averaged future while
# the latent-variable model spreads its prior samples over all modes.

# %%
import os

import numpy as np

from mtvae import data, evaluation as ev, models, train

STEPS = int(os.environ.get("MTVAE_STEPS", 1500))
spec = data.SyntheticSpec()
splits = data.gen_synthetic(spec)

trained = {}
for variant in (models.MTVAE_ADD, models.PREDICTION_LSTM):
    mc = models.ModelConfig(variant=variant, dim=spec.dim)
    tc = train.TrainConfig(learning_rate=1e-3, total_steps=STEPS, seed=0)
    res = train.train(mc, splits["train"], tc)
    last = res.trace[-1]
    print(f"{variant:15s} final loss {last.total:8.3f}  recon {last.recon:8.3f}  kl {last.kl:6.3f}")
    trained[variant] = ev.Model(mc, res.checkpoint.params)

# %% [markdown]
# Strided test evaluation: best-of-N errors, Parzen log-likelihood with a
# bandwidth picked on the validation split, and mode coverage.

# %%
reports = {v: ev.evaluate(m, splits["test"], ev.EvalConfig(), spec=spec, validation=splits["val"])
           for v, m in trained.items()}
for rep in reports.values():
    print(rep.table(), "\n")
print(ev.format_rows([ev.table1_row(v, rep, rep) for v, rep in reports.items()],
                     ["method", "r_mse_test", "s_mse_test", "test_cll"]))

# %% [markdown]
# Which modes do ten prior samples land in, for the first few contexts?

# %%
windows = data.sample_windows(splits["test"], (8, 8), spec.future)
rng = np.random.default_rng(0)
for S_A, S_B in list(windows.pairs())[:5]:
    samples = ev.prior_samples(trained[models.MTVAE_ADD], S_A, 10, spec.future, rng)
    print(sorted(data.mode_classify(S_A, s, spec)[0] for s in samples),
          "truth", data.mode_classify(S_A, S_B, spec)[0])
