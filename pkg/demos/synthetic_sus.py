"""Semi-unsupervised learning on four Gaussian blobs.

Two classes get a few labels, two classes never do. Both model families are
trained on the same split and scored per subset of classes.
"""
# %%
import numpy as np

from susl import data, evaluation, models, training
from susl.distributions import LikelihoodSpec

train = data.make_blobs(250, n_classes=4, dim=8, seed=0)
test = data.make_blobs(250, n_classes=4, dim=8, seed=1)
regime = data.build_regime(train, "semi-unsupervised", label_fraction=0.2, seed=0)
print("labelled classes:", regime.labelled_classes)
print("labelled examples:", len(regime.y_labelled), "unlabelled:", len(regime.x_unlabelled))

# %% label space: the 2 labelled classes plus 6 spare components, half the prior mass on each side
n_aug = 6
prior = data.build_class_prior(len(regime.labelled_classes), n_aug)
K = prior.K
alpha = training.default_alpha(regime.n_total, len(regime.y_labelled))
print(np.round(prior.probabilities, 4))

# %%
results = {}
for family in ("gm-dgm", "ssvae"):
    spec = models.ModelSpec(family, 8, 4, K, hidden_units=50, likelihood=LikelihoodSpec("gaussian", 0.5),
                            alpha=alpha, prior=prior, init_std=0.1)
    store, log = training.train(spec, regime, training.TrainConfig(epochs=100, batch_size=32, base_lr=3e-3))
    rep = evaluation.evaluate(store, test.features, test.labels, 4, regime.labelled_classes)
    results[family] = rep
    print(f"{family:7s} objective {log.objective_trace()[0]:9.2f} -> {log.objective_trace()[-1]:8.2f}")

# %%
for family, rep in results.items():
    print(f"{family:7s} ACC {rep.acc:.3f}  labelled classes {rep.acc_labelled_classes:.3f}  "
          f"unlabelled classes {rep.acc_unlabelled_classes:.3f}")

# %% which components ended up holding the unlabelled blobs
rep = results["gm-dgm"]
used = np.flatnonzero(rep.confusion.sum(axis=0))
print("clusters in use:", used.tolist())
print("mapped to classes:", rep.assignment.mapping[used].tolist())
print(rep.confusion[:, used])

# %% confidence by subset; the unlabelled blobs are assigned less sharply
print({k: round(v["summary"]["mean"], 3) for k, v in rep.entropies.items()})
