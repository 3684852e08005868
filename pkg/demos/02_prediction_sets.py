# Building DANCE prediction sets step by step.
#
# Split a synthetic dataset, tune the RFM adapter on the support split,
# calibrate both scores on the calibration split (reusing it as the
# neighbor reference, with leave-one-out), then look at a few test sets.

import numpy as np

from dance.conformal import REUSE, ScoreConfig, calibrate, dance_membership, select_lambda
from dance.data import split_dataset, partition, synth_gaussian_mixture
from dance.metrics import ccv, coverage, mean_set_size
from dance.neighbors import build_index
from dance.rfm import RfmConfig, tune_hyperparameters

data = synth_gaussian_mixture(classes=6, dim=10, per_class=150, noise_sigma=0.6, informative_dims=4, seed=1)
support, cal, test = split_dataset(data)
print("support / cal / test:", len(support), len(cal), len(test))

tr, va = partition(len(support), (0.8, 0.2), seed=0)
kernel, ridge, model = tune_hyperparameters(support.subset(tr), support.subset(va), RfmConfig(tuning_budget=8))
print(f"RFM: L={kernel.bandwidth:.3g}, xi={kernel.shape:.3g}, ridge={ridge:.2g}, "
      f"iteration {model.selected_iteration}, val acc {model.validation_accuracy:.3f}")

alpha = 0.1
cfg = ScoreConfig(m_knn=50, m_clr=25, temperature=0.01)
lam = select_lambda(cal, kernel, model.learned_feature_matrix, alpha, cfg=cfg)
index = build_index(cal, model.learned_feature_matrix)
art = calibrate(cal, index, kernel, alpha, lam, REUSE, cfg)
print(f"lambda={lam}: q_knn={art.q_knn:.3f} at alpha {art.alpha_knn:.3f}, "
      f"q_clr={art.q_clr:.3f} at alpha {art.alpha_clr:.3f}")

# test ids must not collide with calibration ids (they key the smoothing noise)
sets = dance_membership(test.embeddings, test.ids, art, index, kernel)
for i in range(5):
    print(f"  true {test.labels[i]}: knn {np.flatnonzero(sets['knn'][i])}, "
          f"clr {np.flatnonzero(sets['clr'][i])}, dance {np.flatnonzero(sets['dance'][i])}")

for name in ("knn", "clr", "dance"):
    s = sets[name]
    print(f"{name:>5}: coverage {coverage(s, test.labels):.3f}, size {mean_set_size(s):.2f}, "
          f"CCV {ccv(s, test.labels, alpha, test.class_count):.2f}")
