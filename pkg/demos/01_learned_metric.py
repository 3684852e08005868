# Learning a metric with RFM on data where only a few coordinates matter.
#
# Five Gaussian classes whose means live in the first 2 of 20 coordinates.
# Each RFM step refits kernel ridge regression and replaces M by the average
# gradient outer product; watch the share of trace(M) on the first 2x2 block.

import numpy as np

from dance.data import partition, synth_gaussian_mixture
from dance.kernels import KernelParams
from dance.rfm import agop, krr_fit, krr_predict, top1_accuracy

data = synth_gaussian_mixture(classes=5, dim=20, per_class=200, noise_sigma=0.2, informative_dims=2, seed=0)
tr, va = partition(len(data), (0.8, 0.2), seed=0)
train, val = data.subset(tr), data.subset(va)

M = np.eye(20)
for t in range(6):
    model = krr_fit(train.embeddings, train.one_hot(), KernelParams(M, bandwidth=10.0, shape=1.0), ridge=0.1)
    acc = top1_accuracy(krr_predict(model, val.embeddings), val.labels)
    share = np.trace(M[:2, :2]) / np.trace(M)
    print(f"iteration {t}: val acc {acc:.3f}, informative share {share:.3f}")
    G = agop(model, train.embeddings)
    M = G * (20 / np.trace(G))  # keep trace(M) = d

# the diagonal of the final metric, rounded
print(np.round(np.diag(M), 2))
