"""Closed-form predictive moments of a small Bayesian head versus weight sampling."""
import numpy as np

from kbtransformer.bayes_head import HeadConfig, WeightState, init_head, predict

rng = np.random.default_rng(0)
config = HeadConfig(d=2, widths=(4, 3), epsilon=0.01)
w = init_head(config, rng.normal(size=(3, 3)))
w = WeightState([m + 0.3 * rng.normal(size=m.size) for m in w.means], w.covs)
h = rng.normal(size=(1, 2))

mean, cov = predict(w, h, config)

# sampling: draw weights, run the network deterministically
n = 200_000
z = np.broadcast_to(h, (n, 1, 2))
for i, (mu, S) in enumerate(zip(w.means, w.covs)):
    W = (mu + rng.standard_normal((n, mu.size)) @ np.linalg.cholesky(S).T).reshape(n, config.widths[i], -1)
    u = np.einsum("btm,bam->bta", np.concatenate([z, np.ones((n, 1, 1))], axis=2), W)
    z = np.maximum(u, 0.0) if i == 0 else u
p = np.exp(z[:, 0] - z[:, 0].max(1, keepdims=True))
p /= p.sum(1, keepdims=True)

np.set_printoptions(precision=4, suppress=True)
print("closed-form mean ", mean[0])
print("sampled mean     ", p.mean(0))
print("closed-form var  ", np.diag(cov))
print("sampled var      ", p.var(0))
