"""Converged predicted variance per noise level, for noisy targets and noisy actions.

Usage: python demos/uq_noise_models.py CHECKPOINT [iterations]
Each noise model takes roughly 10 s per 100 iterations.
"""
import sys

from kbtransformer.harness import ExperimentConfig, converged_variance, load_pretrained, run_uq

iters = int(sys.argv[2]) if len(sys.argv) > 2 else 300
config = ExperimentConfig(checkpoint=sys.argv[1], uq_iterations=iters, uq_window=min(500, iters // 2))
model = load_pretrained(config)
for noise in ("target", "action"):
    conv = converged_variance(run_uq(config.replace(uq_noise=noise), model))
    print(noise, "  ".join(f"sigma={s:g}: {v:.4f}" for s, v in sorted(conv.items())))
