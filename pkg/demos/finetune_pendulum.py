"""One fine-tuning trial of the Bayesian head against one retraining baseline.

Usage: python demos/finetune_pendulum.py [checkpoint]
Without a checkpoint a small model is pretrained first (about a minute).
"""
import sys

from kbtransformer.harness import ExperimentConfig, load_pretrained, pretrain_model, run_baseline, run_proposed

config = ExperimentConfig(n_samples=200, eval_every=40)
if len(sys.argv) > 1:
    model = load_pretrained(config, sys.argv[1])
else:
    model, _ = pretrain_model(config.replace(pretrain_samples=2000, pretrain_epochs=50))

print(f"{'samples':>8} {'proposed':>9} {'baseline-c10':>13} {'ms/sample (proposed, c10)':>28}")
for p, b in zip(run_proposed(config, model), run_baseline(config, 10, model)):
    times = "" if p.time_per_sample_s is None else f"{p.time_per_sample_s * 1e3:10.2f} {b.time_per_sample_s * 1e3:8.2f}"
    print(f"{p.samples_seen:8d} {p.success_rate:9.2f} {b.success_rate:13.2f} {times:>28}")
