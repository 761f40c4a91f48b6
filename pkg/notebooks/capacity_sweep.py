# %% [markdown]
# Codebook utilization: SQ-VAE against a straight-through VQ-VAE.
#
# Runs a small sweep over the codebook size K for both models through the
# command line entry point, then prints the seed-aggregated summary and writes
# a log-scale SVG of perplexity and test MSE against K.
# Run with ``python notebooks/capacity_sweep.py [epochs] [seeds]``.

# %%
import json
import os
import sys
import tempfile

from sqvae.cli import main
from sqvae.records import read_table

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 3
seeds = int(sys.argv[2]) if len(sys.argv) > 2 else 2
here = os.path.dirname(os.path.abspath(__file__))
out = tempfile.mkdtemp(prefix="sqvae_sweep_")

grid = {
    "base": {"dataset": {"kind": "synth_continuous", "n": 2500, "side": 16, "seed": 0},
             "d_z": 8, "d_b": 16, "epochs": epochs, "batch_size": 4, "checkpoint_every": 0},
    "axes": {"model": ["gaussian_sqvae_I", "vqvae"], "K": [8, 32],
             "seed": list(range(seeds))},
}
grid_path = os.path.join(out, "grid.json")
with open(grid_path, "w") as fh:
    json.dump(grid, fh)

# %%
assert main(["sweep", "--grid", grid_path, "--out", out]) == 0
_, rows, _ = read_table(os.path.join(out, "summary.csv"))
for r in rows:
    print(f"{r['model']:18s} K={r['K']:>3s}  perplexity {float(r['perplexity_mean']):6.2f}"
          f" ± {float(r['perplexity_std']):.2f}  test mse {float(r['test_mse_mean']):.5f}"
          f" ± {float(r['test_mse_std']):.5f}")

# %%
svg_path = os.path.join(here, "capacity.svg")
assert main(["plot", "--metrics", os.path.join(out, "summary.csv"), "--kind", "capacity",
             "--out", svg_path]) == 0
print("wrote", svg_path)
