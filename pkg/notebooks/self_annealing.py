# %% [markdown]
# Self-annealing of the quantizer on the synthetic blob images.
#
# Trains a Gaussian SQ-VAE with a shared dequantization variance and prints,
# per epoch, the learned decoder variance sigma^2, the quantizer variance
# sigma_phi^2 and the mean quantization entropy.  Both variances shrink and the
# entropy falls while training, without any schedule on sigma_phi^2.
# Run with ``python notebooks/self_annealing.py [epochs]``; an SVG of the scale
# parameters is written next to this file.

# %%
import os
import sys

from sqvae.plotting import anneal_plot
from sqvae.records import MetricsWriter
from sqvae.training import TrainConfig, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5
here = os.path.dirname(os.path.abspath(__file__))

config = TrainConfig(
    model="gaussian_sqvae_I",
    dataset={"kind": "synth_continuous", "n": 2500, "side": 16, "seed": 0},
    d_z=8, d_b=16, K=32, epochs=epochs, batch_size=4, seed=0,
)

# %%
csv_path = os.path.join(here, "self_annealing_metrics.csv")
writer = MetricsWriter(csv_path)


def show(row):
    writer(row)
    print(f"epoch {row.epoch:3d}  sigma2 {row.sigma2:.5f}  sigma2_phi {row.sigma2_phi:.4f}  "
          f"entropy {row.mean_entropy:.3f}  perplexity {row.perplexity:.2f}  "
          f"test mse {row.test_mse:.5f}", flush=True)


state, rows = train(config, on_row=show)

# %%
svg_path = os.path.join(here, "self_annealing.svg")
with open(svg_path, "w") as fh:
    fh.write(anneal_plot([csv_path]))
print("wrote", svg_path)
