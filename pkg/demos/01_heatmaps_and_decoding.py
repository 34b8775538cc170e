"""
From annotation to heatmap and back
===================================

A synthetic person is cropped, turned into 16 Gaussian target maps,
and the maps are decoded back to image coordinates.
"""

# %%
import tempfile

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from hgfusion.data import AffineParams, PoseDataset
from hgfusion.evaluation import decode_heatmaps
from hgfusion.synthetic import make_synthetic_dataset

root = tempfile.mkdtemp(prefix="hgfusion_demo_")
path = make_synthetic_dataset("plain", 4, seed=0, out_dir=root, image_side=256)
ds = PoseDataset.from_file(path, output_side=256)

# %%
# A rotated, scaled crop. Targets live on the 64x64 output grid.
sample = ds.sample(0, AffineParams(rotation=20.0, scale_jitter=1.1))
print("crop", sample.image.shape, "targets", sample.target_heatmaps.shape)

# %%
# Decode the targets as if they were predictions.
(pose,) = decode_heatmaps(sample.target_heatmaps, [sample.inverse_affine], stride=4.0)
truth = ds.annotations[0].joints
err = np.linalg.norm(pose.coords - truth, axis=1)
print("max decode error (px): %.2f" % err.max())

# %%
fig, axes = plt.subplots(1, 2, figsize=(8, 4))
axes[0].imshow(sample.image[0].transpose(1, 2, 0))
axes[0].set_title("augmented crop")
axes[1].imshow(sample.target_heatmaps[0].max(axis=0), cmap="magma")
axes[1].set_title("max over joints")
for ax in axes:
    ax.axis("off")
fig.savefig(f"{root}/heatmaps.png", dpi=80)
print("figure written to", root)
