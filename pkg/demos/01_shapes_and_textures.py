"""Render the in-distribution set and the three kinds of shift side by side.

Each row is one split: ID, new shapes (semantic shift), new backgrounds
(domain shift), and both at once.  The true foreground mask is shown under
every image.

    python demos/01_shapes_and_textures.py out.png
"""

import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from xdom.data_synth import DatasetSpec, gen_id_dataset, gen_ood_dataset

spec = DatasetSpec(n_train=8, n_test=0)
train, _ = gen_id_dataset(spec)
rows = {"ID": train}
for kind in ("semantic", "domain", "both"):
    rows[kind] = gen_ood_dataset(kind, spec, 8)

fig, axes = plt.subplots(2 * len(rows), 8, figsize=(10, 2.6 * len(rows)))
for r, (name, examples) in enumerate(rows.items()):
    for c, e in enumerate(examples):
        axes[2 * r, c].imshow(e.image)
        axes[2 * r + 1, c].imshow(e.true_mask, cmap="gray")
        axes[2 * r, c].set_title(f"{e.shape}\n{e.texture_id}", fontsize=6)
    axes[2 * r, 0].set_ylabel(name)
for ax in axes.flat:
    ax.set_xticks([])
    ax.set_yticks([])
fig.tight_layout()
out = sys.argv[1] if len(sys.argv) > 1 else "shapes_and_textures.png"
fig.savefig(out, dpi=120)
print("foreground fraction per ID image:", np.round(train.masks().mean(axis=(1, 2)), 3))
print("wrote", out)
