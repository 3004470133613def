import os, sys
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from src.synthetic_data import load_dataset

dataset_dir = sys.argv[1]
output_path = sys.argv[2] if len(sys.argv) > 2 else os.path.join(dataset_dir, "preview.png")
columns = 8

dataset = load_dataset(dataset_dir)
rows = len(dataset.records)
fig, axes = plt.subplots(rows, columns, figsize=(columns, rows), squeeze=False)
for row, record in enumerate(dataset.records):
    frames = record.scene.frames
    for col, index in enumerate(np.linspace(0, len(frames) - 1, columns).astype(int)):
        ax = axes[row][col]
        ax.imshow(frames[index])
        ax.set_axis_off()
        if row == 0:
            ax.set_title(f"frame {index}", fontsize=6)
fig.savefig(output_path, dpi=100, bbox_inches="tight")
print(f"Wrote {output_path}")
