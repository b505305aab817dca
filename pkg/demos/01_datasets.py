"""Synthetic video datasets: procedural moving shapes, chunking and splits.

Run: python3 demos/01_datasets.py
"""
# %%
import tempfile
from pathlib import Path

import numpy as np

from mtcvae.datakit import (
    ShapesConfig, chunk_video, generate_moving_shapes, load_dataset, sample_chunk_window,
    save_dataset, split_dataset, unchunk,
)

# %% A small shapes dataset: 3 shapes x 2 scales of content, 8 directions x 2 speeds of motion.
data = generate_moving_shapes(ShapesConfig(n_videos=60, T=16, H=32, W=32), seed=0)
print("frames", data.frames.shape, data.frames.dtype)
print("factors", [(f.name, f.n_values, f.tag) for f in data.schema])
print("first labels", dict(zip(data.factor_names, data.labels[0].tolist())))

# %% Content and motion supersets collapse the factors into two class labels.
print("content classes", len(np.unique(data.superset_labels("content"))),
      "motion classes", len(np.unique(data.superset_labels("motion"))))

# %% Chunking: 16 frames with c=5 give 4 chunks, the last padded with the final frame.
video = data.float_frames(0)
chunks, pad = chunk_video(video, 5)
print("chunks", chunks.shape, "pad", pad, "round trip exact:", np.array_equal(unchunk(chunks, pad), video))

# %% A training window: O consecutive chunks starting at a random frame.
window = sample_chunk_window(video, c=4, O=2, rng=np.random.default_rng(1))
print("window", window.chunks.shape, "start", window.start)

# %% Splits: soft (random 80/20) and holdouts that keep test factor values unseen.
for mode in ("soft", "appearance-holdout", "motion-holdout"):
    train_ids, test_ids = split_dataset(data, mode, fold=0, seed=0)
    print(f"{mode:20s} train {len(train_ids):3d} test {len(test_ids):3d}")

# %% Raw frame container plus JSON manifest.
with tempfile.TemporaryDirectory() as tmp:
    _, manifest = save_dataset(data, tmp, "shapes")
    back = load_dataset(manifest)
    print("reloaded identical:", np.array_equal(back.frames, data.frames),
          sorted(p.name for p in Path(tmp).iterdir()))
