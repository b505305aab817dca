"""Dense Lucas-Kanade flow, the motion encoder's input.

Run: python3 demos/02_optical_flow.py
"""
# %%
import numpy as np
from scipy import ndimage

from mtcvae.datakit import ShapesConfig, generate_moving_shapes
from mtcvae.flow import chunk_flow_stack, lk_flow_pair

# %% A smooth texture shifted one pixel to the right.
tex = ndimage.gaussian_filter(np.random.default_rng(0).random((64, 80)), 3.0)
tex = (tex - tex.min()) / (tex.max() - tex.min())
a, b = tex[8:56, 8:72], tex[8:56, 7:71]
flow = lk_flow_pair(a, b)[8:-8, 8:-8]
print("mean (u, v):", flow.reshape(-1, 2).mean(0).round(3))
print("mean endpoint error:", np.linalg.norm(flow - [1.0, 0.0], axis=-1).mean().round(3))

# %% A static pair has exactly zero flow.
print("static max |flow|:", np.abs(lk_flow_pair(a, a)).max())

# %% For a chunk of c frames the encoder sees c-1 flow fields (u, v channels).
data = generate_moving_shapes(ShapesConfig(n_videos=1, T=8, H=32, W=32), seed=3)
chunk = data.float_frames(0)[:4]
stack = chunk_flow_stack(chunk)
print("chunk", chunk.shape, "-> flow stack", stack.shape)
moving = np.abs(stack).sum(-1) > 0.1
print("pixels with visible motion per pair:", moving.reshape(3, -1).sum(1))
