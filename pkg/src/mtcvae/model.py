"""Content encoder, motion encoder and Bernoulli decoder over video chunks.

Tensors at the public boundary use the dataset layout ``(B, c, H, W, C)``; the
modules permute to torch's ``(B, C, c, H, W)`` internally.
"""
from __future__ import annotations

import contextlib
import json
import struct
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .flow import chunk_flow_stack

N_STAGES = 5


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    c: int = 5
    O: int = 2
    dim_z: int = 8
    dim_w: int = 4
    beta: float = 1.0
    lam: float = 1.0
    base_filters: int = 8
    height: int = 64
    width: int = 64
    channels: int = 1
    partial_r: Optional[int] = None

    def validate(self) -> List[str]:
        problems = []
        if self.c < 1:
            problems.append("c must be >= 1")
        if self.O < 1:
            problems.append("O must be >= 1")
        if self.dim_z < 1 or self.dim_w < 1:
            problems.append("latent sizes must be >= 1")
        if self.beta < 0 or self.lam < 0:
            problems.append("beta and lam must be >= 0")
        if self.base_filters < 1:
            problems.append("base_filters must be >= 1")
        if min(self.height, self.width, self.channels) < 1:
            problems.append("input dims must be positive")
        if self.partial_r is not None and not 2 <= self.partial_r <= self.O:
            problems.append("partial_r must lie in [2, O]")
        return problems

    @property
    def motion_channels(self) -> int:
        return 2 if self.c >= 2 else self.channels

    @property
    def motion_length(self) -> int:
        return self.c - 1 if self.c >= 2 else 1


@dataclass
class GaussianPosterior:
    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ValueError("mean and log_var shapes differ")

    @property
    def var(self) -> torch.Tensor:
        return torch.exp(self.log_var)


def reparameterize(post: GaussianPosterior, noise: torch.Tensor) -> torch.Tensor:
    if noise.shape[-1] != post.mean.shape[-1]:
        raise ValueError(f"noise dim {noise.shape[-1]} != posterior dim {post.mean.shape[-1]}")
    return post.mean + torch.exp(0.5 * post.log_var) * noise


def chunk_mean(logits: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(logits)


def stage_shapes(t: int, h: int, w: int) -> List[Tuple[int, int, int]]:
    """Spatio-temporal extent before and after each encoder stage.

    Spatial stride is 2 at every stage; temporal stride is 2 while at least 4
    frames remain, otherwise 1.
    """
    shapes = [(t, h, w)]
    for _ in range(N_STAGES):
        st = 2 if t >= 4 else 1
        t = (t - 1) // st + 1
        h = (h - 1) // 2 + 1
        w = (w - 1) // 2 + 1
        shapes.append((t, h, w))
    return shapes


def _strides(shapes):
    return [((2 if a[0] >= 4 else 1), 2, 2) for a in shapes[:-1]]


class RowLinear(nn.Linear):
    """nn.Linear that, in eval mode, applies the weights one row at a time.

    BLAS picks different kernels for different batch sizes, so a batched matmul can
    differ in the last bit from the same rows computed alone.  Evaluating each row
    separately keeps eval-mode outputs independent of how inputs are batched.
    """

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training or x.dim() != 2 or x.shape[0] <= 1:
            return super().forward(x)
        return torch.cat([super(RowLinear, self).forward(x[i:i + 1]) for i in range(x.shape[0])])


class Encoder(nn.Module):
    """Five Conv3d-BatchNorm-ReLU stages followed by linear mean / log-variance heads."""

    def __init__(self, in_channels: int, length: int, height: int, width: int, base: int,
                 latent: int):
        super().__init__()
        self.widths = [base, 2 * base, 4 * base, 8 * base, 8 * base]
        self.shapes = stage_shapes(length, height, width)
        layers = []
        cin = in_channels
        for cout, stride in zip(self.widths, _strides(self.shapes)):
            layers += [nn.Conv3d(cin, cout, 3, stride=stride, padding=1, bias=False),
                       nn.BatchNorm3d(cout), nn.ReLU()]
            cin = cout
        self.body = nn.Sequential(*layers)
        flat = cin * int(np.prod(self.shapes[-1]))
        self.mean = RowLinear(flat, latent)
        self.log_var = RowLinear(flat, latent)

    def forward(self, x: torch.Tensor) -> GaussianPosterior:
        h = self.body(x).flatten(1)
        return GaussianPosterior(self.mean(h), self.log_var(h))


class Decoder(nn.Module):
    """Mirror of the content encoder: transposed Conv3d stages, hidden widths doubled."""

    def __init__(self, enc_widths: List[int], enc_shapes, channels: int, latent: int):
        super().__init__()
        top = 2 * enc_widths[-1]
        self.start_shape = enc_shapes[-1]
        self.hidden_widths = [2 * w for w in enc_widths[-2::-1]]
        self.project = RowLinear(latent, top * int(np.prod(self.start_shape)))
        self.top = top
        # (input extent, output extent) of each stage, undoing the encoder strides
        sizes = list(enc_shapes[::-1])
        outs = self.hidden_widths + [channels]
        stages = []
        cin = top
        for i, cout in enumerate(outs):
            src, dst = sizes[i], sizes[i + 1]
            stride = tuple(2 if d > s else 1 for s, d in zip(src, dst))
            extra = tuple(d - ((s - 1) * st + 1) for s, d, st in zip(src, dst, stride))
            conv = nn.ConvTranspose3d(cin, cout, 3, stride=stride, padding=1,
                                      output_padding=extra, bias=i == len(outs) - 1)
            if i < len(outs) - 1:
                stages.append(nn.Sequential(conv, nn.BatchNorm3d(cout), nn.ReLU()))
            else:
                stages.append(conv)
            cin = cout
        self.stages = nn.Sequential(*stages)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.project(latent)).view(-1, self.top, *self.start_shape)
        return self.stages(h)


@contextlib.contextmanager
def _batch_invariant():
    # oneDNN picks batch-size dependent kernels; the native path is per-sample exact
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with torch.backends.mkldnn.flags(enabled=False):
            yield


class MTCVAE(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        problems = config.validate()
        if problems:
            raise ValueError("; ".join(problems))
        self.config = config
        cfg = config
        self.content_encoder = Encoder(cfg.channels, cfg.c, cfg.height, cfg.width,
                                       cfg.base_filters, cfg.dim_z)
        self.motion_encoder = Encoder(cfg.motion_channels, cfg.motion_length, cfg.height,
                                      cfg.width, cfg.base_filters, cfg.dim_w)
        self.decoder = Decoder(self.content_encoder.widths, self.content_encoder.shapes,
                               cfg.channels, cfg.dim_z + cfg.dim_w)
        self.decode_calls = 0

    def _ctx(self):
        return contextlib.nullcontext() if self.training else _batch_invariant()

    @staticmethod
    def _to_torch_layout(x: torch.Tensor) -> torch.Tensor:
        # (B, t, H, W, C) -> (B, C, t, H, W)
        return x.permute(0, 4, 1, 2, 3)

    def _param_dtype(self):
        return self.decoder.project.weight.dtype

    def _check(self, x, length, channels, what):
        cfg = self.config
        if tuple(x.shape[1:]) != (length, cfg.height, cfg.width, channels):
            raise ValueError(f"{what} shape {tuple(x.shape[1:])} does not match "
                             f"{(length, cfg.height, cfg.width, channels)}")

    def encode_content(self, chunks) -> GaussianPosterior:
        """Posterior over content for a batch of chunks ``(B, c, H, W, C)``."""
        x = torch.as_tensor(chunks, dtype=self._param_dtype())
        self._check(x, self.config.c, self.config.channels, "chunk")
        with self._ctx():
            return self.content_encoder(self._to_torch_layout(x))

    def encode_motion_input(self, motion) -> GaussianPosterior:
        """Posterior over motion given precomputed flow stacks ``(B, c-1, H, W, 2)``."""
        x = torch.as_tensor(motion, dtype=self._param_dtype())
        self._check(x, self.config.motion_length, self.config.motion_channels, "motion input")
        with self._ctx():
            return self.motion_encoder(self._to_torch_layout(x))

    def encode_motion(self, chunks) -> GaussianPosterior:
        """Posterior over motion for a batch of raw chunks; flow is computed here."""
        chunks = np.asarray(chunks.detach().cpu() if torch.is_tensor(chunks) else chunks)
        return self.encode_motion_input(motion_inputs(chunks))

    def decode(self, w: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """Bernoulli logits ``(B, c, H, W, C)`` for each row of (w, z)."""
        if w.shape[-1] != self.config.dim_w or z.shape[-1] != self.config.dim_z:
            raise ValueError(f"latent dims ({w.shape[-1]}, {z.shape[-1]}) do not match "
                             f"({self.config.dim_w}, {self.config.dim_z})")
        lead = w.shape[:-1]
        latent = torch.cat([w, z], dim=-1).reshape(-1, w.shape[-1] + z.shape[-1])
        self.decode_calls += latent.shape[0]
        with self._ctx():
            out = self.decoder(latent)
        out = out.permute(0, 2, 3, 4, 1)
        return out.reshape(*lead, *out.shape[1:])


def motion_inputs(chunks: np.ndarray) -> np.ndarray:
    """Stack ``chunk_flow_stack`` over a batch of chunks ``(B, c, H, W, C)``."""
    return np.stack([chunk_flow_stack(ch) for ch in chunks]).astype(np.float32)


def encode_content(model: MTCVAE, chunk) -> GaussianPosterior:
    """Single-chunk convenience wrapper; returns 1-D mean / log_var."""
    post = model.encode_content(torch.as_tensor(np.asarray(chunk))[None])
    return GaussianPosterior(post.mean[0], post.log_var[0])


def encode_motion(model: MTCVAE, chunk) -> GaussianPosterior:
    post = model.encode_motion(np.asarray(chunk)[None])
    return GaussianPosterior(post.mean[0], post.log_var[0])


def decode(model: MTCVAE, w, z) -> torch.Tensor:
    w = torch.as_tensor(w, dtype=model._param_dtype())
    z = torch.as_tensor(z, dtype=model._param_dtype())
    return model.decode(w[None], z[None])[0]


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"MTCV"
FORMAT_VERSION = 1


def save_checkpoint(model: MTCVAE, config: ModelConfig, path) -> None:
    """Binary checkpoint: magic, version, JSON config header, then named arrays."""
    header = json.dumps(asdict(config), sort_keys=True).encode()
    state = model.state_dict()
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", FORMAT_VERSION, len(header))
    out += header
    out += struct.pack("<I", len(state))
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        if arr.dtype.kind == "f":
            arr = arr.astype("<f4")
        else:
            arr = arr.astype("<i8")
        nb = name.encode()
        dt = arr.dtype.str.encode()
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<B", len(dt)) + dt
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        payload = np.ascontiguousarray(arr).tobytes()
        out += struct.pack("<Q", len(payload)) + payload
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> Tuple[MTCVAE, ModelConfig]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, hlen = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        raw = json.loads(take(hlen))
        known = {f.name for f in fields(ModelConfig)}
        config = ModelConfig(**{k: v for k, v in raw.items() if k in known})
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config header: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (dlen,) = struct.unpack("<B", take(1))
        dtype = np.dtype(take(dlen).decode())
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        (nbytes,) = struct.unpack("<Q", take(8))
        if nbytes != int(np.prod(shape)) * dtype.itemsize:
            raise CheckpointError(f"{path}: array {name!r} payload size mismatch")
        arrays[name] = np.frombuffer(take(nbytes), dtype=dtype).reshape(shape).copy()
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    try:
        model = MTCVAE(config)
    except ValueError as exc:
        raise CheckpointError(f"{path}: invalid config: {exc}") from exc
    expected = model.state_dict()
    if set(expected) != set(arrays):
        raise CheckpointError(f"{path}: parameter names do not match the config's architecture")
    for name, ref in expected.items():
        if tuple(ref.shape) != arrays[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, "
                                  f"config implies {tuple(ref.shape)}")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    model.eval()
    return model, config
