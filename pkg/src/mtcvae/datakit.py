"""Synthetic labeled video datasets: generation, storage, chunking and splits.

Frames are held as ``uint8`` arrays of shape ``(N, T, H, W, C)``; the float view
used by the model is ``frames / 255`` so that a write/read round trip through the
raw container is bit-exact.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

CONTENT = "content"
MOTION = "motion"
SPLIT_MODES = ("soft", "appearance-holdout", "motion-holdout")
N_FOLDS = 5


class ConfigurationError(ValueError):
    pass


class IngestionError(ValueError):
    pass


class WindowError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class Factor:
    name: str
    n_values: int
    tag: str  # CONTENT or MOTION


@dataclass
class FactorLabels:
    """Label values of one video, ordered like the dataset's factor schema."""

    factors: Dict[str, int]
    tags: Dict[str, str]

    def superset(self, tag: str) -> Tuple[int, ...]:
        return tuple(v for k, v in self.factors.items() if self.tags[k] == tag)


@dataclass
class VideoTensor:
    frames: np.ndarray  # T x H x W x C, float32 in [0, 1]
    id: str
    labels: Optional[FactorLabels] = None

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ValueError(f"expected T x H x W x C frames, got {self.frames.shape}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class ChunkWindow:
    chunks: np.ndarray  # O x c x H x W x C
    start: int
    video_id: str
    motion: Optional[np.ndarray] = None  # O x (c-1) x H x W x 2, filled from a flow cache

    @property
    def order(self) -> int:
        return self.chunks.shape[0]


@dataclass
class Dataset:
    frames: np.ndarray  # uint8, N x T x H x W x C
    labels: np.ndarray  # int64, N x n_factors
    schema: List[Factor]
    ids: List[str]
    seed: Optional[int] = None
    generator: Dict = field(default_factory=dict)
    splits: Dict[str, Dict[str, List[str]]] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def dims(self) -> Tuple[int, int, int, int]:
        return tuple(self.frames.shape[1:])

    @property
    def factor_names(self) -> List[str]:
        return [f.name for f in self.schema]

    @property
    def tags(self) -> List[str]:
        return [f.tag for f in self.schema]

    def index_of(self, video_id: str) -> int:
        if not hasattr(self, "_index"):
            self._index = {v: i for i, v in enumerate(self.ids)}
        return self._index[video_id]

    def float_frames(self, i: int) -> np.ndarray:
        return self.frames[i].astype(np.float32) / np.float32(255.0)

    def video(self, i: int) -> VideoTensor:
        labels = FactorLabels(
            factors={f.name: int(v) for f, v in zip(self.schema, self.labels[i])},
            tags={f.name: f.tag for f in self.schema},
        )
        return VideoTensor(self.float_frames(i), self.ids[i], labels)

    def __getitem__(self, i: int) -> VideoTensor:
        return self.video(i)

    def subset(self, ids: Sequence[str]) -> "Dataset":
        idx = np.array([self.index_of(v) for v in ids], dtype=np.int64)
        return Dataset(self.frames[idx], self.labels[idx], list(self.schema), list(ids),
                       self.seed, dict(self.generator))

    def superset_labels(self, tag: str) -> np.ndarray:
        """Relabel each video by its tuple of `tag` factors, as a dense class index."""
        cols = [i for i, f in enumerate(self.schema) if f.tag == tag]
        return aggregate_labels(self.labels, cols)


def aggregate_labels(labels: np.ndarray, cols: Sequence[int]) -> np.ndarray:
    if len(cols) == 0:
        return np.zeros(labels.shape[0], dtype=np.int64)
    _, inverse = np.unique(labels[:, list(cols)], axis=0, return_inverse=True)
    return inverse.reshape(-1).astype(np.int64)


def quantize(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(frames * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# procedural shapes

SHAPES = ("square", "circle", "triangle")


def direction_name(k: int, n: int) -> str:
    names = {0: "left-right", 90: "down-up", 180: "right-left", 270: "up-down",
             45: "diagonal-up-right", 135: "diagonal-up-left",
             225: "diagonal-down-left", 315: "diagonal-down-right"}
    deg = 360.0 * k / n
    if deg.is_integer() and int(deg) in names:
        return names[int(deg)]
    return f"angle-{deg:.1f}"


def direction_vector(k: int, n: int) -> Tuple[float, float]:
    """Unit (dx, dy) in image coordinates; y grows downwards so 'up' is -dy."""
    a = 2.0 * math.pi * k / n
    return math.cos(a), -math.sin(a)


def _reflect(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Fold unbounded coordinates into [lo, hi] as a ball bouncing off both walls."""
    span = hi - lo
    if span <= 0:
        return np.full_like(x, lo)
    y = np.mod(x - lo, 2.0 * span)
    return lo + np.where(y > span, 2.0 * span - y, y)


def bounce_trajectory(start: Tuple[float, float], velocity: Tuple[float, float], T: int,
                      lo: Tuple[float, float], hi: Tuple[float, float]) -> np.ndarray:
    t = np.arange(T, dtype=np.float64)
    xs = _reflect(start[0] + velocity[0] * t, lo[0], hi[0])
    ys = _reflect(start[1] + velocity[1] * t, lo[1], hi[1])
    return np.stack([xs, ys], axis=1)


def _shape_sdf(shape: str, px: np.ndarray, py: np.ndarray, size: float) -> np.ndarray:
    # px, py relative to the shape centre; size is the half-extent
    if shape == "square":
        return np.maximum(np.abs(px), np.abs(py)) - size
    if shape == "circle":
        return np.hypot(px, py) - size
    if shape == "triangle":
        # equilateral, pointing up, circumradius ~ size
        k = math.sqrt(3.0)
        r = size * 0.5 * k
        x = np.abs(px) - r
        y = -py + r / k
        swap = x + k * y > 0
        x2 = np.where(swap, (x - k * y) / 2.0, x)
        y2 = np.where(swap, (-k * x - y) / 2.0, y)
        x2 = x2 - np.clip(x2, -2.0 * r, 0.0)
        return -np.hypot(x2, y2) * np.sign(y2)
    raise ConfigurationError(f"unknown shape {shape!r}")


def render_shape(shape: str, size: float, intensity: float, centre: Tuple[float, float],
                 H: int, W: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    sdf = _shape_sdf(shape, xx - centre[0], yy - centre[1], size)
    return intensity * np.clip(0.5 - sdf, 0.0, 1.0)


@dataclass
class ShapesConfig:
    n_videos: int = 2000
    T: int = 16
    H: int = 32
    W: int = 32
    C: int = 1
    shapes: Tuple[str, ...] = SHAPES
    scales: Tuple[float, ...] = (4.0, 7.0)
    intensities: Tuple[float, ...] = (1.0,)
    n_directions: int = 8
    speeds: Tuple[float, ...] = (1.0, 2.0)

    def validate(self):
        if len(self.shapes) == 0:
            raise ConfigurationError("shape set is empty")
        if self.n_directions < 1 or len(self.speeds) == 0:
            raise ConfigurationError("no motion classes configured")
        for s in self.shapes:
            if s not in SHAPES:
                raise ConfigurationError(f"unknown shape {s!r}")
        if min(self.T, self.H, self.W, self.C) < 1:
            raise ConfigurationError("T, H, W, C must be positive")
        if 2 * max(self.scales) + 2 >= min(self.H, self.W):
            raise ConfigurationError("largest scale does not fit in the frame")

    def all_factors(self) -> List[Factor]:
        return [
            Factor("shape", len(self.shapes), CONTENT),
            Factor("scale", len(self.scales), CONTENT),
            Factor("intensity", len(self.intensities), CONTENT),
            Factor("direction", self.n_directions, MOTION),
            Factor("speed", len(self.speeds), MOTION),
        ]

    def schema(self) -> List[Factor]:
        # single-valued factors carry no label information
        return [f for f in self.all_factors() if f.n_values >= 2]


class ShapesGenerator:
    """Moving-shapes videos with exact ground-truth content and motion factors."""

    def __init__(self, config: ShapesConfig):
        config.validate()
        self.config = config
        self.schema = config.schema()

    def sample_factors(self, rng: np.random.Generator) -> Dict[str, int]:
        return {f.name: int(rng.integers(f.n_values)) for f in self.config.all_factors()}

    def render(self, factors: Dict[str, int], rng: np.random.Generator) -> np.ndarray:
        """Render one float video (T, H, W, C) given factor indices; start point is random."""
        cfg = self.config
        size = cfg.scales[factors["scale"]]
        margin = size + 1.0
        lo = (margin, margin)
        hi = (cfg.W - 1 - margin, cfg.H - 1 - margin)
        start = (rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1]))
        dx, dy = direction_vector(factors["direction"], cfg.n_directions)
        speed = cfg.speeds[factors["speed"]]
        traj = bounce_trajectory(start, (dx * speed, dy * speed), cfg.T, lo, hi)
        shape = cfg.shapes[factors["shape"]]
        intensity = cfg.intensities[factors["intensity"]]
        video = np.empty((cfg.T, cfg.H, cfg.W, cfg.C), dtype=np.float64)
        for t in range(cfg.T):
            video[t] = render_shape(shape, size, intensity, tuple(traj[t]), cfg.H, cfg.W)[..., None]
        return video

    def label_row(self, factors: Dict[str, int]) -> List[int]:
        return [factors[f.name] for f in self.schema]

    def generate(self, seed: int) -> Dataset:
        rng = np.random.default_rng(seed)
        cfg = self.config
        frames = np.empty((cfg.n_videos, cfg.T, cfg.H, cfg.W, cfg.C), dtype=np.uint8)
        labels = np.empty((cfg.n_videos, len(self.schema)), dtype=np.int64)
        for i in range(cfg.n_videos):
            factors = self.sample_factors(rng)
            frames[i] = quantize(self.render(factors, rng))
            labels[i] = self.label_row(factors)
        ids = [f"shapes-{i:06d}" for i in range(cfg.n_videos)]
        gen = {"kind": "moving-shapes", "config": _jsonable(asdict(cfg))}
        return Dataset(frames, labels, list(self.schema), ids, seed, gen)


def generate_moving_shapes(config: ShapesConfig, seed: int) -> Dataset:
    return ShapesGenerator(config).generate(seed)


# ---------------------------------------------------------------------------
# Moving MNIST

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def read_idx(path, expected_magic: Optional[int] = None) -> np.ndarray:
    """Read an unsigned-byte IDX file (MNIST layout) into an array."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IngestionError(f"{path}: truncated header at byte offset {len(data)}")
    magic = struct.unpack(">I", data[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise IngestionError(f"{path}: bad magic 0x{magic:08x} at byte offset 0, "
                             f"expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise IngestionError(f"{path}: unsupported IDX type 0x{magic:08x} at byte offset 0")
    ndim = magic & 0xFF
    if ndim < 1:
        raise IngestionError(f"{path}: zero dimensions in header at byte offset 3")
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IngestionError(f"{path}: truncated dimension list at byte offset {len(data)}")
    shape = struct.unpack(f">{ndim}I", data[4:header_end])
    size = int(np.prod(shape))
    if len(data) - header_end != size:
        raise IngestionError(f"{path}: payload of {len(data) - header_end} bytes at byte offset "
                             f"{header_end}, header declares {size}")
    return np.frombuffer(data, dtype=np.uint8, offset=header_end).reshape(shape)


def write_idx(path, array: np.ndarray):
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


@dataclass
class MovingMNISTConfig:
    n_videos: int = 10000
    T: int = 32
    H: int = 64
    W: int = 64
    n_directions: int = 14
    speeds: Tuple[float, ...] = (2.0,)
    threshold: float = 0.5

    def validate(self):
        if self.n_directions < 1 or len(self.speeds) == 0:
            raise ConfigurationError("no motion classes configured")

    def schema(self) -> List[Factor]:
        facs = [Factor("digit", 10, CONTENT), Factor("direction", self.n_directions, MOTION),
                Factor("speed", len(self.speeds), MOTION)]
        return [f for f in facs if f.n_values >= 2]


def generate_moving_mnist(digit_images, digit_labels, config: MovingMNISTConfig,
                          seed: int) -> Dataset:
    """One digit per video on a bouncing linear trajectory, binarized after compositing."""
    config.validate()
    images = read_idx(digit_images, IDX_IMAGES_MAGIC)
    digits = read_idx(digit_labels, IDX_LABELS_MAGIC)
    if images.ndim != 3:
        raise IngestionError(f"{digit_images}: expected 3-D image array, got {images.shape}")
    if digits.shape[0] != images.shape[0]:
        raise IngestionError("image and label counts differ")
    rng = np.random.default_rng(seed)
    cfg = config
    h, w = images.shape[1:]
    if h > cfg.H or w > cfg.W:
        raise ConfigurationError("digit images larger than frame")
    schema = cfg.schema()
    frames = np.zeros((cfg.n_videos, cfg.T, cfg.H, cfg.W, 1), dtype=np.uint8)
    labels = np.empty((cfg.n_videos, len(schema)), dtype=np.int64)
    for i in range(cfg.n_videos):
        j = int(rng.integers(images.shape[0]))
        direction = int(rng.integers(cfg.n_directions))
        speed_idx = int(rng.integers(len(cfg.speeds)))
        dx, dy = direction_vector(direction, cfg.n_directions)
        speed = cfg.speeds[speed_idx]
        hi = (cfg.W - w, cfg.H - h)
        start = (rng.uniform(0, hi[0]), rng.uniform(0, hi[1]))
        traj = bounce_trajectory(start, (dx * speed, dy * speed), cfg.T, (0.0, 0.0), hi)
        digit = images[j].astype(np.float64) / 255.0
        for t in range(cfg.T):
            x0, y0 = int(round(traj[t, 0])), int(round(traj[t, 1]))
            canvas = np.zeros((cfg.H, cfg.W))
            canvas[y0:y0 + h, x0:x0 + w] = digit
            frames[i, t, :, :, 0] = np.where(canvas >= cfg.threshold, 255, 0)
        row = {"digit": int(digits[j]), "direction": direction, "speed": speed_idx}
        labels[i] = [row[f.name] for f in schema]
    ids = [f"mmnist-{i:06d}" for i in range(cfg.n_videos)]
    gen = {"kind": "moving-mnist", "config": _jsonable(asdict(cfg))}
    return Dataset(frames, labels, schema, ids, seed, gen)


# ---------------------------------------------------------------------------
# chunking

def chunk_video(video, c: int) -> Tuple[np.ndarray, int]:
    """Split into K = ceil(T / c) chunks; the last one is padded by repeating the final frame."""
    frames = video.frames if isinstance(video, VideoTensor) else np.asarray(video)
    if c < 1:
        raise ValueError("chunk length must be >= 1")
    T = frames.shape[0]
    K = -(-T // c)
    pad = K * c - T
    if pad:
        frames = np.concatenate([frames, np.repeat(frames[-1:], pad, axis=0)], axis=0)
    return frames.reshape((K, c) + frames.shape[1:]), pad


def unchunk(chunks: np.ndarray, pad: int = 0) -> np.ndarray:
    frames = chunks.reshape((-1,) + chunks.shape[2:])
    return frames[: frames.shape[0] - pad]


def sample_chunk_window(video, c: int, O: int, rng: np.random.Generator,
                        flows: Optional[np.ndarray] = None) -> ChunkWindow:
    """Draw O consecutive chunks starting at a uniform frame in [0, T - cO].

    ``flows`` is an optional (T-1, H, W, 2) consecutive-pair flow cache for the video;
    when given, the window carries the motion-encoder input for each chunk.
    """
    if isinstance(video, VideoTensor):
        frames, vid = video.frames, video.id
    else:
        frames, vid = np.asarray(video), ""
    T = frames.shape[0]
    span = c * O
    if T < span:
        raise WindowError(f"video {vid!r} has {T} frames, window needs c*O = {span}")
    h = int(rng.integers(0, T - span + 1))
    chunks = frames[h:h + span].reshape((O, c) + frames.shape[1:]).copy()
    motion = None
    if flows is not None and c >= 2:
        motion = np.stack([flows[h + k * c: h + k * c + c - 1] for k in range(O)])
    return ChunkWindow(chunks, h, vid, motion)


# ---------------------------------------------------------------------------
# splits

def split_dataset(dataset: Dataset, mode: str, fold: int, seed: int,
                  factor: Optional[str] = None) -> Tuple[List[str], List[str]]:
    """Five-fold train/test split.

    ``soft`` splits videos 80/20.  The holdout modes partition the values of one factor
    (by default the first content or motion factor of the schema) so test videos only
    carry values never seen in training.
    """
    if mode not in SPLIT_MODES:
        raise SplitError(f"unknown split mode {mode!r}")
    if not 0 <= fold < N_FOLDS:
        raise SplitError(f"fold must be in [0, {N_FOLDS - 1}]")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    if mode == "soft":
        perm = rng.permutation(n)
        groups = np.array_split(perm, N_FOLDS)
        test_idx = np.sort(groups[fold])
    else:
        tag = CONTENT if mode == "appearance-holdout" else MOTION
        if factor is None:
            cands = [f for f in dataset.schema if f.tag == tag]
            if not cands:
                raise SplitError(f"{mode}: dataset has no {tag} factor with >= 2 values")
            factor = cands[0].name
        col = dataset.factor_names.index(factor)
        values = np.unique(dataset.labels[:, col])
        if len(values) < 2:
            raise SplitError(f"{mode}: factor {factor!r} has fewer than 2 values")
        perm = rng.permutation(values)
        groups = np.array_split(perm, min(N_FOLDS, len(values)))
        held = groups[fold % len(groups)]
        test_idx = np.flatnonzero(np.isin(dataset.labels[:, col], held))
    mask = np.zeros(n, dtype=bool)
    mask[test_idx] = True
    train = [dataset.ids[i] for i in np.flatnonzero(~mask)]
    test = [dataset.ids[i] for i in np.flatnonzero(mask)]
    return train, test


# ---------------------------------------------------------------------------
# storage

def save_dataset(dataset: Dataset, directory, name: str) -> Tuple[Path, Path]:
    """Write ``<name>.frames`` (raw uint8, video-major T,H,W,C) and ``<name>.manifest`` (JSON)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames_path = directory / f"{name}.frames"
    manifest_path = directory / f"{name}.manifest"
    per_video = int(np.prod(dataset.dims))
    with open(frames_path, "wb") as fh:
        for i in range(len(dataset)):
            fh.write(np.ascontiguousarray(dataset.frames[i]).tobytes())
    T, H, W, C = dataset.dims
    manifest = {
        "format": "mtcvae-dataset",
        "version": 1,
        "frames_file": frames_path.name,
        "dtype": "uint8",
        "dims": {"T": T, "H": H, "W": W, "C": C},
        "video_count": len(dataset),
        "factors": [asdict(f) for f in dataset.schema],
        "videos": [
            {"id": vid, "offset": i * per_video, "nbytes": per_video,
             "labels": [int(x) for x in dataset.labels[i]]}
            for i, vid in enumerate(dataset.ids)
        ],
        "splits": dataset.splits,
        "seed": dataset.seed,
        "generator": dataset.generator,
    }
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return frames_path, manifest_path


def load_dataset(manifest_path, mmap: bool = False) -> Dataset:
    manifest_path = Path(manifest_path)
    m = json.loads(manifest_path.read_text())
    if m.get("format") != "mtcvae-dataset":
        raise IngestionError(f"{manifest_path}: not a dataset manifest")
    d = m["dims"]
    shape = (m["video_count"], d["T"], d["H"], d["W"], d["C"])
    frames_path = manifest_path.parent / m["frames_file"]
    expected = int(np.prod(shape))
    actual = frames_path.stat().st_size
    if actual != expected:
        raise IngestionError(f"{frames_path}: {actual} bytes, manifest declares {expected}")
    per_video = int(np.prod(shape[1:]))
    for i, v in enumerate(m["videos"]):
        if v["offset"] != i * per_video:
            raise IngestionError(f"{manifest_path}: video {v['id']} offset {v['offset']} "
                                 "does not follow the contiguous layout")
    if mmap:
        frames = np.memmap(frames_path, dtype=np.uint8, mode="r", shape=shape)
    else:
        frames = np.fromfile(frames_path, dtype=np.uint8).reshape(shape)
    schema = [Factor(**f) for f in m["factors"]]
    labels = np.array([v["labels"] for v in m["videos"]], dtype=np.int64).reshape(len(m["videos"]), len(schema))
    ids = [v["id"] for v in m["videos"]]
    return Dataset(frames, labels, schema, ids, m.get("seed"), m.get("generator", {}),
                   m.get("splits", {}))


def save_videos(videos: Sequence[np.ndarray], directory, name: str,
                ids: Optional[Sequence[str]] = None) -> Tuple[Path, Path]:
    """Export float videos (equal shapes) to the raw dataset container without labels."""
    arr = quantize(np.stack([np.asarray(v) for v in videos]))
    ids = list(ids) if ids is not None else [f"{name}-{i:06d}" for i in range(len(arr))]
    ds = Dataset(arr, np.zeros((len(arr), 0), dtype=np.int64), [], ids)
    return save_dataset(ds, directory, name)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj
