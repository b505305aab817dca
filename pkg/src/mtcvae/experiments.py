"""Desk-scale end-to-end run on the procedural shapes dataset."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import metrics
from .datakit import CONTENT, MOTION, Dataset, ShapesConfig, generate_moving_shapes, split_dataset
from .flow import dataset_flows
from .inference import reconstruct_video
from .model import MTCVAE, ModelConfig
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

DESK_SHAPES = ShapesConfig(n_videos=2000, T=16, H=32, W=32, C=1)


@dataclass
class DeskResult:
    history: List[Dict[str, float]]
    ssim: float
    ssim_untrained: float
    fvae: float
    mig: float
    sap: float
    content_accuracy: float
    motion_accuracy: float
    content_chance: float
    motion_chance: float
    train_seconds: float
    decodes_per_step: Dict[str, int] = field(default_factory=dict)


_DATA_CACHE: Dict[tuple, tuple] = {}


def desk_data(shapes: ShapesConfig = DESK_SHAPES, seed: int = 0):
    """Dataset, its flow cache and a soft split; memoised per (config, seed)."""
    key = (repr(shapes), seed)
    if key not in _DATA_CACHE:
        ds = generate_moving_shapes(shapes, seed)
        flows = dataset_flows(ds.frames)
        train_ids, test_ids = split_dataset(ds, "soft", 0, seed)
        _DATA_CACHE[key] = (ds, flows, train_ids, test_ids)
    return _DATA_CACHE[key]


def heldout_ssim(model: MTCVAE, ds: Dataset, ids, c: int) -> float:
    scores = [metrics.ssim_video(ds.float_frames(ds.index_of(v)),
                                 reconstruct_video(model, ds.float_frames(ds.index_of(v)), c))
              for v in ids]
    return float(np.mean(scores))


def evaluate(model: MTCVAE, ds: Dataset, test_ids, c: int, seed: int = 0,
             fvae_cfg: metrics.FactorVAEConfig = metrics.FactorVAEConfig()) -> Dict[str, float]:
    table = metrics.extract_codes(model, ds, test_ids, c).two_factor()
    fvae = metrics.factor_vae_score(metrics.TableSampler(table), 2, fvae_cfg, seed,
                                    global_codes=table.codes)
    content = table.labels[:, 0]
    motion = table.labels[:, 1]
    return {
        "fvae": fvae,
        "mig": metrics.mig(table.codes, table.labels),
        "sap": metrics.sap(table.codes, table.labels, seed),
        "content_accuracy": metrics.downstream_linear_accuracy(table.space(CONTENT), content, seed),
        "motion_accuracy": metrics.downstream_linear_accuracy(table.space(MOTION), motion, seed),
        "content_chance": 1.0 / len(np.unique(content)),
        "motion_chance": 1.0 / len(np.unique(motion)),
    }


def measure_decodes(model: MTCVAE, mc: ModelConfig, ds: Dataset, ids, flows=None,
                    seed: int = 0) -> Dict[str, float]:
    """Decoder calls per window in one batch objective, counted on the model, split by term."""
    import torch
    from .losses import NoiseBank
    from .trainer import batch_objective
    from .datakit import sample_chunk_window
    rng = np.random.default_rng(seed)
    batch = []
    for v in ids:
        i = ds.index_of(v)
        fl = flows[i] if flows is not None and mc.c >= 2 else None
        batch.append(sample_chunk_window(ds.float_frames(i), mc.c, mc.O, rng, fl))
    r = mc.partial_r if mc.partial_r is not None and mc.partial_r < mc.O else None
    idx = sorted(rng.choice(mc.O, size=r, replace=False).tolist()) if r else None
    noise = NoiseBank.zeros(len(batch), mc.O, mc.dim_z, mc.dim_w)
    counts = {}
    with torch.no_grad():
        model.decode_calls = 0
        batch_objective(model, batch, noise, mc.beta, 0.0, idx)
        counts["L_r"] = model.decode_calls / len(batch)
        model.decode_calls = 0
        batch_objective(model, batch, noise, mc.beta, max(mc.lam, 1.0), idx)
        counts["L_b"] = model.decode_calls / len(batch) - counts["L_r"]
    return counts


def run_desk(seed: int = 0, lam: float = 1.0, O: int = 2, partial_r: Optional[int] = None,
             epochs: int = 15, base_filters: int = 8, c: int = 4, batch_size: int = 32,
             shapes: ShapesConfig = DESK_SHAPES, data_seed: int = 0,
             n_ssim: Optional[int] = None, out_dir=None) -> DeskResult:
    ds, flows, train_ids, test_ids = desk_data(shapes, data_seed)
    mc = ModelConfig(c=c, O=O, dim_z=8, dim_w=4, beta=1.0, lam=lam, base_filters=base_filters,
                     height=shapes.H, width=shapes.W, channels=shapes.C, partial_r=partial_r)
    tc = TrainConfig(epochs=epochs, batch_size=batch_size, seed=seed, partial_r=partial_r)
    ssim_ids = test_ids if n_ssim is None else test_ids[:n_ssim]

    import torch
    torch.manual_seed(seed)
    untrained = MTCVAE(mc)
    untrained.eval()
    base_ssim = heldout_ssim(untrained, ds, ssim_ids, c)

    t0 = time.time()
    model, history = train(ds, train_ids, mc, tc, out_dir=out_dir, flows=flows)
    seconds = time.time() - t0
    scores = evaluate(model, ds, test_ids, c, seed)
    result = DeskResult(
        history=[b.as_dict() for b in history],
        ssim=heldout_ssim(model, ds, ssim_ids, c),
        ssim_untrained=base_ssim,
        train_seconds=seconds,
        decodes_per_step=measure_decodes(model, mc, ds, train_ids[:4], flows, seed),
        **scores,
    )
    log.info("desk run seed=%d lam=%g O=%d r=%s: %s", seed, lam, O, partial_r,
             {k: v for k, v in asdict(result).items() if k != "history"})
    return result
