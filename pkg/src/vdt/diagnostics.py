"""Finite-difference gradient suite and forward-latency benchmark."""
from __future__ import annotations

import time

import numpy as np

from . import numkernel as nk
from .model import BUFFERS, ModelConfig, ModelParams, forward, heads, paper_scale_config
from .objectives import LossConfig, vdt_losses

# smallest model that still has two blocks, several heads and a real patch grid
MICRO_CONFIG = ModelConfig(image_height=16, image_width=8, patch_size=4, num_blocks=2,
                           embed_dim=16, num_heads=2, num_identities=2)


def generic_point(params, seed=0):
    """Move ``params`` in place away from the symmetric initialisation.

    Zero biases, unit gains and near-zero tokens make many gradient entries
    vanish exactly, which turns relative-error checks into noise comparisons.
    """
    rng = np.random.default_rng(seed)
    for name, p in params.items():
        if name in BUFFERS:
            continue
        if name.endswith(".gain"):
            p.data[...] = 1.0 + 0.1 * rng.standard_normal(p.shape)
        elif name.endswith("bias"):
            p.data[...] = 0.1 * rng.standard_normal(p.shape)
        else:
            p.data[...] = 0.2 * rng.standard_normal(p.shape)
    return params


def micro_batch(config, num_ids=2, per_id=4, seed=0):
    """Random images with ``per_id`` samples per identity, views alternating."""
    rng = np.random.default_rng(seed)
    shape = (num_ids * per_id, config.image_height, config.image_width, config.in_channels)
    images = rng.uniform(-1.0, 1.0, shape)
    ids = np.repeat(np.arange(num_ids), per_id)
    views = np.tile(np.arange(per_id) % 2, num_ids)
    return images, ids, views


def full_loss_gradcheck(config=MICRO_CONFIG, seed=0, h=1e-5, lam=1.0, num_ids=2, per_id=4,
                        max_entries_per_param=None):
    """Max relative error of the analytic total-loss gradient in float64."""
    with nk.default_dtype(np.float64):
        params = generic_point(ModelParams.init(config.replace(num_identities=num_ids), seed,
                                                np.float64), seed + 1)
        images, ids, views = micro_batch(config, num_ids, per_id, seed + 2)
        loss_config = LossConfig(lam=lam)

        def total():
            meta, view = forward(images, params)
            id_logits, view_logits = heads(meta, view, params, training=True)
            return vdt_losses(id_logits, view_logits, meta, view, ids, views, loss_config).total

        return nk.grad_check(total, params.learnable(), h=h,
                             max_entries_per_param=max_entries_per_param, seed=seed)


def bench_forward(config=None, repeats=7, warmup=1, seed=0, dtype=np.float32):
    """Median single-image forward time for the VDT and baseline variants of ``config``.

    Runs are interleaved so that drift in machine load hits both variants alike.
    Returns ``{"vdt": s, "baseline_vit": s, "ratio": vdt / baseline}``.
    """
    from threadpoolctl import threadpool_limits

    config = config or paper_scale_config()
    variants = {mode: ModelParams.init(config.replace(mode=mode), seed, dtype)
                for mode in ("vdt", "baseline_vit")}
    rng = np.random.default_rng(seed)
    image = rng.uniform(-1, 1, (1, config.image_height, config.image_width,
                                config.in_channels)).astype(dtype)
    times = {mode: [] for mode in variants}
    with threadpool_limits(limits=1), nk.no_grad(), nk.default_dtype(dtype):
        for i in range(warmup + repeats):
            for mode, params in variants.items():
                t0 = time.perf_counter()
                forward(image, params)
                elapsed = time.perf_counter() - t0
                if i >= warmup:
                    times[mode].append(elapsed)
    out = {mode: float(np.median(t)) for mode, t in times.items()}
    out["ratio"] = out["vdt"] / out["baseline_vit"]
    return out
