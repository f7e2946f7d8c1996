"""Optimisation loop, learning-rate schedule, config files, sweeps and ablations."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, NonFiniteError, TrainingDivergedError
from .evaluator import PROTOCOLS, evaluate_all
from .model import ModelConfig, ModelParams, extract_features, forward, heads
from .objectives import LossBreakdown, LossConfig, vdt_losses
from .toydata import augment, pk_sample

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig", "TrainLog", "TrainResult", "cosine_lr", "train", "sgd_step",
    "sweep_lambda", "run_ablation", "evaluate_model", "load_config_file",
    "save_checkpoint", "load_checkpoint",
]

LOG_COLUMNS = ("step", "epoch", "lr") + LossBreakdown.FIELDS


@dataclass
class TrainConfig:
    epochs: int = 30
    P: int = 8
    K: int = 4
    lr_initial: float = 0.03
    lr_final: float = 1.6e-6
    momentum: float = 0.9
    lam: float = 1.0
    triplet_mode: str = "soft"
    margin: float = 0.3
    seed: int = 0
    disable_subtraction: bool = False
    disable_orthogonal: bool = False
    baseline_vit: bool = False
    dtype: str = "float32"
    init_seed: int = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr_final > self.lr_initial:
            raise ConfigError("lr_final must not exceed lr_initial")
        if self.P < 2 or self.K < 2:
            raise ConfigError("PK batches need P >= 2 and K >= 2")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        LossConfig(self.lam, self.triplet_mode, self.margin)

    def loss_config(self):
        return LossConfig(self.lam, self.triplet_mode, self.margin)

    def model_config(self, base, num_identities):
        """Apply the ablation switches to ``base``."""
        return base.replace(
            mode="baseline_vit" if self.baseline_vit else base.mode,
            disable_subtraction=self.disable_subtraction or base.disable_subtraction,
            num_identities=num_identities,
        )


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    epoch_evals: list = field(default_factory=list)

    def losses(self, key="total"):
        return np.array([r[key] for r in self.records])


@dataclass
class TrainResult:
    params: ModelParams
    config: ModelConfig
    log: TrainLog
    checkpoint_path: Path = None


def cosine_lr(step, total_steps, lr_initial=8e-3, lr_final=1.6e-6):
    if total_steps < 0 or not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_initial
    return lr_final + 0.5 * (lr_initial - lr_final) * (1.0 + math.cos(math.pi * step / total_steps))


# -- config files -------------------------------------------------------------------

_ALIASES = {"lambda": "lam", "N": "num_blocks", "d": "embed_dim"}


def _coerce(field_type, raw, key):
    kind = field_type if isinstance(field_type, str) else field_type.__name__
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text, source="<config>"):
    """``key = value`` lines into (model kwargs, train kwargs); unknown keys are errors."""
    model_fields = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    model_kw, train_kw = {}, {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key in model_fields:
            model_kw[key] = _coerce(model_fields[key], value, key)
        elif key in train_fields:
            if key == "init_seed" and value.lower() == "none":
                train_kw[key] = None
            else:
                train_kw[key] = _coerce("int" if key == "init_seed" else train_fields[key],
                                        value, key)
        else:
            raise ConfigError(f"{source}:{line_no}: unknown key {key!r}")
    return model_kw, train_kw


def load_config_file(path):
    return parse_config_text(Path(path).read_text(), str(path))


# -- optimisation ---------------------------------------------------------------------

def sgd_step(params, grads, velocity, lr, momentum):
    """In-place SGD with momentum: v <- m*v + g; p <- p - lr*v."""
    for p in params:
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        key = id(p)
        if momentum:
            v = velocity.get(key)
            v = g.copy() if v is None else momentum * v + g
            velocity[key] = v
            step = v
        else:
            step = g
        p.data -= np.asarray(lr * step, dtype=p.dtype)


def _batch_losses(images, ids, views, params, config, loss_config, orthogonal_grad, step):
    try:
        meta, view = forward(images, params, config)
    except NonFiniteError as exc:
        raise TrainingDivergedError("forward pass", step, str(exc)) from exc
    try:
        id_logits, view_logits = heads(meta, view, params, training=True)
    except NonFiniteError as exc:
        raise TrainingDivergedError("classifier heads", step, str(exc)) from exc
    try:
        losses = vdt_losses(id_logits, view_logits, meta, view, ids, views, loss_config,
                            orthogonal_grad=orthogonal_grad)
    except NonFiniteError as exc:
        raise TrainingDivergedError("loss", step, str(exc)) from exc
    for name in LossBreakdown.FIELDS:
        if not np.isfinite(getattr(losses, name).data).all():
            raise TrainingDivergedError(name, step)
    return losses


def _write_log_row(fh, record):
    fh.write("\t".join(
        str(record[c]) if c in ("step", "epoch") else repr(float(record[c])) for c in LOG_COLUMNS
    ) + "\n")
    fh.flush()


def train(model_config, train_config, dataset, out_dir=None, eval_sets=None,
          eval_every=0, protocols=("AG_bidirectional",)):
    """Optimise a model on ``dataset``; returns a :class:`TrainResult`.

    Each step draws a PK batch, augments it, runs forward/loss/backward and
    applies SGD with momentum at the cosine-decayed learning rate.  When
    ``out_dir`` is given the TSV loss log is appended there as training runs
    and the final checkpoint is written to ``out_dir/checkpoint.vdt``.
    """
    tc = train_config
    identities = dataset.identities()
    label_of = {pid: i for i, pid in enumerate(identities)}
    config = tc.model_config(model_config, len(identities))
    init_seed = tc.seed if tc.init_seed is None else tc.init_seed
    params = ModelParams.init(config, seed=init_seed, dtype=np.dtype(tc.dtype).type)
    param_list = params.learnable()
    loss_config = tc.loss_config()

    steps_per_epoch = max(1, len(identities) // tc.P)
    total_steps = tc.epochs * steps_per_epoch
    velocity = {}
    train_log = TrainLog()

    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.tsv"
        log_fh = open(log_path, "a")
        if log_path.stat().st_size == 0:
            log_fh.write("\t".join(LOG_COLUMNS) + "\n")

    started = time.perf_counter()
    try:
        with nk.default_dtype(tc.dtype):
            for step in range(total_steps):
                epoch = step // steps_per_epoch
                lr = cosine_lr(step, max(total_steps - 1, 0), tc.lr_initial, tc.lr_final)
                batch = pk_sample(dataset, tc.P, tc.K, tc.seed, step)
                batch = augment(batch, True, seed=[tc.seed, step, 1])
                labels = np.array([label_of[int(i)] for i in batch.ids])
                losses = _batch_losses(batch.images, labels, batch.views, params, config,
                                       loss_config, not tc.disable_orthogonal, step)
                grads = nk.backward(losses.total)
                sgd_step(param_list, grads, velocity, lr, tc.momentum)
                if not all(np.isfinite(p.data).all() for p in param_list):
                    raise TrainingDivergedError("parameter update", step)
                record = {"step": step, "epoch": epoch, "lr": lr, **losses.as_floats(),
                          "wall_time": time.perf_counter() - started}
                train_log.records.append(record)
                if log_fh is not None:
                    _write_log_row(log_fh, record)
                end_of_epoch = (step + 1) % steps_per_epoch == 0
                if eval_sets and eval_every and end_of_epoch and (epoch + 1) % eval_every == 0:
                    reports = evaluate_model(params, *eval_sets, protocols=protocols)
                    train_log.epoch_evals.append({"epoch": epoch, "reports": reports})
                    log.info("epoch %d: %s", epoch, {k: round(r.mAP, 4) for k, r in reports.items()})
    finally:
        if log_fh is not None:
            log_fh.close()

    checkpoint_path = None
    if out_dir is not None:
        checkpoint_path = out_dir / "checkpoint.vdt"
        save_checkpoint(params, checkpoint_path, config)
    return TrainResult(params, config, train_log, checkpoint_path)


def evaluate_model(params, query_set, gallery_set=None, protocols=PROTOCOLS, metric="euclidean"):
    """Evaluate with the meta token as retrieval feature; the gallery defaults to the query set."""
    gallery_set = gallery_set if gallery_set is not None else query_set
    q_feats = extract_features(query_set.images(), params)
    g_feats = q_feats if gallery_set is query_set else extract_features(gallery_set.images(), params)
    return evaluate_all(query_set.samples, gallery_set.samples, q_feats, g_feats,
                        protocols=protocols, metric=metric)


# -- experiment harnesses -----------------------------------------------------------------

def sweep_lambda(values, model_config, train_config, train_set, test_set, protocols=PROTOCOLS,
                 out_dir=None):
    """Train one model per distinct lambda (shared seed) and evaluate each.

    Returns a list of ``(lambda, {protocol: EvalReport})`` rows in input order.
    """
    unique = []
    for v in values:
        v = float(v)
        if v in unique:
            warnings.warn(f"duplicate lambda {v} dropped from sweep", stacklevel=2)
            continue
        unique.append(v)
    if len(unique) < 2:
        raise ContractError("a lambda sweep needs at least two distinct values")
    rows = []
    for lam in unique:
        tc = dataclasses.replace(train_config, lam=lam)
        run_dir = None if out_dir is None else Path(out_dir) / f"lambda_{lam:g}"
        result = train(model_config, tc, train_set, out_dir=run_dir)
        rows.append((lam, evaluate_model(result.params, test_set, protocols=protocols)))
        log.info("lambda=%g done", lam)
    return rows


def format_sweep_table(rows):
    lines = ["lambda\tprotocol\trank1\trank5\trank10\tmAP\tmINP"]
    for lam, reports in rows:
        for name, r in reports.items():
            lines.append(f"{lam:g}\t{name}\t{r.rank1:.4f}\t{r.rank5:.4f}\t{r.rank10:.4f}"
                         f"\t{r.mAP:.4f}\t{r.mINP:.4f}")
    return "\n".join(lines) + "\n"


ABLATION_VARIANTS = {
    "full": {},
    "no_orthogonal": {"disable_orthogonal": True},
    "no_subtraction": {"disable_subtraction": True},
    "no_both": {"disable_orthogonal": True, "disable_subtraction": True},
    "baseline_vit": {"baseline_vit": True},
}


def run_ablation(model_config, train_config, train_set, test_set, seeds,
                 variants=("full", "no_orthogonal", "no_subtraction", "baseline_vit"),
                 protocol="AG_bidirectional"):
    """``{variant: [mAP per seed]}`` on ``protocol`` for the requested ablations."""
    out = {v: [] for v in variants}
    for seed in seeds:
        for v in variants:
            tc = dataclasses.replace(train_config, seed=seed, **ABLATION_VARIANTS[v])
            result = train(model_config, tc, train_set)
            report = evaluate_model(result.params, test_set, protocols=(protocol,))
            out[v].append(next(iter(report.values())).mAP)
            log.info("seed %d %s: mAP %.4f", seed, v, out[v][-1])
    return out
