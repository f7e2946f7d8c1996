"""Identity / view classification, batch-hard triplet and orthogonality losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .errors import ConfigError, ContractError, InputError

TRIPLET_MODES = ("soft", "hard_margin")
ORTHO_EPS = 1e-12


@dataclass
class LossConfig:
    lam: float = 1.0
    triplet_mode: str = "soft"
    margin: float = 0.3

    def __post_init__(self):
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.triplet_mode not in TRIPLET_MODES:
            raise ConfigError(f"unknown triplet mode {self.triplet_mode!r}")


@dataclass
class LossBreakdown:
    """Scalar loss tensors; ``total`` is the only one meant for ``backward``."""

    id_ce: nk.Tensor
    id_triplet: nk.Tensor
    view_ce: nk.Tensor
    orthogonal: nk.Tensor
    total: nk.Tensor

    FIELDS = ("id_ce", "id_triplet", "view_ce", "orthogonal", "total")

    def as_floats(self):
        return {f: getattr(self, f).item() for f in self.FIELDS}


def _cross_entropy(logits, labels, num_classes, what):
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] != num_classes:
        raise InputError(f"{what}: expected (B,{num_classes}) logits, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise InputError(f"{what}: {labels.shape[0] if labels.ndim else 0} labels for "
                         f"{logits.shape[0]} rows")
    if labels.size and (not np.issubdtype(labels.dtype, np.integer)
                        or labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InputError(f"{what}: labels must be integers in [0, {logits.shape[1]})")
    logp = nk.log_softmax_rows(logits)
    picked = logp[np.arange(logits.shape[0]), labels]
    return -picked.mean()


def identity_ce(logits, labels):
    """Mean negative log-likelihood of the identity labels."""
    return _cross_entropy(logits, labels, logits.shape[-1], "identity_ce")


def view_ce(view_logits, views):
    """Binary view cross-entropy; views are 0 (ground) or 1 (aerial)."""
    return _cross_entropy(view_logits, views, 2, "view_ce")


def pairwise_sq_dists(x):
    """All squared Euclidean distances between rows, by explicit differences."""
    diff = x.data[:, None, :] - x.data[None, :, :]
    out = (diff * diff).sum(axis=-1)

    def backward(g):
        gs = g + g.T
        return (2.0 * (gs[:, :, None] * diff).sum(axis=1),)

    return nk._make(out, (x,), backward, "pairwise_sq_dists")


def _check_pk(ids):
    ids = np.asarray(ids)
    uniq, counts = np.unique(ids, return_counts=True)
    if len(uniq) < 2:
        raise ContractError("batch-hard triplet needs at least two identities in the batch")
    if (counts < 2).any():
        lonely = uniq[counts < 2].tolist()
        raise ContractError(f"identities {lonely} have a single sample in the batch")
    return ids


def hard_mining_indices(dists, ids):
    """Hardest positive (max distance) and negative (min distance) per anchor.

    Ties go to the lowest sample index.
    """
    ids = np.asarray(ids)
    same = ids[:, None] == ids[None, :]
    np.fill_diagonal(same, False)
    pos = np.where(same, dists, -np.inf).argmax(axis=1)
    diff_id = ids[:, None] != ids[None, :]
    neg = np.where(diff_id, dists, np.inf).argmin(axis=1)
    return pos, neg


def batch_hard_triplet(features, ids, config=None):
    config = config or LossConfig()
    ids = _check_pk(ids)
    if features.ndim != 2 or features.shape[0] != len(ids):
        raise InputError(f"triplet: features {features.shape} vs {len(ids)} ids")
    dists = pairwise_sq_dists(features)
    pos, neg = hard_mining_indices(dists.data, ids)
    rows = np.arange(len(ids))
    gap = dists[rows, pos] - dists[rows, neg]
    if config.triplet_mode == "soft":
        return nk.softplus(gap).mean()
    return nk.relu(gap + config.margin).mean()


def orthogonal_loss(meta, view):
    """Mean |cos| between paired rows of ``meta`` and ``view``; lies in [0, 1]."""
    if meta.shape != view.shape or meta.ndim != 2:
        raise InputError(f"orthogonal_loss: shapes {meta.shape} and {view.shape}")
    dot = (meta * view).sum(axis=1)
    norms = nk.sqrt((meta * meta).sum(axis=1)) * nk.sqrt((view * view).sum(axis=1))
    # a floor rather than an additive guard keeps the value exactly scale invariant
    cos = nk.abs_(dot) / nk.maximum(norms, ORTHO_EPS)
    # rounding can push |cos| of parallel rows a hair above one
    return nk.minimum(cos, 1.0).mean()


def total_loss(id_ce, id_triplet, view_ce_value, orthogonal, config=None,
               orthogonal_grad=True):
    """Combine the four terms as id_ce + id_triplet + lambda * (view_ce + orthogonal).

    With ``orthogonal_grad=False`` the orthogonal term keeps its value in the
    total but contributes no gradient.
    """
    config = config or LossConfig()
    terms = [nk.tensor(x) if not isinstance(x, nk.Tensor) else x
             for x in (id_ce, id_triplet, view_ce_value, orthogonal)]
    id_ce, id_triplet, view_ce_value, orthogonal = terms
    ortho_term = orthogonal if orthogonal_grad else orthogonal.detach()
    total = id_ce + id_triplet + config.lam * (view_ce_value + ortho_term)
    return LossBreakdown(id_ce, id_triplet, view_ce_value, orthogonal, total)


def vdt_losses(id_logits, view_logits, meta, view, ids, views, config=None,
               orthogonal_grad=True):
    """All loss terms for one batch of model outputs.

    In baseline mode (no view token) the view terms are reported as zero.
    """
    config = config or LossConfig()
    l_id = identity_ce(id_logits, ids)
    l_tri = batch_hard_triplet(meta, ids, config)
    if view is None:
        zero = nk.tensor(0.0, dtype=meta.dtype)
        l_view, l_orth = zero, zero
    else:
        l_view = view_ce(view_logits, views)
        l_orth = orthogonal_loss(meta, view)
    return total_loss(l_id, l_tri, l_view, l_orth, config, orthogonal_grad)
