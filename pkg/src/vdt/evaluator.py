"""Retrieval evaluation: distances, protocol masks, CMC / mAP / mINP."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, InputError
from .toydata import AERIAL, GROUND, Sample, write_manifest

PROTOCOLS = ("ALL", "AA", "GG", "AG_bidirectional", "A_to_G", "G_to_A")
# short names accepted on the command line
PROTOCOL_ALIASES = {"ALL": "ALL", "AA": "AA", "GG": "GG", "AG": "AG_bidirectional",
                    "A2G": "A_to_G", "G2A": "G_to_A"}
EMB_MAGIC = b"EMB1"


def resolve_protocol(name):
    if name in PROTOCOLS:
        return name
    try:
        return PROTOCOL_ALIASES[name]
    except KeyError:
        raise InputError(f"unknown protocol {name!r}") from None


@dataclass
class EvalReport:
    protocol: str
    rank1: float
    rank5: float
    rank10: float
    mAP: float
    mINP: float
    num_queries: int
    num_gallery: int
    num_skipped_queries: int = 0
    per_query_ap: list = field(default_factory=list)
    per_query_inp: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def distance_matrix(query_feats, gallery_feats, metric="euclidean"):
    q = np.asarray(query_feats, dtype=np.float64)
    g = np.asarray(gallery_feats, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise InputError(f"feature dimension mismatch: {q.shape} vs {g.shape}")
    if metric == "cosine":
        qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
        return 1.0 - qn @ gn.T
    if metric != "euclidean":
        raise InputError(f"unknown metric {metric!r}")
    # explicit differences rather than the |q|^2 + |g|^2 - 2qg expansion, which cancels badly;
    # chunked over queries so memory stays bounded for wide features
    out = np.empty((q.shape[0], g.shape[0]))
    step = max(1, 2 ** 24 // max(1, g.shape[0] * g.shape[1]))
    for start in range(0, q.shape[0], step):
        diff = q[start:start + step, None, :] - g[None, :, :]
        out[start:start + step] = np.sqrt((diff * diff).sum(axis=-1))
    return out


def query_allowed(query_view, protocol):
    """Whether a query of this view takes part in the protocol at all."""
    if protocol in ("AA", "A_to_G"):
        return query_view == AERIAL
    if protocol in ("GG", "G_to_A"):
        return query_view == GROUND
    return True


def gallery_view_allowed(query_view, gallery_view, protocol):
    if not query_allowed(query_view, protocol):
        return False
    if protocol == "ALL":
        return True
    if protocol in ("AA", "GG"):
        return gallery_view == query_view
    # A_to_G, G_to_A and the bidirectional protocol all retrieve across views
    return gallery_view != query_view


def valid_gallery_mask(query, gallery, protocol):
    """Gallery entries a query may be ranked against.

    Same-identity entries from the query's own camera are always excluded.
    """
    protocol = resolve_protocol(protocol)
    mask = np.zeros(len(gallery), dtype=bool)
    for j, g in enumerate(gallery):
        if g.person_id == query.person_id and g.camera_id == query.camera_id:
            continue
        mask[j] = gallery_view_allowed(query.view, g.view, protocol)
    return mask


def _mask_matrix(q_ids, q_cams, q_views, g_ids, g_cams, g_views, protocol):
    same_id = q_ids[:, None] == g_ids[None, :]
    same_cam = q_cams[:, None] == g_cams[None, :]
    qa = q_views[:, None] == AERIAL
    ga = g_views[None, :] == AERIAL
    if protocol == "ALL":
        view_ok = np.ones_like(same_id)
    elif protocol == "AA":
        view_ok = qa & ga
    elif protocol == "GG":
        view_ok = ~qa & ~ga
    elif protocol == "A_to_G":
        view_ok = qa & ~ga
    elif protocol == "G_to_A":
        view_ok = ~qa & ga
    else:
        view_ok = qa != ga
    return view_ok & ~(same_id & same_cam), same_id


def query_metrics(dist_row, positive, valid):
    """(first-hit rank, AP, INP) for one query; ranks are 1-based.

    Valid gallery entries are sorted by distance, ties by gallery index.
    Returns None when the query has no valid positive.
    """
    idx = np.flatnonzero(valid)
    order = idx[np.lexsort((idx, dist_row[idx]))]
    hits = positive[order]
    n_pos = int(hits.sum())
    if n_pos == 0:
        return None
    ranks = np.flatnonzero(hits) + 1
    ap = float(np.mean(np.arange(1, n_pos + 1) / ranks))
    inp = n_pos / float(ranks[-1])
    return int(ranks[0]), ap, inp


def evaluate(query_samples, gallery_samples, query_feats, gallery_feats, protocol="ALL",
             metric="euclidean"):
    """Rank-k, mAP and mINP of retrieving ``gallery`` entries for each query."""
    protocol = resolve_protocol(protocol)
    if len(query_samples) != len(query_feats) or len(gallery_samples) != len(gallery_feats):
        raise InputError("sample and feature counts disagree")
    arr = lambda samples, attr: np.array([getattr(s, attr) for s in samples], dtype=np.int64)
    q_ids, q_cams, q_views = (arr(query_samples, a) for a in ("person_id", "camera_id", "view"))
    g_ids, g_cams, g_views = (arr(gallery_samples, a) for a in ("person_id", "camera_id", "view"))
    dist = distance_matrix(query_feats, gallery_feats, metric)
    valid, same_id = _mask_matrix(q_ids, q_cams, q_views, g_ids, g_cams, g_views, protocol)

    first_hits, aps, inps = [], [], []
    skipped = 0
    for i in range(len(query_samples)):
        if not query_allowed(q_views[i], protocol):
            continue
        result = query_metrics(dist[i], same_id[i] & valid[i], valid[i])
        if result is None:
            skipped += 1
            continue
        first_hits.append(result[0])
        aps.append(result[1])
        inps.append(result[2])
    if not aps:
        raise ContractError(f"protocol {protocol}: no query has a valid positive in the gallery")
    first_hits = np.array(first_hits)
    gallery_used = int(valid[[query_allowed(v, protocol) for v in q_views]].any(axis=0).sum())
    return EvalReport(
        protocol=protocol,
        rank1=float(np.mean(first_hits <= 1)),
        rank5=float(np.mean(first_hits <= 5)),
        rank10=float(np.mean(first_hits <= 10)),
        mAP=float(np.mean(aps)),
        mINP=float(np.mean(inps)),
        num_queries=len(aps),
        num_gallery=gallery_used,
        num_skipped_queries=skipped,
        per_query_ap=aps,
        per_query_inp=inps,
    )


def evaluate_all(query_samples, gallery_samples, query_feats, gallery_feats,
                 protocols=PROTOCOLS, metric="euclidean"):
    return {p: evaluate(query_samples, gallery_samples, query_feats, gallery_feats, p, metric)
            for p in map(resolve_protocol, protocols)}


def write_reports(path, reports):
    if isinstance(reports, EvalReport):
        payload = reports.to_dict()
    else:
        payload = {name: r.to_dict() for name, r in reports.items()}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# -- embedding blocks -----------------------------------------------------------------

def save_embeddings(path, feats, samples=None):
    """EMB1 block: magic, uint32 count, uint32 dim, little-endian float64 rows.

    When ``samples`` are given a manifest sidecar ``<path>.tsv`` is written too.
    """
    feats = np.ascontiguousarray(feats, dtype="<f8")
    if feats.ndim != 2:
        raise InputError(f"embeddings must be 2-D, got shape {feats.shape}")
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<II", *feats.shape))
        fh.write(feats.tobytes())
    if samples is not None:
        if len(samples) != len(feats):
            raise InputError("sidecar sample count differs from embedding count")
        write_manifest(str(path) + ".tsv", samples)


def load_embeddings(path):
    raw = Path(path).read_bytes()
    if raw[:4] != EMB_MAGIC:
        raise InputError(f"{path}: bad embedding magic {raw[:4]!r}")
    if len(raw) < 12:
        raise InputError(f"{path}: truncated embedding header")
    count, dim = struct.unpack_from("<II", raw, 4)
    if len(raw) != 12 + 8 * count * dim:
        raise InputError(f"{path}: expected {count}x{dim} values, file size {len(raw)}")
    return np.frombuffer(raw, dtype="<f8", offset=12).reshape(count, dim).copy()


def load_sidecar(path):
    lines = Path(str(path) + ".tsv").read_text().splitlines()[1:]
    out = []
    for line in lines:
        rel, pid, cam, view = line.split("\t")
        out.append(Sample(rel, int(pid), int(cam), int(view)))
    return out
