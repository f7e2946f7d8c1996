"""Independent reference implementations shared by the unit tests and the acceptance gate."""
import math

import numpy as np

from vdt.toydata import AERIAL, GROUND, Sample


def brute_force(queries, gallery, qf, gf, protocol):
    """Per-query (first hit, AP, INP) by direct enumeration of the ranked list."""
    want = {
        "ALL": lambda q, g: True,
        "AA": lambda q, g: q == AERIAL and g == AERIAL,
        "GG": lambda q, g: q == GROUND and g == GROUND,
        "A_to_G": lambda q, g: q == AERIAL and g == GROUND,
        "G_to_A": lambda q, g: q == GROUND and g == AERIAL,
        "AG_bidirectional": lambda q, g: q != g,
    }[protocol]
    out = []
    for qi, q in enumerate(queries):
        if protocol in ("AA", "A_to_G") and q.view != AERIAL:
            continue
        if protocol in ("GG", "G_to_A") and q.view != GROUND:
            continue
        cands = []
        for gi, g in enumerate(gallery):
            if g.person_id == q.person_id and g.camera_id == q.camera_id:
                continue
            if not want(q.view, g.view):
                continue
            dist = math.sqrt(sum((a - b) ** 2 for a, b in zip(qf[qi], gf[gi])))
            cands.append((dist, gi, g.person_id == q.person_id))
        cands.sort()
        hit_ranks = [r + 1 for r, c in enumerate(cands) if c[2]]
        if not hit_ranks:
            out.append(None)
            continue
        precisions = [(k + 1) / r for k, r in enumerate(hit_ranks)]
        out.append((hit_ranks[0], sum(precisions) / len(precisions),
                    len(hit_ranks) / hit_ranks[-1]))
    return out


def random_instance(rng):
    def samples(n):
        out = []
        for i in range(n):
            cam = int(rng.integers(0, 4))
            out.append(Sample(f"{i}.ppm", int(rng.integers(0, 3)), cam, GROUND if cam < 2 else AERIAL))
        return out

    nq, ng = rng.integers(1, 11, size=2)
    q, g = samples(nq), samples(ng)
    # coarse grid values make exact distance ties common
    qf = rng.integers(0, 3, (nq, 2)).astype(float)
    gf = rng.integers(0, 3, (ng, 2)).astype(float)
    return q, g, qf, gf
