"""Independent reference implementations shared by unit and acceptance tests."""
import itertools
import math

import numpy as np


def iqp_bruteforce(m, lam_bar):
    """Plain-Python enumeration of max v'Mv - lam'v with the (objective, count, lexicographic) tie-break."""
    n = len(m)
    rows = [[float(x) for x in r] for r in m]
    lam = [float(x) for x in lam_bar]
    best = None
    for v in itertools.product((0, 1), repeat=n):
        sel = [i for i in range(n) if v[i]]
        val = math.fsum([rows[i][j] for i in sel for j in sel] + [-lam[i] for i in sel])
        key = (val, len(sel), v)
        if best is None or key > best:
            best = key
    return np.array(best[2], dtype=np.int8), best[0]


def random_iqp(rng, n, dyadic=False):
    """Symmetric instance; dyadic entries make exact ties common."""
    if dyadic:
        a = rng.integers(-4, 5, size=(n, n)) / 4.0
        lam = rng.integers(0, 5, size=n) / 4.0
    else:
        a = rng.normal(size=(n, n))
        lam = rng.uniform(0, 2, size=n)
    return (a + a.T) / 2, lam


def cmc_map_bruteforce(dist, q_labels, g_labels, max_rank):
    """Loop oracle: stable sort per query, CMC by first hit, AP as mean precision at hits."""
    cmc = [0] * max_rank
    aps = []
    valid = 0
    for q in range(len(q_labels)):
        order = sorted(range(len(g_labels)), key=lambda j: (dist[q][j], j))
        hits = [g_labels[j] == q_labels[q] for j in order]
        if not any(hits):
            continue
        valid += 1
        first = hits.index(True)
        for r in range(first, max_rank):
            cmc[r] += 1
        found, precs = 0, []
        for k, h in enumerate(hits):
            if h:
                found += 1
                precs.append(found / (k + 1))
        aps.append(math.fsum(precs) / len(precs))
    return [c / valid for c in cmc], math.fsum(aps) / valid, aps
