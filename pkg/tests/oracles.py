"""Slow, obviously-correct reference implementations used only by the tests."""

from itertools import combinations

import numpy as np


def set_partitions(items):
    """Every partition of ``items`` as a list of blocks (Bell-number many)."""
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        yield [[first]] + part
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1 :]


def as_assignment(blocks):
    return {p: str(i) for i, block in enumerate(blocks) for p in block}


def _links(blocks):
    return {frozenset(pair) for block in blocks for pair in combinations(block, 2)}


def pairwise_oracle(pred_blocks, true_blocks):
    pred, true = _links(pred_blocks), _links(true_blocks)
    both = len(pred & true)

    def ratio(den, other):
        if not den:
            return 1.0 if not other else 0.0
        return both / len(den)

    return ratio(pred, true), ratio(true, pred)


def _augment(blocks, singles_anywhere):
    """Give each pedestrian that is a singleton on either side a fake partner.

    The partner joins the pedestrian's block where the pedestrian is alone,
    and stands alone otherwise.
    """
    out = [list(b) for b in blocks]
    for p in singles_anywhere:
        fake = ("fake", p)
        home = next(b for b in out if p in b)
        if len(home) == 1:
            home.append(fake)
        else:
            out.append([fake])
    return out


def _components(nodes, edges):
    parent = {n: n for n in nodes}

    def find(n):
        while parent[n] != n:
            n = parent[n]
        return n

    for a, b in edges:
        parent[find(a)] = find(b)
    return len({find(n) for n in nodes})


def _mitre_recall(key_blocks, response_blocks):
    # a key block needs |G|-1 spanning links; the response supplies |G| - components of them
    response_links = _links(response_blocks)
    num = den = 0
    for block in key_blocks:
        inside = [link for link in response_links if link <= set(block)]
        num += len(block) - _components(block, [tuple(l) for l in inside])
        den += len(block) - 1
    return num / den


def mitre_oracle(pred_blocks, true_blocks):
    singles = {b[0] for b in pred_blocks if len(b) == 1} | {b[0] for b in true_blocks if len(b) == 1}
    pred = _augment(pred_blocks, sorted(singles))
    true = _augment(true_blocks, sorted(singles))
    return _mitre_recall(pred, true), _mitre_recall(true, pred)


def naive_dbscan(points, eps, min_pts):
    """O(N^2) reference: cores joined by ε-graph components, borders to the nearest core, rest noise (-1)."""
    pts = np.asarray(points, float)
    n = len(pts)
    dist = [[float(np.linalg.norm(pts[i] - pts[j])) for j in range(n)] for i in range(n)]
    core = [sum(d <= eps for d in dist[i]) >= min_pts for i in range(n)]
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    for i in range(n):
        for j in range(n):
            if core[i] and core[j] and dist[i][j] <= eps:
                parent[find(i)] = find(j)
    labels = [find(i) if core[i] else -1 for i in range(n)]
    for i in range(n):
        if not core[i]:
            reach = [j for j in range(n) if core[j] and dist[i][j] <= eps]
            if reach:
                labels[i] = labels[min(reach, key=lambda j: dist[i][j])]
    return labels


def same_clustering(a, b):
    """Equal up to renaming of cluster ids, with noise (-1) matched exactly."""
    a, b = list(a), list(b)
    if len(a) != len(b) or any((x == -1) != (y == -1) for x, y in zip(a, b)):
        return False
    fwd, back = {}, {}
    for x, y in zip(a, b):
        if x == -1:
            continue
        if fwd.setdefault(x, y) != y or back.setdefault(y, x) != x:
            return False
    return True
