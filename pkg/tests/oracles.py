"""Brute-force reference implementations used only by the tests.

Nothing here imports the package's own closure or graph code.
"""
from __future__ import annotations

import itertools
import random
from typing import Iterable


def leq(a, b) -> bool:
    """flows-to written from scratch over (readers, writers) pairs."""
    return set(b.readers) <= set(a.readers) and set(b.writers) <= set(a.writers)


class BruteLattice:
    """Least upper / greatest lower bounds found by searching every label.

    The order is precomputed as bitmasks so that a 4-principal universe
    (81 labels, 6561 pairs) stays fast.
    """

    def __init__(self, labels):
        self.labels = list(labels)
        n = len(self.labels)
        self.up = [0] * n
        self.down = [0] * n
        for i, a in enumerate(self.labels):
            for j, b in enumerate(self.labels):
                if leq(a, b):
                    self.up[i] |= 1 << j
                    self.down[j] |= 1 << i
        self.index = {l: i for i, l in enumerate(self.labels)}

    def _extreme(self, common: int, cone) -> object:
        found = [c for c in range(len(self.labels))
                 if common >> c & 1 and common & ~cone[c] == 0]
        assert len(found) == 1, found
        return self.labels[found[0]]

    def lub(self, a, b):
        i, j = self.index[a], self.index[b]
        return self._extreme(self.up[i] & self.up[j], self.up)

    def glb(self, a, b):
        i, j = self.index[a], self.index[b]
        return self._extreme(self.down[i] & self.down[j], self.down)


def reachable(edges: Iterable[tuple[str, str]], a: str, b: str) -> bool:
    adj: dict[str, list[str]] = {}
    for x, y in edges:
        adj.setdefault(x, []).append(y)
    seen: set[str] = set()

    def dfs(n: str) -> bool:
        for m in adj.get(n, []):
            if m == b:
                return True
            if m not in seen:
                seen.add(m)
                if dfs(m):
                    return True
        return False

    return dfs(a)


def random_dag(rng: random.Random, n: int, p: float) -> list[tuple[str, str]]:
    names = [f"e{i}" for i in range(n)]
    return [(names[i], names[j]) for i, j in itertools.combinations(range(n), 2)
            if rng.random() < p]


def txn_order_closure(direct: dict[str, set[str]]) -> set[tuple[str, str]]:
    """Transitive closure by repeated squaring until nothing changes."""
    rel = {(a, b) for a, bs in direct.items() for b in bs}
    while True:
        more = {(a, d) for a, b in rel for c, d in rel if b == c} - rel
        if not more:
            return rel
        rel |= more
