"""Canonical codes for small labeled graphs.

Colour refinement splits vertices into equitable cells; remaining ties are
broken by individualizing each vertex of the first non-singleton cell and
recursing.  The smallest leaf code wins.  Automorphisms found at leaves
(two leaves with equal codes) prune children that lie in the same orbit
under the stabilizer of the current prefix, which keeps symmetric graphs
such as tert-butyl clusters tractable.
"""

from __future__ import annotations

from typing import Iterable, Sequence

from .chem import MolecularGraph
from .errors import DisconnectedSubgraph

Edge = tuple[int, int, str]


def _refine(colors: list[int], nbrs: list[list[tuple[str, int]]]) -> list[int]:
    n_cells = len(set(colors))
    while True:
        keys = [
            (colors[v], tuple(sorted((lab, colors[u]) for lab, u in nbrs[v])))
            for v in range(len(colors))
        ]
        rank = {k: i for i, k in enumerate(sorted(set(keys)))}
        new = [rank[k] for k in keys]
        if len(rank) == n_cells:
            return new
        colors, n_cells = new, len(rank)


def _individualize(colors: list[int], v: int) -> list[int]:
    keys = [(c, 0 if w == v else 1) for w, c in enumerate(colors)]
    rank = {k: i for i, k in enumerate(sorted(set(keys)))}
    return [rank[k] for k in keys]


class _UnionFind:
    def __init__(self, items):
        self.parent = {x: x for x in items}

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def canonical_order(labels: Sequence[str], edges: Iterable[Edge]) -> tuple[tuple, list[int]]:
    """Return ``(code_tuple, order)`` where ``order[k]`` is the vertex placed at position k."""
    n = len(labels)
    edges = list(edges)
    nbrs: list[list[tuple[str, int]]] = [[] for _ in range(n)]
    for u, v, lab in edges:
        nbrs[u].append((lab, v))
        nbrs[v].append((lab, u))
    label_rank = {lab: i for i, lab in enumerate(sorted(set(labels)))}
    start = [label_rank[lab] for lab in labels]

    best: list = [None, None]
    leaves: dict[tuple, list[int]] = {}
    generators: list[list[int]] = []

    def leaf_code(colors):
        order = sorted(range(n), key=colors.__getitem__)
        pos = [0] * n
        for k, v in enumerate(order):
            pos[v] = k
        es = sorted((min(pos[u], pos[v]), max(pos[u], pos[v]), lab) for u, v, lab in edges)
        return (tuple(labels[v] for v in order), tuple(es)), order

    def search(colors, prefix):
        colors = _refine(colors, nbrs)
        if len(set(colors)) == n:
            code, order = leaf_code(colors)
            seen = leaves.get(code)
            if seen is not None:
                perm = [0] * n
                for a, b in zip(seen, order):
                    perm[a] = b
                generators.append(perm)
            else:
                leaves[code] = order
            if best[0] is None or code < best[0]:
                best[0], best[1] = code, order
            return
        target = min(c for c in set(colors) if colors.count(c) > 1)
        cell = [v for v in range(n) if colors[v] == target]
        explored: list[int] = []
        for v in cell:
            if explored:
                stab = [g for g in generators if all(g[p] == p for p in prefix)]
                if stab:
                    uf = _UnionFind(cell)
                    for g in stab:
                        for w in cell:
                            if g[w] in uf.parent:
                                uf.union(w, g[w])
                    if any(uf.find(v) == uf.find(e) for e in explored):
                        continue
            explored.append(v)
            search(_individualize(colors, v), prefix + [v])

    if n:
        search(start, [])
    else:
        best[0], best[1] = ((), ()), []
    return best[0], best[1]


def render_code(code: tuple) -> str:
    labels, edges = code
    if not labels:
        return ""
    return ".".join(labels) + "|" + ",".join(f"{i}{lab}{j}" for i, j, lab in edges)


def canonical_code(labels: Sequence[str], edges: Iterable[Edge]) -> str:
    """Canonical string of a vertex- and edge-labeled simple graph."""
    labels = list(labels)
    if len(labels) == 1:
        return labels[0] + "|"
    code, _ = canonical_order(labels, edges)
    return render_code(code)


def unlabeled_code(num_nodes: int, edges: Iterable[tuple[int, int]]) -> str:
    """Canonical string of an unlabeled simple graph."""
    return canonical_code(["*"] * num_nodes, [(u, v, "-") for u, v in edges])


def induced_subgraph(mol: MolecularGraph, atom_set: Iterable[int]) -> tuple[list[str], list[Edge]]:
    atoms = sorted(atom_set)
    local = {a: i for i, a in enumerate(atoms)}
    labels = [mol.atoms[a].label for a in atoms]
    edges = []
    for a in atoms:
        for b in mol.adjacency[a]:
            if a < b and b in local:
                edges.append((local[a], local[b], mol.bond_between(a, b).order.symbol))
    return labels, edges


def serialize_subgraph(mol: MolecularGraph, atom_set: Iterable[int]) -> str:
    """Canonical code of the subgraph of ``mol`` induced by ``atom_set``."""
    atom_set = set(atom_set)
    if not atom_set or not mol.is_connected(atom_set):
        raise DisconnectedSubgraph(f"atom set {sorted(atom_set)} does not induce a connected subgraph")
    labels, edges = induced_subgraph(mol, atom_set)
    return canonical_code(labels, edges)


def code_num_atoms(code: str) -> int:
    head = code.split("|", 1)[0]
    return len(head.split(".")) if head else 0


def code_labels(code: str) -> list[str]:
    head = code.split("|", 1)[0]
    return head.split(".") if head else []
