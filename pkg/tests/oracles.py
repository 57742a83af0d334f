"""Brute-force oracles that share no code with the package under test.

Isomorphism is decided by networkx (VF2 with label matching) instead of
canonical codes; connected subgraphs are enumerated exhaustively.
"""

from __future__ import annotations

import itertools
import re

import networkx as nx
from networkx.algorithms.isomorphism import categorical_edge_match, categorical_node_match

_node_match = categorical_node_match("label", None)
_edge_match = categorical_edge_match("label", None)


def mol_to_nx(mol, atoms=None) -> nx.Graph:
    atoms = range(mol.num_atoms) if atoms is None else atoms
    keep = set(atoms)
    g = nx.Graph()
    for a in keep:
        g.add_node(a, label=mol.atoms[a].label)
    for b in mol.bonds:
        if b.begin in keep and b.end in keep:
            g.add_edge(b.begin, b.end, label=b.order.symbol)
    return g


def code_to_nx(code: str) -> nx.Graph:
    """Decode a ``labels|edges`` string, e.g. ``C.C.O|0-1,1-2``."""
    labels, _, edges = code.partition("|")
    g = nx.Graph()
    for i, lab in enumerate(labels.split(".")):
        g.add_node(i, label=lab)
    for tok in filter(None, edges.split(",")):
        m = re.fullmatch(r"(\d+)([-=#:])(\d+)", tok)
        g.add_edge(int(m.group(1)), int(m.group(3)), label=m.group(2))
    return g


def isomorphic(g: nx.Graph, h: nx.Graph) -> bool:
    return nx.is_isomorphic(g, h, node_match=_node_match, edge_match=_edge_match)


def group_isomorphic(graphs):
    """Partition graphs into isomorphism classes; returns lists of indices."""
    reps: list[tuple[nx.Graph, list[int]]] = []
    for i, g in enumerate(graphs):
        for rep, members in reps:
            if isomorphic(rep, g):
                members.append(i)
                break
        else:
            reps.append((g, [i]))
    return [m for _, m in reps]


def connected_atom_sets(mol):
    """Every connected induced atom subset of size >= 2 (exponential, small molecules only)."""
    n = mol.num_atoms
    adj = {i: set() for i in range(n)}
    for b in mol.bonds:
        adj[b.begin].add(b.end)
        adj[b.end].add(b.begin)
    for size in range(2, n + 1):
        for subset in itertools.combinations(range(n), size):
            s = set(subset)
            seen, stack = {subset[0]}, [subset[0]]
            while stack:
                v = stack.pop()
                for u in adj[v] & s:
                    if u not in seen:
                        seen.add(u)
                        stack.append(u)
            if len(seen) == size:
                yield frozenset(subset)


class MiningOracle:
    """Replays principal-subgraph mining by exhaustive enumeration.

    At each step the candidate occurrences are all connected atom sets that
    are the union of two bonded pieces of the current partition; they are
    grouped by networkx isomorphism and counted.
    """

    def __init__(self, mols):
        self.mols = mols
        self.parts = [[frozenset([a]) for a in range(m.num_atoms)] for m in mols]
        self.subsets = [list(connected_atom_sets(m)) for m in mols]

    def _pieces_of(self, k, atom_set):
        return [p for p in self.parts[k] if p & atom_set]

    def _is_pair_union(self, k, atom_set) -> bool:
        pieces = self._pieces_of(k, atom_set)
        if len(pieces) != 2 or not all(p <= atom_set for p in pieces):
            return False
        a, b = pieces
        return any((x.begin in a and x.end in b) or (x.begin in b and x.end in a) for x in self.mols[k].bonds)

    def candidates(self):
        occ = [(k, s) for k in range(len(self.mols)) for s in self.subsets[k] if self._is_pair_union(k, s)]
        graphs = [mol_to_nx(self.mols[k], s) for k, s in occ]
        classes = group_isomorphic(graphs)
        return [(graphs[c[0]], [occ[i] for i in c]) for c in classes]

    def step(self, admitted_code: str):
        """Return (count of the class matching ``admitted_code``, max class count) and merge it."""
        target = code_to_nx(admitted_code)
        cands = self.candidates()
        best = max((len(o) for _, o in cands), default=0)
        match = [o for g, o in cands if isomorphic(g, target)]
        count = len(match[0]) if match else 0
        for k in range(len(self.mols)):
            mine = sorted((s for kk, s in (match[0] if match else []) if kk == k), key=sorted)
            used: set[int] = set()
            for s in mine:
                if s & used:
                    continue
                used |= s
                pieces = self._pieces_of(k, s)
                self.parts[k] = [p for p in self.parts[k] if p not in pieces] + [s]
        return count, best


def fragment_graph_edges(mol, membership) -> set[tuple[int, int]]:
    """Edge (i, j) iff some atom pair across pieces i and j is bonded, checked over all atom pairs."""
    bonded = {(b.begin, b.end) for b in mol.bonds} | {(b.end, b.begin) for b in mol.bonds}
    out = set()
    for u in range(mol.num_atoms):
        for v in range(mol.num_atoms):
            if (u, v) in bonded and membership[u] != membership[v]:
                i, j = sorted((membership[u], membership[v]))
                out.add((i, j))
    return out


def bridges_by_removal(n, edges) -> set[tuple[int, int]]:
    """An edge is a bridge iff deleting it raises the number of connected components."""
    g = nx.Graph()
    g.add_nodes_from(range(n))
    g.add_edges_from(edges)
    base = nx.number_connected_components(g)
    out = set()
    for u, v in edges:
        h = g.copy()
        h.remove_edge(u, v)
        if nx.number_connected_components(h) > base:
            out.add((min(u, v), max(u, v)))
    return out


def unlabeled_class_count(edge_lists) -> int:
    graphs = []
    for n, edges in edge_lists:
        g = nx.Graph()
        g.add_nodes_from(range(n), label="*")
        g.add_edges_from(edges, label="-")
        graphs.append(g)
    return len(group_isomorphic(graphs))
