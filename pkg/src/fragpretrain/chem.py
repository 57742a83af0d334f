"""SMILES subset parser and the heavy-atom molecular graph it produces.

Supported: organic-subset atoms (upper and aromatic lower case), bracket
atoms with hydrogen count and formal charge, branches, ring closures
(single digit and ``%nn``), and the bond symbols ``- = # :``.
Stereochemistry, isotopes, wildcards, atom classes and multi-component
inputs raise :class:`UnsupportedFeature`.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import (
    EmptyInput,
    SmilesError,
    UnbalancedParenthesis,
    UnknownElement,
    UnmatchedRingClosure,
    UnsupportedFeature,
)

log = logging.getLogger(__name__)

ELEMENTS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni "
    "Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe "
    "Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au "
    "Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf "
    "Db Sg Bh Hs Mt Ds Rg Cn Nh Fl Mc Lv Ts Og"
).split()
SYMBOL_TO_Z = {sym: z for z, sym in enumerate(ELEMENTS, start=1)}
NUM_ELEMENTS = len(ELEMENTS)

ORGANIC_SUBSET = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
AROMATIC_ORGANIC = ("b", "c", "n", "o", "p", "s")
AROMATIC_BRACKET = ("se", "as", "te", "b", "c", "n", "o", "p", "s")

MAX_CHARGE = 4


class BondOrder(enum.IntEnum):
    SINGLE = 0
    DOUBLE = 1
    TRIPLE = 2
    AROMATIC = 3

    @property
    def symbol(self) -> str:
        return "-=#:"[self.value]


_BOND_SYMBOLS = {"-": BondOrder.SINGLE, "=": BondOrder.DOUBLE,
                 "#": BondOrder.TRIPLE, ":": BondOrder.AROMATIC}


@dataclass(frozen=True)
class Atom:
    element: int
    formal_charge: int = 0
    aromatic: bool = False
    explicit_h: int = 0

    def __post_init__(self):
        if not 1 <= self.element <= NUM_ELEMENTS:
            raise UnknownElement(f"element index {self.element} out of range")
        if abs(self.formal_charge) > MAX_CHARGE:
            raise SmilesError(f"formal charge {self.formal_charge} outside [-4, 4]")
        if self.explicit_h < 0:
            raise SmilesError("negative hydrogen count")

    @property
    def symbol(self) -> str:
        return ELEMENTS[self.element - 1]

    @property
    def label(self) -> str:
        """Atom label used for vocabulary identity: element, charge, aromaticity."""
        sym = self.symbol.lower() if self.aromatic else self.symbol
        if self.formal_charge == 0:
            return sym
        sign = "+" if self.formal_charge > 0 else "-"
        mag = abs(self.formal_charge)
        return f"[{sym}{sign}{mag if mag > 1 else ''}]"


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: BondOrder
    in_ring: bool = False

    @property
    def endpoints(self) -> tuple[int, int]:
        return (self.begin, self.end) if self.begin < self.end else (self.end, self.begin)


@dataclass(frozen=True)
class MolecularGraph:
    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    source_text: str = ""
    adjacency: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)
    _bond_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        adj: list[list[int]] = [[] for _ in self.atoms]
        index = {}
        for i, b in enumerate(self.bonds):
            u, v = b.endpoints
            if u == v:
                raise SmilesError(f"atom {u} bonded to itself")
            if (u, v) in index:
                raise SmilesError(f"duplicate bond between atoms {u} and {v}")
            if not (0 <= u < len(self.atoms) and 0 <= v < len(self.atoms)):
                raise SmilesError(f"bond ({u}, {v}) references a missing atom")
            index[(u, v)] = i
            adj[u].append(v)
            adj[v].append(u)
        object.__setattr__(self, "adjacency", tuple(tuple(sorted(a)) for a in adj))
        object.__setattr__(self, "_bond_index", index)

    @property
    def num_atoms(self) -> int:
        return len(self.atoms)

    def bond_between(self, u: int, v: int) -> Bond | None:
        i = self._bond_index.get((u, v) if u < v else (v, u))
        return None if i is None else self.bonds[i]

    def atom_labels(self) -> list[str]:
        return [a.label for a in self.atoms]

    def ring_atoms(self) -> frozenset[int]:
        out = set()
        for b in self.bonds:
            if b.in_ring:
                out.update(b.endpoints)
        return frozenset(out)

    def is_connected(self, atom_set: Iterable[int] | None = None) -> bool:
        nodes = set(range(self.num_atoms)) if atom_set is None else set(atom_set)
        if not nodes:
            return True
        start = min(nodes)
        seen = {start}
        stack = [start]
        while stack:
            v = stack.pop()
            for u in self.adjacency[v]:
                if u in nodes and u not in seen:
                    seen.add(u)
                    stack.append(u)
        return len(seen) == len(nodes)


def find_bridges(num_nodes: int, adjacency: Sequence[Sequence[int]]) -> set[tuple[int, int]]:
    """Bridges of an undirected simple graph as ``(min, max)`` pairs (iterative Tarjan)."""
    disc = [-1] * num_nodes
    low = [0] * num_nodes
    bridges = set()
    timer = 0
    for root in range(num_nodes):
        if disc[root] != -1:
            continue
        disc[root] = low[root] = timer
        timer += 1
        stack = [(root, -1, iter(adjacency[root]))]
        while stack:
            v, parent, it = stack[-1]
            advanced = False
            for u in it:
                if u == parent:
                    continue
                if disc[u] == -1:
                    disc[u] = low[u] = timer
                    timer += 1
                    stack.append((u, v, iter(adjacency[u])))
                    advanced = True
                    break
                low[v] = min(low[v], disc[u])
            if advanced:
                continue
            stack.pop()
            if parent != -1:
                low[parent] = min(low[parent], low[v])
                if low[v] > disc[parent]:
                    bridges.add((min(v, parent), max(v, parent)))
    return bridges


def _with_ring_flags(atoms: list[Atom], bonds: list[tuple[int, int, BondOrder]], text: str) -> MolecularGraph:
    adj: list[list[int]] = [[] for _ in atoms]
    for u, v, _ in bonds:
        adj[u].append(v)
        adj[v].append(u)
    bridges = find_bridges(len(atoms), adj)
    out = []
    for u, v, order in bonds:
        key = (min(u, v), max(u, v))
        out.append(Bond(u, v, order, in_ring=key not in bridges))
    return MolecularGraph(tuple(atoms), tuple(out), text)


def make_graph(atoms: Sequence[Atom], bonds: Iterable[tuple[int, int, BondOrder]], source_text: str = "") -> MolecularGraph:
    """Build a graph from atoms and ``(u, v, order)`` triples, computing ring flags."""
    return _with_ring_flags(list(atoms), list(bonds), source_text)


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.atoms: list[Atom] = []
        self.bonds: list[tuple[int, int, BondOrder]] = []
        self.pairs: set[tuple[int, int]] = set()
        # ring number -> (atom index, bond order given at opening or None, text position)
        self.open_rings: dict[int, tuple[int, BondOrder | None, int]] = {}

    def error(self, cls, msg):
        return cls(f"{msg} at position {self.pos} in {self.text!r}")

    def parse(self) -> MolecularGraph:
        text = self.text
        prev: int | None = None
        pending: BondOrder | None = None
        branch_stack: list[int] = []
        while self.pos < len(text):
            ch = text[self.pos]
            if ch == "(":
                if prev is None or pending is not None:
                    raise self.error(SmilesError, "branch must follow an atom")
                branch_stack.append(prev)
                self.pos += 1
            elif ch == ")":
                if not branch_stack:
                    raise self.error(UnbalancedParenthesis, "unmatched ')'")
                if pending is not None:
                    raise self.error(SmilesError, "dangling bond before ')'")
                prev = branch_stack.pop()
                self.pos += 1
            elif ch in _BOND_SYMBOLS:
                if prev is None or pending is not None:
                    raise self.error(SmilesError, "bond symbol without a preceding atom")
                pending = _BOND_SYMBOLS[ch]
                self.pos += 1
            elif ch in "/\\":
                raise self.error(UnsupportedFeature, "directional bonds (stereochemistry) are not supported")
            elif ch == "$":
                raise self.error(UnsupportedFeature, "quadruple bonds are not supported")
            elif ch == ".":
                raise self.error(UnsupportedFeature, "multi-component SMILES ('.') are not supported")
            elif ch == "*":
                raise self.error(UnsupportedFeature, "wildcard atoms are not supported")
            elif ch.isdigit() or ch == "%":
                if prev is None:
                    raise self.error(SmilesError, "ring closure without a preceding atom")
                self._ring_closure(prev, pending)
                pending = None
            else:
                idx = self._atom()
                if prev is not None:
                    self._add_bond(prev, idx, pending)
                elif pending is not None:
                    raise self.error(SmilesError, "bond symbol without a preceding atom")
                pending = None
                prev = idx
        if branch_stack:
            raise UnbalancedParenthesis(f"unclosed '(' in {text!r}")
        if pending is not None:
            raise SmilesError(f"dangling bond at end of {text!r}")
        if self.open_rings:
            nums = ", ".join(str(n) for n in sorted(self.open_rings))
            raise UnmatchedRingClosure(f"unclosed ring bond(s) {nums} in {text!r}")
        return _with_ring_flags(self.atoms, self.bonds, text)

    def _add_bond(self, u: int, v: int, order: BondOrder | None):
        if u == v:
            raise self.error(UnmatchedRingClosure, "ring closure onto the same atom")
        key = (min(u, v), max(u, v))
        if key in self.pairs:
            raise self.error(SmilesError, f"duplicate bond between atoms {u} and {v}")
        if order is None:
            both = self.atoms[u].aromatic and self.atoms[v].aromatic
            order = BondOrder.AROMATIC if both else BondOrder.SINGLE
        self.pairs.add(key)
        self.bonds.append((u, v, order))

    def _ring_closure(self, atom: int, order: BondOrder | None):
        text = self.text
        if text[self.pos] == "%":
            digits = text[self.pos + 1:self.pos + 3]
            if len(digits) != 2 or not digits.isdigit():
                raise self.error(SmilesError, "'%' must be followed by two digits")
            num = int(digits)
            self.pos += 3
        else:
            num = int(text[self.pos])
            self.pos += 1
        if num in self.open_rings:
            other, other_order, _ = self.open_rings.pop(num)
            if order is not None and other_order is not None and order != other_order:
                raise self.error(SmilesError, f"conflicting bond orders on ring closure {num}")
            self._add_bond(other, atom, order if order is not None else other_order)
        else:
            self.open_rings[num] = (atom, order, self.pos)

    def _atom(self) -> int:
        text = self.text
        ch = text[self.pos]
        if ch == "[":
            atom = self._bracket_atom()
        else:
            for sym in ORGANIC_SUBSET:
                if text.startswith(sym, self.pos):
                    atom = Atom(SYMBOL_TO_Z[sym])
                    self.pos += len(sym)
                    break
            else:
                if ch in AROMATIC_ORGANIC:
                    atom = Atom(SYMBOL_TO_Z[ch.upper()], aromatic=True)
                    self.pos += 1
                elif ch.isalpha():
                    raise self.error(UnknownElement, f"unknown element or element outside organic subset {ch!r}")
                else:
                    raise self.error(SmilesError, f"unexpected character {ch!r}")
        self.atoms.append(atom)
        return len(self.atoms) - 1

    def _bracket_atom(self) -> Atom:
        text = self.text
        end = text.find("]", self.pos)
        if end == -1:
            raise self.error(SmilesError, "unclosed bracket atom")
        body = text[self.pos + 1:end]
        self.pos += 1
        if not body:
            raise self.error(SmilesError, "empty bracket atom")
        i = 0
        if body[0].isdigit():
            raise self.error(UnsupportedFeature, "isotopes are not supported")
        if body[0] == "*":
            raise self.error(UnsupportedFeature, "wildcard atoms are not supported")
        aromatic = False
        for sym in AROMATIC_BRACKET:
            if body.startswith(sym):
                element, aromatic, i = SYMBOL_TO_Z[sym.capitalize()], True, len(sym)
                break
        else:
            if body[0].isupper():
                two = body[:2]
                if len(two) == 2 and two[1].islower() and two in SYMBOL_TO_Z:
                    element, i = SYMBOL_TO_Z[two], 2
                elif body[0] in SYMBOL_TO_Z:
                    element, i = SYMBOL_TO_Z[body[0]], 1
                else:
                    raise self.error(UnknownElement, f"unknown element in [{body}]")
            else:
                raise self.error(UnknownElement, f"unknown element in [{body}]")
        rest = body[i:]
        if "@" in rest:
            raise self.error(UnsupportedFeature, "chirality markers are not supported")
        h = 0
        if rest.startswith("H"):
            rest = rest[1:]
            digits = ""
            while rest and rest[0].isdigit():
                digits, rest = digits + rest[0], rest[1:]
            h = int(digits) if digits else 1
        charge = 0
        if rest and rest[0] in "+-":
            sign = 1 if rest[0] == "+" else -1
            if rest[1:].isdigit():
                charge = sign * int(rest[1:])
                rest = ""
            else:
                n = len(rest) - len(rest.lstrip(rest[0]))
                charge = sign * n
                rest = rest[n:]
        if rest.startswith(":"):
            raise self.error(UnsupportedFeature, "atom classes are not supported")
        if rest:
            raise self.error(SmilesError, f"unparsed bracket atom content {rest!r}")
        self.pos = end + 1
        if abs(charge) > MAX_CHARGE:
            raise self.error(SmilesError, f"formal charge {charge} outside [-4, 4]")
        return Atom(element, charge, aromatic, h)


def parse_smiles(text: str) -> MolecularGraph:
    """Parse a SMILES string into a heavy-atom :class:`MolecularGraph`."""
    text = text.strip()
    if not text:
        raise EmptyInput("empty SMILES string")
    return _Parser(text).parse()


@dataclass
class CorpusRecord:
    mol_id: str
    mol: MolecularGraph
    line_no: int


@dataclass
class CorpusIssue:
    line_no: int
    text: str
    error: str


def iter_corpus_lines(lines: Iterable[str]) -> Iterator[tuple[int, str, str | None]]:
    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        smiles, _, rest = line.partition("\t")
        mol_id = rest.strip() or None
        yield line_no, smiles.strip(), mol_id


def read_corpus(lines: Iterable[str], skip_errors: bool = True) -> tuple[list[CorpusRecord], list[CorpusIssue]]:
    """Parse ``SMILES[<TAB>id]`` records; ``#`` lines and blank lines are ignored.

    Molecules without an id get their line number as id. With
    ``skip_errors=False`` the first malformed line is re-raised with its
    line number prepended.
    """
    records, issues = [], []
    for line_no, smiles, mol_id in iter_corpus_lines(lines):
        try:
            mol = parse_smiles(smiles)
        except SmilesError as exc:
            if not skip_errors:
                raise type(exc)(f"line {line_no}: {exc}") from exc
            issues.append(CorpusIssue(line_no, smiles, str(exc)))
            log.warning("line %d: %s", line_no, exc)
            continue
        records.append(CorpusRecord(mol_id or str(line_no), mol, line_no))
    return records, issues


def load_corpus(path: str | Path, skip_errors: bool = True) -> tuple[list[CorpusRecord], list[CorpusIssue]]:
    with open(path, encoding="utf-8") as fh:
        return read_corpus(fh, skip_errors=skip_errors)
