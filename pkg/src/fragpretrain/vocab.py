"""Principal-subgraph vocabulary mining.

Every molecule carries a partition of its atoms into connected pieces,
initially singletons.  Each iteration counts the codes of all unions of
two bonded pieces, admits the most frequent code (ties: smallest code) and
merges its non-overlapping occurrences in every molecule.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .canon import code_num_atoms, serialize_subgraph
from .chem import MolecularGraph, parse_smiles
from .errors import (
    EmptyCorpus,
    NoCandidates,
    SmilesError,
    TargetBelowAtomCount,
    VocabularyFormatError,
)

log = logging.getLogger(__name__)

VOCAB_MAGIC = "#fragvocab v1"
VOCAB_COLUMNS = ("rank", "code", "occurrence_count", "num_atoms", "origin")


@dataclass(frozen=True)
class FragmentPattern:
    code: str
    num_atoms: int
    occurrence_count: int
    rank: int
    origin: str = "mined"


@dataclass
class Vocabulary:
    patterns: list[FragmentPattern] = field(default_factory=list)
    target_size: int = 0
    completed_atoms: list[str] = field(default_factory=list)
    stopped_early: bool = False

    def __post_init__(self):
        self._index = {p.code: p.rank for p in self.patterns}

    def __len__(self) -> int:
        return len(self.patterns)

    def __contains__(self, code: str) -> bool:
        return code in self._index

    def rank_of(self, code: str) -> int | None:
        return self._index.get(code)

    def append(self, code: str, count: int, origin: str = "mined") -> FragmentPattern:
        if code in self._index:
            raise ValueError(f"pattern {code!r} already in vocabulary")
        p = FragmentPattern(code, code_num_atoms(code), count, len(self.patterns), origin)
        self.patterns.append(p)
        self._index[code] = p.rank
        return p

    def prefix(self, size: int) -> "Vocabulary":
        """Vocabulary truncated to its first ``size`` mined patterns, plus completions."""
        mined = [p for p in self.patterns if p.origin == "mined"][:size]
        out = Vocabulary(target_size=size)
        for p in mined:
            out.append(p.code, p.occurrence_count)
        for p in self.patterns:
            if p.origin == "completed" and p.code not in out:
                out.append(p.code, 0, origin="completed")
                out.completed_atoms.append(p.code)
        return out

    def mined_patterns(self) -> list[FragmentPattern]:
        return [p for p in self.patterns if p.origin == "mined" and p.num_atoms > 1]


class MoleculeState:
    """Current partition of one molecule plus codes of its bonded piece pairs."""

    def __init__(self, mol: MolecularGraph):
        self.mol = mol
        self.membership = list(range(mol.num_atoms))
        self.pieces: dict[int, frozenset[int]] = {i: frozenset([i]) for i in range(mol.num_atoms)}
        self.pair_codes: dict[tuple[int, int], str] = {}
        self._codes_by_union: dict[frozenset[int], str] = {}

    def adjacent_pairs(self) -> list[tuple[int, int]]:
        pairs = set()
        m = self.membership
        for b in self.mol.bonds:
            pa, pb = m[b.begin], m[b.end]
            if pa != pb:
                pairs.add((pa, pb) if pa < pb else (pb, pa))
        return sorted(pairs)

    def refresh_codes(self) -> Counter:
        """Recompute the pair-code table, reusing codes of unchanged unions."""
        cache = self._codes_by_union
        pair_codes, by_union = {}, {}
        for a, b in self.adjacent_pairs():
            union = self.pieces[a] | self.pieces[b]
            code = cache.get(union)
            if code is None:
                code = serialize_subgraph(self.mol, union)
            pair_codes[(a, b)] = code
            by_union[union] = code
        self.pair_codes = pair_codes
        self._codes_by_union = by_union
        return Counter(pair_codes.values())

    def merge_occurrences(self, code: str) -> list[int]:
        """Greedily merge non-overlapping piece pairs whose union has ``code``.

        Returns the ids of the merged pieces (the minimum atom of each).
        """
        occ = [p for p, c in self.pair_codes.items() if c == code]
        if not occ:
            return []
        occ.sort(key=lambda p: sorted(self.pieces[p[0]] | self.pieces[p[1]]))
        used: set[int] = set()
        merged = []
        for a, b in occ:
            if a in used or b in used:
                continue
            used.update((a, b))
            union = self.pieces.pop(a) | self.pieces.pop(b)
            pid = min(union)
            self.pieces[pid] = union
            for atom in union:
                self.membership[atom] = pid
            merged.append(pid)
        return merged

    def partition(self) -> list[frozenset[int]]:
        return [self.pieces[k] for k in sorted(self.pieces)]


@dataclass
class MiningState:
    molecules: list[MoleculeState]
    counter: Counter = field(default_factory=Counter)


def init_vocabulary(corpus: Sequence[MolecularGraph]) -> tuple[Vocabulary, MiningState]:
    if not corpus:
        raise EmptyCorpus("cannot mine a vocabulary from an empty corpus")
    counts: Counter = Counter()
    for mol in corpus:
        counts.update(a.label + "|" for a in mol.atoms)
    vocab = Vocabulary()
    for code in sorted(counts):
        vocab.append(code, counts[code])
    state = MiningState([MoleculeState(mol) for mol in corpus])
    return vocab, state


def merge_step(state: MiningState) -> Counter:
    """Count merged codes of every bonded piece pair across the corpus."""
    total: Counter = Counter()
    for ms in state.molecules:
        total.update(ms.refresh_codes())
    state.counter = total
    return total


def select_winner(counter: Counter, exclude: Vocabulary | None = None) -> tuple[str, int]:
    """Highest count wins, ties go to the smallest code; admitted codes never re-enter."""
    items = [kv for kv in counter.items() if kv[1] > 0 and (exclude is None or kv[0] not in exclude)]
    if not items:
        raise NoCandidates("no mergeable fragment pairs remain")
    return min(items, key=lambda kv: (-kv[1], kv[0]))


def update_step(vocab: Vocabulary, state: MiningState, counter: Counter | None = None) -> FragmentPattern:
    """Admit the most frequent candidate and merge its occurrences everywhere.

    ``state.counter`` is kept up to date incrementally so the next
    iteration does not have to recount unchanged molecules.
    """
    counter = state.counter if counter is None else counter
    code, count = select_winner(counter, exclude=vocab)
    pattern = vocab.append(code, count)
    for ms in state.molecules:
        if code not in ms.pair_codes.values():
            continue
        before = Counter(ms.pair_codes.values())
        ms.merge_occurrences(code)
        after = ms.refresh_codes()
        counter.subtract(before)
        counter.update(after)
    for k in [k for k, v in counter.items() if v <= 0]:
        del counter[k]
    state.counter = counter
    return pattern


def extract_vocabulary(corpus: Sequence[MolecularGraph], target_size: int) -> Vocabulary:
    vocab, state = init_vocabulary(corpus)
    if target_size < len(vocab):
        raise TargetBelowAtomCount(
            f"target size {target_size} is below the {len(vocab)} distinct atoms in the corpus")
    vocab.target_size = target_size
    if len(vocab) == target_size:
        return vocab
    merge_step(state)
    while len(vocab) < target_size:
        try:
            p = update_step(vocab, state)
        except NoCandidates:
            log.warning("mining stopped early at %d patterns: every molecule is a single fragment", len(vocab))
            vocab.stopped_early = True
            break
        log.debug("rank %d: %s (count %d)", p.rank, p.code, p.occurrence_count)
    return vocab


def _element_code(element: str) -> str:
    text = element.strip()
    try:
        mol = parse_smiles(text)
    except SmilesError:
        mol = parse_smiles(f"[{text}]")
    if mol.num_atoms != 1:
        raise ValueError(f"{element!r} is not a single atom")
    return mol.atoms[0].label + "|"


def complete_with_atoms(vocab: Vocabulary, extra_elements: Iterable[str]) -> Vocabulary:
    """Append a zero-count singleton pattern for each element not yet covered."""
    codes = sorted({_element_code(e) for e in extra_elements})
    for code in codes:
        if code in vocab:
            continue
        vocab.append(code, 0, origin="completed")
        vocab.completed_atoms.append(code)
    return vocab


def format_vocabulary(vocab: Vocabulary, config: dict[str, str] | None = None) -> str:
    lines = [f"{VOCAB_MAGIC} target={vocab.target_size}"]
    for key, value in (config or {}).items():
        lines.append(f"#config {key}={value}")
    lines.append("\t".join(VOCAB_COLUMNS))
    for p in vocab.patterns:
        lines.append(f"{p.rank}\t{p.code}\t{p.occurrence_count}\t{p.num_atoms}\t{p.origin}")
    return "\n".join(lines) + "\n"


def write_vocabulary(vocab: Vocabulary, path: str | Path, config: dict[str, str] | None = None) -> None:
    Path(path).write_text(format_vocabulary(vocab, config), encoding="utf-8")


def read_vocabulary(path: str | Path) -> Vocabulary:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(VOCAB_MAGIC):
        raise VocabularyFormatError(f"{path}: missing '{VOCAB_MAGIC}' header")
    try:
        target = int(lines[0].split("target=", 1)[1])
    except (IndexError, ValueError) as exc:
        raise VocabularyFormatError(f"{path}: malformed header {lines[0]!r}") from exc
    vocab = Vocabulary(target_size=target)
    for n, line in enumerate(lines[1:], start=2):
        if not line or line.startswith("#") or line.startswith("rank\t"):
            continue
        cols = line.split("\t")
        if len(cols) != len(VOCAB_COLUMNS):
            raise VocabularyFormatError(f"{path}:{n}: expected {len(VOCAB_COLUMNS)} columns")
        rank, code, count, _, origin = cols
        if int(rank) != len(vocab):
            raise VocabularyFormatError(f"{path}:{n}: ranks must be contiguous")
        vocab.append(code, int(count), origin)
        if origin == "completed":
            vocab.completed_atoms.append(code)
    return vocab
