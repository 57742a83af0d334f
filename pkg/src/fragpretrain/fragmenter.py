"""Fragmentation of molecules against a fixed vocabulary.

A molecule is fragmented by replaying the mined patterns in rank order:
starting from singleton pieces, every pattern merges the bonded piece
pairs whose union has its code, smallest atom index first.  For corpus
molecules this reproduces the partition reached during mining.
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .canon import unlabeled_code
from .chem import MolecularGraph
from .errors import UnknownAtomLabel, VocabularyFormatError
from .vocab import MoleculeState, Vocabulary

BACKBONE_MAGIC = "#fragbackbones v1"
OTHER = "OTHER"


@dataclass
class Fragmentation:
    pieces: list[tuple[int, frozenset[int]]]
    membership: list[int]

    def __len__(self) -> int:
        return len(self.pieces)

    @property
    def ranks(self) -> list[int]:
        return [r for r, _ in self.pieces]


@dataclass
class FragmentGraph:
    nodes: list[int]
    edges: list[tuple[int, int]]

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True)
class Backbone:
    code: str
    class_id: int | None = None


def fragment_molecule(mol: MolecularGraph, vocab: Vocabulary) -> Fragmentation:
    for i, atom in enumerate(mol.atoms):
        if atom.label + "|" not in vocab:
            raise UnknownAtomLabel(
                f"atom {i} ({atom.label}) of {mol.source_text or 'molecule'} is not in the vocabulary;"
                " complete the vocabulary with this element")
    ms = MoleculeState(mol)
    piece_codes = {i: a.label + "|" for i, a in enumerate(mol.atoms)}
    present = set(ms.refresh_codes())
    for p in vocab.patterns:
        if p.num_atoms < 2 or p.code not in present:
            continue
        for pid in ms.merge_occurrences(p.code):
            piece_codes[pid] = p.code
        present = set(ms.refresh_codes())
        if not present:
            break
    pieces = [(vocab.rank_of(piece_codes[pid]), ms.pieces[pid]) for pid in sorted(ms.pieces)]
    membership = [0] * mol.num_atoms
    for idx, (_, atoms) in enumerate(pieces):
        for a in atoms:
            membership[a] = idx
    return Fragmentation(pieces, membership)


def build_fragment_graph(mol: MolecularGraph, frag: Fragmentation) -> FragmentGraph:
    m = frag.membership
    edges = set()
    for b in mol.bonds:
        i, j = m[b.begin], m[b.end]
        if i != j:
            edges.add((i, j) if i < j else (j, i))
    return FragmentGraph(frag.ranks, sorted(edges))


def extract_backbone(fg: FragmentGraph) -> Backbone:
    return Backbone(unlabeled_code(fg.num_nodes, fg.edges))


@dataclass
class BackboneTable:
    classes: dict[str, int] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    max_nodes: int = 12
    other_count: int = 0

    @property
    def other_id(self) -> int:
        return len(self.classes)

    @property
    def num_classes(self) -> int:
        """Class count including the OTHER sentinel."""
        return len(self.classes) + 1

    def class_of(self, code: str) -> int:
        return self.classes.get(code, self.other_id)

    def classify(self, fg: FragmentGraph) -> Backbone:
        if fg.num_nodes > self.max_nodes:
            return Backbone("", self.other_id)
        code = extract_backbone(fg).code
        return Backbone(code, self.class_of(code))


def enumerate_backbones(graphs: Iterable[FragmentGraph], max_nodes: int = 12) -> BackboneTable:
    counts: Counter = Counter()
    sizes: dict[str, int] = {}
    other = 0
    for fg in graphs:
        if fg.num_nodes > max_nodes:
            other += 1
            continue
        code = extract_backbone(fg).code
        counts[code] += 1
        sizes[code] = fg.num_nodes
    ordered = sorted(counts, key=lambda c: (sizes[c], c))
    return BackboneTable({c: i for i, c in enumerate(ordered)}, dict(counts), max_nodes, other)


def format_backbone_table(table: BackboneTable, config: dict[str, str] | None = None) -> str:
    lines = [f"{BACKBONE_MAGIC} max_nodes={table.max_nodes}"]
    lines += [f"#config {k}={v}" for k, v in (config or {}).items()]
    lines.append("class_id\tcode\tcount")
    for code, cid in sorted(table.classes.items(), key=lambda kv: kv[1]):
        lines.append(f"{cid}\t{code}\t{table.counts.get(code, 0)}")
    lines.append(f"{table.other_id}\t{OTHER}\t{table.other_count}")
    return "\n".join(lines) + "\n"


def write_backbone_table(table: BackboneTable, path: str | Path, config: dict[str, str] | None = None) -> None:
    Path(path).write_text(format_backbone_table(table, config), encoding="utf-8")


def read_backbone_table(path: str | Path) -> BackboneTable:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(BACKBONE_MAGIC):
        raise VocabularyFormatError(f"{path}: missing '{BACKBONE_MAGIC}' header")
    table = BackboneTable(max_nodes=int(lines[0].split("max_nodes=", 1)[1]))
    for line in lines[1:]:
        if not line or line.startswith("#") or line.startswith("class_id\t"):
            continue
        cid, code, count = line.split("\t")
        if code == OTHER:
            table.other_count = int(count)
            continue
        if int(cid) != len(table.classes):
            raise VocabularyFormatError(f"{path}: class ids must be contiguous")
        table.classes[code] = int(cid)
        table.counts[code] = int(count)
    return table


def _fragment_one(args):
    mol, vocab = args
    frag = fragment_molecule(mol, vocab)
    return frag, build_fragment_graph(mol, frag)


def fragment_corpus(mols: Sequence[MolecularGraph], vocab: Vocabulary,
                    workers: int = 1) -> list[tuple[Fragmentation, FragmentGraph]]:
    """Fragment every molecule; ``workers > 1`` fans out over processes."""
    if workers <= 1 or len(mols) < 2 * workers:
        return [_fragment_one((m, vocab)) for m in mols]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_fragment_one, [(m, vocab) for m in mols], chunksize=64))


def fragmentation_record(mol_id: str, frag: Fragmentation, fg: FragmentGraph,
                         backbone: Backbone | None = None) -> dict:
    return {
        "id": mol_id,
        "pieces": [{"rank": r, "atoms": sorted(atoms)} for r, atoms in frag.pieces],
        "edges": [list(e) for e in fg.edges],
        "backbone": None if backbone is None else backbone.class_id,
    }


def write_fragmentation_dump(records: Iterable[dict], path: str | Path, header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_fragmentation_dump(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip() and not line.startswith("#")]


@dataclass
class StatsReport:
    """Corpus-level fragmentation statistics."""

    pattern_size_hist: dict[int, int]
    pattern_table: list[tuple[int, int, int, int]]  # rank, num_atoms, mined count, corpus usage
    graph_size_hist: dict[int, int]
    molecule_size_hist: dict[int, int]
    avg_edges_by_size: dict[int, float]
    avg_graph_size: float
    avg_num_edges: float
    num_molecules: int


def fragment_stats(mols: Sequence[MolecularGraph], vocab: Vocabulary,
                   fragmented: Sequence[tuple[Fragmentation, FragmentGraph]] | None = None) -> StatsReport:
    if fragmented is None:
        fragmented = fragment_corpus(mols, vocab)
    usage: Counter = Counter()
    graph_sizes: Counter = Counter()
    edge_sums: dict[int, int] = defaultdict(int)
    mol_sizes: Counter = Counter(m.num_atoms for m in mols)
    for frag, fg in fragmented:
        usage.update(frag.ranks)
        graph_sizes[fg.num_nodes] += 1
        edge_sums[fg.num_nodes] += len(fg.edges)
    n = len(fragmented)
    total_nodes = sum(s * c for s, c in graph_sizes.items())
    total_edges = sum(edge_sums.values())
    return StatsReport(
        pattern_size_hist=dict(sorted(Counter(p.num_atoms for p in vocab.patterns).items())),
        pattern_table=[(p.rank, p.num_atoms, p.occurrence_count, usage[p.rank]) for p in vocab.patterns],
        graph_size_hist=dict(sorted(graph_sizes.items())),
        molecule_size_hist=dict(sorted(mol_sizes.items())),
        avg_edges_by_size={s: edge_sums[s] / graph_sizes[s] for s in sorted(graph_sizes)},
        avg_graph_size=total_nodes / n if n else 0.0,
        avg_num_edges=total_edges / n if n else 0.0,
        num_molecules=n,
    )


def _row_table(title: str, header: str, row: str, keys, values) -> list[str]:
    return [
        title,
        "\t".join([header] + [str(k) for k in keys]),
        "\t".join([row] + list(values)),
        "",
    ]


def format_stats_text(report: StatsReport) -> str:
    out = [f"molecules\t{report.num_molecules}", ""]
    out += _row_table("Number of fragment graphs by size", "Size", "Num Graphs",
                      report.graph_size_hist, [str(v) for v in report.graph_size_hist.values()])
    out += _row_table("Average number of edges by graph size", "Size", "Average Num Edges",
                      report.avg_edges_by_size, [f"{v:.2f}" for v in report.avg_edges_by_size.values()])
    out += _row_table("Fragment sizes in the vocabulary", "Fragment Size", "Num Fragments",
                      report.pattern_size_hist, [str(v) for v in report.pattern_size_hist.values()])
    out += _row_table("Molecular graph sizes", "Size", "Num Molecules",
                      report.molecule_size_hist, [str(v) for v in report.molecule_size_hist.values()])
    out += [
        "Average graph size and number of edges",
        f"Average Graph Size\t{report.avg_graph_size:.2f}",
        f"Average Num Edges\t{report.avg_num_edges:.2f}",
        "",
    ]
    return "\n".join(out)


def write_stats_csv(report: StatsReport, outdir: str | Path, prefix: str = "stats") -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    tables = {
        "graph_sizes": ("size,num_graphs,avg_num_edges",
                        [f"{s},{c},{report.avg_edges_by_size[s]:.6f}" for s, c in report.graph_size_hist.items()]),
        "fragment_sizes": ("fragment_size,num_fragments",
                           [f"{s},{c}" for s, c in report.pattern_size_hist.items()]),
        "molecule_sizes": ("size,num_molecules",
                           [f"{s},{c}" for s, c in report.molecule_size_hist.items()]),
        "patterns": ("rank,num_atoms,occurrence_count,corpus_usage",
                     [",".join(map(str, row)) for row in report.pattern_table]),
        "summary": ("num_molecules,avg_graph_size,avg_num_edges",
                    [f"{report.num_molecules},{report.avg_graph_size:.6f},{report.avg_num_edges:.6f}"]),
    }
    paths = []
    for name, (header, rows) in tables.items():
        path = outdir / f"{prefix}_{name}.csv"
        path.write_text("\n".join([header] + rows) + "\n", encoding="utf-8")
        paths.append(path)
    return paths
