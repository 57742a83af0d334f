"""GIN encoders for molecular graphs and fragment graphs.

Layer update (sum over the neighbourhood including a self loop):

    h_v <- ReLU(MLP(sum_{u in N(v) + {v}} (h_u + e_uv)))

with a per-layer edge embedding ``e_uv`` (a dedicated self-loop edge type
for ``u == v``).  The fragment encoder has no edge features.  Graph
embeddings are the mean of final node embeddings.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .chem import MAX_CHARGE, NUM_ELEMENTS, BondOrder, MolecularGraph
from .errors import CheckpointError, FeatureOutOfRange, MembershipGap
from .fragmenter import Fragmentation, FragmentGraph

CHECKPOINT_FORMAT = "fragpretrain-ckpt-v1"

# element, formal-charge class, aromatic flag
ATOM_CARDINALITIES = (NUM_ELEMENTS, 2 * MAX_CHARGE + 1, 2)
# bond order (+ self loop), ring flag
SELF_LOOP_BOND = len(BondOrder)
BOND_CARDINALITIES = (len(BondOrder) + 1, 2)
SELF_LOOP_FEATURES = (SELF_LOOP_BOND, 0)


@dataclass
class EncoderConfig:
    num_layers: int = 5
    hidden_dim: int = 64
    node_cardinalities: tuple[int, ...] = ATOM_CARDINALITIES
    edge_cardinalities: tuple[int, ...] = BOND_CARDINALITIES
    self_loop_features: tuple[int, ...] = SELF_LOOP_FEATURES
    use_edge_features: bool = True

    def __post_init__(self):
        self.node_cardinalities = tuple(self.node_cardinalities)
        self.edge_cardinalities = tuple(self.edge_cardinalities)
        self.self_loop_features = tuple(self.self_loop_features)
        if self.num_layers < 1 or self.hidden_dim < 1:
            raise ValueError("num_layers and hidden_dim must be positive")
        if self.use_edge_features and len(self.self_loop_features) != len(self.edge_cardinalities):
            raise ValueError("one self-loop value is needed per edge feature")

    @classmethod
    def molecule(cls, num_layers: int = 5, hidden_dim: int = 64) -> "EncoderConfig":
        return cls(num_layers, hidden_dim)

    @classmethod
    def fragment(cls, vocab_size: int, num_layers: int = 2, hidden_dim: int = 64) -> "EncoderConfig":
        return cls(num_layers, hidden_dim, (vocab_size,), (), (), use_edge_features=False)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape or (fan_in, fan_out))


@dataclass
class GraphBatch:
    node_feats: np.ndarray            # (N, F) int
    edge_src: np.ndarray              # (E,) both directions
    edge_dst: np.ndarray
    edge_feats: np.ndarray            # (E, Fe) int
    graph_ids: np.ndarray             # (N,)
    num_graphs: int
    frag_ids: np.ndarray | None = None  # (N,) global fragment index
    num_frags: int = 0

    @property
    def num_nodes(self) -> int:
        return len(self.node_feats)


def atom_features(mol: MolecularGraph) -> np.ndarray:
    return np.array([(a.element - 1, a.formal_charge + MAX_CHARGE, int(a.aromatic)) for a in mol.atoms],
                    dtype=np.int64).reshape(-1, 3)


def molecule_batch(mols: Sequence[MolecularGraph], frags: Sequence[Fragmentation] | None = None) -> GraphBatch:
    feats, src, dst, efeats, gids, fids = [], [], [], [], [], []
    offset = frag_offset = 0
    for g, mol in enumerate(mols):
        feats.append(atom_features(mol))
        for b in mol.bonds:
            ef = (int(b.order), int(b.in_ring))
            src += [b.begin + offset, b.end + offset]
            dst += [b.end + offset, b.begin + offset]
            efeats += [ef, ef]
        gids.append(np.full(mol.num_atoms, g, dtype=np.int64))
        if frags is not None:
            fids.append(np.asarray(frags[g].membership, dtype=np.int64) + frag_offset)
            frag_offset += len(frags[g])
        offset += mol.num_atoms
    return GraphBatch(
        np.concatenate(feats) if feats else np.zeros((0, 3), np.int64),
        np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64),
        np.asarray(efeats, dtype=np.int64).reshape(-1, 2),
        np.concatenate(gids) if gids else np.zeros(0, np.int64), len(mols),
        np.concatenate(fids) if fids else None, frag_offset,
    )


def fragment_graph_batch(graphs: Sequence[FragmentGraph]) -> GraphBatch:
    feats, src, dst, gids = [], [], [], []
    offset = 0
    for g, fg in enumerate(graphs):
        feats += fg.nodes
        for i, j in fg.edges:
            src += [i + offset, j + offset]
            dst += [j + offset, i + offset]
        gids += [g] * fg.num_nodes
        offset += fg.num_nodes
    return GraphBatch(
        np.asarray(feats, dtype=np.int64).reshape(-1, 1),
        np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64),
        np.zeros((len(src), 0), dtype=np.int64),
        np.asarray(gids, dtype=np.int64), len(graphs),
    )


class Linear:
    def __init__(self, name: str, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.name = name
        self.weight = Tensor(xavier(rng, in_dim, out_dim), f"{name}.weight")
        self.bias = Tensor(np.zeros(out_dim), f"{name}.bias")

    def params(self) -> dict[str, Tensor]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add_bias(ad.matmul(x, self.weight), self.bias)


class Encoder:
    """GIN with edge encoding, ``num_layers`` layers, mean readout."""

    def __init__(self, config: EncoderConfig, name: str, rng: np.random.Generator):
        self.config = config
        self.name = name
        d = config.hidden_dim
        self.node_tables = [Tensor(xavier(rng, c, d), f"{name}.x_emb{i}")
                            for i, c in enumerate(config.node_cardinalities)]
        self.edge_tables: list[list[Tensor]] = []
        self.mlps: list[tuple[Linear, Linear]] = []
        for k in range(config.num_layers):
            if config.use_edge_features:
                self.edge_tables.append([Tensor(xavier(rng, c, d), f"{name}.layer{k}.e_emb{j}")
                                         for j, c in enumerate(config.edge_cardinalities)])
            self.mlps.append((Linear(f"{name}.layer{k}.mlp0", d, 2 * d, rng),
                              Linear(f"{name}.layer{k}.mlp1", 2 * d, d, rng)))

    def params(self) -> dict[str, Tensor]:
        out = {t.name: t for t in self.node_tables}
        for k in range(self.config.num_layers):
            if self.edge_tables:
                out.update({t.name: t for t in self.edge_tables[k]})
            for lin in self.mlps[k]:
                out.update(lin.params())
        return out

    def _check(self, batch: GraphBatch):
        cfg = self.config
        nf = batch.node_feats
        if nf.shape[1] != len(cfg.node_cardinalities):
            raise FeatureOutOfRange(f"{self.name}: expected {len(cfg.node_cardinalities)} node features")
        for i, c in enumerate(cfg.node_cardinalities):
            if nf.size and (nf[:, i].min() < 0 or nf[:, i].max() >= c):
                raise FeatureOutOfRange(f"{self.name}: node feature {i} outside [0, {c})")
        if cfg.use_edge_features:
            ef = batch.edge_feats
            for j, c in enumerate(cfg.edge_cardinalities):
                if ef.size and (ef[:, j].min() < 0 or ef[:, j].max() >= c):
                    raise FeatureOutOfRange(f"{self.name}: edge feature {j} outside [0, {c})")

    def __call__(self, batch: GraphBatch) -> tuple[Tensor, Tensor]:
        """Return ``(node embeddings (N, d), graph embeddings (num_graphs, d))``."""
        self._check(batch)
        n = batch.num_nodes
        h = None
        for i, table in enumerate(self.node_tables):
            e = ad.embedding_lookup(table, batch.node_feats[:, i])
            h = e if h is None else ad.add(h, e)
        loops = np.arange(n, dtype=np.int64)
        src = np.concatenate([batch.edge_src, loops])
        dst = np.concatenate([batch.edge_dst, loops])
        if self.config.use_edge_features:
            loop_feats = np.tile(np.asarray(self.config.self_loop_features, dtype=np.int64), (n, 1))
            efeats = np.concatenate([batch.edge_feats.reshape(-1, len(self.config.edge_cardinalities)), loop_feats])
        for k in range(self.config.num_layers):
            msg = ad.embedding_lookup(h, src)
            if self.config.use_edge_features:
                for j, table in enumerate(self.edge_tables[k]):
                    msg = ad.add(msg, ad.embedding_lookup(table, efeats[:, j]))
            agg = ad.segment_sum(msg, dst, n)
            lin0, lin1 = self.mlps[k]
            h = ad.relu(lin1(ad.relu(lin0(agg))))
        h_graph = ad.segment_mean(h, batch.graph_ids, batch.num_graphs)
        return h, h_graph


def frag_pool(h_nodes: Tensor, frag_ids: np.ndarray, num_frags: int) -> Tensor:
    """Mean of node embeddings per fragment; every fragment must own at least one node."""
    pooled, empty = ad.segment_mean(h_nodes, frag_ids, num_frags, return_mask=True)
    if empty.any():
        raise MembershipGap(f"fragments {np.flatnonzero(empty).tolist()} have no atoms")
    return pooled


# -- checkpoints --------------------------------------------------------------

def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f4")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    try:
        raw = base64.b64decode(d["data"])
        return np.frombuffer(raw, dtype="<f4").reshape(d["shape"]).astype(np.float32)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"malformed tensor payload: {exc}") from exc


def save_checkpoint(path: str | Path, config: dict, tensors: dict[str, Tensor | np.ndarray]) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": config,
        "tensors": {k: encode_array(v.value if isinstance(v, Tensor) else v) for k, v in tensors.items()},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a JSON checkpoint ({exc})") from exc
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    return payload["config"], {k: decode_array(v) for k, v in payload["tensors"].items()}


def assign_params(params: dict[str, Tensor], arrays: dict[str, np.ndarray], strict: bool = True) -> list[str]:
    """Copy ``arrays`` into matching parameters; returns the names that were loaded."""
    loaded = []
    for name, t in params.items():
        if name not in arrays:
            if strict:
                raise CheckpointError(f"checkpoint lacks tensor {name!r}")
            continue
        a = arrays[name]
        if a.shape != t.shape:
            raise CheckpointError(f"tensor {name!r}: checkpoint shape {a.shape} vs model {t.shape}")
        t.value = a.astype(t.value.dtype)
        loaded.append(name)
    return loaded
