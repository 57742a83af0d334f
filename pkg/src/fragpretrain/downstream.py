"""Finetuning on labeled molecules with the dual-encoder representation.

The graph embedding of the molecule encoder and that of the fragment
encoder (on the molecule's fragment graph) are concatenated and fed to a
single linear layer.  Splits, metrics and the finetuning loop live here.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .canon import serialize_subgraph
from .chem import MolecularGraph, parse_smiles
from .errors import (
    ConfigMismatch,
    DataError,
    NumericError,
    SingleClassTask,
    SmilesError,
    VocabularyMissing,
)
from .fragmenter import Fragmentation, FragmentGraph, fragment_corpus
from .gnn import (
    Encoder,
    EncoderConfig,
    Linear,
    assign_params,
    fragment_graph_batch,
    molecule_batch,
    save_checkpoint,
)
from .rng import stream
from .vocab import Vocabulary

log = logging.getLogger(__name__)

TASK_TYPES = ("binary", "multilabel", "regression")


# -- data -----------------------------------------------------------------------

@dataclass
class LabeledDataset:
    smiles: list[str]
    mols: list[MolecularGraph]
    targets: np.ndarray  # (n, tasks), nan marks a missing label
    task_names: list[str]
    task_type: str
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(len(self.mols), -1)
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.mols))]
        if self.task_type not in TASK_TYPES:
            raise ValueError(f"task_type must be one of {TASK_TYPES}")
        if not (len(self.smiles) == len(self.mols) == len(self.ids) == self.targets.shape[0]):
            raise DataError("dataset columns have inconsistent lengths")
        if self.targets.shape[1] != len(self.task_names):
            raise DataError("task matrix width does not match task names")
        if len(self.mols) and np.isnan(self.targets).all(axis=1).any():
            raise DataError("every molecule needs at least one observed label")

    def __len__(self) -> int:
        return len(self.mols)

    @property
    def num_tasks(self) -> int:
        return len(self.task_names)

    @property
    def is_classification(self) -> bool:
        return self.task_type != "regression"

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        idx = list(indices)
        return LabeledDataset([self.smiles[i] for i in idx], [self.mols[i] for i in idx],
                              self.targets[idx], list(self.task_names), self.task_type,
                              [self.ids[i] for i in idx])


def infer_task_type(targets: np.ndarray) -> str:
    observed = targets[~np.isnan(targets)]
    if observed.size and np.isin(observed, (0.0, 1.0)).all():
        return "binary" if targets.shape[1] == 1 else "multilabel"
    return "regression"


def read_labels(path: str | Path, task_type: str | None = None, skip_errors: bool = True,
                id_column: str | None = "id") -> LabeledDataset:
    """Label CSV: a ``smiles`` column plus one column per task; empty cells are missing."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "smiles" not in reader.fieldnames:
            raise DataError(f"{path}: label file needs a 'smiles' column")
        tasks = [c for c in reader.fieldnames if c not in ("smiles", id_column)]
        if not tasks:
            raise DataError(f"{path}: no task columns")
        smiles, mols, rows, ids = [], [], [], []
        for line_no, row in enumerate(reader, start=2):
            try:
                mol = parse_smiles(row["smiles"])
                vals = [float(row[t]) if (row[t] or "").strip() else math.nan for t in tasks]
            except (SmilesError, ValueError) as exc:
                if not skip_errors:
                    raise DataError(f"{path}:{line_no}: {exc}") from exc
                log.warning("%s:%d skipped: %s", path, line_no, exc)
                continue
            if all(math.isnan(v) for v in vals):
                log.warning("%s:%d skipped: no observed labels", path, line_no)
                continue
            smiles.append(row["smiles"])
            mols.append(mol)
            rows.append(vals)
            ids.append((row.get(id_column) if id_column else None) or str(line_no - 1))
    if not mols:
        raise DataError(f"{path}: no usable rows")
    targets = np.asarray(rows, dtype=np.float64)
    return LabeledDataset(smiles, mols, targets, tasks, task_type or infer_task_type(targets), ids)


def write_labels(path: str | Path, dataset: LabeledDataset) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "smiles"] + dataset.task_names)
        for i in range(len(dataset)):
            vals = ["" if math.isnan(v) else repr(float(v)) for v in dataset.targets[i]]
            w.writerow([dataset.ids[i], dataset.smiles[i]] + vals)


# -- splits ---------------------------------------------------------------------

@dataclass
class SplitAssignment:
    train: list[int]
    valid: list[int]
    test: list[int]
    method: str
    ratios: tuple[float, float, float]

    def as_dict(self) -> dict:
        return {"method": self.method, "ratios": list(self.ratios),
                "train": self.train, "valid": self.valid, "test": self.test}


def scaffold_key(mol: MolecularGraph) -> str:
    """Canonical code of what remains after repeatedly deleting non-ring atoms of degree <= 1."""
    ring = mol.ring_atoms()
    alive = set(range(mol.num_atoms))
    degree = [len(mol.adjacency[i]) for i in range(mol.num_atoms)]
    frontier = [i for i in alive if i not in ring and degree[i] <= 1]
    while frontier:
        v = frontier.pop()
        if v not in alive:
            continue
        alive.discard(v)
        for u in mol.adjacency[v]:
            if u in alive:
                degree[u] -= 1
                if u not in ring and degree[u] <= 1:
                    frontier.append(u)
    if not alive:
        return ""
    return serialize_subgraph(mol, frozenset(alive))


def _check_ratios(ratios) -> tuple[float, float, float]:
    r = tuple(float(x) for x in ratios)
    if len(r) != 3 or min(r) < 0 or not math.isclose(sum(r), 1.0, abs_tol=1e-9):
        raise ValueError("split ratios must be three non-negative numbers summing to 1")
    return r


def scaffold_split(mols: Sequence[MolecularGraph], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitAssignment:
    """Largest scaffold group first, each group filling train, then valid, then test.

    The assignment is deterministic; ``seed`` is accepted for interface
    symmetry with the random split and does not change the result.
    """
    ratios = _check_ratios(ratios)
    if not mols:
        raise DataError("cannot split an empty dataset")
    groups: dict[str, list[int]] = defaultdict(list)
    for i, m in enumerate(mols):
        groups[scaffold_key(m)].append(i)
    ordered = sorted(groups.items(), key=lambda kv: (-len(kv[1]), kv[0]))
    n = len(mols)
    train_cut = ratios[0] * n
    valid_cut = (ratios[0] + ratios[1]) * n
    train, valid, test = [], [], []
    for _, idx in ordered:
        if not train or len(train) + len(idx) <= train_cut:
            train += idx
        elif len(train) + len(valid) + len(idx) <= valid_cut:
            valid += idx
        else:
            test += idx
    if not valid or not test:
        log.warning("scaffold split left %s empty (%d scaffold groups)",
                    "valid and test" if not valid and not test else ("valid" if not valid else "test"),
                    len(groups))
    return SplitAssignment(sorted(train), sorted(valid), sorted(test), "scaffold", ratios)


def stratified_random_split(targets: np.ndarray, ratios=(0.8, 0.1, 0.1), seed: int = 0,
                            bins: int = 10) -> SplitAssignment:
    """Seeded split stratified on the first task (label value, or quantile bin for reals)."""
    ratios = _check_ratios(ratios)
    y = np.asarray(targets, dtype=np.float64).reshape(len(targets), -1)[:, 0]
    if not len(y):
        raise DataError("cannot split an empty dataset")
    observed = ~np.isnan(y)
    strata = np.full(len(y), -1, dtype=np.int64)
    values = np.unique(y[observed])
    if len(values) <= bins:
        strata[observed] = np.searchsorted(values, y[observed])
    else:
        edges = np.quantile(y[observed], np.linspace(0, 1, bins + 1)[1:-1])
        strata[observed] = np.searchsorted(edges, y[observed], side="right")
    rng = stream(seed, "split.stratified")
    train, valid, test = [], [], []
    for s in np.unique(strata):
        idx = rng.permutation(np.flatnonzero(strata == s)).tolist()
        n_train = int(round(ratios[0] * len(idx)))
        n_valid = int(round(ratios[1] * len(idx)))
        train += idx[:n_train]
        valid += idx[n_train:n_train + n_valid]
        test += idx[n_train + n_valid:]
    return SplitAssignment(sorted(train), sorted(valid), sorted(test), "stratified_random", ratios)


# -- metrics --------------------------------------------------------------------

def roc_auc(labels, scores) -> float:
    """Mann-Whitney statistic with average ranks for ties."""
    y = np.asarray(labels, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassTask("ROC-AUC needs both classes")
    ranks = rankdata(s, method="average")
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def average_precision(labels, scores) -> float:
    """Area under precision-recall by the step rule, one step per distinct score."""
    y = np.asarray(labels, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int((y == 1).sum())
    if n_pos == 0 or n_pos == len(y):
        raise SingleClassTask("average precision needs both classes")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    precision = tps / (tps + fps)
    recall = tps / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def mean_absolute_error(targets, preds) -> float:
    t = np.asarray(targets, dtype=np.float64)
    p = np.asarray(preds, dtype=np.float64)
    return float(np.mean(np.abs(t - p)))


METRICS = {"roc_auc": roc_auc, "ap": average_precision, "mae": mean_absolute_error}
HIGHER_IS_BETTER = {"roc_auc": True, "ap": True, "mae": False}


def score_tasks(targets: np.ndarray, preds: np.ndarray, metric: str,
                task_names: Sequence[str]) -> dict:
    """Per-task scores over observed labels and their mean; single-class tasks are skipped."""
    fn = METRICS[metric]
    per_task, skipped = {}, []
    for j, name in enumerate(task_names):
        seen = ~np.isnan(targets[:, j])
        if not seen.any():
            skipped.append(name)
            continue
        try:
            per_task[name] = fn(targets[seen, j], preds[seen, j])
        except SingleClassTask as exc:
            log.warning("task %s skipped: %s", name, exc)
            skipped.append(name)
    mean = float(np.mean(list(per_task.values()))) if per_task else math.nan
    return {"metric": metric, "per_task": per_task, "mean": mean, "skipped": skipped}


def default_metric(task_type: str) -> str:
    return "mae" if task_type == "regression" else "roc_auc"


# -- model ----------------------------------------------------------------------

@dataclass
class FinetuneConfig:
    epochs: int = 100
    batch_size: int = 256
    dropout: float = 0.0
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    lr_schedule: str = "step"  # step | plateau
    lr_step_size: int = 30
    lr_step_gamma: float = 0.3
    lr_decay_factor: float = 0.5
    lr_decay_patience: int = 20
    use_fragment_encoder: bool = True
    seed: int = 0
    hidden_dim: int = 64
    mol_layers: int = 5
    frag_layers: int = 2

    def __post_init__(self):
        if self.dropout not in (0.0, 0.5):
            log.warning("dropout %.2f outside the usual {0.0, 0.5} grid", self.dropout)
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.lr_schedule not in ("step", "plateau"):
            raise ValueError("lr_schedule must be 'step' or 'plateau'")

    @classmethod
    def long_range(cls, **kw) -> "FinetuneConfig":
        base = dict(epochs=100, batch_size=128, lr_schedule="plateau",
                    lr_decay_factor=0.5, lr_decay_patience=20)
        base.update(kw)
        return cls(**base)


class PredictionHead:
    def __init__(self, in_dim: int, num_tasks: int, dropout: float, rng: np.random.Generator):
        self.in_dim = in_dim
        self.dropout = dropout
        self.linear = Linear("head.task", in_dim, num_tasks, rng)

    def params(self) -> dict[str, Tensor]:
        return self.linear.params()

    def __call__(self, x: Tensor, training: bool, rng: np.random.Generator | None) -> Tensor:
        if x.shape[1] != self.in_dim:
            raise ConfigMismatch(f"head expects {self.in_dim} inputs, got {x.shape[1]}")
        return self.linear(ad.dropout(x, self.dropout, rng, training))


@dataclass
class FinetuneItem:
    mol: MolecularGraph
    frag: Fragmentation | None = None
    graph: FragmentGraph | None = None


def prepare_finetune_items(mols: Sequence[MolecularGraph], vocab: Vocabulary | None,
                           use_fragment_encoder: bool, workers: int = 1) -> list[FinetuneItem]:
    if not use_fragment_encoder:
        return [FinetuneItem(m) for m in mols]
    if vocab is None:
        raise VocabularyMissing("the fragment encoder needs a vocabulary to fragment inputs")
    return [FinetuneItem(m, f, g) for m, (f, g) in zip(mols, fragment_corpus(mols, vocab, workers))]


class FinetuneModel:
    """Molecule encoder, optional fragment encoder and a linear head on their concatenation."""

    def __init__(self, num_tasks: int, config: FinetuneConfig, vocab_size: int | None = None,
                 mol_encoder: Encoder | None = None, frag_encoder: Encoder | None = None):
        self.num_tasks = num_tasks
        self.use_fragment_encoder = config.use_fragment_encoder
        d = config.hidden_dim
        self.mol_encoder = mol_encoder or Encoder(EncoderConfig.molecule(config.mol_layers, d), "mol",
                                                  stream(config.seed, "finetune.init.mol"))
        self.frag_encoder = None
        in_dim = self.mol_encoder.config.hidden_dim
        if config.use_fragment_encoder:
            if frag_encoder is None:
                if vocab_size is None:
                    raise VocabularyMissing("vocabulary size needed to build a fragment encoder")
                frag_encoder = Encoder(EncoderConfig.fragment(vocab_size, config.frag_layers, d), "frag",
                                       stream(config.seed, "finetune.init.frag"))
            if vocab_size is not None and frag_encoder.config.node_cardinalities[0] != vocab_size:
                raise ConfigMismatch(f"fragment encoder was built for {frag_encoder.config.node_cardinalities[0]}"
                                     f" patterns but the vocabulary has {vocab_size}")
            self.frag_encoder = frag_encoder
            in_dim += frag_encoder.config.hidden_dim
        self.head = PredictionHead(in_dim, num_tasks, config.dropout, stream(config.seed, "finetune.init.head"))

    def params(self) -> dict[str, Tensor]:
        out = dict(self.mol_encoder.params())
        if self.frag_encoder is not None:
            out.update(self.frag_encoder.params())
        out.update(self.head.params())
        return out

    def forward(self, items: Sequence[FinetuneItem], training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        _, h_m = self.mol_encoder(molecule_batch([it.mol for it in items]))
        rep = h_m
        if self.frag_encoder is not None:
            if any(it.graph is None for it in items):
                raise VocabularyMissing("fragment graphs missing for the fragment encoder")
            _, h_f = self.frag_encoder(fragment_graph_batch([it.graph for it in items]))
            rep = ad.concat([h_m, h_f], axis=1)
        return self.head(rep, training, rng)

    def predict(self, items: Sequence[FinetuneItem], task_type: str, batch_size: int = 256) -> np.ndarray:
        outs = []
        for i in range(0, len(items), batch_size):
            outs.append(self.forward(items[i:i + batch_size]).value.astype(np.float64))
        raw = np.concatenate(outs) if outs else np.zeros((0, self.num_tasks))
        if task_type == "regression":
            return raw
        return 1.0 / (1.0 + np.exp(-raw))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params().items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        assign_params(self.params(), arrays)

    def config_dict(self, task_names: Sequence[str], task_type: str, dropout: float) -> dict:
        return {
            "mol_encoder": self.mol_encoder.config.to_dict(),
            "frag_encoder": None if self.frag_encoder is None else self.frag_encoder.config.to_dict(),
            "num_tasks": self.num_tasks,
            "task_names": list(task_names),
            "task_type": task_type,
            "dropout": dropout,
        }


def encoders_from_pretrain(config: dict, arrays: dict[str, np.ndarray],
                           use_fragment_encoder: bool) -> tuple[Encoder, Encoder | None]:
    """Rebuild pretrained encoders from a pretraining checkpoint's config and tensors."""
    if "mol_encoder" not in config:
        raise ConfigMismatch("checkpoint has no molecule encoder")
    mol = Encoder(EncoderConfig.from_dict(config["mol_encoder"]), "mol", np.random.default_rng(0))
    assign_params(mol.params(), arrays, strict=False)
    frag = None
    if use_fragment_encoder:
        if not config.get("frag_encoder"):
            raise ConfigMismatch("checkpoint has no fragment encoder")
        frag = Encoder(EncoderConfig.from_dict(config["frag_encoder"]), "frag", np.random.default_rng(0))
        assign_params(frag.params(), arrays, strict=False)
    if frag is not None and frag.config.hidden_dim != mol.config.hidden_dim:
        log.info("encoder widths differ: molecule %d, fragment %d", mol.config.hidden_dim, frag.config.hidden_dim)
    return mol, frag


def model_from_finetune_checkpoint(config: dict, arrays: dict[str, np.ndarray]) -> FinetuneModel:
    mol = Encoder(EncoderConfig.from_dict(config["mol_encoder"]), "mol", np.random.default_rng(0))
    frag = None
    if config.get("frag_encoder"):
        frag = Encoder(EncoderConfig.from_dict(config["frag_encoder"]), "frag", np.random.default_rng(0))
    fc = FinetuneConfig(dropout=config.get("dropout", 0.0), use_fragment_encoder=frag is not None)
    model = FinetuneModel(config["num_tasks"], fc, mol_encoder=mol, frag_encoder=frag)
    model.load(arrays)
    return model


def task_loss(logits: Tensor, targets: np.ndarray, task_type: str) -> Tensor:
    """Masked loss; missing (nan) labels carry no weight."""
    mask = ~np.isnan(targets)
    filled = np.where(mask, targets, 0.0)
    if task_type == "regression":
        return ad.masked_l1(logits, filled, mask)
    return ad.sigmoid_bce_with_logits(logits, filled, mask)


@dataclass
class FinetuneResult:
    model: FinetuneModel
    history: list[dict]
    best_epoch: int
    best_state: dict[str, np.ndarray]
    metric: str


def finetune(model: FinetuneModel, items: Sequence[FinetuneItem], dataset: LabeledDataset,
             split: SplitAssignment, config: FinetuneConfig, metric: str | None = None) -> FinetuneResult:
    """Optimize encoders and head jointly; restore the best-validation parameters at the end."""
    if len(items) != len(dataset):
        raise DataError("items and dataset differ in length")
    if model.num_tasks != dataset.num_tasks:
        raise ConfigMismatch(f"model predicts {model.num_tasks} tasks, dataset has {dataset.num_tasks}")
    metric = metric or default_metric(dataset.task_type)
    higher = HIGHER_IS_BETTER[metric]
    params = list(model.params().values())
    opt = ad.Optimizer(params, "adam", config.learning_rate, weight_decay=config.weight_decay)
    if config.lr_schedule == "step":
        sched = ad.StepDecay(opt, config.lr_step_size, config.lr_step_gamma)
    else:
        sched = ad.ReduceOnPlateau(opt, config.lr_decay_factor, config.lr_decay_patience)
    shuffle_rng = stream(config.seed, "finetune.shuffle")
    drop_rng = stream(config.seed, "finetune.dropout")
    train_idx = np.asarray(split.train, dtype=np.int64)
    if not len(train_idx):
        raise DataError("training split is empty")
    select_on = split.valid if split.valid else split.train
    if not split.valid:
        log.warning("validation split empty; model selection uses the training split")
    history = []
    best_score, best_epoch, best_state = None, 0, model.snapshot()
    for epoch in range(1, config.epochs + 1):
        order = train_idx[shuffle_rng.permutation(len(train_idx))]
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            with Tape(params) as tape:
                logits = model.forward([items[i] for i in idx], training=True, rng=drop_rng)
                loss = task_loss(logits, dataset.targets[idx], dataset.task_type)
            if not np.isfinite(loss.value):
                raise NumericError(f"non-finite finetuning loss at epoch {epoch}")
            opt.step(tape.backward(loss))
            losses.append(loss.item())
        preds = model.predict([items[i] for i in select_on], dataset.task_type)
        score = score_tasks(dataset.targets[select_on], preds, metric, dataset.task_names)["mean"]
        train_loss = float(np.mean(losses))
        history.append({"epoch": epoch, "train_loss": train_loss, "valid_" + metric: score, "lr": opt.lr})
        if not math.isnan(score) and (best_score is None or (score > best_score if higher else score < best_score)):
            best_score, best_epoch, best_state = score, epoch, model.snapshot()
        if config.lr_schedule == "step":
            sched.step()
        else:
            if math.isnan(score):
                sched.step(train_loss)
            else:
                sched.step(-score if higher else score)
    model.load(best_state)
    return FinetuneResult(model, history, best_epoch, best_state, metric)


def evaluate(model: FinetuneModel, items: Sequence[FinetuneItem], dataset: LabeledDataset,
             indices: Sequence[int] | None = None, metric: str | None = None) -> dict:
    metric = metric or default_metric(dataset.task_type)
    if (metric == "mae") != (dataset.task_type == "regression"):
        raise ValueError(f"metric {metric} does not fit {dataset.task_type} tasks")
    idx = list(range(len(dataset))) if indices is None else list(indices)
    if not idx:
        raise DataError("nothing to evaluate")
    preds = model.predict([items[i] for i in idx], dataset.task_type)
    out = score_tasks(dataset.targets[idx], preds, metric, dataset.task_names)
    out["num_molecules"] = len(idx)
    return out


def write_predictions(path: str | Path, ids: Sequence[str], task_names: Sequence[str], preds: np.ndarray,
                      header: Sequence[str] = ()) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["id"] + list(task_names))
        for i, row in zip(ids, preds):
            w.writerow([i] + [repr(float(v)) for v in row])


def write_metrics(path: str | Path, metrics: dict) -> None:
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def summarize_seeds(scores: Sequence[float]) -> dict:
    """Mean and (population) standard deviation over runs with different seeds."""
    arr = np.asarray(scores, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "runs": arr.tolist()}


def save_finetuned(path: str | Path, model: FinetuneModel, dataset: LabeledDataset,
                   config: FinetuneConfig, run_config: dict) -> None:
    cfg = model.config_dict(dataset.task_names, dataset.task_type, config.dropout)
    cfg["run"] = run_config
    save_checkpoint(path, cfg, model.params())
