"""Fragment-level pretraining objectives and the joint training loop.

Tasks:
  C   contrastive: pooled atom embeddings of a fragment instance (anchor)
      against fragment-encoder embeddings (positive = same instance,
      negatives = other in-batch instances, same pattern included)
  P1  fragment existence: multi-label over the vocabulary from h_G
  P2  backbone class of the fragment graph from h_G

Joint loss: alpha * (P1 + P2) + (1 - alpha) * C when both kinds are active.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .chem import MolecularGraph
from .errors import (
    EmptyCorpus,
    InsufficientNegatives,
    LengthMismatch,
    NoNegatives,
    NumericError,
    UnknownClass,
)
from .fragmenter import BackboneTable, Fragmentation, FragmentGraph, enumerate_backbones, fragment_corpus
from .gnn import (
    Encoder,
    EncoderConfig,
    Linear,
    assign_params,
    frag_pool,
    fragment_graph_batch,
    molecule_batch,
    save_checkpoint,
)
from .rng import stream
from .vocab import Vocabulary

log = logging.getLogger(__name__)

TASKS = ("C", "P1", "P2")
LOSS_LOG_COLUMNS = ("epoch", "step", "L_C", "L_P1", "L_P2", "L_total", "lr")


@dataclass
class PretrainConfig:
    alpha: float = 0.3
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    lr_decay_factor: float = 0.1
    lr_decay_patience: int = 5
    negatives_per_anchor: int | None = None  # None: every other in-batch instance
    tasks: tuple[str, ...] = TASKS
    seed: int = 0
    hidden_dim: int = 64
    mol_layers: int = 5
    frag_layers: int = 2
    backbone_max_nodes: int = 12
    infonce_log: bool = True

    def __post_init__(self):
        self.tasks = tuple(sorted(set(self.tasks), key=TASKS.index))
        unknown = set(self.tasks) - set(TASKS)
        if unknown or not self.tasks:
            raise ValueError(f"tasks must be a non-empty subset of {TASKS}, got {self.tasks}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if "C" in self.tasks and self.batch_size < 2:
            raise ValueError("contrastive pretraining needs batch_size >= 2")
        if self.negatives_per_anchor is not None and self.negatives_per_anchor < 1:
            raise ValueError("negatives_per_anchor must be positive (or None for all)")


def combine_losses(alpha: float, tasks: Sequence[str], l_c: float | None,
                   l_p1: float | None, l_p2: float | None) -> float:
    """Scalar joint objective for the active tasks."""
    l_p = sum(v for t, v in (("P1", l_p1), ("P2", l_p2)) if t in tasks)
    has_p = "P1" in tasks or "P2" in tasks
    if "C" in tasks and has_p:
        return alpha * l_p + (1.0 - alpha) * l_c
    if "C" in tasks:
        return l_c
    return l_p


@dataclass
class LossReport:
    epoch: int
    step: int
    L_C: float | None
    L_P1: float | None
    L_P2: float | None
    L_total: float
    lr: float

    def csv_row(self) -> str:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return ",".join([str(self.epoch), str(self.step), fmt(self.L_C), fmt(self.L_P1),
                         fmt(self.L_P2), fmt(self.L_total), repr(float(self.lr))])


# -- objectives ---------------------------------------------------------------

def sample_negatives(num_instances: int, anchor: int, k: int | None, rng: np.random.Generator) -> list[int]:
    """``k`` distinct in-batch instances other than ``anchor``; ``k=None`` takes all of them."""
    pool = [i for i in range(num_instances) if i != anchor]
    if k is None:
        if not pool:
            raise InsufficientNegatives("batch holds a single fragment instance")
        return pool
    if k > len(pool):
        raise InsufficientNegatives(f"need {k} negatives but the batch has only {len(pool)} other instances")
    return sorted(rng.choice(pool, size=k, replace=False).tolist())


def negative_mask(num_instances: int, k: int | None, rng: np.random.Generator | None) -> np.ndarray:
    """Boolean (n, n) support: the diagonal (positive) plus each row's negatives."""
    if num_instances < 2:
        raise NoNegatives("contrastive loss needs at least two fragment instances")
    if k is None:
        return np.ones((num_instances, num_instances), dtype=bool)
    mask = np.eye(num_instances, dtype=bool)
    for r in range(num_instances):
        mask[r, sample_negatives(num_instances, r, k, rng)] = True
    return mask


def infonce_loss(anchors: Tensor, positives: Tensor, mask: np.ndarray | None = None,
                 use_log: bool = True) -> Tensor:
    """Mean over anchors of -log softmax of the positive dot product against negatives.

    Row r of ``anchors`` pairs with row r of ``positives``; every other row
    of ``positives`` allowed by ``mask`` is a negative.  With
    ``use_log=False`` the loss is minus the mean positive probability.
    """
    n = anchors.shape[0]
    if anchors.shape != positives.shape:
        raise LengthMismatch(f"anchors {anchors.shape} and positives {positives.shape} are not row-aligned")
    if mask is None:
        if n < 2:
            raise NoNegatives("contrastive loss needs at least one negative per anchor")
        mask = np.ones((n, n), dtype=bool)
    elif (mask.sum(axis=1) < 2).any():
        raise NoNegatives("every anchor needs at least one negative")
    sims = ad.pairwise_dot(anchors, positives)
    targets = np.arange(n)
    if use_log:
        return ad.softmax_ce_with_logits(sims, targets, mask=mask)
    per_row = ad.softmax_ce_with_logits(sims, targets, mask=mask, reduction="none")
    return ad.scale(ad.mean_all(ad.exp(ad.scale(per_row, -1.0))), -1.0)


def existence_targets(frags: Sequence[Fragmentation], vocab_size: int) -> np.ndarray:
    y = np.zeros((len(frags), vocab_size), dtype=np.float32)
    for i, f in enumerate(frags):
        y[i, f.ranks] = 1.0
    return y


def fragment_existence_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    if logits.shape != targets.shape:
        raise LengthMismatch(f"target shape {targets.shape} does not match logits {logits.shape}")
    return ad.sigmoid_bce_with_logits(logits, targets)


def backbone_loss(logits: Tensor, class_ids: np.ndarray) -> Tensor:
    class_ids = np.asarray(class_ids, dtype=np.int64)
    if class_ids.size and (class_ids.min() < 0 or class_ids.max() >= logits.shape[1]):
        raise UnknownClass(f"backbone class outside [0, {logits.shape[1]})")
    return ad.softmax_ce_with_logits(logits, class_ids)


# -- model ---------------------------------------------------------------------

class PretrainModel:
    """Molecule encoder, fragment encoder and the two predictive heads."""

    def __init__(self, vocab_size: int, num_backbones: int, config: PretrainConfig):
        self.vocab_size = vocab_size
        self.num_backbones = num_backbones
        d = config.hidden_dim
        self.mol_config = EncoderConfig.molecule(config.mol_layers, d)
        self.frag_config = EncoderConfig.fragment(vocab_size, config.frag_layers, d)
        self.mol_encoder = Encoder(self.mol_config, "mol", stream(config.seed, "init.mol"))
        self.frag_encoder = Encoder(self.frag_config, "frag", stream(config.seed, "init.frag"))
        self.existence_head = Linear("head.existence", d, vocab_size, stream(config.seed, "init.existence"))
        self.backbone_head = Linear("head.backbone", d, num_backbones, stream(config.seed, "init.backbone"))

    def params(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.mol_encoder.params())
        out.update(self.frag_encoder.params())
        out.update(self.existence_head.params())
        out.update(self.backbone_head.params())
        return out

    def task_params(self, tasks: Sequence[str]) -> dict[str, Tensor]:
        out = dict(self.mol_encoder.params())
        if "C" in tasks:
            out.update(self.frag_encoder.params())
        if "P1" in tasks:
            out.update(self.existence_head.params())
        if "P2" in tasks:
            out.update(self.backbone_head.params())
        return out

    def config_dict(self) -> dict:
        return {
            "mol_encoder": self.mol_config.to_dict(),
            "frag_encoder": self.frag_config.to_dict(),
            "vocab_size": self.vocab_size,
            "num_backbones": self.num_backbones,
        }

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params().items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        assign_params(self.params(), arrays)


@dataclass
class PretrainItem:
    mol: MolecularGraph
    frag: Fragmentation
    graph: FragmentGraph
    backbone: int


def prepare_items(mols: Sequence[MolecularGraph], vocab: Vocabulary,
                  table: BackboneTable | None = None, max_nodes: int = 12,
                  workers: int = 1) -> tuple[list[PretrainItem], BackboneTable]:
    if not mols:
        raise EmptyCorpus("pretraining corpus is empty")
    pairs = fragment_corpus(mols, vocab, workers=workers)
    if table is None:
        table = enumerate_backbones((fg for _, fg in pairs), max_nodes)
    items = [PretrainItem(m, f, fg, table.classify(fg).class_id) for m, (f, fg) in zip(mols, pairs)]
    return items, table


@dataclass
class StepOutput:
    total: Tensor
    l_c: Tensor | None = None
    l_p1: Tensor | None = None
    l_p2: Tensor | None = None
    anchors: Tensor | None = None
    positives: Tensor | None = None


def forward_batch(model: PretrainModel, items: Sequence[PretrainItem], config: PretrainConfig,
                  rng: np.random.Generator | None = None) -> StepOutput:
    tasks = config.tasks
    mols = [it.mol for it in items]
    frags = [it.frag for it in items]
    mb = molecule_batch(mols, frags)
    h_nodes, h_graph = model.mol_encoder(mb)
    out = StepOutput(total=None)
    if "C" in tasks:
        fb = fragment_graph_batch([it.graph for it in items])
        h_frag, _ = model.frag_encoder(fb)
        pooled = frag_pool(h_nodes, mb.frag_ids, mb.num_frags)
        if pooled.shape != h_frag.shape:
            raise LengthMismatch(f"pooled {pooled.shape} vs fragment embeddings {h_frag.shape}")
        mask = negative_mask(pooled.shape[0], config.negatives_per_anchor, rng)
        out.l_c = infonce_loss(pooled, h_frag, mask, use_log=config.infonce_log)
        out.anchors, out.positives = pooled, h_frag
    if "P1" in tasks:
        y = existence_targets(frags, model.vocab_size)
        out.l_p1 = fragment_existence_loss(model.existence_head(h_graph), y)
    if "P2" in tasks:
        out.l_p2 = backbone_loss(model.backbone_head(h_graph), [it.backbone for it in items])
    pred = [t for t in (out.l_p1, out.l_p2) if t is not None]
    l_p = None
    if pred:
        l_p = pred[0] if len(pred) == 1 else ad.add(pred[0], pred[1])
    if out.l_c is not None and l_p is not None:
        out.total = ad.add(ad.scale(l_p, config.alpha), ad.scale(out.l_c, 1.0 - config.alpha))
    else:
        out.total = out.l_c if out.l_c is not None else l_p
    return out


@dataclass
class PretrainResult:
    model: PretrainModel
    reports: list[LossReport]
    epoch_losses: list[dict[str, float]]
    best_state: dict[str, np.ndarray]
    best_epoch: int
    table: BackboneTable


def _value(t: Tensor | None) -> float | None:
    return None if t is None else t.item()


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_pretrain(items: Sequence[PretrainItem], vocab_size: int, table: BackboneTable,
                   config: PretrainConfig, log_path: str | Path | None = None,
                   header: Sequence[str] = (), model: PretrainModel | None = None) -> PretrainResult:
    """Parallel multi-task pretraining with AdamW and reduce-on-plateau decay."""
    if not items:
        raise EmptyCorpus("pretraining corpus is empty")
    if "C" in config.tasks and len(items) < 2 and sum(len(it.frag) for it in items) < 2:
        raise NoNegatives("corpus has fewer than two fragment instances")
    model = model or PretrainModel(vocab_size, table.num_classes, config)
    params = list(model.task_params(config.tasks).values())
    opt = ad.Optimizer(params, "adamw", config.learning_rate, weight_decay=config.weight_decay)
    sched = ad.ReduceOnPlateau(opt, config.lr_decay_factor, config.lr_decay_patience)
    shuffle_rng = stream(config.seed, "pretrain.shuffle")
    neg_rng = stream(config.seed, "pretrain.negatives")
    reports: list[LossReport] = []
    epoch_losses: list[dict[str, float]] = []
    best = (math.inf, 0, model.snapshot())
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        if fh:
            for line in header:
                fh.write(f"# {line}\n")
            fh.write(",".join(LOSS_LOG_COLUMNS) + "\n")
        step = 0
        for epoch in range(1, config.epochs + 1):
            sums = {"L_C": 0.0, "L_P1": 0.0, "L_P2": 0.0, "L_total": 0.0}
            nb = 0
            for idx in _batches(len(items), config.batch_size, shuffle_rng):
                batch = [items[i] for i in idx]
                if "C" in config.tasks and sum(len(it.frag) for it in batch) < 2:
                    continue
                lr = opt.lr
                with Tape(params) as tape:
                    out = forward_batch(model, batch, config, neg_rng)
                vals = (_value(out.l_c), _value(out.l_p1), _value(out.l_p2))
                total = combine_losses(config.alpha, config.tasks, *vals)
                if not math.isfinite(total):
                    raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
                grads = tape.backward(out.total)
                opt.step(grads)
                rep = LossReport(epoch, step, *vals, total, lr)
                reports.append(rep)
                if fh:
                    fh.write(rep.csv_row() + "\n")
                for key, v in zip(("L_C", "L_P1", "L_P2", "L_total"), (*vals, total)):
                    sums[key] += v or 0.0
                nb += 1
                step += 1
            means = {k: v / max(nb, 1) for k, v in sums.items()}
            means["epoch"] = epoch
            means["lr"] = opt.lr
            epoch_losses.append(means)
            log.info("epoch %d: total %.4f (C %.4f, P1 %.4f, P2 %.4f) lr %.2e", epoch,
                     means["L_total"], means["L_C"], means["L_P1"], means["L_P2"], opt.lr)
            if means["L_total"] < best[0]:
                best = (means["L_total"], epoch, model.snapshot())
            sched.step(means["L_total"])
    finally:
        if fh:
            fh.close()
    return PretrainResult(model, reports, epoch_losses, best[2], best[1], table)


def write_pretrain_checkpoint(path: str | Path, model: PretrainModel, run_config: dict,
                              state: dict[str, np.ndarray] | None = None) -> None:
    cfg = dict(model.config_dict())
    cfg["run"] = run_config
    save_checkpoint(path, cfg, state if state is not None else model.params())


def model_from_checkpoint(config: dict, arrays: dict[str, np.ndarray]) -> PretrainModel:
    pc = PretrainConfig(hidden_dim=config["mol_encoder"]["hidden_dim"],
                        mol_layers=config["mol_encoder"]["num_layers"],
                        frag_layers=config["frag_encoder"]["num_layers"])
    model = PretrainModel(config["vocab_size"], config["num_backbones"], pc)
    model.mol_config = EncoderConfig.from_dict(config["mol_encoder"])
    model.frag_config = EncoderConfig.from_dict(config["frag_encoder"])
    model.load(arrays)
    return model


def alignment(model: PretrainModel, items: Sequence[PretrainItem]) -> tuple[float, float]:
    """Mean anchor-positive and anchor-negative dot products over ``items`` as one batch."""
    cfg = PretrainConfig(tasks=("C",), batch_size=max(len(items), 2))
    out = forward_batch(model, items, cfg)
    sims = out.anchors.value.astype(np.float64) @ out.positives.value.astype(np.float64).T
    n = sims.shape[0]
    pos = float(np.trace(sims) / n)
    neg = float((sims.sum() - np.trace(sims)) / (n * n - n))
    return pos, neg


def embed_items(model: PretrainModel, items: Sequence[PretrainItem]):
    """Per-atom and per-fragment embeddings as numpy arrays plus their batch indices."""
    mb = molecule_batch([it.mol for it in items], [it.frag for it in items])
    h_nodes, _ = model.mol_encoder(mb)
    fb = fragment_graph_batch([it.graph for it in items])
    h_frag, _ = model.frag_encoder(fb)
    return h_nodes.value, mb, h_frag.value, fb
