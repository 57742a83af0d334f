"""Randomized gradient-check instances, one builder per differentiable op.

Each builder takes a Generator and returns ``(fn, params)`` where ``fn()``
recomputes a scalar from ``params``.  Non-scalar ops are reduced with a
fixed random projection so every output entry contributes.  Build and run
under ``autodiff.precision(np.float64)``.
"""

import numpy as np

from fragpretrain import autodiff as ad
from fragpretrain.autodiff import Tensor
from fragpretrain.gnn import Encoder, EncoderConfig, GraphBatch, frag_pool
from fragpretrain.pretrain import infonce_loss


def _t(rng, *shape):
    return Tensor(rng.normal(size=shape))


def _project(out, rng):
    w = Tensor(rng.normal(size=out.shape))
    return lambda x: ad.sum_all(ad.mul(x, w))


def _unary(op, shape=(3, 4)):
    def build(rng):
        x = _t(rng, *shape)
        proj = _project(op(x), rng)
        return (lambda: proj(op(x))), [x]
    return build


def _binary(op, sa=(3, 4), sb=(3, 4)):
    def build(rng):
        a, b = _t(rng, *sa), _t(rng, *sb)
        proj = _project(op(a, b), rng)
        return (lambda: proj(op(a, b))), [a, b]
    return build


def _segment(op):
    def build(rng):
        n, k = int(rng.integers(3, 8)), int(rng.integers(1, 4))
        ids = rng.integers(0, k, size=n)
        x = _t(rng, n, 3)
        proj = _project(op(x, ids, k), rng)
        return (lambda: proj(op(x, ids, k))), [x]
    return build


def _lookup(rng):
    table = _t(rng, 5, 3)
    idx = rng.integers(0, 5, size=7)
    proj = _project(ad.embedding_lookup(table, idx), rng)
    return (lambda: proj(ad.embedding_lookup(table, idx))), [table]


def _log_sum_exp(rng):
    x = _t(rng, 4, 5)
    mask = rng.random((4, 5)) < 0.7
    mask[:, 0] = True
    w = Tensor(rng.normal(size=4))
    return (lambda: ad.sum_all(ad.mul(ad.log_sum_exp(x, mask), w))), [x]


def _bce(rng):
    z = _t(rng, 4, 3)
    y = (rng.random((4, 3)) < 0.5).astype(float)
    mask = rng.random((4, 3)) < 0.8
    return (lambda: ad.sigmoid_bce_with_logits(z, y, mask)), [z]


def _softmax_ce(rng):
    z = _t(rng, 5, 4)
    t = rng.integers(0, 4, size=5)
    mask = rng.random((5, 4)) < 0.7
    mask[np.arange(5), t] = True
    return (lambda: ad.softmax_ce_with_logits(z, t, mask)), [z]


def _softmax_ce_none(rng):
    z = _t(rng, 5, 4)
    t = rng.integers(0, 4, size=5)
    w = Tensor(rng.normal(size=5))
    return (lambda: ad.sum_all(ad.mul(ad.softmax_ce_with_logits(z, t, reduction="none"), w))), [z]


def _masked(op):
    def build(rng):
        p = _t(rng, 4, 3)
        y = rng.normal(size=(4, 3))
        mask = rng.random((4, 3)) < 0.7
        return (lambda: op(p, y, mask)), [p]
    return build


def _dropout(rng):
    x = _t(rng, 4, 5)
    seed = int(rng.integers(1 << 30))
    proj = _project(x, rng)
    return (lambda: proj(ad.dropout(x, 0.5, np.random.default_rng(seed), True))), [x]


def _concat(rng):
    a, b = _t(rng, 3, 2), _t(rng, 3, 4)
    proj = _project(ad.concat([a, b]), rng)
    return (lambda: proj(ad.concat([a, b]))), [a, b]


def _infonce(rng, use_log=True):
    n, d = int(rng.integers(2, 6)), 3
    a, p = _t(rng, n, d), _t(rng, n, d)
    mask = rng.random((n, n)) < 0.6
    np.fill_diagonal(mask, True)
    for r in range(n):
        if mask[r].sum() < 2:
            mask[r, (r + 1) % n] = True
    return (lambda: infonce_loss(a, p, mask, use_log=use_log)), [a, p]


def random_batch(rng, cards, edge_cards, num_graphs=2, frags=False):
    """A small batch of random connected graphs with in-range categorical features."""
    feats, src, dst, efeats, gids, fids = [], [], [], [], [], []
    offset = frag_offset = 0
    for g in range(num_graphs):
        n = int(rng.integers(1, 5))
        feats += [[int(rng.integers(c)) for c in cards] for _ in range(n)]
        edges = [(int(rng.integers(i)), i) for i in range(1, n)]
        edges += [(i, j) for i in range(n) for j in range(i + 2, n) if rng.random() < 0.3]
        for u, v in edges:
            ef = [int(rng.integers(c)) for c in edge_cards]
            src += [u + offset, v + offset]
            dst += [v + offset, u + offset]
            efeats += [ef, ef]
        gids += [g] * n
        if frags:
            k = int(rng.integers(1, n + 1))
            member = np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)])
            fids += (member + frag_offset).tolist()
            frag_offset += k
        offset += n
    return GraphBatch(np.asarray(feats, dtype=np.int64).reshape(len(gids), len(cards)),
                      np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64),
                      np.asarray(efeats, dtype=np.int64).reshape(len(src), len(edge_cards)),
                      np.asarray(gids, dtype=np.int64), num_graphs,
                      np.asarray(fids, dtype=np.int64) if frags else None, frag_offset)


def _encoder(edges: bool):
    def build(rng):
        if edges:
            cfg = EncoderConfig(2, 4, (5, 3, 2), (3, 2), (2, 0))
            batch = random_batch(rng, (5, 3, 2), (2, 2))
        else:
            cfg = EncoderConfig(2, 4, (6,), (), (), use_edge_features=False)
            batch = random_batch(rng, (6,), ())
        enc = Encoder(cfg, "enc", rng)
        params = list(enc.params().values())
        for t in params:
            # random biases keep pre-activations off the ReLU kink at exactly 0
            t.value = rng.normal(scale=0.5, size=t.shape)
        h, g = enc(batch)
        ph, pg = _project(h, rng), _project(g, rng)
        return (lambda: ad.add(ph(enc(batch)[0]), pg(enc(batch)[1]))), params
    return build


def _frag_pool(rng):
    batch = random_batch(rng, (3,), (), num_graphs=2, frags=True)
    h = _t(rng, batch.num_nodes, 3)
    proj = _project(frag_pool(h, batch.frag_ids, batch.num_frags), rng)
    return (lambda: proj(frag_pool(h, batch.frag_ids, batch.num_frags))), [h]


CASES = {
    "matmul": _binary(ad.matmul, (3, 4), (4, 2)),
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "add_bias": _binary(ad.add_bias, (3, 4), (4,)),
    "pairwise_dot": _binary(ad.pairwise_dot, (3, 4), (5, 4)),
    "scale": _unary(lambda x: ad.scale(x, -1.7)),
    "relu": _unary(ad.relu),
    "exp": _unary(ad.exp),
    "dropout": _dropout,
    "concat": _concat,
    "sum_all": _unary(ad.sum_all),
    "mean_all": _unary(ad.mean_all),
    "row_mean": _unary(ad.row_mean),
    "segment_sum": _segment(ad.segment_sum),
    "segment_mean": _segment(ad.segment_mean),
    "embedding_lookup": _lookup,
    "log_sum_exp": _log_sum_exp,
    "sigmoid_bce_with_logits": _bce,
    "softmax_ce_with_logits": _softmax_ce,
    "softmax_ce_per_row": _softmax_ce_none,
    "masked_mse": _masked(ad.masked_mse),
    "masked_l1": _masked(ad.masked_l1),
    "infonce": _infonce,
    "infonce_without_log": lambda rng: _infonce(rng, use_log=False),
    "frag_pool": _frag_pool,
    "molecule_encoder": _encoder(edges=True),
    "fragment_encoder": _encoder(edges=False),
}

INSTANCES = 20
TOLERANCE = 1e-4
EPS = 1e-6


def max_error(name: str, instances: int = INSTANCES, seed: int = 0) -> float:
    worst = 0.0
    with ad.precision(np.float64):
        for i in range(instances):
            rng = np.random.default_rng([seed, i, sum(map(ord, name))])
            fn, params = CASES[name](rng)
            worst = max(worst, ad.check_gradients(fn, params, EPS))
    return worst
