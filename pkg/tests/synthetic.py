"""Separable labelled datasets built from a fragmentation."""

import numpy as np

from fragpretrain.downstream import LabeledDataset
from fragpretrain.fragmenter import fragment_molecule


def fragment_presence_dataset(smiles, mols, vocab, min_atoms=5):
    """Label each molecule by whether one chosen multi-atom pattern is among its pieces.

    The pattern is the one whose presence rate is closest to one half.
    Returns (dataset, chosen code).
    """
    ranks = [set(fragment_molecule(m, vocab).ranks) for m in mols]
    best, best_gap = None, 1.0
    for p in vocab.patterns:
        if p.num_atoms < min_atoms:
            continue
        rate = np.mean([p.rank in r for r in ranks])
        if abs(rate - 0.5) < best_gap:
            best, best_gap = p, abs(rate - 0.5)
    y = np.array([[float(best.rank in r)] for r in ranks])
    return LabeledDataset(list(smiles), list(mols), y, ["has_fragment"], "binary"), best.code
