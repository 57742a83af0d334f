"""Deterministic drug-like desk corpus.

A handful of known drugs (stereo removed) followed by template-generated
molecules: ring cores with substitution slots filled by linkers, nested
cores and terminal groups.  Used by the test-suite and the ``synth-corpus``
command so experiments run without external downloads.
"""

from __future__ import annotations

import numpy as np

from .chem import parse_smiles

KNOWN_DRUGS = [
    "CC(=O)Oc1ccccc1C(=O)O",
    "CN1C=NC2=C1C(=O)N(C(=O)N2C)C",
    "CC(C)Cc1ccc(cc1)C(C)C(=O)O",
    "CC(=O)Nc1ccc(O)cc1",
    "CN1CCC23c4c5ccc(O)c4OC2C(O)C=CC3C1C5",
    "COc1ccc2[nH]cc(CCN(C)C)c2c1",
    "CN(C)CCCN1c2ccccc2CCc2ccccc21",
    "Clc1ccc(cc1)C(c1ccccc1)N1CCN(CC1)CCOCC(=O)O",
    "CC(C)NCC(O)COc1cccc2ccccc12",
    "O=C(O)c1ccccc1O",
    "Nc1ccc(cc1)S(=O)(=O)Nc1ncccn1",
    "CN1CCN(CC1)c1ccc2nc3ccccc3n2c1",
    "COc1ccc(CCN)cc1OC",
    "OC(=O)CCc1ccc(O)cc1",
    "CCOC(=O)C1=C(C)NC(C)=C(C1c1cccc(c1)[N+](=O)[O-])C(=O)OC",
    "Fc1ccc(cc1)C(=O)CCCN1CCC(O)(CC1)c1ccc(Cl)cc1",
    "CC(C)(C)NCC(O)c1ccc(O)c(CO)c1",
    "NC(=O)N1c2ccccc2C=Cc2ccccc21",
    "CN1C(=O)CN=C(c2ccccc2)c2cc(Cl)ccc21",
    "OC(c1ccccc1)(c1ccccc1)C1CCNCC1",
    "CCN(CC)CC(=O)Nc1c(C)cccc1C",
    "Cc1ccc(cc1)S(=O)(=O)NC(=O)NN1CCCCCC1",
    "COC(=O)c1ccccc1Nc1ccnc2cc(Cl)ccc12",
    "NS(=O)(=O)c1cc(C(=O)O)c(NCc2ccco2)cc1Cl",
    "CC(=O)NC1CCCC1",
]

_CORES = [
    "c{1}ccc({R})cc{1}",
    "c{1}cc({R})ccc{1}{R}",
    "c{1}ccccc{1}{R}",
    "c{1}ccncc{1}{R}",
    "n{1}ccc({R})cc{1}",
    "c{1}ccsc{1}{R}",
    "c{1}ccoc{1}{R}",
    "c{1}cc[nH]c{1}{R}",
    "c{1}cnc({R})nc{1}",
    "C{1}CCC({R})CC{1}",
    "C{1}CCN({R})CC{1}",
    "C{1}CN({R})CCN{1}{R}",
    "C{1}COCCN{1}{R}",
    "C{1}CC{1}{R}",
    "C{1}CCCC{1}{R}",
    "c{1}ccc{2}ccccc{2}c{1}{R}",
    "c{1}ccc{2}[nH]ccc{2}c{1}{R}",
    "c{1}ccc{2}ncccc{2}c{1}{R}",
    "O=C{1}CCCN{1}{R}",
    "c{1}nc{2}ccccc{2}[nH]{1}",
]
_LINKERS = [
    "C{R}", "CC{R}", "C(=O)N{R}", "NC(=O){R}", "O{R}", "S(=O)(=O)N{R}",
    "C(=O)O{R}", "N{R}", "C=C{R}", "CO{R}", "CCN{R}", "C(=O){R}", "OCC{R}",
]
_TERMINALS = [
    "C", "CC", "F", "Cl", "Br", "O", "OC", "N", "C(=O)O", "C(F)(F)F",
    "C#N", "[N+](=O)[O-]", "C(C)C", "C(=O)N", "S(C)(=O)=O", "C(C)(C)C", "OCC", "NC",
]


class _Builder:
    def __init__(self, rng: np.random.Generator, max_depth: int):
        self.rng = rng
        self.max_depth = max_depth
        self.ring = 0

    def _ring_label(self) -> str:
        self.ring += 1
        n = self.ring
        return str(n) if n < 10 else f"%{n:02d}"

    def _expand(self, template: str, depth: int) -> str:
        labels: dict[str, str] = {}
        out = []
        i = 0
        while i < len(template):
            if template.startswith("({R})", i):
                sub = self._substituent(depth)
                out.append(f"({sub})" if sub else "")
                i += 5
            elif template.startswith("{R}", i):
                out.append(self._substituent(depth))
                i += 3
            elif template[i] == "{":
                j = template.index("}", i)
                key = template[i + 1:j]
                if key not in labels:
                    labels[key] = self._ring_label()
                out.append(labels[key])
                i = j + 1
            else:
                out.append(template[i])
                i += 1
        return "".join(out)

    def _substituent(self, depth: int) -> str:
        r = self.rng.random()
        if depth >= self.max_depth or r < 0.25:
            return ""
        if r < 0.55:
            return _TERMINALS[self.rng.integers(len(_TERMINALS))]
        linker = _LINKERS[self.rng.integers(len(_LINKERS))]
        if self.rng.random() < 0.6:
            tail = self._expand(_CORES[self.rng.integers(len(_CORES))], depth + 1)
        else:
            tail = _TERMINALS[self.rng.integers(len(_TERMINALS))]
        return linker.replace("{R}", tail)

    def molecule(self) -> str:
        self.ring = 0
        core = _CORES[self.rng.integers(len(_CORES))]
        return self._expand(core, 0)


def synthetic_smiles(n: int, seed: int = 0, max_depth: int = 2, min_atoms: int = 6,
                     max_atoms: int = 40) -> list[str]:
    """``n`` distinct generated SMILES with heavy-atom counts in ``[min_atoms, max_atoms]``."""
    rng = np.random.default_rng(seed)
    builder = _Builder(rng, max_depth)
    out: list[str] = []
    seen: set[str] = set()
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 100 * n + 1000:
            raise RuntimeError("could not generate enough distinct molecules")
        smi = builder.molecule()
        if smi in seen:
            continue
        mol = parse_smiles(smi)
        if not min_atoms <= mol.num_atoms <= max_atoms:
            continue
        seen.add(smi)
        out.append(smi)
    return out


def desk_corpus(n: int, seed: int = 0) -> list[str]:
    """Known drugs first, then synthetic molecules, ``n`` SMILES in total."""
    known = KNOWN_DRUGS[:n]
    rest = [s for s in synthetic_smiles(n, seed) if s not in known]
    return known + rest[: n - len(known)]
