import pytest

from fragpretrain.chem import parse_smiles
from fragpretrain.corpus import desk_corpus
from fragpretrain.fragmenter import fragment_corpus
from fragpretrain.vocab import extract_vocabulary

# Fixed 10-molecule corpus (<= 12 heavy atoms each) used by the mining oracle.
ORACLE_CORPUS = [
    "CCO", "CC(=O)O", "Oc1ccccc1", "CC(C)O", "OCCO",
    "c1ccncc1", "CC(=O)Nc1ccccc1", "CCN(CC)CC", "C1CCOC1", "NCC(=O)O",
]


@pytest.fixture(scope="session")
def oracle_mols():
    return [parse_smiles(s) for s in ORACLE_CORPUS]


@pytest.fixture(scope="session")
def desk_smiles():
    return desk_corpus(1000)


@pytest.fixture(scope="session")
def desk_mols(desk_smiles):
    return [parse_smiles(s) for s in desk_smiles]


@pytest.fixture(scope="session")
def desk_vocab(desk_mols):
    return extract_vocabulary(desk_mols, 200)


@pytest.fixture(scope="session")
def desk_fragmented(desk_mols, desk_vocab):
    return fragment_corpus(desk_mols, desk_vocab)


@pytest.fixture(scope="session")
def small_mols(desk_mols):
    return desk_mols[:200]


@pytest.fixture(scope="session")
def small_vocab(small_mols):
    return extract_vocabulary(small_mols, 60)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results, key=lambda k: int(k[1:])):
            terminalreporter.write_line(results[key])
