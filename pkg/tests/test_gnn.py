import numpy as np
import pytest

from fragpretrain.autodiff import Tensor
from fragpretrain.chem import parse_smiles
from fragpretrain.errors import CheckpointError, FeatureOutOfRange, MembershipGap
from fragpretrain.fragmenter import FragmentGraph, fragment_molecule
from fragpretrain.gnn import (
    Encoder,
    EncoderConfig,
    assign_params,
    frag_pool,
    fragment_graph_batch,
    load_checkpoint,
    molecule_batch,
    save_checkpoint,
    xavier,
)

from gradcases import TOLERANCE, max_error


def permuted_mol_batch(mol, perm):
    """Batch for ``mol`` with atom i renamed perm[i]."""
    batch = molecule_batch([mol])
    inv = np.argsort(perm)
    batch.node_feats = batch.node_feats[inv]
    batch.edge_src = perm[batch.edge_src]
    batch.edge_dst = perm[batch.edge_dst]
    return batch


@pytest.fixture
def mol_encoder():
    return Encoder(EncoderConfig.molecule(3, 16), "mol", np.random.default_rng(0))


class TestEncoder:
    def test_shapes(self, mol_encoder):
        mols = [parse_smiles(s) for s in ["CCO", "c1ccccc1", "CC(=O)N"]]
        h, g = mol_encoder(molecule_batch(mols))
        assert h.shape == (13, 16) and g.shape == (3, 16)

    def test_permutation_invariance(self, mol_encoder):
        rng = np.random.default_rng(1)
        mol = parse_smiles("CC(=O)Nc1ccc(O)cc1")
        _, ref = mol_encoder(molecule_batch([mol]))
        h_ref, _ = mol_encoder(molecule_batch([mol]))
        for _ in range(10):
            perm = rng.permutation(mol.num_atoms)
            h, g = mol_encoder(permuted_mol_batch(mol, perm))
            np.testing.assert_allclose(g.value, ref.value, atol=1e-5)
            np.testing.assert_allclose(h.value[perm], h_ref.value, atol=1e-5)

    def test_isomorphic_graphs_same_embedding(self, mol_encoder):
        _, g = mol_encoder(molecule_batch([parse_smiles("OCC"), parse_smiles("CCO")]))
        np.testing.assert_allclose(g.value[0], g.value[1], atol=1e-6)

    def test_single_node_zero_weights(self):
        enc = Encoder(EncoderConfig.molecule(2, 4), "m", np.random.default_rng(0))
        for t in enc.params().values():
            t.value[...] = 0
        h, _ = enc(molecule_batch([parse_smiles("C")]))
        assert h.value.tolist() == [[0.0] * 4]

    def test_feature_out_of_range(self):
        enc = Encoder(EncoderConfig.fragment(5, 2, 8), "f", np.random.default_rng(0))
        with pytest.raises(FeatureOutOfRange):
            enc(fragment_graph_batch([FragmentGraph([7], [])]))

    def test_fragment_encoder_equivariance(self):
        enc = Encoder(EncoderConfig.fragment(6, 2, 8), "f", np.random.default_rng(0))
        a = FragmentGraph([0, 3, 5], [(0, 1), (1, 2)])
        b = FragmentGraph([5, 0, 3], [(1, 2), (0, 2)])  # node i of b is node (2, 0, 1)[i] of a
        ha, _ = enc(fragment_graph_batch([a]))
        hb, _ = enc(fragment_graph_batch([b]))
        np.testing.assert_allclose(hb.value, ha.value[[2, 0, 1]], atol=1e-6)

    def test_isolated_fragment_depends_on_rank_only(self):
        enc = Encoder(EncoderConfig.fragment(6, 2, 8), "f", np.random.default_rng(0))
        h, _ = enc(fragment_graph_batch([FragmentGraph([4], []), FragmentGraph([4, 1], [(0, 1)])]))
        h2, _ = enc(fragment_graph_batch([FragmentGraph([4], [])]))
        np.testing.assert_allclose(h.value[0], h2.value[0], atol=1e-6)

    def test_xavier_bounds(self):
        w = xavier(np.random.default_rng(0), 30, 70)
        assert np.abs(w).max() <= np.sqrt(6 / 100)

    def test_fragment_config_has_no_edges(self):
        assert not EncoderConfig.fragment(10).use_edge_features

    @pytest.mark.parametrize("name", ["molecule_encoder", "fragment_encoder"])
    def test_gradients(self, name):
        assert max_error(name, instances=5) < TOLERANCE


class TestFragPool:
    def test_singletons_identity(self):
        h = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
        np.testing.assert_array_equal(frag_pool(h, np.arange(4), 4).value, h.value)

    def test_matches_direct_means(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n, k = int(rng.integers(5, 30)), int(rng.integers(1, 5))
            ids = np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)])
            h = Tensor(rng.normal(size=(n, 8)))
            pooled = frag_pool(h, ids, k).value
            for r in range(k):
                np.testing.assert_allclose(pooled[r], h.value[ids == r].mean(axis=0), atol=1e-6)
            sizes = np.bincount(ids, minlength=k)
            np.testing.assert_allclose((pooled * sizes[:, None]).sum(axis=0), h.value.sum(axis=0), atol=1e-4)

    def test_gap(self):
        with pytest.raises(MembershipGap):
            frag_pool(Tensor(np.zeros((2, 3))), [0, 2], 3)

    def test_rows_match_fragment_encoder(self, small_mols, small_vocab):
        enc_m = Encoder(EncoderConfig.molecule(2, 8), "mol", np.random.default_rng(0))
        enc_f = Encoder(EncoderConfig.fragment(len(small_vocab), 2, 8), "frag", np.random.default_rng(1))
        from fragpretrain.fragmenter import build_fragment_graph
        mols = small_mols[:16]
        frags = [fragment_molecule(m, small_vocab) for m in mols]
        mb = molecule_batch(mols, frags)
        h, _ = enc_m(mb)
        hf, _ = enc_f(fragment_graph_batch([build_fragment_graph(m, f) for m, f in zip(mols, frags)]))
        assert frag_pool(h, mb.frag_ids, mb.num_frags).shape == hf.shape


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path, mol_encoder):
        path = tmp_path / "ck.json"
        save_checkpoint(path, {"mol": mol_encoder.config.to_dict()}, mol_encoder.params())
        cfg, arrays = load_checkpoint(path)
        assert EncoderConfig.from_dict(cfg["mol"]) == mol_encoder.config
        for name, t in mol_encoder.params().items():
            assert arrays[name].tobytes() == t.value.tobytes()
        other = Encoder(mol_encoder.config, "mol", np.random.default_rng(9))
        assign_params(other.params(), arrays)
        mol = parse_smiles("CCN")
        assert np.array_equal(other(molecule_batch([mol]))[1].value, mol_encoder(molecule_batch([mol]))[1].value)

    def test_format_checked(self, tmp_path):
        path = tmp_path / "ck.json"
        path.write_text('{"format": "other"}')
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_tensor(self, mol_encoder):
        with pytest.raises(CheckpointError):
            assign_params(mol_encoder.params(), {})
