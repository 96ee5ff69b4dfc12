import math

import numpy as np
import pytest

from circuit_core import NodeSpec, build_circuit, build_naive_bayes, check_structure
from circuit_inference import EvidenceBatch, backward_flows, conditional, forward, forward_marginal, log_likelihood
from circuit_learning import (EMConfig, LearningError, TrainReport, chow_liu, compile_hclt, em_fit, init_params,
                              learn_circuit, mutual_information, train_heldout_split)
from models import EvidenceMask
from tests.conftest import brute_joint


def sample_joint(c, n, seed):
    tokens, joint = brute_joint(c)
    rng = np.random.default_rng(seed)
    return tokens[rng.choice(len(tokens), size=n, p=joint / joint.sum())]


def noisy_chain(n, flip=0.1, seed=0):
    """x0 uniform, x1 copies x0, x2 copies x1, each copy flipped with probability flip"""
    rng = np.random.default_rng(seed)
    x0 = rng.integers(2, size=n)
    x1 = x0 ^ (rng.random(n) < flip)
    x2 = x1 ^ (rng.random(n) < flip)
    return np.stack([x0, x1, x2], axis=1).astype(np.int64)


class TestEMConfig:

    @pytest.mark.parametrize("kwargs", [{"epochs": 0}, {"pseudocount": -1.0}, {"hidden_size": 0},
                                        {"chunk_size": 0}, {"heldout_fraction": 1.0}])
    def test_rejects(self, kwargs):
        with pytest.raises(LearningError):
            EMConfig(**kwargs)

    def test_dict_ignores_unknown_keys(self):
        cfg = EMConfig.from_dict({"epochs": 3, "hidden_size": 4, "verbose": True})
        assert cfg.epochs == 3 and cfg.hidden_size == 4
        assert EMConfig.from_dict(cfg.to_dict()) == cfg


class TestMutualInformation:

    def test_copy_has_one_bit(self):
        tokens = np.array([[0, 0], [1, 1]] * 50)
        mi = mutual_information(tokens, np.array([2, 2]), pseudocount=0.0)
        assert mi[0, 1] == pytest.approx(math.log(2), rel=1e-12)
        assert mi[1, 0] == mi[0, 1]

    def test_independent_is_zero(self):
        tokens = np.array([[0, 0], [0, 1], [1, 0], [1, 1]] * 10)
        mi = mutual_information(tokens, np.array([2, 2]), pseudocount=0.0)
        assert mi[0, 1] == pytest.approx(0.0, abs=1e-12)


class TestChowLiu:

    def test_recovers_chain(self):
        tree = chow_liu(noisy_chain(2000))
        assert tree.edge_set() == {(0, 1), (1, 2)}
        assert tree.parent == (-1, 0, 1)
        assert tree.order == (0, 1, 2)

    def test_root_choice(self):
        tree = chow_liu(noisy_chain(2000), root=2)
        assert tree.parent == (1, 2, -1)
        assert tree.children(2) == [1]

    def test_spanning(self):
        rng = np.random.default_rng(4)
        tree = chow_liu(rng.integers(3, size=(300, 6)))
        assert len(tree.edges) == 5
        assert sorted(tree.order) == list(range(6))

    def test_bad_root(self):
        with pytest.raises(LearningError, match="root"):
            chow_liu(noisy_chain(10), root=3)

    def test_category_out_of_range(self):
        with pytest.raises(LearningError, match="out of range"):
            chow_liu(np.array([[0, 2], [1, 0]]), cards=[2, 2])

    def test_empty_dataset(self):
        with pytest.raises(LearningError, match="empty"):
            chow_liu(np.zeros((0, 3), dtype=np.int64))

    def test_relabeling_variables_relabels_edges(self):
        rng = np.random.default_rng(11)
        n = 3000
        x0 = rng.integers(2, size=n)
        x1 = x0 ^ (rng.random(n) < 0.05)
        x2 = x1 ^ (rng.random(n) < 0.15)
        x3 = x0 ^ (rng.random(n) < 0.25)
        x4 = x3 ^ (rng.random(n) < 0.35)
        tokens = np.stack([x0, x1, x2, x3, x4], axis=1).astype(np.int64)
        perm = np.array([3, 0, 4, 2, 1])
        original = chow_liu(tokens).edge_set()
        relabeled = chow_liu(tokens[:, perm]).edge_set()
        # column j of the permuted data is original variable perm[j]
        mapped = {tuple(sorted((int(perm[a]), int(perm[b])))) for a, b in relabeled}
        assert mapped == original


class TestCompileHCLT:

    @pytest.mark.parametrize("hidden", [1, 2, 4])
    def test_valid_and_normalized(self, hidden):
        tree = chow_liu(noisy_chain(500))
        c = compile_hclt(tree, hidden, [2, 2, 2])
        assert check_structure(c).valid
        _, joint = brute_joint(c)
        assert joint.sum() == pytest.approx(1.0, abs=1e-12)

    def test_uniform_before_init(self):
        c = compile_hclt(chow_liu(noisy_chain(500)), 3, [2, 2, 2])
        _, joint = brute_joint(c)
        np.testing.assert_allclose(joint, np.full(8, 1 / 8))

    def test_init_params_is_seeded(self):
        c = compile_hclt(chow_liu(noisy_chain(500)), 3, [2, 2, 2])
        a, b = init_params(c, 5), init_params(c, 5)
        assert a.equals(b)
        assert not a.equals(init_params(c, 6))
        assert check_structure(a).valid

    def test_cardinality_count(self):
        with pytest.raises(LearningError):
            compile_hclt(chow_liu(noisy_chain(50)), 2, [2, 2])


class TestEM:

    def factorized(self):
        return build_circuit([NodeSpec.input(0, (0.5, 0.5)), NodeSpec.input(1, (1 / 3, 1 / 3, 1 / 3)),
                              NodeSpec.product((0, 1))])

    def test_factorized_model_reaches_empirical_marginals(self):
        tokens = np.array([[0, 2], [1, 2], [1, 0], [1, 1]])
        report = em_fit(self.factorized(), tokens, EMConfig(epochs=3, pseudocount=0.0))
        c = report.circuit
        np.testing.assert_allclose(c.input_tables[0][0], [0.25, 0.75])
        np.testing.assert_allclose(c.input_tables[1][0], [0.25, 0.25, 0.5])
        assert report.converged
        assert report.final_avg_ll == pytest.approx(report.avg_ll[-1])

    def test_likelihood_equals_objective_without_prior(self, nb_circuit):
        tokens = sample_joint(nb_circuit, 400, seed=1)
        c = init_params(compile_hclt(chow_liu(tokens), 2, [2, 2, 2, 2]), 0)
        report = em_fit(c, tokens, EMConfig(epochs=10, pseudocount=0.0, tol=-math.inf))
        np.testing.assert_allclose(report.avg_ll, report.avg_objective)
        assert np.all(np.diff(report.avg_ll) >= -1e-9)

    def test_likelihood_never_decreases_with_smoothing(self, nb_circuit):
        tokens = sample_joint(nb_circuit, 400, seed=2)
        c = init_params(compile_hclt(chow_liu(tokens), 3, [2, 2, 2, 2]), 1)
        report = em_fit(c, tokens, EMConfig(epochs=15, pseudocount=0.5, tol=-math.inf))
        assert report.epochs_run == 15
        assert np.all(np.diff(report.avg_ll) >= -1e-8)

    @pytest.mark.parametrize("seed", range(10))
    def test_heavy_smoothing_on_small_data(self, seed):
        rng = np.random.default_rng(seed)
        tokens = rng.integers(4, size=(40, 5))
        tokens[:, 1] = tokens[:, 0]
        c = init_params(compile_hclt(chow_liu(tokens, [4] * 5), 4, [4] * 5), seed)
        report = em_fit(c, tokens, EMConfig(epochs=60, pseudocount=1.0, tol=-math.inf))
        assert np.all(np.diff(report.avg_ll) >= -1e-8)
        assert check_structure(report.circuit).valid

    def test_default_smoothing_on_hclt(self):
        tokens = noisy_chain(300, seed=5)
        c = init_params(compile_hclt(chow_liu(tokens), 4, [2, 2, 2]), 3)
        report = em_fit(c, tokens, EMConfig(epochs=30, tol=-math.inf))
        assert EMConfig().pseudocount > 0
        assert np.all(np.diff(report.avg_ll) >= -1e-8)

    def test_repeated_assignment_gets_all_mass(self):
        tokens = np.tile([1, 0, 2], (25, 1))
        c = init_params(compile_hclt(chow_liu(tokens, [2, 2, 3]), 2, [2, 2, 3]), 0)
        report = em_fit(c, tokens, EMConfig(epochs=20, pseudocount=0.0))
        assert np.exp(log_likelihood(report.circuit, tokens[:1]))[0] == pytest.approx(1.0, abs=1e-6)

    def test_naive_bayes_recovers_generating_conditionals(self, nb_circuit):
        tokens = sample_joint(nb_circuit, 50000, seed=6)
        start = build_naive_bayes(0.5, [(0.5, 0.5)] * 3)
        fitted = em_fit(start, tokens, EMConfig(epochs=3, pseudocount=0.0)).circuit
        assert math.exp(forward_marginal(fitted, EvidenceMask.of({0: 1}))) == pytest.approx(0.3, abs=0.02)
        for feature, (p_true, p_false) in enumerate([(0.8, 0.1), (0.6, 0.3), (0.2, 0.7)], start=1):
            query = EvidenceMask.of({feature: 1})
            assert math.exp(conditional(fitted, query, EvidenceMask.of({0: 1}))) == pytest.approx(p_true, abs=0.02)
            assert math.exp(conditional(fitted, query, EvidenceMask.of({0: 0}))) == pytest.approx(p_false, abs=0.02)

    def test_chunking_and_workers_agree(self, nb_circuit):
        tokens = sample_joint(nb_circuit, 300, seed=3)
        c = init_params(compile_hclt(chow_liu(tokens), 2, [2, 2, 2, 2]), 2)
        whole = em_fit(c, tokens, EMConfig(epochs=4, tol=-math.inf))
        chunked = em_fit(c, tokens, EMConfig(epochs=4, tol=-math.inf, chunk_size=64, workers=2))
        np.testing.assert_allclose(chunked.avg_ll, whole.avg_ll, rtol=1e-10)

    def test_data_width_mismatch(self):
        with pytest.raises(LearningError, match="variables"):
            em_fit(self.factorized(), np.zeros((4, 3), dtype=np.int64), EMConfig(epochs=1))

    def test_data_out_of_range(self):
        with pytest.raises(LearningError, match="out of range"):
            em_fit(self.factorized(), np.array([[0, 3]]), EMConfig(epochs=1))

    def test_fit_improves_over_init(self, nb_circuit):
        tokens = sample_joint(nb_circuit, 500, seed=4)
        report = learn_circuit(tokens, EMConfig(epochs=20, hidden_size=2, heldout_fraction=0.2, seed=3))
        assert report.avg_ll[-1] > report.avg_ll[0]
        assert report.heldout_avg_ll is not None
        assert check_structure(report.circuit).valid


class TestFlowConservation:

    def hclt(self):
        tokens = noisy_chain(64, seed=8)
        return init_params(compile_hclt(chow_liu(tokens), 3, [2, 2, 2]), 4), tokens

    def test_root_flow_equals_batch_size(self):
        c, tokens = self.hclt()
        fl = backward_flows(c, forward(c, EvidenceBatch.from_tokens(tokens)), edge_totals=True)
        assert fl.flows[c.root].sum() == pytest.approx(len(tokens))

    def test_sum_node_flow_splits_over_edges(self):
        c, tokens = self.hclt()
        fl = backward_flows(c, forward(c, EvidenceBatch.from_tokens(tokens)), edge_totals=True)
        np.testing.assert_allclose(c.sum_node_totals(np.where(c.sum_edge_mask, fl.edge_totals, 0.0)),
                                   fl.flows[c.sum_nodes].sum(axis=1), rtol=1e-10)

    @pytest.mark.parametrize("observed", [(0, 1, 2), (1,)])
    def test_each_variable_receives_unit_flow(self, observed):
        c, tokens = self.hclt()
        batch = EvidenceBatch.empty(3, len(tokens))
        for var in observed:
            batch = batch.observe(var, tokens[:, var])
        fl = backward_flows(c, forward(c, batch))
        for var in range(3):
            np.testing.assert_allclose(fl.flows[c.input_nodes[var]].sum(axis=0), np.ones(len(tokens)), rtol=1e-10)


class TestTrainHeldoutSplit:

    def test_partition(self):
        tokens = np.arange(20).reshape(10, 2)
        train, held = train_heldout_split(tokens, 0.3, seed=0)
        assert len(train) == 7 and len(held) == 3
        merged = np.sort(np.concatenate([train[:, 0], held[:, 0]]))
        np.testing.assert_array_equal(merged, tokens[:, 0])

    def test_keeps_one_training_row(self):
        train, held = train_heldout_split(np.zeros((2, 1)), 0.9, seed=0)
        assert len(train) == 1 and len(held) == 1

    def test_seeded(self):
        tokens = np.arange(40).reshape(20, 2)
        a, b = train_heldout_split(tokens, 0.25, 7), train_heldout_split(tokens, 0.25, 7)
        np.testing.assert_array_equal(a[1], b[1])


class TestTrainReport:

    def test_csv(self, tmp_path):
        report = TrainReport(avg_ll=[-2.0, -1.5], avg_objective=[-2.5, -1.75])
        path = tmp_path / "train.csv"
        report.to_csv(str(path))
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines == ["epoch,avg_ll,avg_objective", "0,-2.0,-2.5", "1,-1.5,-1.75"]
        assert report.epochs_run == 2
