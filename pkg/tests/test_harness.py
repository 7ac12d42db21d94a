"""Few-shot sampling, evaluation, result tables, experiments, SBM tests."""

import csv
import math

import numpy as np
import pytest

from uniprompt.graphs import edge_homophily
from uniprompt.harness import (
    DEFAULT_RUNS,
    DEFAULT_SEEDS,
    ExperimentSpec,
    FewShotTask,
    ResultTable,
    RunRecord,
    evaluate,
    generate_sbm,
    noise_robustness,
    run_experiment,
    sample_k_shot,
    sweep,
)
from uniprompt.pretrain import PretrainConfig, pretrain
from uniprompt.prompt import TuneConfig


@pytest.fixture(scope="module")
def sbm():
    return generate_sbm(60, 3, 0.3, 0.05, 8, 3.0, seed=4)


@pytest.fixture(scope="module")
def encoder(sbm):
    return pretrain(sbm, PretrainConfig("dgi", epochs=10, seed=0,
                                        hidden_dim=8, embed_dim=8))


def tiny_spec(sbm, encoder, methods=("linear-probe",), **kw):
    cfg = TuneConfig(k=4, tau=0.9, max_epochs=15, patience=5, clf_hidden=8)
    defaults = dict(
        dataset="sbm",
        pretrain="dgi",
        graph=sbm,
        encoder=encoder,
        methods=tuple(methods),
        shots=(1,),
        tune={"default": cfg},
        seeds=(42, 12345),
        runs=2,
    )
    defaults.update(kw)
    return ExperimentSpec(**defaults)


class TestSampleKShot:
    def test_one_shot_three_classes(self, sbm):
        task = sample_k_shot(sbm, 1, 42, 0)
        assert task.train_ids.size == 3
        assert np.unique(sbm.labels[task.train_ids]).size == 3

    def test_stratified_counts(self, sbm):
        task = sample_k_shot(sbm, 4, 42, 1)
        for cls in range(sbm.num_classes):
            assert (sbm.labels[task.train_ids] == cls).sum() == 4

    def test_train_test_disjoint_and_exhaustive(self, sbm):
        task = sample_k_shot(sbm, 3, 12345, 7)
        assert np.intersect1d(task.train_ids, task.test_ids).size == 0
        assert task.train_ids.size + task.test_ids.size == sbm.num_nodes

    def test_deterministic_per_seed_run(self, sbm):
        a = sample_k_shot(sbm, 2, 42, 3)
        b = sample_k_shot(sbm, 2, 42, 3)
        c = sample_k_shot(sbm, 2, 42, 4)
        assert np.array_equal(a.train_ids, b.train_ids)
        assert not np.array_equal(a.train_ids, c.train_ids)

    def test_class_too_small(self):
        g = generate_sbm(9, 3, 0.5, 0.1, 4, 2.0, seed=0)
        with pytest.raises(ValueError, match="fewer than"):
            sample_k_shot(g, 5, 42, 0)

    def test_test_count_arithmetic(self, sbm):
        # |test| = N - k*C
        task = sample_k_shot(sbm, 5, 42, 0)
        assert task.test_ids.size == sbm.num_nodes - 5 * sbm.num_classes


class TestEvaluate:
    def test_all_correct(self, sbm):
        task = sample_k_shot(sbm, 1, 42, 0)
        assert evaluate(sbm.labels.copy(), task) == 1.0

    def test_random_predictor_near_chance(self, sbm):
        rng = np.random.default_rng(0)
        accs = [
            evaluate(rng.integers(0, 3, sbm.num_nodes), sample_k_shot(sbm, 1, 42, r))
            for r in range(60)
        ]
        assert abs(np.mean(accs) - 1.0 / 3.0) < 0.04

    def test_matches_confusion_matrix_oracle(self, sbm):
        rng = np.random.default_rng(1)
        preds = rng.integers(0, 3, sbm.num_nodes)
        task = sample_k_shot(sbm, 2, 42, 0)
        confusion = np.zeros((3, 3), dtype=int)
        for i in task.test_ids:
            confusion[sbm.labels[i], preds[i]] += 1
        oracle = confusion.trace() / confusion.sum()
        assert evaluate(preds, task) == pytest.approx(oracle, abs=1e-12)

    def test_dict_predictions(self, sbm):
        task = sample_k_shot(sbm, 1, 42, 0)
        mapping = {int(i): int(sbm.labels[i]) for i in task.test_ids}
        assert evaluate(mapping, task) == 1.0

    def test_missing_prediction(self, sbm):
        task = sample_k_shot(sbm, 1, 42, 0)
        with pytest.raises(ValueError, match="missing prediction"):
            evaluate({0: 1}, task)
        with pytest.raises(ValueError, match="missing prediction"):
            evaluate(np.zeros(3, dtype=int), task)


class TestResultTable:
    def make_table(self):
        table = ResultTable()
        for seed in (1, 2):
            for run in range(3):
                table.add(RunRecord("d", "p", "m", 1, seed, run,
                                    0.5 + 0.01 * run + 0.1 * seed))
        return table

    def test_aggregate_mean_and_population_std(self):
        table = self.make_table()
        rows = table.aggregate()
        assert len(rows) == 1
        _, _, _, _, _, count, mean, std = rows[0]
        accs = [r.accuracy for r in table.records]
        assert count == 6
        assert mean == pytest.approx(np.mean(accs), abs=1e-15)
        assert std == pytest.approx(np.std(accs), abs=1e-15)  # population std

    def test_csv_roundtrip_matches_aggregates(self, tmp_path):
        table = self.make_table()
        path = tmp_path / "results.csv"
        table.to_csv(path)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        accs = np.array([float(r["accuracy"]) for r in rows])
        _, _, _, _, _, _, mean, std = table.aggregate()[0]
        assert abs(accs.mean() - mean) < 1e-12
        assert abs(accs.std() - std) < 1e-12

    def test_markdown_bolds_best_method(self, tmp_path):
        table = ResultTable()
        for run in range(2):
            table.add(RunRecord("d", "p", "weak", 1, 42, run, 0.3))
            table.add(RunRecord("d", "p", "strong", 1, 42, run, 0.9))
        path = tmp_path / "results.md"
        table.to_markdown(path)
        text = path.read_text()
        assert "**90.00 ± 0.00**" in text
        assert "**30.00" not in text


class TestRunExperiment:
    def test_record_count_is_seeds_times_runs(self, sbm, encoder):
        table = run_experiment(tiny_spec(sbm, encoder))
        assert len(table.records) == 2 * 2
        for _, accs in table.cells().items():
            assert len(accs) == 4

    def test_deterministic_csv_bytes(self, sbm, encoder, tmp_path):
        spec = tiny_spec(sbm, encoder)
        t1 = run_experiment(spec)
        t2 = run_experiment(spec)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        t1.to_csv(p1)
        t2.to_csv(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_parallel_equals_serial(self, sbm, encoder, tmp_path):
        serial = run_experiment(tiny_spec(sbm, encoder))
        parallel = run_experiment(tiny_spec(sbm, encoder, workers=2))
        a, b = tmp_path / "s.csv", tmp_path / "p.csv"
        serial.to_csv(a)
        parallel.to_csv(b)
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_method_rejected(self, sbm, encoder):
        with pytest.raises(ValueError, match="unknown method"):
            run_experiment(tiny_spec(sbm, encoder, methods=("magic",)))

    def test_default_protocol_constants(self):
        assert DEFAULT_SEEDS == (42, 12345, 23344, 38108, 39788)
        assert DEFAULT_RUNS == 20
        cfg = TuneConfig()
        assert cfg.max_epochs == 2000
        assert cfg.patience == 20


class TestSweep:
    def test_singleton_grid_equals_plain_experiment(self, sbm, encoder, tmp_path):
        spec = tiny_spec(sbm, encoder)
        plain = run_experiment(spec)
        swept = sweep("tau", [0.9], spec)
        assert [r.accuracy for r in swept.records] == [r.accuracy for r in plain.records]

    def test_grid_produces_one_section_per_value(self, sbm, encoder):
        spec = tiny_spec(sbm, encoder)
        table = sweep("tau", [0.9, 1.0], spec)
        params = {r.param for r in table.records}
        assert params == {0.9, 1.0}

    def test_k_sweep_includes_table_default(self, sbm, encoder):
        spec = tiny_spec(sbm, encoder)
        table = sweep("k", [4, 8], spec)
        assert {r.param for r in table.records} == {4, 8}

    def test_empty_grid_rejected(self, sbm, encoder):
        with pytest.raises(ValueError, match="empty"):
            sweep("tau", [], tiny_spec(sbm, encoder))

    def test_unknown_param_rejected(self, sbm, encoder):
        with pytest.raises(ValueError, match="unknown sweep"):
            sweep("gamma", [1.0], tiny_spec(sbm, encoder))


class TestNoiseRobustness:
    def test_level_zero_equals_baseline(self, sbm, encoder):
        spec = tiny_spec(sbm, encoder)
        base = run_experiment(spec)
        noisy = noise_robustness([0.0], spec)
        assert [r.accuracy for r in noisy.records] == [r.accuracy for r in base.records]

    def test_three_levels_three_sections(self, sbm, encoder):
        table = noise_robustness([0.0, 0.01, 0.2], tiny_spec(sbm, encoder))
        assert {r.param for r in table.records} == {0.0, 0.01, 0.2}

    def test_negative_level_rejected(self, sbm, encoder):
        with pytest.raises(ValueError, match="non-negative"):
            noise_robustness([-0.1], tiny_spec(sbm, encoder))


class TestGenerateSbm:
    def test_zero_cross_probability_gives_homophily_one(self):
        g = generate_sbm(100, 4, 0.1, 0.0, 8, 2.0, seed=0)
        assert edge_homophily(g) == 1.0

    def test_equal_probabilities_give_chance_homophily(self):
        g = generate_sbm(400, 4, 0.05, 0.05, 8, 2.0, seed=1)
        assert abs(edge_homophily(g) - 0.25) < 0.03

    def test_edge_count_matches_binomial(self):
        n, p = 400, 0.05
        g = generate_sbm(n, 4, p, p, 8, 2.0, seed=2)
        expected = p * n * (n - 1) / 2
        assert abs(g.num_undirected_edges - expected) <= 3 * math.sqrt(expected)

    def test_balanced_classes(self):
        g = generate_sbm(103, 4, 0.1, 0.1, 8, 2.0, seed=3)
        counts = np.bincount(g.labels)
        assert counts.max() - counts.min() <= 1

    def test_feature_separation(self):
        sep = 3.5
        g = generate_sbm(4000, 4, 0.0, 0.0, 8, sep, seed=4)
        means = np.stack([g.features[g.labels == c].mean(axis=0) for c in range(4)])
        for a in range(4):
            for b in range(a + 1, 4):
                assert np.linalg.norm(means[a] - means[b]) == pytest.approx(sep, abs=0.15)

    def test_invalid_probability_rejected(self):
        with pytest.raises(ValueError, match="probabilities"):
            generate_sbm(50, 3, 1.5, 0.1, 8, 2.0, seed=0)

    def test_feature_dim_must_cover_classes(self):
        with pytest.raises(ValueError, match="feature_dim"):
            generate_sbm(50, 5, 0.1, 0.1, 3, 2.0, seed=0)
