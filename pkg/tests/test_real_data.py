"""Full-data reproduction runs on the downloaded MNIST and CIFAR-10 sets.

Skipped unless MULTIBIN_DATA_DIR points at a data_dir filled by `python cli.py fetch`.
Run with `pytest -m slow`.
"""

import numpy as np
import pandas as pd
import pytest

import harness
from harness import ExperimentConfig, append_results_csv, random_guess, run_experiment, run_k_sweep
from model_core import load_model
from multiclass import EnsembleManifest, ceil_log2

pytestmark = pytest.mark.slow

MNIST_K4_TARGETS = {"ovo": 98.0, "ovr": 98.9, "dt": 97.4}
MNIST_K6_DT_TARGET = 95.3
TOLERANCE = 2.0


@pytest.fixture(scope="module")
def mnist_k4_results(real_data_dir, tmp_path_factory):
    """MNIST, K=4, quantum, M=40, batch 64 under each single-tree strategy"""
    out_dir = tmp_path_factory.mktemp("mnist-k4")
    results = {}
    for strategy in MNIST_K4_TARGETS:
        config = ExperimentConfig(dataset="mnist", data_dir=str(real_data_dir), out_dir=str(out_dir),
                                  model="quantum", strategy=strategy, K=4, M=40, batch=64,
                                  workers=4).validate()
        results[strategy] = run_experiment(config)
    return results


class TestMnistFourClasses:

    @pytest.mark.parametrize("strategy", sorted(MNIST_K4_TARGETS))
    def test_macro_accuracy_near_reference(self, mnist_k4_results, strategy):
        accuracy = mnist_k4_results[strategy].macro_accuracy
        assert accuracy == pytest.approx(MNIST_K4_TARGETS[strategy], abs=TOLERANCE)

    def test_strategy_spread_is_small(self, mnist_k4_results):
        accuracies = [r.macro_accuracy for r in mnist_k4_results.values()]
        assert max(accuracies) - min(accuracies) <= 5.0

    def test_tree_evaluations_within_depth(self, mnist_k4_results):
        ledger = mnist_k4_results["dt"].ledger
        assert ledger.observed_evals <= ceil_log2(4)
        assert mnist_k4_results["dt"].mean_observed_evals <= ceil_log2(4)


class TestMnistSixClassTree:

    def test_macro_accuracy_near_reference(self, real_data_dir, tmp_path):
        config = ExperimentConfig(dataset="mnist", data_dir=str(real_data_dir), out_dir=str(tmp_path),
                                  model="quantum", strategy="dt", K=6, M=20, batch=128,
                                  workers=4).validate()
        result = run_experiment(config)
        assert result.macro_accuracy == pytest.approx(MNIST_K6_DT_TARGET, abs=TOLERANCE)
        assert result.ledger.observed_evals <= ceil_log2(6)


class TestCifarSweep:

    def test_tree_accuracy_falls_with_k_and_beats_random(self, real_data_dir, tmp_path):
        template = ExperimentConfig(dataset="cifar10", data_dir=str(real_data_dir), out_dir=str(tmp_path),
                                    model="quantum", strategy="dt", workers=4).validate()
        results = run_k_sweep(template, [2, 4, 6])
        accuracies = [r.macro_accuracy for r in results]
        assert accuracies == sorted(accuracies, reverse=True)
        for result in results:
            K = result.config["K"]
            assert result.macro_accuracy >= random_guess(K) + 15.0
            assert result.ledger.observed_evals <= ceil_log2(K)


class TestRepeatability:

    def test_two_runs_give_identical_models_and_csv(self, real_data_dir, tmp_path):
        frames = []
        model_bytes = []
        for run in ("a", "b"):
            config = ExperimentConfig(dataset="mnist", data_dir=str(real_data_dir),
                                      out_dir=str(tmp_path / run), strategy="dt", K=4, epochs=3,
                                      train_limit=4000, test_limit=1000, workers=2).validate()
            result = run_experiment(config)
            append_results_csv(tmp_path / run / "results.csv", [result])
            frames.append(pd.read_csv(tmp_path / run / "results.csv"))
            model_bytes.append([p.read_bytes() for p in sorted(config.run_dir.rglob("*.model"))])
        columns = ["macro_accuracy_pct", "models_total", "worst_case_evals", "mean_observed_evals"]
        pd.testing.assert_frame_equal(frames[0][columns], frames[1][columns])
        assert model_bytes[0] == model_bytes[1]

    def test_strict_models_stay_feasible(self, real_data_dir, tmp_path):
        config = ExperimentConfig(dataset="mnist", data_dir=str(real_data_dir), out_dir=str(tmp_path),
                                  strategy="dt", K=2, epochs=5, relaxed_l1=False,
                                  train_limit=2000, test_limit=500).validate()
        result = run_experiment(config)
        assert result.macro_accuracy > 80.0
        manifest = EnsembleManifest.load(config.run_dir / harness.MANIFEST_NAME)
        for relative in manifest.entries.values():
            model = load_model(config.run_dir / relative)
            np.testing.assert_allclose(np.linalg.norm(model.hidden_weights, axis=1), 1.0, atol=1e-6)
            assert np.all(model.output_weights >= 0)
            assert model.output_weights.sum() == pytest.approx(1.0, abs=1e-6)
