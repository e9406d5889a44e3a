import json

import numpy as np
import pytest
from conftest import make_batches

from flat.compress import compress_model
from flat.forward import importance_scores, run_calibration
from flat.iprs import make_plan
from flat.model import ModelConfig, random_model
from flat.pca import reconstruction_error, sym_eig, tail_sum, truncate
from flat.verify import (
    ReconReport,
    check_multihead_tail_identity,
    check_tail_identity,
    compare_allocations,
    end_to_end_report,
    grid_oracle,
    mode_comparison,
    suite_alloc,
    suite_theorems,
)


class TestTailIdentity:
    def test_fixed_case(self):
        assert check_tail_identity(7, 32, 8, 3) <= 1e-8

    def test_svd_oracle(self):
        Y = np.random.default_rng(7).standard_normal((32, 8)) * np.geomspace(1, 1e-2, 8)
        U, sig, Vt = np.linalg.svd(Y, full_matrices=False)
        svd_err = np.sum((Y - Y @ Vt[:3].T @ Vt[:3]) ** 2)
        assert abs(svd_err - np.sum(sig[3:] ** 2)) <= 1e-10 * np.sum(Y ** 2)
        eig = sym_eig(Y.T @ Y)
        assert abs(reconstruction_error(Y, truncate(eig, 3)) - svd_err) <= 1e-10 * np.sum(Y ** 2)
        assert abs(tail_sum(eig, 3) - svd_err) <= 1e-10 * np.sum(Y ** 2)

    def test_full_rank(self):
        assert check_tail_identity(1, 20, 6, 6) <= 1e-12

    def test_fewer_rows_than_columns(self):
        assert check_tail_identity(2, 3, 10, 2) <= 1e-8

    def test_rank_out_of_range(self):
        with pytest.raises(ValueError):
            check_tail_identity(0, 5, 4, 5)


class TestMultiHead:
    @pytest.mark.parametrize("H", [1, 4, 8])
    def test_heads(self, H):
        assert check_multihead_tail_identity(3, H, 40, 6, 2) <= 1e-8

    def test_identical_heads_sum(self):
        # H copies of one head: error is H times the single-head error
        Y = np.random.default_rng(4).standard_normal((30, 5))
        eig = sym_eig(Y.T @ Y)
        one = reconstruction_error(Y, truncate(eig, 2))
        Y4 = np.concatenate([Y] * 4, axis=1)
        recon = np.concatenate([Y @ truncate(eig, 2).projector()] * 4, axis=1)
        assert abs(np.sum((Y4 - recon) ** 2) - 4 * one) <= 1e-10 * np.sum(Y4 ** 2)
        assert abs(4 * one - 4 * tail_sum(eig, 2)) <= 1e-8 * np.sum(Y4 ** 2)


class TestGridOracle:
    def test_worked_instance(self):
        res = compare_allocations([0.6, 0.3, 0.1], 1 / 3, 0.01)
        np.testing.assert_allclose(res["oracle"], [1.0, 0.7, 0.3], atol=1e-12)
        np.testing.assert_allclose(res["greedy"], [1.0, 0.75, 0.25], atol=1e-12)
        # greedy clipping is not the Euclidean projection onto the box-budget set
        assert res["objective_gap"] == pytest.approx(np.sqrt(0.065) - np.sqrt(0.06), abs=1e-12)
        assert res["objective_gap"] > 0
        assert res["oracle_budget_error"] <= 1e-9 and res["greedy_budget_error"] <= 1e-9

    def test_no_clip_on_grid(self):
        res = compare_allocations([1, 1, 1, 1], 0.25, 0.01)
        assert res["objective_gap"] == 0.0
        np.testing.assert_allclose(res["oracle"], [0.75] * 4, atol=1e-12)

    def test_two_layers(self):
        w = grid_oracle(np.array([1.2, 0.4]), 1.6, 0.1)
        np.testing.assert_allclose(w, [1.0, 0.6], atol=1e-12)

    def test_single_layer(self):
        assert grid_oracle(np.array([0.7]), 0.7, 0.01).tolist() == [0.7]

    def test_bad_step(self):
        with pytest.raises(ValueError):
            grid_oracle(np.array([0.5, 0.5]), 1.0, 0.3)

    def test_too_many_layers(self):
        with pytest.raises(ValueError):
            compare_allocations(np.ones(7), 0.1)


class TestEndToEnd:
    def setup_model(self, gqa_config):
        layers = random_model(gqa_config, 2)
        cap = run_calibration(layers, make_batches(3, 3, 32, gqa_config.d_hid), gqa_config)
        return layers, cap, importance_scores(cap)

    def test_lossless(self, gqa_config):
        layers, cap, t = self.setup_model(gqa_config)
        comp = compress_model(layers, cap, make_plan(t, 0.0, gqa_config), gqa_config)
        x = make_batches(50, 1, 24, gqa_config.d_hid)[0]
        rep = end_to_end_report(layers, comp, x, gqa_config)
        assert rep.output_error <= 1e-10
        assert rep.max_error("teacher_forced") <= 1e-10

    def test_reports_both_modes(self, gqa_config):
        layers, cap, t = self.setup_model(gqa_config)
        comp = compress_model(layers, cap, make_plan(t, 0.3, gqa_config), gqa_config)
        x = make_batches(51, 1, 24, gqa_config.d_hid)[0]
        rep = end_to_end_report(layers, comp, x, gqa_config)
        first = rep.layers[0]
        # the first layer sees identical inputs in both modes
        assert first["teacher_forced"] == first["free_running"]
        assert rep.layers[-1]["teacher_forced"]["decoder"] != rep.layers[-1]["free_running"]["decoder"]
        assert rep.output_error == pytest.approx(rep.layers[-1]["free_running"]["decoder"], rel=1e-12)

    def test_teacher_forced_attention_error_grows_with_sparsity(self, gqa_config):
        layers, cap, t = self.setup_model(gqa_config)
        x = make_batches(52, 1, 24, gqa_config.d_hid)[0]
        errs = []
        for s in (0.1, 0.2, 0.4):
            comp = compress_model(layers, cap, make_plan(t, s, gqa_config, "uniform"), gqa_config)
            rep = end_to_end_report(layers, comp, x, gqa_config)
            errs.append(np.mean([layer["teacher_forced"]["attn"] for layer in rep.layers]))
        assert errs[0] <= errs[1] <= errs[2]

    def test_report_json_roundtrip(self, gqa_config):
        layers, cap, t = self.setup_model(gqa_config)
        comp = compress_model(layers, cap, make_plan(t, 0.2, gqa_config), gqa_config)
        rep = end_to_end_report(layers, comp, make_batches(53, 1, 8, 32)[0], gqa_config, {"s": 0.2})
        d = json.loads(rep.to_json())
        assert d["schema_version"] == 1
        back = ReconReport.from_dict(d)
        assert back.to_json() == rep.to_json()

    def test_layer_count_mismatch(self, gqa_config, gqa_model):
        with pytest.raises(ValueError):
            end_to_end_report(gqa_model, gqa_model[:2], np.zeros((3, 32)), gqa_config)


def test_suites_pass():
    assert suite_theorems(0, trials=20)["passed"]
    assert suite_alloc(0, trials=100)["passed"]


def test_mode_comparison_shape():
    c = ModelConfig(d_hid=32, d_head=8, n_q_heads=4, n_kv_heads=2, d_int=48, n_layers=3)
    out = mode_comparison(c, 0, [0.3], [1.0, 0.1, 1.0], n_batches=2, n_tokens=16)
    assert set(out["errors"]["0.3"]) == {"uniform", "iprs"}
    assert out["t"][1] < out["t"][0]
