import csv

import numpy as np
import pytest
import torch

from cacheformer import oracles
from cacheformer.diagnostics import (
    analytic_gradients,
    bench_config,
    causality_violation,
    compare_gradients,
    dump_attention,
    fit_slope,
    format_segment_row,
    grad_check,
    numeric_gradients,
    randomize_parameters,
    run_check_suite,
    scaling_bench,
    write_matrix_csv,
)
from cacheformer.model import LanguageModel, cross_entropy


class TestOracles:
    def test_dense_oracle_hand_case(self):
        Q = np.array([[1.0], [1.0]])
        K = np.array([[0.0], [np.log(3.0)]])
        V = np.array([[1.0], [5.0]])
        weights, out = oracles.dense_causal_oracle(Q, K, V)
        assert np.allclose(weights, [[1.0, 0.0], [0.25, 0.75]])
        assert np.allclose(out, [[1.0], [4.0]])

    def test_selection_oracle_hand_case(self):
        avg = np.zeros((2, 8))
        avg[1, 2] = 1.0
        # 8 segments of 2, blocks of 8 tokens: block 1 may use segments 0..3
        assert oracles.selection_oracle(avg, 1, 3, 8, 2) == [[-1, -1, -1], [1, 2, 3]]

    def test_projection_oracle_uniform_scores(self):
        X = np.arange(8.0).reshape(8, 1)
        out = oracles.projection_oracle(X, np.zeros((1, 1)), 4)
        assert np.allclose(out, [[1.5], [5.5]])


class TestGradCheck:
    @pytest.mark.parametrize("mode", ["joint_softmax", "literal_branch"])
    def test_passes(self, tiny_config, mode):
        report = grad_check(tiny_config.replace(aggregation_mode=mode), max_entries=12)
        assert report.passed, report.offenders
        assert report.max_relative_error < 1e-4

    def test_flags_corrupted_gradient(self, tiny_config):
        model = LanguageModel(tiny_config).double()
        randomize_parameters(model, 0)
        tokens = torch.randint(0, 256, (1, tiny_config.n))

        def loss_fn():
            return cross_entropy(model(tokens), tokens)

        analytic = analytic_gradients(model, loss_fn)
        numeric = numeric_gradients(model, loss_fn, max_entries=8)
        assert compare_gradients(analytic, numeric, 1e-4).passed
        analytic["blocks.0.attn.query.weight"] *= 1.01
        report = compare_gradients(analytic, numeric, 1e-4)
        assert report.offenders == ["blocks.0.attn.query.weight"]

    def test_disconnected_parameter(self, tiny_config):
        model = LanguageModel(tiny_config)
        randomize_parameters(model, 1)
        model.spare = torch.nn.Parameter(torch.ones(3))
        report = grad_check(tiny_config, model=model, max_entries=4)
        assert report.per_parameter["spare"]["max_rel"] == 0.0
        assert report.per_parameter["spare"]["analytic_norm"] == 0.0
        assert report.passed

    def test_zero_floor(self):
        report = compare_gradients({"p": torch.zeros(2)}, {"p": (np.arange(2), np.array([0.0, 1e-12]))}, 1e-4)
        assert report.per_parameter["p"]["max_rel"] == pytest.approx(1e-4)


class TestDump:
    @pytest.fixture
    def dumped(self, tmp_path, tiny_config):
        torch.manual_seed(0)
        model = LanguageModel(tiny_config)
        tokens = torch.randint(0, 256, (tiny_config.n,))
        return tiny_config, dump_attention(model, tokens, 0, 1, tmp_path)

    def test_files(self, dumped):
        _, paths = dumped
        assert set(paths) == {"segment_scores", "selection", "short_weights", "long_weights",
                              "overlap_weights", "cache_weights", "aggregated"}

    def test_selection_trace(self, dumped):
        cfg, paths = dumped
        rows = list(csv.DictReader(paths["selection"].open()))
        assert len(rows) == cfg.m
        assert rows[0]["segments"] == format_segment_row([-1] * (cfg.k * cfg.u))
        for row in rows:
            segs = [int(x) for x in row["segments"].strip("[]").split(",")]
            assert all(j <= int(row["max_allowed"]) for j in segs)
            assert int(row["last_token"]) - int(row["first_token"]) == cfg.p_avg - 1

    def test_matrix_shapes(self, dumped):
        cfg, paths = dumped
        with paths["aggregated"].open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == [str(i) for i in range(cfg.f)]
        assert len(rows) == cfg.n + 1
        scores = np.loadtxt(paths["segment_scores"], delimiter=",", skiprows=1)
        assert scores.shape == (cfg.m, cfg.n_s)

    def test_bad_indices(self, tmp_path, tiny_config):
        model = LanguageModel(tiny_config)
        tokens = torch.zeros(tiny_config.n, dtype=torch.long)
        with pytest.raises(ValueError, match="layer"):
            dump_attention(model, tokens, 1, 0, tmp_path)
        with pytest.raises(ValueError, match="head"):
            dump_attention(model, tokens, 0, 2, tmp_path)

    def test_matrix_writer_format(self, tmp_path):
        path = write_matrix_csv(tmp_path / "m.csv", [[1.0, 1 / 3]])
        assert path.read_text() == "0,1\n1,0.333333333\n"

    def test_segment_row_format(self):
        assert format_segment_row([8, 29, -1]) == "[8, 29, -1]"


class TestBench:
    def test_config_rule(self):
        assert bench_config(2048).s == 16 and bench_config(2048).f == 752
        assert bench_config(8192).s == 32
        assert bench_config(512).p_avg == 256

    def test_fit_slope(self):
        ns = [100, 200, 400]
        assert fit_slope(ns, [n ** 2 * 1e-9 for n in ns]) == pytest.approx(2.0)

    def test_small_run(self, tmp_path):
        report = scaling_bench((512, 1024), repeats=1)
        assert {r["variant"] for r in report.rows} == {"dense", "enhanced"}
        assert all(r["median_seconds"] > 0 for r in report.rows)
        path = report.write_csv(tmp_path / "s.csv")
        header = path.read_text().splitlines()[0]
        assert header == "n,variant,median_seconds,peak_bytes,slope"


class TestCheckSuite:
    def test_all_pass(self, tiny_config):
        results = run_check_suite(tiny_config, selection_instances=200)
        assert all(r.passed for r in results), [(r.name, r.detail) for r in results]

    def test_causality_violation_zero(self, tiny_config):
        model = LanguageModel(tiny_config).double()
        randomize_parameters(model, 0)
        gen = torch.Generator().manual_seed(0)
        tokens = torch.randint(0, 256, (tiny_config.n,), generator=gen)
        assert causality_violation(model, tokens, 10, gen) == 0.0
