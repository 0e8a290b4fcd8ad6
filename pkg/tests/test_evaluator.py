import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chanmoe.evaluator import (MetricReport, ablation_table, avg_metric, baseline_bi, baseline_codebook,
                               efficiency_report, evaluate, interpolate_comb, loss_increase_ratio, mae, nmse,
                               parameter_breakdown, pearson_matrix, read_report, score_task, se_eval, top1,
                               write_ablation_table, write_matrix, write_report)
from chanmoe.exceptions import ConfigurationError, ShapeError
from chanmoe.moe_lora import ExpertWeightRecord, moe_parameter_formula
from chanmoe.signal_ops import SeConfig, dft_codebook
from chanmoe.tasks import TASKS, TaskId, TaskSplit, to_real

from conftest import tiny_model, tiny_splits


def crandn(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


class TestMetrics:
    def test_trivial(self):
        y = np.random.default_rng(0).normal(size=(3, 4))
        assert nmse(y, y) == 0 and mae(y, y) == 0
        assert nmse(np.zeros_like(y), y) == pytest.approx(1.0)
        assert top1(np.eye(4)[[1, 2]], np.array([1, 2])) == 1.0

    def test_hand_case(self):
        pred = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
        truth = np.array([[1.0, 1.0], [0.0, 1.0], [2.0, 0.0]])
        # Per-sample ratios: 1/2, 1/1, 2/4.
        assert abs(nmse(pred, truth) - (0.5 + 1.0 + 0.5) / 3) < 1e-12
        assert abs(nmse(pred, truth, per_sample=False) - 4 / 7) < 1e-12
        assert abs(mae([0.1, 0.5, 0.9], [0.2, 0.2, 0.2]) - (0.1 + 0.3 + 0.7) / 3) < 1e-12
        logits = np.array([[0.1, 0.9], [0.8, 0.2], [0.3, 0.7]])
        assert abs(top1(logits, np.array([1, 1, 1])) - 2 / 3) < 1e-12

    def test_complex_inputs(self):
        h = crandn(np.random.default_rng(1), 2, 5)
        assert nmse(h * 1.1, h) == pytest.approx(0.01)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nmse(np.ones(3), np.ones(4))
        with pytest.raises(ShapeError):
            mae(np.ones(3), np.ones(4))


class TestAvg:
    def test_reference_rows(self):
        row = {"CE": 0.103, "CP": 0.106, "PF": 0.100, "BF": 0.904, "DE": 0.087, "PE": 0.028}
        assert round(avg_metric(row), 3) == 0.087
        bi = {"CE": 0.654, "CP": 1.796, "PF": 1.293, "BF": 0.288, "DE": 0.249, "PE": 0.204}
        assert round(avg_metric(bi), 3) == 0.818

    def test_perfect(self):
        perfect = {t: {"nmse": 0.0, "top1": 1.0, "mae": 0.0} for t in TASKS}
        assert avg_metric(perfect) == 0.0

    def test_missing(self):
        with pytest.raises(ConfigurationError):
            avg_metric({"CE": 0.1})


class TestSpectralEfficiency:
    def test_scalar_case(self):
        h = np.ones((1, 1, 1), complex)
        got, best = se_eval("CE", h, h, SeConfig(10.0))
        assert got == pytest.approx(np.log2(11), abs=1e-12) and best == got

    def test_perfect_prediction_attains_maximum(self):
        H = crandn(np.random.default_rng(2), 5, 4, 16, 8)
        got, best = se_eval("CP", H, H)
        assert got == pytest.approx(best, rel=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_upper_bound(self, seed):
        rng = np.random.default_rng(seed)
        H = crandn(rng, 4, 3, 6, 8)
        pred = H + crandn(rng, *H.shape) * rng.uniform(0, 3)
        got, best = se_eval("PF", pred, H, per_sample=True)
        assert np.all(got <= best + 1e-9)

    def test_beams(self):
        cb = dft_codebook(16, 32)
        rng = np.random.default_rng(3)
        H = crandn(rng, 6, 4, 16)
        _, best = se_eval("BF", np.zeros(6, int), H, codebook=cb, per_sample=True)
        for _ in range(5):
            got, _ = se_eval("BF", rng.integers(0, 32, 6), H, codebook=cb, per_sample=True)
            assert np.all(got <= best + 1e-12)

    def test_undefined_for_scalars(self):
        with pytest.raises(ConfigurationError):
            se_eval("DE", np.ones(2), np.ones(2))
        with pytest.raises(ConfigurationError):
            se_eval("BF", np.zeros(2, int), np.ones((2, 4, 4)))


class TestBaselines:
    def test_ce_flat_exact(self):
        x = to_real(np.broadcast_to(crandn(np.random.default_rng(4), 2, 16, 1, 8), (2, 16, 16, 8)))
        pred = baseline_bi("CE", x)
        assert pred.shape == (2, 16, 64, 16)
        np.testing.assert_allclose(pred, np.repeat(x[:, :, :1], 64, axis=2), atol=1e-12)

    def test_ce_linear_between_pilots(self):
        k = np.arange(0, 64, 4, dtype=float)
        out = interpolate_comb(k[None, :, None], 64, 4, axis=-2)[0, :, 0]
        np.testing.assert_allclose(out[:61], np.arange(61.0))
        assert np.all(out[60:] == 60.0)

    def test_cp_linear_in_time(self):
        t = np.arange(16, dtype=float).reshape(1, 16, 1, 1)
        x = np.broadcast_to(3.0 + 0.5 * t, (1, 16, 4, 2))
        pred = baseline_bi("CP", x, horizon=4)
        np.testing.assert_allclose(pred[0, :, 0, 0], 3.0 + 0.5 * np.arange(16, 20))

    def test_pf_nearest(self):
        x = np.random.default_rng(5).normal(size=(2, 16, 32, 16))
        pred = baseline_bi("PF", x)
        assert pred.shape == x.shape and np.all(pred == x[:, :, -1:])

    def test_bi_undefined_for_bf(self):
        with pytest.raises(ConfigurationError):
            baseline_bi("BF", np.ones((1, 1, 4, 4)))

    def test_codebook_baseline_grid_channel(self):
        cb = dft_codebook(8, 256)
        H = np.tile(cb.matrix[:, 40], (1, 1, 64, 1))
        assert baseline_codebook(to_real(H), 256, 64).tolist() == [40]


class TestReports:
    def test_report_roundtrip(self, tmp_path):
        metrics = {t: {"nmse": 0.1, "top1": 0.5, "mae": 0.2} for t in TASKS}
        rep = MetricReport("m", metrics)
        path = write_report([rep], tmp_path / "r.tsv", {"seed": 3})
        text = path.read_text()
        assert text.startswith("# schema: metrics v1\n# seed: 3\n")
        back = read_report(path)
        assert back["m"]["ALL"]["avg"] == pytest.approx(rep.avg)
        assert back["m"]["BF"]["top1"] == 0.5

    def test_evaluate_tiny_model(self):
        rep = evaluate(tiny_model(), tiny_splits(), se_cfg=SeConfig())
        assert set(rep.metrics) == set(TASKS)
        assert rep.metrics[TaskId.CE]["se"] <= rep.metrics[TaskId.CE]["se_max"] + 1e-9
        assert 0 <= rep.metrics[TaskId.BF]["top1"] <= 1
        assert np.isfinite(rep.avg)

    def test_score_bf_with_aux(self):
        cb = dft_codebook(8, 16)
        aux = np.tile(cb.matrix[:, 3], (2, 1, 4, 1))
        split = TaskSplit(TaskId.BF, np.zeros((2, 1, 4, 16)), np.array([3, 3]), np.arange(2), aux)
        logits = np.eye(16)[[3, 5]]
        out = score_task("BF", logits, split, SeConfig(), cb)
        assert out["top1"] == 0.5 and out["se"] < out["se_max"]


class TestPearson:
    def records(self, omegas, layer="0.fc_in"):
        return [ExpertWeightRecord(layer, t, np.asarray(w, float)) for t, w in zip(TASKS, omegas)]

    def test_symmetric_unit_diagonal(self):
        rng = np.random.default_rng(6)
        omegas = [rng.dirichlet(np.ones(8)) for _ in TASKS]
        R = pearson_matrix(self.records(omegas), "0.fc_in")
        assert R.shape == (6, 6)
        assert np.all(np.diag(R) == 1.0)
        assert np.max(np.abs(R - R.T)) <= 1e-12
        assert R[0, 1] == pytest.approx(np.corrcoef(omegas[0], omegas[1])[0, 1], abs=1e-12)

    def test_identical_and_one_hot(self):
        rng = np.random.default_rng(7)
        omegas = [rng.dirichlet(np.ones(8)) for _ in TASKS]
        omegas[1] = omegas[0].copy()
        omegas[2], omegas[3] = np.eye(8)[0], np.eye(8)[1]
        R = pearson_matrix(self.records(omegas), "0.fc_in")
        assert R[0, 1] == pytest.approx(1.0, abs=1e-12)
        # One-hot pair over E experts: -1 / (E - 1).
        assert R[2, 3] == pytest.approx(-1 / 7, abs=1e-12)

    def test_zero_variance_sentinel(self):
        omegas = [np.full(8, 1 / 8)] + [np.random.default_rng(i).dirichlet(np.ones(8)) for i in range(5)]
        R = pearson_matrix(self.records(omegas), "0.fc_in")
        assert np.isnan(R[0, 1]) and R[0, 0] == 1.0

    def test_missing_layer(self, tmp_path):
        with pytest.raises(ConfigurationError):
            pearson_matrix(self.records([np.ones(2)] * 6), "1.fc_out")
        path = write_matrix(np.eye(6), tmp_path / "p.tsv")
        assert path.read_text().splitlines()[1] == "\tCE\tCP\tPF\tBF\tDE\tPE"


class TestAblationAndEfficiency:
    def test_ratio_and_table(self, tmp_path):
        base = {t: {"nmse": 0.1, "top1": 0.9, "mae": 0.1} for t in TASKS}
        worse = {t: {"nmse": 0.2, "top1": 0.8, "mae": 0.2} for t in TASKS}
        rows = ablation_table({"full": MetricReport("full", base), "no-backbone": MetricReport("nb", worse)})
        assert rows[0]["increase_ratio"] == 0.0
        assert rows[1]["increase_ratio"] == pytest.approx(1.0)
        assert loss_increase_ratio(0.12, 0.1) == pytest.approx(0.2)
        text = write_ablation_table(rows, tmp_path / "a.tsv").read_text().splitlines()
        assert text[0] == "# schema: ablation v1" and text[2].startswith("full\t")

    def test_counts_match_formula(self):
        model = tiny_model()
        counts = parameter_breakdown(model)
        d, h = 16, 64
        assert counts["moe_lora"] == moe_parameter_formula([(d, h), (h, d)], 2, 2, 6)
        assert counts["trainable_stage2"] == counts["moe_lora"] + counts["heads"]
        frozen = sum(p.numel() for n, p in model.backbone.named_parameters()
                     if not any(s in n.split(".") for s in ("A", "B", "gate")))
        assert counts["backbone_frozen"] == frozen
        assert counts["total"] == sum(p.numel() for p in model.parameters())

    def test_efficiency_timing(self):
        rep = efficiency_report(tiny_model(), tiny_splits(), batch_size=4, repeats=3, warmup=1)
        assert rep["infer_batch_CE"] == 4 and rep["infer_ms_PE"] > 0 and rep["timing_repeats"] == 3
        with pytest.raises(ConfigurationError):
            efficiency_report(tiny_model(), tiny_splits(), repeats=0)
