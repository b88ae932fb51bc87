import csv
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_localization_recall, brute_retrieval_recall

from textloc.coarse import build_coarse_model, build_index
from textloc.errors import IndexFingerprintError
from textloc.evaluation import (
    evaluate,
    localization_recall,
    masked_cells,
    normalized_error,
    positive_cells,
    retrieval_recall,
    run_ablation_attention,
    run_ablation_queries,
    run_robustness,
    text_embeddings,
)
from textloc.fine import build_fine_model
from textloc.plotting import plot_ablation, plot_eval_report, plot_loss_curve, plot_robustness


class TestRetrievalRecall:
    def test_hand_count(self):
        r = retrieval_recall([[7, 1, 2], [3, 7, 1]], [{7}, {7}], ks=(1, 3))
        assert r == {1: 0.5, 3: 1.0}

    def test_perfect(self):
        r = retrieval_recall([[1, 2], [2, 1]], [{1}, {2}])
        assert set(r.values()) == {1.0}

    def test_errors(self):
        with pytest.raises(ValueError):
            retrieval_recall([], [])
        with pytest.raises(ValueError):
            retrieval_recall([[1]], [])


class TestLocalizationRecall:
    def test_hand_count(self):
        preds = [np.array([[3.0, 0.0]]), np.array([[0.0, 12.0]])]
        r = localization_recall(preds, np.zeros((2, 2)), ks=(1,), epsilons=(5.0,))
        assert r == {1: {5.0: 0.5}}

    def test_infinite_epsilon(self):
        preds = [np.array([[300.0, 0.0]])]
        assert localization_recall(preds, np.zeros((1, 2)), (1,), (math.inf,))[1][math.inf] == 1.0

    def test_boundary_is_strict(self):
        r = localization_recall([np.array([[5.0, 0.0]])], np.zeros((1, 2)), (1,), (5.0,))
        assert r[1][5.0] == 0.0

    def test_defaults(self):
        r = localization_recall([np.zeros((10, 2))], np.zeros((1, 2)))
        assert list(r) == [1, 5, 10] and list(r[1]) == [5.0, 10.0, 15.0]

    def test_empty(self):
        with pytest.raises(ValueError):
            localization_recall([], np.zeros((0, 2)))


class TestNormalizedError:
    def test_example(self):
        assert normalized_error([[0.6, 0.5]], [[0.5, 0.5]], 1.0) == pytest.approx(0.1)
        assert normalized_error([[18.0, 15.0]], [[15.0, 15.0]], 30.0) == pytest.approx(0.1)

    def test_zero(self):
        p = np.random.default_rng(0).random((5, 2))
        assert normalized_error(p, p, 30.0) == 0.0


def _random_report(r):
    n = int(r.integers(1, 15))
    cells = list(range(12))
    rank_lists = [list(r.permutation(cells)) for _ in range(n)]
    positives = [set(int(c) for c in r.choice(cells, size=int(r.integers(1, 4)), replace=False)) for _ in range(n)]
    gts = r.uniform(0, 60, size=(n, 2))
    preds = [gts[i] + r.normal(scale=r.choice([2.0, 8.0, 20.0]), size=(10, 2)) for i in range(n)]
    return rank_lists, positives, preds, gts


def test_metrics_match_brute_force_on_200_reports():
    r = np.random.default_rng(7)
    ks_r, ks_l, eps = (1, 3, 5), (1, 5, 10), (5.0, 10.0, 15.0)
    for _ in range(200):
        rank_lists, positives, preds, gts = _random_report(r)
        rr = retrieval_recall(rank_lists, positives, ks_r)
        lr = localization_recall(preds, gts, ks_l, eps)
        for k in ks_r:
            assert rr[k] == brute_retrieval_recall(rank_lists, positives, k)
        for k in ks_l:
            for e in eps:
                assert lr[k][e] == brute_localization_recall(preds, gts, k, e)
        assert rr[1] <= rr[3] <= rr[5]
        for e in eps:
            assert lr[1][e] <= lr[5][e] <= lr[10][e]
        for k in ks_l:
            assert lr[k][5.0] <= lr[k][10.0] <= lr[k][15.0]
        matched = np.array([p[0] for p in preds])
        brute = sum(math.hypot(*(matched[i] - gts[i])) for i in range(len(gts))) / len(gts) / 30.0
        assert normalized_error(matched, gts, 30.0) == pytest.approx(brute, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_monotone_in_k_and_eps(seed):
    rank_lists, positives, preds, gts = _random_report(np.random.default_rng(seed))
    rr = retrieval_recall(rank_lists, positives, range(1, 13))
    assert all(rr[k] <= rr[k + 1] for k in range(1, 12))
    lr = localization_recall(preds, gts, range(1, 11), (1.0, 3.0, 9.0, 27.0))
    for k in range(1, 11):
        vals = list(lr[k].values())
        assert vals == sorted(vals)
        if k > 1:
            assert all(lr[k - 1][e] <= lr[k][e] for e in lr[k])


@pytest.fixture(scope="module")
def models(tiny_dataset, tiny_cfg):
    torch.manual_seed(0)
    return build_coarse_model(tiny_dataset, tiny_cfg).eval(), build_fine_model(tiny_dataset, tiny_cfg).eval()


@pytest.fixture(scope="module")
def report(tiny_dataset, tiny_cfg, models):
    return evaluate(tiny_dataset, *models, tiny_cfg, split="train")


class TestEvaluate:
    def test_records_match_brute_force(self, report, tiny_dataset, models):
        coarse, _ = models
        poses = tiny_dataset.split("train")
        assert report.num_queries == len(poses) == len(report.records)
        idx = build_index(tiny_dataset.cells, coarse)
        q = text_embeddings(coarse, poses)
        for rec, query, pose in zip(report.records, q, poses):
            sims = {cid: float(np.dot(idx.embeddings[i], query)) for i, cid in enumerate(idx.cell_ids)}
            expect = sorted(sims, key=lambda c: (-sims[c], c))[:10]
            assert rec.ranked_cells == expect
            assert set(rec.positive_cells) == positive_cells(pose.position, tiny_dataset.cells)
            assert pose.cell_id in rec.positive_cells
            assert len(rec.predictions) == len(expect)
        lists = [r.ranked_cells for r in report.records]
        pos = [set(r.positive_cells) for r in report.records]
        for k in (1, 3, 5):
            assert report.retrieval_recall[k] == brute_retrieval_recall(lists, pos, k)
        gts = [r.gt for r in report.records]
        preds = [r.predictions for r in report.records]
        for k in (1, 5, 10):
            for e in (5.0, 10.0, 15.0):
                assert report.localization_recall[k][e] == brute_localization_recall(preds, gts, k, e)

    def test_predictions_inside_cells(self, report, tiny_dataset):
        for rec in report.records:
            for cid, (x, y) in zip(rec.ranked_cells, rec.predictions):
                assert tiny_dataset.cell_by_id(cid).contains_xy((x, y))

    def test_deterministic(self, report, tiny_dataset, tiny_cfg, models):
        again = evaluate(tiny_dataset, *models, tiny_cfg, split="train")
        assert again.to_dict() == report.to_dict()

    def test_provenance_and_write(self, report, tmp_path, tiny_dataset, tiny_cfg):
        assert report.provenance["config_hash"] == tiny_cfg.hash()
        assert report.provenance["dataset_hash"] == tiny_dataset.content_hash()
        paths = report.write(tmp_path)
        data = json.loads(paths["json"].read_text())
        assert data["num_queries"] == report.num_queries
        assert data["retrieval_recall"]["1"] == report.retrieval_recall[1]
        rows = list(csv.reader(paths["csv"].open()))
        assert rows[0] == ["metric", "k", "epsilon_m", "value"]
        assert len(rows) == 1 + 3 + 9 + 2

    def test_coarse_only(self, tiny_dataset, tiny_cfg, models):
        rep = evaluate(tiny_dataset, models[0], None, tiny_cfg, split="train")
        assert rep.localization_recall == {} and math.isnan(rep.mean_normalized_error)

    def test_mismatched_index(self, tiny_dataset, tiny_cfg, models):
        other = build_coarse_model(tiny_dataset, tiny_cfg)
        other.load_state_dict(models[0].state_dict())
        with torch.no_grad():
            other.temperature.log_tau.add_(0.1)
        with pytest.raises(IndexFingerprintError):
            evaluate(tiny_dataset, models[0], None, tiny_cfg, index=build_index(tiny_dataset.cells, other))

    def test_empty_split(self, tiny_dataset, tiny_cfg, models):
        with pytest.raises(ValueError):
            evaluate(tiny_dataset, models[0], None, tiny_cfg, split="nope")


class TestStudies:
    def test_masked_cells(self, tiny_dataset):
        masked = masked_cells(tiny_dataset.cells, 1 / 3, 0)
        for raw, m in zip(tiny_dataset.cells, masked):
            assert m.id == raw.id and m.num_points == raw.num_points - round(raw.num_points / 3)
        again = masked_cells(tiny_dataset.cells, 1 / 3, 0)
        assert all(np.array_equal(a.points, b.points) for a, b in zip(masked, again))

    def test_robustness(self, tiny_dataset, tiny_cfg, models, tmp_path):
        result = run_robustness(tiny_dataset, *models, tiny_cfg)
        assert result["fraction"] == pytest.approx(1 / 3)
        assert set(result["degradation"]["retrieval_recall"]) == {"1", "3", "5"}
        for k, value in result["degradation"]["retrieval_recall"].items():
            raw = result["raw"]["retrieval_recall"][k]
            masked = result["masked"]["retrieval_recall"][k]
            assert value is None if raw == 0 else value == pytest.approx((raw - masked) / raw)
        json.dumps(result, allow_nan=False)
        paths = plot_robustness(result, tmp_path)
        assert all(p.stat().st_size > 0 for p in paths)

    def test_attention_grid(self, tiny_dataset, tiny_cfg, tmp_path):
        result = run_ablation_attention(tiny_dataset, tiny_cfg, seeds=[0, 1])
        assert set(result["results"]) == {"naive", "rowcol"}
        for v in result["results"].values():
            assert len(v["runs"]) == 2
            vals = [r["retrieval_recall"][1] for r in v["runs"]]
            assert v["retrieval_recall"][1]["mean"] == pytest.approx(np.mean(vals))
            assert v["retrieval_recall"][1]["sd"] == pytest.approx(np.std(vals, ddof=1))
        paths = plot_ablation(result, tmp_path)
        assert {p.suffix for p in paths} == {".png", ".csv"}

    def test_query_grid(self, tiny_dataset, tiny_cfg, tmp_path):
        result = run_ablation_queries(tiny_dataset, tiny_cfg)
        assert set(result["results"]) == {"4", "6"}
        assert plot_ablation(result, tmp_path)


def test_plots(report, tmp_path):
    paths = plot_eval_report(report, tmp_path)
    assert paths and all(p.exists() and p.stat().st_size > 0 for p in paths)
    png = plot_loss_curve([3.0, 2.0, 1.5], tmp_path / "loss.png", "coarse")
    assert png.exists()
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "epoch,loss"
