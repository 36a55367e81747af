"""Evaluation tests: hard Dice oracle, region nesting, ablation table."""

import hashlib
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import kdseg.evaluation as evaluation
from kdseg.errors import ContractError
from kdseg.evaluation import (
    AblationEntry,
    AblationResult,
    AblationRow,
    AblationSpec,
    default_ablation_rows,
    emit_report,
    enforce_nesting,
    evaluate,
    hard_dice,
    parse_results_csv,
    predict_regions,
    run_ablation,
)
from kdseg.losses import soft_dice
from kdseg.network import ForwardResult, NetworkConfig, build_network
from kdseg.training import TrainConfig


def counting_dice(pred, target):
    """Independent oracle: 200|A∩B| / (|A|+|B|) by explicit iteration."""
    inter = sum(
        1
        for p, t in zip(pred.flatten().tolist(), target.flatten().tolist())
        if p == 1 and t == 1
    )
    total = int(pred.sum()) + int(target.sum())
    if total == 0:
        return 100.0
    return 200.0 * inter / total


class StubNet:
    """Minimal network stand-in: fixed logits chosen per input."""

    def __init__(self, in_channels, logits_fn):
        self.config = NetworkConfig(
            in_channels=in_channels, depth=1, base_filters=2, skip_connections=1
        )
        self._fn = logits_fn

    def eval(self):
        return self

    def __call__(self, x):
        return ForwardResult(logits=self._fn(x), bottleneck=torch.zeros(1))


class TestHardDice:
    def test_counting_example(self):
        pred = torch.tensor([1, 1, 1, 1, 0, 0])
        target = torch.tensor([1, 1, 1, 0, 1, 0])
        # |A|=4, |B|=4, overlap 3 -> 200*3/8 = 75
        assert hard_dice(pred, target) == pytest.approx(75.0)

    def test_sizes_4_6_overlap_3(self):
        pred = torch.zeros(10)
        target = torch.zeros(10)
        pred[:4] = 1
        target[1:7] = 1
        assert hard_dice(pred, target) == pytest.approx(60.0)

    def test_both_empty_is_perfect(self):
        assert hard_dice(torch.zeros(8), torch.zeros(8)) == 100.0

    def test_one_empty_is_zero(self):
        assert hard_dice(torch.ones(8), torch.zeros(8)) == 0.0

    def test_identical_is_100(self, rng):
        mask = torch.from_numpy((rng.random(64) > 0.5).astype(np.float32))
        assert hard_dice(mask, mask) == pytest.approx(100.0)

    def test_random_masks_match_counting_oracle(self, rng):
        for _ in range(50):
            pred = torch.from_numpy((rng.random(27) > 0.5).astype(np.float32))
            target = torch.from_numpy((rng.random(27) > 0.5).astype(np.float32))
            assert hard_dice(pred, target) == pytest.approx(
                counting_dice(pred, target), abs=1e-9
            )

    def test_agrees_with_soft_dice_on_binary(self, rng):
        pred = torch.from_numpy((rng.random((2, 2, 2)) > 0.4).astype(np.float32))
        target = torch.from_numpy((rng.random((2, 2, 2)) > 0.6).astype(np.float32))
        hard = hard_dice(pred, target)
        soft = float(soft_dice(pred, target)) * 100.0
        assert hard == pytest.approx(soft, abs=1e-4)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            hard_dice(torch.zeros(4), torch.zeros(5))

    def test_non_binary_rejected(self):
        with pytest.raises(ContractError, match="binary"):
            hard_dice(torch.full((4,), 0.5), torch.zeros(4))

    @given(st.integers(0, 2**16 - 1), st.integers(0, 2**16 - 1))
    @settings(max_examples=60, deadline=None)
    def test_symmetric_and_bounded(self, abits, bbits):
        a = torch.tensor([(abits >> i) & 1 for i in range(16)], dtype=torch.float32)
        b = torch.tensor([(bbits >> i) & 1 for i in range(16)], dtype=torch.float32)
        d = hard_dice(a, b)
        assert d == pytest.approx(hard_dice(b, a))
        assert 0.0 <= d <= 100.0


class TestEnforceNesting:
    def test_inner_regions_clipped(self):
        wt = torch.tensor([[1.0, 1.0, 0.0, 0.0]])
        tc = torch.tensor([[1.0, 0.0, 1.0, 0.0]])
        et = torch.tensor([[1.0, 1.0, 1.0, 1.0]])
        out = enforce_nesting(torch.stack([wt, tc, et]))
        assert torch.equal(out[0], wt)
        assert torch.equal(out[1], torch.tensor([[1.0, 0.0, 0.0, 0.0]]))
        assert torch.equal(out[2], torch.tensor([[1.0, 0.0, 0.0, 0.0]]))

    def test_idempotent(self, rng):
        regions = torch.from_numpy(
            (rng.random((3, 4, 4, 4)) > 0.5).astype(np.float32)
        )
        once = enforce_nesting(regions)
        assert torch.equal(enforce_nesting(once), once)

    def test_already_nested_untouched(self, rng):
        et = (torch.rand(4, 4, 4) > 0.8).float()
        tc = torch.clamp(et + (torch.rand(4, 4, 4) > 0.7).float(), max=1)
        wt = torch.clamp(tc + (torch.rand(4, 4, 4) > 0.6).float(), max=1)
        regions = torch.stack([wt, tc, et])
        assert torch.equal(enforce_nesting(regions), regions)


class TestPredictRegions:
    def test_zeroed_head_predicts_everything(self):
        # Zero logits -> sigmoid 0.5 -> binarize at 0.5 is inclusive.
        net = build_network(
            NetworkConfig(in_channels=1, depth=1, base_filters=2, skip_connections=1),
            seed=0,
        )
        with torch.no_grad():
            net.head.weight.zero_()
            net.head.bias.zero_()
        pred = predict_regions(net, torch.randn(1, 8, 8, 8))
        assert torch.all(pred == 1)

    def test_threshold_above_half_flips_tie(self):
        net = build_network(
            NetworkConfig(in_channels=1, depth=1, base_filters=2, skip_connections=1),
            seed=0,
        )
        with torch.no_grad():
            net.head.weight.zero_()
            net.head.bias.zero_()
        pred = predict_regions(net, torch.randn(1, 8, 8, 8), threshold=0.6)
        assert torch.all(pred == 0)


class TestEvaluate:
    def test_perfect_predictions_score_100(self, tiny_dataset):
        ids = tiny_dataset.subject_ids[:3]
        samples = {sid: tiny_dataset.sample(sid) for sid in ids}

        def perfect_logits(x):
            for s in samples.values():
                if torch.equal(x[0], s.image):
                    return (s.regions * 20.0 - 10.0).unsqueeze(0)
            raise AssertionError("unknown input")

        net = StubNet(2, perfect_logits)
        scores = evaluate(net, tiny_dataset, subject_ids=ids)
        assert scores.wt == pytest.approx(100.0)
        assert scores.tc == pytest.approx(100.0)
        assert scores.et == pytest.approx(100.0)
        assert scores.wt_std == pytest.approx(0.0)
        assert len(scores.per_subject["wt"]) == 3

    def test_all_ones_prediction_matches_counting(self, tiny_dataset):
        sid = tiny_dataset.subject_ids[0]
        s = tiny_dataset.sample(sid)
        net = StubNet(2, lambda x: torch.zeros((1, 3) + tuple(s.image.shape[1:])))
        scores = evaluate(net, tiny_dataset, subject_ids=[sid])
        ones = torch.ones_like(s.regions[0])
        for region, idx in (("wt", 0), ("tc", 1), ("et", 2)):
            expected = counting_dice(ones, s.regions[idx])
            assert getattr(scores, region) == pytest.approx(expected, abs=1e-9)

    def test_mean_and_std_follow_per_subject(self, tiny_dataset):
        ids = tiny_dataset.subject_ids[:4]
        shape = tuple(tiny_dataset.sample(ids[0]).image.shape[1:])
        net = StubNet(2, lambda x: torch.zeros((1, 3) + shape))
        scores = evaluate(net, tiny_dataset, subject_ids=ids)
        for region in ("wt", "tc", "et"):
            vals = scores.per_subject[region]
            assert getattr(scores, region) == pytest.approx(float(np.mean(vals)))
            assert getattr(scores, f"{region}_std") == pytest.approx(
                float(np.std(vals))
            )

    def test_mono_modal_needs_modality(self, tiny_dataset):
        net = StubNet(1, lambda x: torch.zeros(1))
        with pytest.raises(ContractError, match="modality"):
            evaluate(net, tiny_dataset)

    def test_mono_modal_slices_named_channel(self, tiny_dataset):
        sid = tiny_dataset.subject_ids[0]
        seen = {}

        def spy(x):
            seen["shape"] = tuple(x.shape)
            seen["x"] = x.clone()
            return torch.zeros((1, 3) + tuple(x.shape[2:]))

        net = StubNet(1, spy)
        evaluate(net, tiny_dataset, subject_ids=[sid], modality="modB")
        s = tiny_dataset.sample(sid)
        assert seen["shape"][1] == 1
        assert torch.equal(seen["x"][0, 0], s.image[1])

    def test_channel_count_mismatch_rejected(self, tiny_dataset):
        net = StubNet(3, lambda x: torch.zeros(1))
        net.config = NetworkConfig(
            in_channels=3, depth=1, base_filters=2, skip_connections=1
        )
        with pytest.raises(ContractError, match="channels"):
            evaluate(net, tiny_dataset, modality="modA")

    def test_empty_subject_set_rejected(self, tiny_dataset):
        net = StubNet(2, lambda x: torch.zeros(1))
        with pytest.raises(ContractError, match="empty"):
            evaluate(net, tiny_dataset, subject_ids=[])

    def test_nest_flag_clips_inner_regions(self, tiny_dataset):
        sid = tiny_dataset.subject_ids[0]
        s = tiny_dataset.sample(sid)
        shape = tuple(s.image.shape[1:])

        def non_nested(x):
            logits = torch.full((1, 3) + shape, -10.0)
            logits[0, 1] = 10.0  # predicts TC everywhere, WT nowhere
            return logits

        net = StubNet(2, non_nested)
        raw = evaluate(net, tiny_dataset, subject_ids=[sid])
        nested = evaluate(net, tiny_dataset, subject_ids=[sid], nest=True)
        # Raw TC prediction covers the volume; nesting empties it via WT=0.
        assert raw.tc > 0.0
        assert nested.tc == pytest.approx(
            0.0 if s.regions[1].sum() > 0 else 100.0
        )


class TestAblationSpec:
    def test_default_rows_structure(self):
        rows = default_ablation_rows()
        assert len(rows) == 10
        assert [r.skip_connections for r in rows] == [4] * 5 + [0] * 5
        per_skip = [(r.model, r.loss) for r in rows[:5]]
        assert per_skip == [
            ("baseline", "GT"),
            ("teacher", "GT"),
            ("kd-net", "GT+KL"),
            ("kd-net", "GT+KD"),
            ("kd-net", "GT+KL+KD"),
        ]
        assert per_skip == [(r.model, r.loss) for r in rows[5:]]
        AblationSpec(rows)  # validates

    def test_unknown_model_rejected(self):
        with pytest.raises(ContractError, match="model"):
            AblationSpec([AblationRow(0, "oracle", "GT")])

    def test_unknown_loss_rejected(self):
        with pytest.raises(ContractError, match="loss"):
            AblationSpec([AblationRow(0, "kd-net", "GT+XX")])

    def test_teacher_restricted_to_gt(self):
        with pytest.raises(ContractError, match="GT only"):
            AblationSpec([AblationRow(0, "teacher", "GT+KL")])

    def test_baseline_restricted_to_gt(self):
        with pytest.raises(ContractError, match="GT only"):
            AblationSpec([AblationRow(4, "baseline", "GT+KL+KD")])


def fake_entries():
    e1 = AblationEntry(
        row=AblationRow(4, "baseline", "GT"),
        per_fold={"wt": [90.0, 92.0, 91.0], "tc": [80.0, 82.0, 81.0], "et": [60.0, 61.0, 62.0]},
    )
    e2 = AblationEntry(
        row=AblationRow(4, "kd-net", "GT+KL+KD"),
        per_fold={"wt": [93.0, 94.0, 95.0], "tc": [85.0, 86.0, 87.0], "et": [65.0, 66.0, 67.0]},
    )
    e3 = AblationEntry(
        row=AblationRow(0, "teacher", "GT"), per_fold=None, error="synthetic fault"
    )
    return [e1, e2, e3]


class TestEmitReport:
    @pytest.fixture()
    def report(self, tmp_path):
        result = AblationResult(entries=fake_entries(), out_dir=tmp_path)
        meta = {"seed": 17, "config": "[training]\nlr = 0.001\n"}
        paths = emit_report(result, meta)
        return result, meta, paths, tmp_path

    def test_csv_round_trip(self, report):
        result, _, paths, _ = report
        rows = parse_results_csv(paths["csv"])
        assert len(rows) == 3 * len(result.entries)
        first = rows[0]
        assert first["skip"] == 4
        assert first["model"] == "baseline"
        assert first["region"] == "ET"
        assert first["mean"] == pytest.approx(61.0)
        assert first["fold2"] == pytest.approx(62.0)
        regions = [r["region"] for r in rows[:3]]
        assert regions == ["ET", "TC", "WT"]

    def test_failed_rows_marked(self, report):
        _, _, paths, _ = report
        rows = parse_results_csv(paths["csv"])
        failed = [r for r in rows if r["model"] == "teacher"]
        assert len(failed) == 3
        assert all(r["mean"] == "FAILED" for r in failed)
        assert "FAILED" in paths["md"].read_text()

    def test_markdown_table(self, report):
        _, _, paths, _ = report
        text = paths["md"].read_text()
        assert "| skips | model | loss | ET | TC | WT |" in text
        assert "91.00 ± 0.82" in text  # mean/std of fake baseline WT folds
        assert "seed: 17" in text

    def test_meta_hash(self, report):
        _, meta, paths, _ = report
        stored = json.loads(paths["meta"].read_text())
        assert stored["seed"] == 17
        expected = hashlib.sha256(meta["config"].encode()).hexdigest()
        assert stored["config_hash"] == expected

    def test_figure_rendered_next_to_csv(self, report):
        _, _, paths, out_dir = report
        assert paths["figure"].parent == paths["csv"].parent == out_dir
        assert paths["figure"].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_bad_header_rejected_on_parse(self, tmp_path):
        path = tmp_path / "results.csv"
        path.write_text("not,a,results,file\n")
        with pytest.raises(ContractError, match="header"):
            parse_results_csv(path)


class TestRunAblation:
    def test_row_failures_recorded_not_raised(
        self, tiny_dataset, tmp_path, monkeypatch
    ):
        calls = []

        def flaky_cv(cfg, dataset, net_cfg, stage, out_dir, k=3, teacher_ckpts=None):
            calls.append((stage, net_cfg.skip_connections))
            if stage == "baseline":
                raise RuntimeError("synthetic baseline fault")
            return {
                "dice": {
                    r: {"per_fold": [50.0] * k, "mean": 50.0, "std_folds": 0.0}
                    for r in ("wt", "tc", "et")
                }
            }

        monkeypatch.setattr(evaluation, "run_cross_validation", flaky_cv)
        spec = AblationSpec(default_ablation_rows(skips=(0,)))
        result = run_ablation(
            spec,
            tiny_dataset,
            NetworkConfig(in_channels=1, depth=1, base_filters=2, skip_connections=1),
            TrainConfig(epochs=1, student_modality="modA"),
            tmp_path / "abl",
        )
        assert len(result.entries) == 5
        assert len(result.failures) == 1
        assert result.failures[0].row.model == "baseline"
        assert "baseline fault" in result.failures[0].error
        # One shared teacher run serves the teacher row and all kd-net rows.
        assert calls.count(("teacher", 0)) == 1
        assert calls.count(("student", 0)) == 3

    def test_kd_rows_set_loss_flags(self, tiny_dataset, tmp_path, monkeypatch):
        seen_flags = {}

        def spy_cv(cfg, dataset, net_cfg, stage, out_dir, k=3, teacher_ckpts=None):
            if stage == "student":
                seen_flags[len(seen_flags)] = (
                    cfg.weights.enable_kd,
                    cfg.weights.enable_kl,
                )
            return {
                "dice": {
                    r: {"per_fold": [50.0] * k, "mean": 50.0, "std_folds": 0.0}
                    for r in ("wt", "tc", "et")
                }
            }

        monkeypatch.setattr(evaluation, "run_cross_validation", spy_cv)
        rows = [
            AblationRow(0, "kd-net", "GT+KL"),
            AblationRow(0, "kd-net", "GT+KD"),
            AblationRow(0, "kd-net", "GT+KL+KD"),
        ]
        run_ablation(
            AblationSpec(rows),
            tiny_dataset,
            NetworkConfig(in_channels=1, depth=1, base_filters=2, skip_connections=1),
            TrainConfig(epochs=1, student_modality="modA"),
            tmp_path / "abl",
        )
        assert seen_flags == {0: (False, True), 1: (True, False), 2: (True, True)}
