import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from anomalens.harness import (
    DetectorConfig,
    LabeledScores,
    ShiftSource,
    defect_noise_ratio,
    evaluate,
    load_dataset,
    merge_reports,
    norm_comparison,
    shift_experiment,
)
from anomalens.imagegrid import ImageTensor, SynthConfig, synth_generate, write_image


class TestLabeledScores:
    def test_default_ids_enumerate(self):
        ls = LabeledScores([1.0, 2.0], ("good", "defect"))
        assert ls.ids == ("0", "1")

    def test_rejects_unknown_label(self):
        with pytest.raises(ValueError):
            LabeledScores([1.0], ("borderline",))

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            LabeledScores([1.0, 2.0], ("good",))


class TestEvaluate:
    def test_fixed_threshold_confusion(self):
        ls = LabeledScores([1.0, 2.0, 3.0, 4.0], ("good", "good", "defect", "defect"))
        rep = evaluate(ls, 2.5)
        assert (rep.tp, rep.fp, rep.tn, rep.fn) == (2, 0, 2, 0)
        assert rep.f1 == 1.0
        assert rep.fpr == 0.0 and rep.fnr == 0.0

    def test_threshold_is_strict_greater(self):
        ls = LabeledScores([1.0, 2.0], ("good", "defect"))
        rep = evaluate(ls, 2.0)
        # a defect exactly at the threshold is missed
        assert rep.fn == 1 and rep.tp == 0

    def test_optimize_finds_separating_midpoint(self):
        ls = LabeledScores([1.0, 2.0, 3.0, 4.0], ("good", "good", "defect", "defect"))
        rep = evaluate(ls, "optimize")
        assert rep.threshold == 2.5
        assert rep.f1 == 1.0

    def test_optimize_tie_breaks_to_lowest_threshold(self):
        # any cut below 1.0 yields the same all-defect prediction; the scan
        # must keep the first candidate, -inf
        ls = LabeledScores([1.0, 2.0], ("defect", "defect",))
        with pytest.raises(ValueError):
            evaluate(ls, "optimize")

    def test_optimize_on_overlapping_classes(self):
        ls = LabeledScores([1.0, 3.0, 2.0, 4.0], ("good", "good", "defect", "defect"))
        rep = evaluate(ls, "optimize")
        # best split is 2 tp, 1 fp or symmetric; optimizer must reach f1 0.8
        assert_allclose(rep.f1, 0.8, atol=1e-12)

    def test_single_class_rejected(self):
        ls = LabeledScores([1.0, 2.0], ("good", "good"))
        with pytest.raises(ValueError):
            evaluate(ls, 1.5)

    def test_inverted_scores_stay_defined(self):
        ls = LabeledScores([4.0, 3.0, 2.0, 1.0], ("good", "good", "defect", "defect"))
        rep = evaluate(ls, "optimize")
        # defects score lower than goods; the best cut keeps f1 at 2/3
        assert_allclose(rep.f1, 2.0 / 3.0, atol=1e-12)

    def test_report_json_fields(self):
        ls = LabeledScores([1.0, 4.0], ("good", "defect"))
        d = evaluate(ls, 2.0).to_json_dict()
        assert set(d) == {"threshold", "f1", "fpr", "fnr", "tp", "fp", "tn", "fn"}


class TestLoadDataset:
    def _write(self, root, rel, seed):
        rng = np.random.default_rng(seed)
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        write_image(ImageTensor(rng.uniform(-1, 1, (8, 8, 1))), path)

    def test_reads_layout(self, tmp_path):
        for i in range(3):
            self._write(tmp_path, f"cat/train/good/{i:03d}.png", i)
        self._write(tmp_path, "cat/test/good/000.png", 10)
        self._write(tmp_path, "cat/test/scratch/000.png", 11)
        train, test = load_dataset(tmp_path, "cat")
        assert len(train) == 3
        labels = sorted(lab for _, lab, _ in test)
        assert labels == ["defect", "good"]
        ids = sorted(iid for _, _, iid in test)
        assert ids == ["good/000.png", "scratch/000.png"]

    def test_missing_category_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path, "nope")

    def test_empty_train_raises(self, tmp_path):
        self._write(tmp_path, "cat/test/good/000.png", 0)
        (tmp_path / "cat" / "train" / "good").mkdir(parents=True)
        with pytest.raises(ValueError):
            load_dataset(tmp_path, "cat")

    def test_missing_test_good_raises(self, tmp_path):
        self._write(tmp_path, "cat/train/good/000.png", 0)
        self._write(tmp_path, "cat/test/scratch/000.png", 1)
        with pytest.raises(ValueError):
            load_dataset(tmp_path, "cat")


@pytest.fixture(scope="module")
def small_source():
    # full working resolution, trimmed counts: the deployment gap needs the
    # default noise-to-defect energy budget of the 64x64 grid
    cfg = SynthConfig(category_seed=0, image_size=64, n_train_good=16,
                      n_test_good=6, n_test_defect=6)
    return ShiftSource.from_synth(cfg)


class TestShiftExperiment:
    def test_d2neighbors_degrades_without_mitigation(self, small_source):
        rep = shift_experiment(small_source, DetectorConfig(model="d2neighbors", p=2))
        cat = rep.per_category[0]
        assert cat.original.f1 >= 0.9
        assert cat.deployed_fixed.f1 < cat.original.f1
        assert cat.deployed_fixed.fnr > cat.original.fnr

    def test_blur_mitigation_closes_the_gap(self, small_source):
        rep = shift_experiment(small_source, DetectorConfig(model="d2neighbors", p=2),
                               mitigation="blur")
        cat = rep.per_category[0]
        assert cat.deployed_fixed.f1 >= cat.original.f1 - 0.02

    def test_reopt_never_below_fixed(self, small_source):
        for mit in ("none", "blur"):
            rep = shift_experiment(small_source, DetectorConfig(model="d2neighbors", p=2),
                                   mitigation=mit)
            cat = rep.per_category[0]
            assert cat.deployed_reopt.f1 >= cat.deployed_fixed.f1

    def test_patchlite_also_degrades(self, small_source):
        rep = shift_experiment(small_source, DetectorConfig(model="patchlite", patch=8, stride=8))
        cat = rep.per_category[0]
        assert cat.deployed_fixed.f1 < cat.original.f1

    def test_unknown_mitigation_rejected(self, small_source):
        with pytest.raises(ValueError):
            shift_experiment(small_source, DetectorConfig(), mitigation="pray")

    def test_report_table_and_json(self, small_source):
        rep = shift_experiment(small_source, DetectorConfig(model="d2neighbors", p=2))
        table = rep.table()
        assert "f1_original" in table.splitlines()[1]
        assert "synth" in table
        d = rep.to_json_dict()
        json.dumps(d)  # serializable
        assert d["model"] == "d2neighbors"
        assert len(d["per_category"]) == 1
        assert "averages" in d

    def test_merge_concatenates_categories(self, small_source):
        rep1 = shift_experiment(small_source, DetectorConfig(model="d2neighbors", p=2))
        cfg = SynthConfig(category_seed=1, image_size=32, n_train_good=12,
                          n_test_good=8, n_test_defect=8)
        src2 = ShiftSource.from_synth(cfg, name="other")
        rep2 = shift_experiment(src2, DetectorConfig(model="d2neighbors", p=2))
        merged = merge_reports([rep1, rep2])
        assert [c.name for c in merged.per_category] == ["synth", "other"]
        avg = merged.averages()
        assert_allclose(avg["f1_original"],
                        (rep1.per_category[0].original.f1 + rep2.per_category[0].original.f1) / 2.0,
                        atol=1e-12)

    def test_merge_rejects_mixed_setups(self, small_source):
        rep1 = shift_experiment(small_source, DetectorConfig(model="d2neighbors", p=2))
        rep2 = shift_experiment(small_source, DetectorConfig(model="d2neighbors", p=2),
                                mitigation="blur")
        with pytest.raises(ValueError):
            merge_reports([rep1, rep2])


class TestDefectNoiseRatio:
    def test_closed_form_values(self):
        # a=0.8, m=25 px, delta=0.25, HW=4096
        assert_allclose(defect_noise_ratio(0.8, 25, 0.25, 4096, 1), 0.0390625, atol=1e-12)
        assert_allclose(defect_noise_ratio(0.8, 25, 0.25, 4096, 2), 0.1875, atol=1e-12)
        assert_allclose(defect_noise_ratio(0.8, 25, 0.25, 4096, 4), 3.2, atol=1e-9)

    def test_strictly_increasing_in_p(self):
        vals = [defect_noise_ratio(0.8, 25, 0.25, 4096, p) for p in (1, 2, 4)]
        assert vals[0] < vals[1] < vals[2]

    def test_zero_noise_is_infinite(self):
        assert defect_noise_ratio(0.8, 25, 0.0, 4096, 2) == np.inf

    def test_rejects_bad_order(self):
        with pytest.raises(ValueError):
            defect_noise_ratio(0.8, 25, 0.25, 4096, 3)


class TestNormComparison:
    def test_orders_and_reports(self, small_source):
        cfg = SynthConfig(category_seed=0, image_size=32, n_train_good=12,
                          n_test_good=8, n_test_defect=8)
        cmp = norm_comparison(small_source, p_values=(1, 2), synth_cfg=cfg)
        assert set(cmp.reports) == {1, 2}
        assert set(cmp.ratios) == {1, 2}
        assert cmp.ratios[1] < cmp.ratios[2]
