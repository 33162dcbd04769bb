"""Tests for prediction-directory evaluation and the ablation comparison."""

import json
import shutil
from pathlib import Path

import pytest

from src.config import ExperimentConfig
from src.services.evaluation import (
    REPORT_JSON,
    REPORT_TEXT,
    ablation_variants,
    build_ablation_report,
    evaluate_dirs,
    render_table,
    run_ablation,
    write_evaluation,
)
from src.services.models import (
    AblationRow,
    CaseEvaluation,
    DatasetManifest,
    EvaluationReport,
    QuantReport,
)
from src.services.pipeline import PRED_P_HC, PRED_SEG
from src.services.volume import read_suv, write_volume


def _reference_as_prediction(data_dir: Path, manifest: DatasetManifest, pred_dir: Path, case_ids) -> None:
    """Copy the reference volume and labels of some cases into a prediction directory."""
    for record in manifest.cases:
        if record.case_id in case_ids:
            case_dir = pred_dir / record.case_id
            case_dir.mkdir(parents=True)
            shutil.copy(data_dir / record.files["hc"], case_dir / PRED_P_HC)
            shutil.copy(data_dir / record.files["labels"], case_dir / PRED_SEG)


def _case(case_id: str, nrmse: float, dice: float) -> CaseEvaluation:
    quant = QuantReport(mtv_ml=1.0, tlg=2.0)
    return CaseEvaluation(
        case_id=case_id,
        nrmse={"all": nrmse},
        dice={"lesion": dice},
        predicted=quant,
        ground_truth=quant,
    )


def _variant(name: str, nrmse: list[float], dice: float = 0.8) -> tuple[AblationRow, EvaluationReport]:
    cases = [_case(f"case_{i:03d}", v, dice) for i, v in enumerate(nrmse)]
    row = AblationRow(
        variant=name,
        use_lor_regularizer=True,
        use_revision_module=True,
        checkpoint=f"{name}/checkpoint_final.pckpt",
        mean_lor=0.1,
        mean_rev=0.2,
    )
    report = EvaluationReport(
        cases=cases,
        mean_nrmse={"all": sum(nrmse) / len(nrmse)},
        mean_dice={"lesion": dice},
    )
    return row, report


class TestEvaluateDirs:
    """Tests for evaluate_dirs and its outputs."""

    def test_reference_scores_perfectly(self, temp_dir: Path, tiny_dataset):
        """Test predicting the reference gives NRMSE 0, Dice 1 and zero bias."""
        data_dir, manifest = tiny_dataset
        ids = [c.case_id for c in manifest.cases]
        _reference_as_prediction(data_dir, manifest, temp_dir / "pred", ids)
        report = evaluate_dirs(temp_dir / "pred", data_dir, split=None)

        assert [c.case_id for c in report.cases] == ids
        assert report.unpaired == []
        assert all(v in (None, 0.0) for v in report.mean_nrmse.values())
        assert report.mean_nrmse["all"] == 0.0
        assert all(v == 1.0 for v in report.mean_dice.values())
        for summary in report.bias.values():
            if summary is not None:
                assert summary.mean == 0.0 and summary.std == 0.0
                assert summary.text == "0.00 ± 0.00%"
        assert report.wilcoxon is None

    def test_default_split_is_test(self, temp_dir: Path, tiny_dataset):
        """Test only test-split cases are expected by default."""
        data_dir, manifest = tiny_dataset
        _reference_as_prediction(data_dir, manifest, temp_dir / "pred", {"case_002"})
        report = evaluate_dirs(temp_dir / "pred", data_dir)
        assert [c.case_id for c in report.cases] == ["case_002"]
        assert report.unpaired == []

    def test_unpaired_cases_excluded(self, temp_dir: Path, tiny_dataset, caplog: pytest.LogCaptureFixture):
        """Test missing predictions and unknown case ids are listed and skipped."""
        data_dir, manifest = tiny_dataset
        _reference_as_prediction(data_dir, manifest, temp_dir / "pred", {"case_002"})
        stray = temp_dir / "pred" / "case_999"
        shutil.copytree(temp_dir / "pred" / "case_002", stray)

        report = evaluate_dirs(temp_dir / "pred", data_dir, split=None)
        assert [c.case_id for c in report.cases] == ["case_002"]
        assert report.unpaired == ["case_000", "case_001", "case_999"]
        assert "case_999" in caplog.text

    def test_comparison_adds_wilcoxon(self, temp_dir: Path, tiny_dataset):
        """Test a comparison directory yields paired tests per metric."""
        data_dir, manifest = tiny_dataset
        _reference_as_prediction(data_dir, manifest, temp_dir / "pred", {"case_002"})
        _reference_as_prediction(data_dir, manifest, temp_dir / "other", {"case_002"})
        p_hc_path = temp_dir / "other" / "case_002" / PRED_P_HC
        p_hc = read_suv(p_hc_path)
        write_volume(p_hc.with_data(p_hc.data * 1.1), p_hc_path)

        report = evaluate_dirs(temp_dir / "pred", data_dir, compare_dir=temp_dir / "other")
        assert report.wilcoxon is not None
        assert report.wilcoxon["nrmse/all"] is not None
        assert report.wilcoxon["nrmse/all"].n_effective == 1

    def test_write_evaluation(self, temp_dir: Path, tiny_dataset):
        """Test the JSON report and the text tables are written."""
        data_dir, manifest = tiny_dataset
        _reference_as_prediction(data_dir, manifest, temp_dir / "pred", {"case_002"})
        json_path, text_path = write_evaluation(evaluate_dirs(temp_dir / "pred", data_dir), temp_dir / "out")
        assert json_path.name == REPORT_JSON and text_path.name == REPORT_TEXT
        assert json.loads(json_path.read_text())["cases"][0]["case_id"] == "case_002"
        text = text_path.read_text()
        for title in ("NRMSE", "Dice", "Percent bias"):
            assert title in text

    def test_empty_prediction_dir(self, temp_dir: Path, tiny_dataset):
        """Test a missing prediction directory leaves every case unpaired."""
        data_dir, _ = tiny_dataset
        report = evaluate_dirs(temp_dir / "missing", data_dir)
        assert report.cases == []
        assert report.unpaired == ["case_002"]


class TestRenderTable:
    """Tests for render_table."""

    def test_alignment(self):
        """Test labels are left aligned and cells right aligned."""
        text = render_table("T", ["a", "bb"], [("row", ["1", "22"]), ("longer", ["333", "4"])])
        lines = text.splitlines()
        assert lines[0] == "T"
        assert lines[2] == "          a  bb"
        assert lines[3].startswith("-")
        assert lines[4] == "row       1  22"
        assert lines[5] == "longer  333   4"


class TestAblation:
    """Tests for ablation variants and the comparison table."""

    def test_variants_differ_in_ablation_only(self, tiny_config: ExperimentConfig):
        """Test the three variants and their switches."""
        variants = ablation_variants(tiny_config)
        assert list(variants) == ["full", "w/o regularizer", "w/o revision"]
        assert variants["full"].ablation.use_lor_regularizer and variants["full"].ablation.use_revision_module
        assert not variants["w/o regularizer"].ablation.use_lor_regularizer
        assert not variants["w/o revision"].ablation.use_revision_module
        for config in variants.values():
            assert config.model_copy(update={"ablation": tiny_config.ablation}) == tiny_config

    def test_star_when_better_than_every_ablation(self):
        """Test a column is starred only if it differs significantly from all ablations."""
        full = [0.10, 0.11, 0.12, 0.13, 0.14, 0.15]
        report = build_ablation_report(
            {
                "full": _variant("full", full),
                "w/o regularizer": _variant("w/o regularizer", [v + 0.05 for v in full]),
                "w/o revision": _variant("w/o revision", [v + 0.02 for v in full]),
            }
        )
        full_row = report.rows[0]
        assert report.columns == ["nrmse/all", "dice/lesion"]
        assert full_row.starred == ["nrmse/all"]
        assert full_row.values["nrmse/all"] == pytest.approx(0.125)
        assert report.rows[1].starred == []

    def test_no_star_when_one_ablation_ties(self):
        """Test a tie with any single ablation removes the star."""
        full = [0.10, 0.11, 0.12, 0.13, 0.14, 0.15]
        report = build_ablation_report(
            {
                "full": _variant("full", full),
                "w/o regularizer": _variant("w/o regularizer", [v + 0.05 for v in full]),
                "w/o revision": _variant("w/o revision", list(full)),
            }
        )
        assert report.rows[0].starred == []

    @pytest.mark.slow
    def test_run_ablation(self, temp_dir: Path, tiny_dataset, tiny_config: ExperimentConfig):
        """Test every variant is trained, predicted and compared."""
        data_dir, _ = tiny_dataset
        seen = []
        report = run_ablation(tiny_config, data_dir, temp_dir / "ablation", on_variant=seen.append)
        assert seen == ["full", "w/o regularizer", "w/o revision"]
        assert [r.variant for r in report.rows] == seen
        assert report.rows[1].mean_lor == 0.0
        for slug in ("full", "wo_regularizer", "wo_revision"):
            assert (temp_dir / "ablation" / slug / "pred" / "case_002" / PRED_SEG).exists()
            assert (temp_dir / "ablation" / slug / REPORT_JSON).exists()
        assert (temp_dir / "ablation" / "ablation.txt").exists()
