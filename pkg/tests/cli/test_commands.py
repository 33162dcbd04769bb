"""Tests for the pjd command line."""

import json
from pathlib import Path

import numpy as np
import pytest

from src.cli.main import build_parser, main
from src.config import load_experiment_config
from src.networks.params import init_params, save_checkpoint
from src.services.errors import EXIT_CONFIG, EXIT_DATA, EXIT_OK
from src.services.pipeline import PRED_P_HC, PRED_REPORT, PRED_SEG
from src.services.volume import LabelVolume, Volume3D, write_volume


@pytest.fixture
def dataset_dir(temp_dir: Path, tiny_config_path: Path) -> Path:
    out = temp_dir / "data"
    assert main(["phantom", "--config", str(tiny_config_path), "--out", str(out), "--n-cases", "3"]) == EXIT_OK
    return out


@pytest.fixture
def quant_inputs(temp_dir: Path) -> tuple[Path, Path]:
    """A flat SUV volume with an 8-voxel lesion and its labels."""
    labels = np.zeros((4, 4, 4), dtype=np.uint8)
    labels[:2, :2, :2] = 1
    labels[2:] = 2
    suv_path, labels_path = temp_dir / "suv.pvol", temp_dir / "labels.pvol"
    write_volume(Volume3D((4, 4, 4), (2.0, 2.0, 2.0), np.where(labels == 1, 4.0, 1.0)), suv_path)
    write_volume(LabelVolume((4, 4, 4), (2.0, 2.0, 2.0), labels, num_classes=3), labels_path)
    return suv_path, labels_path


class TestParser:
    """Tests for argument parsing."""

    def test_commands(self):
        """Test every subcommand is registered."""
        parser = build_parser()
        for command in ("phantom", "train", "denoise", "segment", "quantify", "evaluate", "ablate"):
            args = parser.parse_args([command])
            assert args.command == command

    def test_common_flags(self):
        """Test shared flags parse on every command."""
        args = build_parser().parse_args(["train", "--seed", "3", "--threads", "2", "-v", "--out", "x"])
        assert args.seed == 3 and args.threads == 2 and args.verbose
        assert args.out == Path("x")

    def test_missing_command(self):
        """Test a bare invocation is a usage error."""
        with pytest.raises(SystemExit) as exc_info:
            build_parser().parse_args([])
        assert exc_info.value.code == 2


class TestExitCodes:
    """Tests for error mapping to exit codes."""

    def test_invalid_config(self, temp_dir: Path):
        """Test a malformed config file exits with the config code."""
        path = temp_dir / "bad.json"
        path.write_text('{"diffusion": {"T": 0}}', encoding="utf-8")
        assert main(["phantom", "--config", str(path), "--out", str(temp_dir / "d")]) == EXIT_CONFIG

    def test_unreadable_config(self, temp_dir: Path):
        """Test a missing config file exits with the config code."""
        assert main(["phantom", "--config", str(temp_dir / "none.json"), "--out", str(temp_dir)]) == EXIT_CONFIG

    def test_missing_out(self, quant_inputs: tuple[Path, Path]):
        """Test commands writing files require --out."""
        suv, labels = quant_inputs
        assert main(["quantify", "--input", str(suv), "--labels", str(labels)]) == EXIT_CONFIG

    def test_input_and_data_exclusive(self, temp_dir: Path):
        """Test denoise wants exactly one of --input and --data."""
        assert main(["denoise", "--out", str(temp_dir)]) == EXIT_CONFIG

    def test_missing_checkpoint(self, temp_dir: Path, quant_inputs: tuple[Path, Path]):
        """Test an unreadable checkpoint is a data error."""
        suv, _ = quant_inputs
        args = ["segment", "--checkpoint", str(temp_dir / "none.pckpt"), "--input", str(suv), "--out", str(temp_dir)]
        assert main(args) == EXIT_DATA

    def test_missing_dataset(self, temp_dir: Path, tiny_config_path: Path):
        """Test training without a dataset manifest is a data error."""
        args = ["train", "--config", str(tiny_config_path), "--data", str(temp_dir / "none"), "--out", str(temp_dir)]
        assert main(args) == EXIT_DATA

    def test_geometry_mismatch(self, temp_dir: Path, quant_inputs: tuple[Path, Path]):
        """Test volumes of different dims are a data error."""
        suv, _ = quant_inputs
        other = temp_dir / "other.pvol"
        write_volume(LabelVolume((2, 2, 2), (2.0, 2.0, 2.0), np.zeros(8), num_classes=3), other)
        assert main(["quantify", "--input", str(suv), "--labels", str(other), "--out", str(temp_dir)]) == EXIT_DATA

    def test_unknown_count_level(self, temp_dir: Path, tiny_config_path: Path, dataset_dir: Path):
        """Test a count level the dataset lacks is a data error."""
        config = load_experiment_config(tiny_config_path)
        checkpoint = temp_dir / "init.pckpt"
        save_checkpoint(checkpoint, init_params(config, 0), config)
        args = ["segment", "--checkpoint", str(checkpoint), "--data", str(dataset_dir), "--out", str(temp_dir / "pred")]
        assert main([*args, "--count-fraction", "0.3"]) == EXIT_DATA
        assert not (temp_dir / "pred").exists()


class TestCommands:
    """Tests for individual commands."""

    def test_quantify(self, temp_dir: Path, quant_inputs: tuple[Path, Path]):
        """Test 8 lesion voxels of 8 uL at SUV 4 give MTV 0.064 mL and TLG 0.256."""
        suv, labels = quant_inputs
        assert main(["quantify", "--input", str(suv), "--labels", str(labels), "--out", str(temp_dir / "q")]) == 0
        report = json.loads((temp_dir / "q" / PRED_REPORT).read_text())
        assert report["mtv_ml"] == pytest.approx(0.064)
        assert report["tlg"] == pytest.approx(0.256)
        assert report["suv_mean"] == {"class_2": 1.0}

    def test_phantom_is_reproducible(self, temp_dir: Path, tiny_config_path: Path, dataset_dir: Path):
        """Test the same seed writes byte-identical datasets."""
        again = temp_dir / "again"
        assert main(["phantom", "--config", str(tiny_config_path), "--out", str(again), "--n-cases", "3"]) == 0
        for name in ("manifest.json", "case_002/lc_0.1.pvol", "case_000/labels.pvol"):
            assert (again / name).read_bytes() == (dataset_dir / name).read_bytes()

    def test_phantom_seed_override(self, temp_dir: Path, tiny_config_path: Path, dataset_dir: Path):
        """Test --seed changes the generated phantoms."""
        other = temp_dir / "other"
        args = ["phantom", "--config", str(tiny_config_path), "--out", str(other), "--n-cases", "3", "--seed", "8"]
        assert main(args) == 0
        assert (other / "case_000/activity.pvol").read_bytes() != (dataset_dir / "case_000/activity.pvol").read_bytes()

    def test_quantify_ground_truth(self, temp_dir: Path, dataset_dir: Path):
        """Test the reference arm reproduces the manifest ground truth."""
        assert main(["quantify", "--ground-truth", "--data", str(dataset_dir), "--out", str(temp_dir / "gt")]) == 0
        manifest = json.loads((dataset_dir / "manifest.json").read_text())
        for case in manifest["cases"]:
            written = json.loads((temp_dir / "gt" / case["case_id"] / PRED_REPORT).read_text())
            assert written == case["ground_truth"]

    def test_evaluate_without_predictions(self, temp_dir: Path, dataset_dir: Path):
        """Test an empty prediction directory still writes a report."""
        pred = temp_dir / "pred"
        pred.mkdir()
        assert main(["evaluate", "--pred", str(pred), "--data", str(dataset_dir)]) == 0
        report = json.loads((pred / "evaluation.json").read_text())
        assert report["unpaired"] == ["case_002"]


@pytest.mark.slow
class TestWorkflow:
    """End-to-end phantom, train, segment and evaluate runs."""

    def test_train_segment_evaluate(self, temp_dir: Path, tiny_config_path: Path, dataset_dir: Path):
        """Test the full workflow and byte-identical reruns."""
        config = str(tiny_config_path)
        run = temp_dir / "run"
        assert main(["train", "--config", config, "--data", str(dataset_dir), "--out", str(run)]) == 0
        checkpoint = run / "checkpoint_final.pckpt"
        assert checkpoint.exists()
        assert (run / "config.json").exists()
        assert len((run / "loss_log.jsonl").read_text().splitlines()) == 4

        for name in ("pred", "pred_again"):
            args = ["segment", "--checkpoint", str(checkpoint), "--data", str(dataset_dir), "--out", str(temp_dir / name)]
            assert main(args) == 0
        for name in (PRED_P_HC, PRED_SEG, PRED_REPORT):
            first = (temp_dir / "pred" / "case_002" / name).read_bytes()
            assert first == (temp_dir / "pred_again" / "case_002" / name).read_bytes()

        args = ["evaluate", "--pred", str(temp_dir / "pred"), "--data", str(dataset_dir), "--out", str(temp_dir / "eval")]
        assert main(args) == 0
        report = json.loads((temp_dir / "eval" / "evaluation.json").read_text())
        assert [c["case_id"] for c in report["cases"]] == ["case_002"]

    def test_denoise_single_volume(self, temp_dir: Path, tiny_config_path: Path, dataset_dir: Path):
        """Test denoising one file with the fast estimate."""
        run = temp_dir / "run"
        assert main(["train", "--config", str(tiny_config_path), "--data", str(dataset_dir), "--out", str(run)]) == 0
        args = [
            "denoise",
            "--checkpoint",
            str(run / "checkpoint_final.pckpt"),
            "--input",
            str(dataset_dir / "case_002" / "lc_0.1.pvol"),
            "--out",
            str(temp_dir / "den"),
            "--fast-seg",
        ]
        assert main(args) == 0
        assert (temp_dir / "den" / PRED_P_HC).exists()

    def test_resume_matches_uninterrupted(self, temp_dir: Path, tiny_config_path: Path, dataset_dir: Path):
        """Test --resume from an epoch checkpoint reproduces the final checkpoint."""
        config, data = str(tiny_config_path), str(dataset_dir)
        assert main(["train", "--config", config, "--data", data, "--out", str(temp_dir / "a")]) == 0
        resume = str(temp_dir / "a" / "checkpoint_epoch_001.pckpt")
        args = ["train", "--config", config, "--data", data, "--out", str(temp_dir / "b"), "--resume", resume]
        assert main(args) == 0
        final = "checkpoint_final.pckpt"
        assert (temp_dir / "a" / final).read_bytes() == (temp_dir / "b" / final).read_bytes()
