#!/usr/bin/env python3
"""End-to-end smoke run on small phantoms.

Generates six 32^3 phantoms (liver and lung, so four classes), trains the joint
model for 4 epochs of 100 steps at T = 50, segments the two held-out cases,
evaluates them and runs the ablation study. Every stage goes through the pjd
command line; the gates are checked on the files it writes.

Usage:
    # Full run (about half an hour on a desktop CPU)
    python scripts/smoke_acceptance.py --out runs/smoke

    # Skip the three-variant ablation
    python scripts/smoke_acceptance.py --out runs/smoke --skip-ablation

Exit code 0 when every gate passes, 1 otherwise.
"""

import argparse
import json
import sys
import time
from pathlib import Path

from rich.console import Console
from rich.table import Table

# Add project root to path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from src.cli.main import main as pjd
from src.config import ExperimentConfig
from src.services.metrics import nrmse, percent_bias
from src.services.phantom import load_manifest
from src.services.pipeline import PRED_P_HC, PRED_SEG, quantify
from src.services.volume import read_json, read_labels, read_suv

console = Console()

SMOKE_CONFIG = {
    "phantom": {
        "dims": [32, 32, 32],
        "organs": ["liver", "lung"],
        "lesion_count": [1, 1],
        "lesion_radius_mm": [6.0, 8.0],
        "lesion_suv": [10.0, 14.0],
        "fractions": [0.1, 0.25],
        "n_test": 2,
    },
    "diffusion": {"T": 50},
    "training": {"e_max": 4, "steps_per_epoch": 100, "batch_size": 2},
    "inference": {"count_fraction": 0.1},
    "seed": 2024,
}
N_CASES = 6
TRAIN_LIMIT_S = 30 * 60


class Gates:
    """Collects named pass/fail checks with the measured values."""

    def __init__(self):
        self.rows: list[tuple[str, bool, str]] = []

    def check(self, name: str, passed: bool, detail: str) -> None:
        self.rows.append((name, bool(passed), detail))

    def same_bytes(self, name: str, a: Path, b: Path) -> None:
        self.check(name, a.read_bytes() == b.read_bytes(), f"{a.name}")

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.rows)

    def print(self) -> None:
        table = Table(title="Smoke gates")
        table.add_column("gate")
        table.add_column("result")
        table.add_column("detail")
        for name, ok, detail in self.rows:
            table.add_row(name, "[green]pass[/green]" if ok else "[red]FAIL[/red]", detail)
        console.print(table)


def run(args: list[str]) -> None:
    code = pjd(args)
    if code != 0:
        raise SystemExit(f"pjd {args[0]} exited with {code}")


def epoch_means(loss_log: Path, key: str) -> dict[int, float]:
    rows = [json.loads(line) for line in loss_log.read_text().splitlines()]
    by_epoch: dict[int, list[float]] = {}
    for row in rows:
        by_epoch.setdefault(row["epoch"], []).append(row[key])
    return {e: sum(v) / len(v) for e, v in by_epoch.items()}


def check_cases(gates: Gates, data_dir: Path, pred_dir: Path, eval_json: Path, fraction: float) -> None:
    """Denoising, segmentation and quantification gates per held-out case."""
    manifest = load_manifest(data_dir)
    report = read_json(eval_json)
    evaluated = {c["case_id"]: c for c in report["cases"]}
    gates.check("evaluation report complete", not report["unpaired"], f"{len(evaluated)} cases")

    for record in (c for c in manifest.cases if c.split == "test"):
        case_id = record.case_id
        hc = read_suv(data_dir / record.files["hc"])
        truth = read_labels(data_dir / record.files["labels"])
        i_lc = read_suv(data_dir / manifest.lc_file(record, fraction))
        p_hc = read_suv(pred_dir / case_id / PRED_P_HC)
        seg = read_labels(pred_dir / case_id / PRED_SEG)

        ours, baseline = nrmse(p_hc.data, hc.data), nrmse(i_lc.data, hc.data)
        gates.check(f"{case_id} NRMSE below low-count", ours < baseline, f"{ours:.4f} vs {baseline:.4f}")

        dice = evaluated[case_id]["dice"]
        counts = {name: int((truth.data == s).sum()) for s, name in enumerate(manifest.roster) if s >= 2}
        largest = max(counts, key=counts.get)
        gates.check(f"{case_id} lesion Dice > 0.5", dice["lesion"] > 0.5, f"{dice['lesion']:.3f}")
        gates.check(f"{case_id} {largest} Dice > 0.7", dice[largest] > 0.7, f"{dice[largest]:.3f}")

        gt_tlg = record.ground_truth.tlg
        ours_bias = evaluated[case_id]["bias"].get("tlg")
        lc_bias = percent_bias(quantify(i_lc, seg).tlg, gt_tlg)
        ok = ours_bias is not None and abs(ours_bias) < abs(lc_bias)
        detail = "undefined" if ours_bias is None else f"{ours_bias:+.2f}% vs {lc_bias:+.2f}%"
        gates.check(f"{case_id} |TLG bias| below low-count", ok, detail)


def main() -> int:
    parser = argparse.ArgumentParser(description="End-to-end smoke run")
    parser.add_argument("--out", type=Path, default=Path("runs/smoke"), help="Work directory")
    parser.add_argument("--skip-ablation", action="store_true", help="Skip the ablation study")
    args = parser.parse_args()

    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    config = ExperimentConfig.model_validate(SMOKE_CONFIG)
    config_path = out / "smoke.json"
    config_path.write_text(config.to_json(), encoding="utf-8")
    cfg = ["--config", str(config_path)]
    gates = Gates()

    data, data_again = out / "data", out / "data_again"
    run(["phantom", *cfg, "--out", str(data), "--n-cases", str(N_CASES)])
    run(["phantom", *cfg, "--out", str(data_again), "--n-cases", str(N_CASES)])
    gates.same_bytes("phantom rerun identical", data / "manifest.json", data_again / "manifest.json")

    started = time.monotonic()
    run(["train", *cfg, "--data", str(data), "--out", str(out / "run")])
    elapsed = time.monotonic() - started
    gates.check("training under 30 min", elapsed < TRAIN_LIMIT_S, f"{elapsed / 60:.1f} min")
    diff = epoch_means(out / "run" / "loss_log.jsonl", "diff")
    first, last = diff[min(diff)], diff[max(diff)]
    gates.check("diffusion loss decreases", last < first, f"{first:.4f} -> {last:.4f}")

    checkpoint = str(out / "run" / "checkpoint_final.pckpt")
    for name in ("pred", "pred_again"):
        run(["segment", *cfg, "--checkpoint", checkpoint, "--data", str(data), "--out", str(out / name)])
    for case_dir in sorted((out / "pred").iterdir()):
        gates.same_bytes(f"{case_dir.name} segment rerun identical", case_dir / PRED_SEG, out / "pred_again" / case_dir.name / PRED_SEG)

    run(["evaluate", "--pred", str(out / "pred"), "--data", str(data), "--out", str(out / "eval")])
    check_cases(gates, data, out / "pred", out / "eval" / "evaluation.json", config.inference.count_fraction)

    if not args.skip_ablation:
        run(["ablate", *cfg, "--data", str(data), "--out", str(out / "ablation")])
        rows = {r["variant"]: r for r in read_json(out / "ablation" / "ablation.json")["rows"]}
        gates.check("three ablation variants", len(rows) == 3, ", ".join(rows))
        gates.check("w/o regularizer logs lor = 0", rows["w/o regularizer"]["mean_lor"] == 0.0, "")
        gates.check("w/o revision logs rev = 0", rows["w/o revision"]["mean_rev"] == 0.0, "")

    gates.print()
    return 0 if gates.passed else 1


if __name__ == "__main__":
    sys.exit(main())
