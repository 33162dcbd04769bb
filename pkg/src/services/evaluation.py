"""Evaluation of prediction directories and the ablation harness.

A prediction directory holds one sub-directory per case (as written by
pipeline.write_prediction); the reference is a generated dataset whose manifest
pairs each case id with its high-count volume, labels and ground-truth metrics.
"""

import logging
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..config import ExperimentConfig
from .errors import DegenerateInputError, UndefinedMetricError
from .metrics import (
    class_dice,
    class_nrmse,
    clinical_metrics,
    format_bias,
    ols_regression,
    percent_bias,
    summarize_bias,
    wilcoxon_signed_rank,
)
from .models import (
    AblationReport,
    AblationRow,
    BiasSummary,
    CaseEvaluation,
    ClassRoster,
    DatasetManifest,
    EvaluationReport,
    QuantReport,
    RegressionResult,
    WilcoxonResult,
)
from .phantom import load_manifest
from .pipeline import PRED_P_HC, PRED_SEG, load_model, predict_dataset
from .training import load_training_cases, train
from .volume import read_labels, read_suv, write_json

logger = logging.getLogger(__name__)

SIGNIFICANCE = 0.05
REPORT_JSON = "evaluation.json"
REPORT_TEXT = "evaluation.txt"


# =============================================================================
# PER-CASE METRICS
# =============================================================================


def _quant_values(report: QuantReport) -> dict[str, Optional[float]]:
    """Flat clinical metrics: mtv, tlg and suv_mean/<organ>."""
    values: dict[str, Optional[float]] = {"mtv": report.mtv_ml, "tlg": report.tlg}
    for organ, value in report.suv_mean.items():
        values[f"suv_mean/{organ}"] = value
    return values


def _case_bias(predicted: QuantReport, truth: QuantReport) -> dict[str, Optional[float]]:
    bias: dict[str, Optional[float]] = {}
    pred_values = _quant_values(predicted)
    for key, gt in _quant_values(truth).items():
        est = pred_values.get(key)
        if gt is None or est is None:
            bias[key] = None
            continue
        try:
            bias[key] = percent_bias(est, gt)
        except UndefinedMetricError:
            bias[key] = None
    return bias


def evaluate_case(pred_case_dir: Path, data_dir: Path, manifest: DatasetManifest, case_id: str) -> CaseEvaluation:
    """Compare one predicted case against the dataset's high-count volume and labels."""
    record = next(c for c in manifest.cases if c.case_id == case_id)
    roster = ClassRoster(names=tuple(manifest.roster))
    hc = read_suv(data_dir / record.files["hc"])
    labels = read_labels(data_dir / record.files["labels"])
    p_hc = read_suv(Path(pred_case_dir) / PRED_P_HC)
    seg = read_labels(Path(pred_case_dir) / PRED_SEG)

    predicted = clinical_metrics(p_hc, seg, roster)
    return CaseEvaluation(
        case_id=case_id,
        nrmse=class_nrmse(p_hc, hc, labels, roster),
        dice=class_dice(seg, labels, roster),
        predicted=predicted,
        ground_truth=record.ground_truth,
        bias=_case_bias(predicted, record.ground_truth),
    )


def case_values(case: CaseEvaluation) -> dict[str, Optional[float]]:
    """Every per-case scalar keyed as nrmse/<class>, dice/<class> or bias/<metric>."""
    values: dict[str, Optional[float]] = {}
    values.update({f"nrmse/{k}": v for k, v in case.nrmse.items()})
    values.update({f"dice/{k}": v for k, v in case.dice.items()})
    values.update({f"bias/{k}": v for k, v in case.bias.items()})
    return values


# =============================================================================
# AGGREGATES
# =============================================================================


def _mean_present(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def _mean_by_key(rows: Sequence[dict[str, Optional[float]]]) -> dict[str, Optional[float]]:
    keys = list(dict.fromkeys(k for row in rows for k in row))
    return {k: _mean_present([row.get(k) for row in rows]) for k in keys}


def _regressions(cases: Sequence[CaseEvaluation]) -> dict[str, Optional[RegressionResult]]:
    """Predicted vs ground truth per clinical metric; None when the fit is undefined."""
    results: dict[str, Optional[RegressionResult]] = {}
    keys = list(dict.fromkeys(k for c in cases for k in _quant_values(c.ground_truth)))
    for key in keys:
        pairs = [
            (_quant_values(c.ground_truth).get(key), _quant_values(c.predicted).get(key)) for c in cases
        ]
        pairs = [(x, y) for x, y in pairs if x is not None and y is not None]
        try:
            results[key] = ols_regression([x for x, _ in pairs], [y for _, y in pairs])
        except DegenerateInputError as e:
            logger.warning(f"No regression for {key}: {e}")
            results[key] = None
    return results


def _bias_summaries(cases: Sequence[CaseEvaluation]) -> dict[str, Optional[BiasSummary]]:
    summaries: dict[str, Optional[BiasSummary]] = {}
    keys = list(dict.fromkeys(k for c in cases for k in c.bias))
    for key in keys:
        values = [c.bias[key] for c in cases if c.bias.get(key) is not None]
        if not values:
            summaries[key] = None
            continue
        mean, std = summarize_bias(values)
        summaries[key] = BiasSummary(mean=mean, std=std, n=len(values), text=format_bias(mean, std))
    return summaries


def paired_tests(
    a: Sequence[CaseEvaluation], b: Sequence[CaseEvaluation]
) -> dict[str, Optional[WilcoxonResult]]:
    """Wilcoxon signed-rank per metric over the cases present in both runs."""
    by_id = {c.case_id: case_values(c) for c in b}
    common = [(case_values(c), by_id[c.case_id]) for c in a if c.case_id in by_id]
    keys = list(dict.fromkeys(k for va, _ in common for k in va))
    results: dict[str, Optional[WilcoxonResult]] = {}
    for key in keys:
        pairs = [(va[key], vb.get(key)) for va, vb in common]
        pairs = [(x, y) for x, y in pairs if x is not None and y is not None]
        if not pairs:
            results[key] = None
            continue
        results[key] = wilcoxon_signed_rank([x for x, _ in pairs], [y for _, y in pairs])
    return results


def _prediction_cases(pred_dir: Path) -> list[str]:
    pred_dir = Path(pred_dir)
    if not pred_dir.is_dir():
        return []
    return sorted(p.name for p in pred_dir.iterdir() if (p / PRED_P_HC).is_file() and (p / PRED_SEG).is_file())


def _evaluate_cases(
    pred_dir: Path, data_dir: Path, manifest: DatasetManifest, split: Optional[str]
) -> tuple[list[CaseEvaluation], list[str]]:
    expected = {c.case_id for c in manifest.cases if split is None or c.split == split}
    known = {c.case_id for c in manifest.cases}
    predicted = _prediction_cases(pred_dir)

    unpaired = sorted((set(predicted) - known) | (expected - set(predicted)))
    for case_id in unpaired:
        logger.warning(f"Case {case_id} has no prediction/reference pair in {pred_dir}; excluded")
    cases = [evaluate_case(Path(pred_dir) / cid, data_dir, manifest, cid) for cid in predicted if cid in known]
    return cases, unpaired


def evaluate_dirs(
    pred_dir: Path,
    data_dir: Path,
    compare_dir: Optional[Path] = None,
    split: Optional[str] = "test",
) -> EvaluationReport:
    """Score a prediction directory against a dataset, optionally testing it against another run.

    Cases of `split` without a prediction and predictions without a manifest
    entry are listed under `unpaired` and excluded.
    """
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    cases, unpaired = _evaluate_cases(pred_dir, data_dir, manifest, split)
    report = EvaluationReport(
        cases=cases,
        unpaired=unpaired,
        mean_nrmse=_mean_by_key([c.nrmse for c in cases]),
        mean_dice=_mean_by_key([c.dice for c in cases]),
        regression=_regressions(cases),
        bias=_bias_summaries(cases),
    )
    if compare_dir is not None:
        other, _ = _evaluate_cases(compare_dir, data_dir, manifest, split)
        report.wilcoxon = paired_tests(cases, other)
    logger.info(f"Evaluated {len(cases)} cases from {pred_dir} ({len(unpaired)} unpaired)")
    return report


# =============================================================================
# TEXT TABLES
# =============================================================================


def _cell(value: Optional[float], digits: int = 4) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def render_table(title: str, columns: Sequence[str], rows: Sequence[tuple[str, Sequence[str]]]) -> str:
    """Fixed-width text table: first column left aligned, the rest right aligned."""
    header = ["", *columns]
    body = [[label, *cells] for label, cells in rows]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]

    def line(cells: Sequence[str]) -> str:
        parts = [cells[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        return "  ".join(parts).rstrip()

    rule = "-" * len(line(header))
    return "\n".join([title, rule, line(header), rule, *(line(r) for r in body), rule]) + "\n"


def render_evaluation(report: EvaluationReport) -> str:
    """NRMSE/Dice, regression, bias and optional Wilcoxon tables as one text block."""
    blocks = []
    classes = list(report.mean_nrmse)
    rows = [(c.case_id, [_cell(c.nrmse.get(k)) for k in classes]) for c in report.cases]
    rows.append(("mean", [_cell(report.mean_nrmse.get(k)) for k in classes]))
    blocks.append(render_table("NRMSE", classes, rows))

    classes = list(report.mean_dice)
    rows = [(c.case_id, [_cell(c.dice.get(k)) for k in classes]) for c in report.cases]
    rows.append(("mean", [_cell(report.mean_dice.get(k)) for k in classes]))
    blocks.append(render_table("Dice", classes, rows))

    rows = [
        (k, ["-"] * 4 if r is None else [_cell(r.slope), _cell(r.intercept), _cell(r.r_squared), str(r.n)])
        for k, r in report.regression.items()
    ]
    blocks.append(render_table("Regression (predicted vs ground truth)", ["slope", "intercept", "R2", "n"], rows))

    rows = [(k, ["-" if b is None else b.text]) for k, b in report.bias.items()]
    blocks.append(render_table("Percent bias", ["mean ± std"], rows))

    if report.wilcoxon is not None:
        rows = [
            (k, ["-", "-"] if w is None else [_cell(w.statistic, 1), f"{w.p_two_sided:.4g}"])
            for k, w in report.wilcoxon.items()
        ]
        blocks.append(render_table("Wilcoxon signed-rank vs comparison", ["W+", "p"], rows))

    if report.unpaired:
        blocks.append("Unpaired (excluded): " + ", ".join(report.unpaired) + "\n")
    return "\n".join(blocks)


def write_evaluation(report: EvaluationReport, out_dir: Path) -> tuple[Path, Path]:
    """Write the JSON report and its text rendering."""
    out_dir = Path(out_dir)
    json_path, text_path = out_dir / REPORT_JSON, out_dir / REPORT_TEXT
    write_json(report.model_dump(mode="json"), json_path)
    text_path.write_text(render_evaluation(report), encoding="utf-8")
    return json_path, text_path


# =============================================================================
# ABLATION
# =============================================================================

ABLATION_SLUGS = {"full": "full", "w/o regularizer": "wo_regularizer", "w/o revision": "wo_revision"}


def ablation_variants(config: ExperimentConfig) -> dict[str, ExperimentConfig]:
    """Full model plus one variant per removed component; only the ablation section differs."""

    def variant(lor: bool, revision: bool) -> ExperimentConfig:
        ablation = config.ablation.model_copy(
            update={"use_lor_regularizer": lor, "use_revision_module": revision}
        )
        return config.model_copy(update={"ablation": ablation})

    return {
        "full": variant(True, True),
        "w/o regularizer": variant(False, True),
        "w/o revision": variant(True, False),
    }


def ablation_columns(report: EvaluationReport) -> list[str]:
    return [f"nrmse/{k}" for k in report.mean_nrmse] + [f"dice/{k}" for k in report.mean_dice]


def _report_means(report: EvaluationReport) -> dict[str, Optional[float]]:
    means = {f"nrmse/{k}": v for k, v in report.mean_nrmse.items()}
    means.update({f"dice/{k}": v for k, v in report.mean_dice.items()})
    return means


def build_ablation_report(
    variants: dict[str, tuple[AblationRow, EvaluationReport]], alpha: float = SIGNIFICANCE
) -> AblationReport:
    """Assemble the comparison; a full-row cell is starred when p < alpha against every ablation."""
    full_row, full_eval = variants["full"]
    columns = ablation_columns(full_eval)
    tests = [paired_tests(full_eval.cases, ev.cases) for name, (_, ev) in variants.items() if name != "full"]
    full_row.starred = [
        col
        for col in columns
        if tests and all(t.get(col) is not None and t[col].p_two_sided < alpha for t in tests)
    ]
    rows = []
    for row, evaluation in variants.values():
        means = _report_means(evaluation)
        row.values = {col: means.get(col) for col in columns}
        rows.append(row)
    return AblationReport(columns=columns, rows=rows, alpha=alpha)


def render_ablation(report: AblationReport) -> str:
    rows = []
    for row in report.rows:
        cells = [_cell(row.values.get(col)) + ("*" if col in row.starred else "") for col in report.columns]
        rows.append((row.variant, [*cells, _cell(row.mean_lor), _cell(row.mean_rev)]))
    table = render_table("Ablation", [*report.columns, "mean lor", "mean rev"], rows)
    return table + f"* p < {report.alpha:g} (Wilcoxon signed-rank) against every ablated variant\n"


def run_ablation(
    config: ExperimentConfig,
    data_dir: Path,
    out_dir: Path,
    on_variant: Optional[Callable[[str], None]] = None,
) -> AblationReport:
    """Train, predict and evaluate every variant from the same seed, then compare them."""
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    cases = load_training_cases(data_dir, "train")
    variants: dict[str, tuple[AblationRow, EvaluationReport]] = {}
    for name, variant_config in ablation_variants(config).items():
        if on_variant:
            on_variant(name)
        run_dir = out_dir / ABLATION_SLUGS[name]
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(variant_config.to_json(), encoding="utf-8")
        logger.info(f"Ablation variant '{name}' -> {run_dir}")

        result = train(cases, variant_config, run_dir)
        model, _ = load_model(result.checkpoint, variant_config)
        pred_dir = run_dir / "pred"
        predict_dataset(model, variant_config, data_dir, pred_dir, seed=variant_config.seed)
        evaluation = evaluate_dirs(pred_dir, data_dir)
        write_evaluation(evaluation, run_dir)

        history = result.history
        variants[name] = (
            AblationRow(
                variant=name,
                use_lor_regularizer=variant_config.ablation.use_lor_regularizer,
                use_revision_module=variant_config.ablation.use_revision_module,
                checkpoint=str(result.checkpoint.relative_to(out_dir)),
                mean_lor=float(np.mean([r.lor for r in history])),
                mean_rev=float(np.mean([r.rev for r in history])),
            ),
            evaluation,
        )

    report = build_ablation_report(variants)
    write_json(report.model_dump(mode="json"), out_dir / "ablation.json")
    (out_dir / "ablation.txt").write_text(render_ablation(report), encoding="utf-8")
    return report
