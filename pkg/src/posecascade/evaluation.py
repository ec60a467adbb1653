"""PCK metrics, per-stage accuracy curves, and the receptive-field sweep."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .beliefs import BeliefStack, Keypoints, extract_keypoints


@dataclass
class PckResult:
    """Fraction of keypoints within r * normalizer, per part and overall."""

    radii: np.ndarray        # (R,)
    per_part: np.ndarray     # (P, R); NaN where a part never had ground truth
    overall: np.ndarray      # (R,)
    part_counts: np.ndarray  # (P,) ground-truth occurrences per part

    def at(self, r: float) -> float:
        idx = int(np.argmin(np.abs(self.radii - r)))
        if not np.isclose(self.radii[idx], r):
            raise KeyError(f"radius {r} not evaluated (have {self.radii.tolist()})")
        return float(self.overall[idx])


class PckAccumulator:
    """Streaming PCK over (prediction, ground truth, normalizer) triples.

    A part is correct at radius r iff its Euclidean error is <= r * normalizer
    (boundary counts as correct).  Parts absent in the ground truth are
    excluded from both numerator and denominator.
    """

    def __init__(self, radii: Sequence[float], parts: Optional[int] = None):
        self.radii = np.asarray(sorted(float(r) for r in radii))
        if self.radii.size == 0 or np.any(self.radii < 0):
            raise ValueError("radii must be non-negative and non-empty")
        self._parts = parts
        self._correct = None  # (P, R)
        self._counts = None   # (P,)

    def _ensure(self, parts: int) -> None:
        if self._correct is None:
            self._parts = parts
            self._correct = np.zeros((parts, self.radii.size), dtype=np.int64)
            self._counts = np.zeros(parts, dtype=np.int64)
        elif parts != self._parts:
            raise ValueError(f"keypoint count changed from {self._parts} to {parts}")

    def add(self, pred: Keypoints, gt: Keypoints, normalizer: float) -> None:
        if normalizer <= 0:
            raise ValueError(f"normalizer must be positive, got {normalizer}")
        self._ensure(len(gt))
        dist = np.linalg.norm(pred.xy - gt.xy, axis=1)
        for p in range(len(gt)):
            if not gt.present[p]:
                continue
            self._counts[p] += 1
            self._correct[p] += dist[p] <= self.radii * normalizer

    def result(self) -> PckResult:
        if self._correct is None:
            raise ValueError("no samples accumulated")
        with np.errstate(invalid="ignore", divide="ignore"):
            per_part = self._correct / self._counts[:, None]
        total = self._counts.sum()
        overall = self._correct.sum(axis=0) / total if total else np.full(self.radii.size, np.nan)
        return PckResult(radii=self.radii.copy(), per_part=per_part,
                         overall=overall, part_counts=self._counts.copy())


def pck(pred: Keypoints, gt: Keypoints, r: float, normalizer: float) -> PckResult:
    """Single-pair PCK at one radius (see :class:`PckAccumulator` for the rules)."""
    acc = PckAccumulator([r])
    acc.add(pred, gt, normalizer)
    return acc.result()


def stage_curve(model, dataset, sigma: float,
                radii: Sequence[float] = (0.05, 0.1, 0.2),
                eval_batch: int = 32) -> List[PckResult]:
    """Independent PCK evaluation of every stage's belief maps."""
    from .training import assemble_batch  # local import avoids a module cycle

    stages = model.spec.stages
    stride = model.spec.heatmap_stride
    accs = [PckAccumulator(radii) for _ in range(stages)]
    n = len(dataset)
    for start in range(0, n, eval_batch):
        samples = [dataset.base(i) for i in range(start, min(start + eval_batch, n))]
        image, center, _, _ = assemble_batch(samples, model.spec, sigma, model.dtype)
        outs = model.forward(image, center)
        for t in range(stages):
            for b, sample in enumerate(samples):
                pred = extract_keypoints(BeliefStack(scores=outs[t].data[b]), stride)
                accs[t].add(pred, sample.keypoints,
                            normalizer=sample.keypoints.bbox_max_side())
    return [acc.result() for acc in accs]


@dataclass
class RfSweepRow:
    rf_image: int
    rf_beliefs: int
    parameters: int
    pck_at_02: float


def rf_sweep(spec_family, train_data, val_data, config,
             out_csv=None, seed: int = 0) -> List[RfSweepRow]:
    """Train one model per spec and report PCK@0.2 against receptive field.

    The family must hold the parameter count steady: any member deviating
    more than 10% from the family mean is rejected before any training runs.
    """
    from .architecture import build_cpm, spec_parameter_count
    from .receptive import receptive_field
    from .training import train

    specs = list(spec_family)
    if not specs:
        raise ValueError("rf_sweep needs at least one spec")
    counts = [spec_parameter_count(s) for s in specs]
    mean = float(np.mean(counts))
    drift = max(abs(c - mean) for c in counts) / mean
    if drift > 0.10:
        raise ValueError(
            f"parameter counts {counts} drift {drift:.1%} from the mean; "
            "the sweep requires the family to stay within 10%"
        )

    rows: List[RfSweepRow] = []
    for spec, count in zip(specs, counts):
        report = receptive_field(spec)
        model = build_cpm(spec, seed=seed)
        result = train(model, train_data, config, val_data=val_data)
        final = [r for r in result.metrics if r["epoch"] == result.epochs_run
                 and r["stage"] == spec.stages]
        rows.append(RfSweepRow(
            rf_image=report.composed_rf_image,
            rf_beliefs=report.stages[-1].rf_on_beliefs or 0,
            parameters=count,
            pck_at_02=final[0]["pck_at_0.2"] if final else float("nan"),
        ))
    if out_csv is not None:
        write_rf_sweep_csv(rows, out_csv)
    return rows


# -- CSV writers -----------------------------------------------------------------


def _fmt(value):
    return repr(value) if isinstance(value, float) else value


def write_pck_csv(result: PckResult, path, part_names: Optional[Sequence[str]] = None) -> None:
    """(part, r, pck) rows; the overall row uses part name 'all'."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["part", "r", "pck"])
        parts = result.per_part.shape[0]
        names = list(part_names) if part_names else [f"part{p}" for p in range(parts)]
        for p in range(parts):
            for j, r in enumerate(result.radii):
                writer.writerow([names[p], _fmt(float(r)), _fmt(float(result.per_part[p, j]))])
        for j, r in enumerate(result.radii):
            writer.writerow(["all", _fmt(float(r)), _fmt(float(result.overall[j]))])


def write_stage_curve_csv(results: Sequence[PckResult], path) -> None:
    """(stage, r, pck) rows, one per stage per radius."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "r", "pck"])
        for t, result in enumerate(results, start=1):
            for j, r in enumerate(result.radii):
                writer.writerow([t, _fmt(float(r)), _fmt(float(result.overall[j]))])


def write_rf_sweep_csv(rows: Sequence[RfSweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rf_image", "rf_beliefs", "parameters", "pck_at_0.2"])
        for row in rows:
            writer.writerow([row.rf_image, row.rf_beliefs, row.parameters,
                             _fmt(row.pck_at_02)])
