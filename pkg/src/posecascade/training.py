"""Training: per-stage losses, the four training schemes, gradient histograms.

The objective is an unnormalized sum of squared belief-map errors per stage;
the total objective adds the stage losses in fixed order.  Four schemes are
supported:

    i    global_with_intermediate   minimize the sum of all stage losses
    ii   stagewise                  train stage 1 to convergence, freeze,
                                    then stage 2, and so on
    iii  stagewise_then_finetune    a stagewise pass, then joint fine-tuning
    iv   global_no_intermediate     minimize only the final stage's loss

"Budget" is the total number of SGD epochs: scheme (ii) splits it evenly
across stages (with early stopping when the validation stage loss improves
by less than 1% over 3 consecutive epochs), and scheme (iii) spends half of
it stagewise and the rest jointly.  A parameter is owned by the lowest stage
that uses it, so the image-feature trunk shared by stages >= 2 is trained in
the stage-2 phase and frozen afterwards.

All randomness (batch order, per-sample augmentation) is a pure function of
(seed, epoch, sample index), which makes reruns bitwise-identical and lets a
resumed run reproduce the uninterrupted one exactly.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .architecture import Model, save_model
from .beliefs import BeliefStack, extract_keypoints
from .engine import Parameter, Tape, Tensor, backward, mul, sgd_step, sub, sum_all
from .engine.tensor import ShapeError
from .evaluation import PckAccumulator
from .synth import SynthDataset, augment, make_training_pair

SCHEMES = {
    "i": "global_with_intermediate",
    "ii": "stagewise",
    "iii": "stagewise_then_finetune",
    "iv": "global_no_intermediate",
}

_TAG_ORDER = 101
_TAG_AUGMENT = 202

CONVERGENCE_WINDOW = 3
CONVERGENCE_THRESHOLD = 0.01
DEFAULT_STAGE_CAP = 30


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered; a diagnostic snapshot was written if possible."""


@dataclass
class TrainConfig:
    learning_rate: float
    batch_size: int
    epochs: int
    seed: int
    sigma: float
    scheme: str = "i"
    snapshot_every: int = 0          # 0: only the final checkpoint
    momentum: float = 0.0
    rotation_range: float = 40.0
    scale_range: Tuple[float, float] = (0.7, 1.3)
    flip: bool = True
    stagewise_cap: Optional[int] = None
    # scheme iii: fraction of the budget spent on joint fine-tuning; the
    # stagewise phases need the larger share to get each stage past the
    # all-zero-parts plateau before joint training takes over.
    finetune_fraction: float = 1.0 / 3.0
    eval_batch: int = 32

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {list(SCHEMES)}")
        if self.batch_size < 1 or self.sigma <= 0:
            raise ValueError("batch_size must be >= 1 and sigma > 0")
        if self.learning_rate < 0 or self.epochs < 0 or self.snapshot_every < 0:
            raise ValueError("learning_rate, epochs and snapshot_every must be >= 0")


# -- losses -------------------------------------------------------------------


def stage_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Sum over parts and grid cells of squared belief error (one stage)."""
    if pred.data.shape != target.data.shape:
        raise ShapeError(
            f"stage_loss: prediction shape {pred.data.shape} != target {target.data.shape}"
        )
    diff = sub(pred, target)
    return sum_all(mul(diff, diff))


def total_loss(per_stage: Sequence[Tensor]) -> Tensor:
    """Sum of stage losses, added in list order (same order every run)."""
    if len(per_stage) < 1:
        raise ValueError("total_loss needs at least one stage loss")
    total = per_stage[0]
    for term in per_stage[1:]:
        total = total + term
    return total


# -- gradient statistics --------------------------------------------------------

GRAD_BIN_EDGES = np.logspace(-12.0, 2.0, 65)


@dataclass
class GradRecord:
    epoch: int
    layer: str
    n: int
    mean_abs: float
    var_abs: float
    counts: np.ndarray


@dataclass
class GradientStats:
    """Per-layer |gradient| histograms over fixed log-spaced bins, per epoch."""

    bin_edges: np.ndarray = field(default_factory=lambda: GRAD_BIN_EDGES.copy())
    records: List[GradRecord] = field(default_factory=list)

    def record_epoch(self, epoch: int, params: Sequence[Parameter]) -> None:
        """Histogram current gradients (grouped by layer; missing grads count as 0)."""
        by_layer: Dict[str, List[np.ndarray]] = {}
        for p in params:
            layer = p.name.rsplit("/", 1)[0]
            g = p.tensor.grad
            values = np.zeros(p.tensor.data.size) if g is None else np.abs(
                g.astype(np.float64)).reshape(-1)
            by_layer.setdefault(layer, []).append(values)
        for layer in sorted(by_layer):
            values = np.concatenate(by_layer[layer])
            bins = np.clip(np.searchsorted(self.bin_edges, values, side="right") - 1,
                           0, len(self.bin_edges) - 2)
            counts = np.bincount(bins, minlength=len(self.bin_edges) - 1)
            self.records.append(GradRecord(
                epoch=epoch, layer=layer, n=values.size,
                mean_abs=float(values.mean()), var_abs=float(values.var()),
                counts=counts,
            ))

    def mean_abs(self, epoch: int, layer_prefix: str = "") -> float:
        """Parameter-weighted mean |gradient| over layers matching the prefix."""
        total = 0.0
        n = 0
        for rec in self.records:
            if rec.epoch == epoch and rec.layer.startswith(layer_prefix):
                total += rec.mean_abs * rec.n
                n += rec.n
        if n == 0:
            raise KeyError(f"no gradient records for epoch {epoch} prefix {layer_prefix!r}")
        return total / n

    def to_rows(self) -> List[dict]:
        rows = []
        for rec in self.records:
            row = {"epoch": rec.epoch, "layer": rec.layer, "n": rec.n,
                   "mean_abs": rec.mean_abs, "var_abs": rec.var_abs}
            for b, count in enumerate(rec.counts):
                row[f"bin{b:02d}"] = int(count)
            rows.append(row)
        return rows

    @classmethod
    def from_rows(cls, rows: Sequence[dict]) -> "GradientStats":
        stats = cls()
        nbins = len(stats.bin_edges) - 1
        for row in rows:
            counts = np.array([int(row[f"bin{b:02d}"]) for b in range(nbins)])
            stats.records.append(GradRecord(
                epoch=int(row["epoch"]), layer=row["layer"], n=int(row["n"]),
                mean_abs=float(row["mean_abs"]), var_abs=float(row["var_abs"]),
                counts=counts,
            ))
        return stats


def gradient_report(stats: GradientStats, out_dir, basename: str = "gradients") -> List[str]:
    """Write the per-layer/epoch histogram CSV plus a bin-edge table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = stats.to_rows()
    main = out_dir / f"{basename}.csv"
    nbins = len(stats.bin_edges) - 1
    fields = ["epoch", "layer", "n", "mean_abs", "var_abs"] + [
        f"bin{b:02d}" for b in range(nbins)
    ]
    with open(main, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    edges = out_dir / f"{basename}_bin_edges.csv"
    with open(edges, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "low", "high"])
        for b in range(nbins):
            writer.writerow([b, _fmt(stats.bin_edges[b]), _fmt(stats.bin_edges[b + 1])])
    return [str(main), str(edges)]


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


# -- deterministic randomness ---------------------------------------------------


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def _augment_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, _TAG_AUGMENT, epoch, index])
               .generate_state(1, dtype=np.uint64)[0])


# -- batches ---------------------------------------------------------------------


def assemble_batch(samples, spec, sigma: float, dtype=np.float32):
    """Stack samples into engine tensors: image, center map, two target stacks."""
    pairs = [make_training_pair(s, spec, sigma) for s in samples]
    image = Tensor(np.stack([p.image for p in pairs]).astype(dtype, copy=False))
    center = Tensor(np.stack([p.center for p in pairs]).astype(dtype, copy=False))
    stage1 = Tensor(np.stack([p.stage1_targets.scores for p in pairs]).astype(dtype, copy=False))
    later = Tensor(np.stack([p.later_targets.scores for p in pairs]).astype(dtype, copy=False))
    return image, center, stage1, later


# -- scheme phases ----------------------------------------------------------------


@dataclass
class Phase:
    name: str
    loss_stages: Tuple[int, ...]
    trainable_stages: Tuple[int, ...]
    max_epochs: int
    early_stop: bool
    forward_up_to: int


def scheme_phases(scheme: str, stages: int, config: TrainConfig) -> List[Phase]:
    epochs = config.epochs
    all_stages = tuple(range(1, stages + 1))

    def stagewise(budget: int) -> List[Phase]:
        base, rem = divmod(budget, stages)
        cap_limit = config.stagewise_cap or DEFAULT_STAGE_CAP
        phases = []
        for t in all_stages:
            alloc = base + (1 if t <= rem else 0)
            phases.append(Phase(
                name=f"stage{t}", loss_stages=(t,), trainable_stages=(t,),
                max_epochs=min(alloc, cap_limit), early_stop=True, forward_up_to=t,
            ))
        return phases

    if scheme == "i":
        return [Phase("joint", all_stages, all_stages, epochs, False, stages)]
    if scheme == "iv":
        return [Phase("final_only", (stages,), all_stages, epochs, False, stages)]
    if scheme == "ii":
        return stagewise(epochs)
    if scheme == "iii":
        stagewise_budget = int(round(epochs * (1.0 - config.finetune_fraction)))
        phases = stagewise(stagewise_budget)
        # The fine-tune phase absorbs whatever the stagewise pass left unused
        # (early stopping included); the global epoch budget is the only cap.
        phases.append(Phase("finetune", all_stages, all_stages, epochs, False, stages))
        return phases
    raise ValueError(f"unknown scheme {scheme!r}")


_STAGE_RE = re.compile(r"^stage(\d+)/")


def _owning_stage(name: str) -> int:
    m = _STAGE_RE.match(name)
    if not m:
        raise ValueError(f"parameter name {name!r} lacks a stage prefix")
    return int(m.group(1))


# -- training ----------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    metrics: List[dict]
    grad_stats: GradientStats
    epochs_run: int
    final_checkpoint: Optional[str] = None


def evaluate_model(model: Model, dataset: SynthDataset, sigma: float,
                   radius: float = 0.2, eval_batch: int = 32):
    """Per-stage mean loss and PCK on an un-augmented dataset.

    Returns (losses, pcks): two lists indexed by stage-1 offset.
    """
    stages = model.spec.stages
    loss_sums = np.zeros(stages)
    accs = [PckAccumulator([radius]) for _ in range(stages)]
    n = len(dataset)
    stride = model.spec.heatmap_stride
    for start in range(0, n, eval_batch):
        samples = [dataset.base(i) for i in range(start, min(start + eval_batch, n))]
        image, center, t1, later = assemble_batch(samples, model.spec, sigma, model.dtype)
        outs = model.forward(image, center)
        targets = [t1] + [later] * (stages - 1)
        for t in range(stages):
            diff = outs[t].data - targets[t].data
            per_sample = (diff.astype(np.float64) ** 2).sum(axis=(1, 2, 3))
            loss_sums[t] += per_sample.sum()
            for b, sample in enumerate(samples):
                stack = BeliefStack(scores=outs[t].data[b])
                pred = extract_keypoints(stack, stride)
                accs[t].add(pred, sample.keypoints,
                            normalizer=sample.keypoints.bbox_max_side())
    losses = [float(v) / max(n, 1) for v in loss_sums]
    pcks = [float(acc.result().overall[0]) for acc in accs]
    return losses, pcks


def train(model: Model, train_data: SynthDataset, config: TrainConfig,
          val_data: Optional[SynthDataset] = None, out_dir=None,
          resume: Optional[str] = None) -> TrainResult:
    """Run one training scheme to its epoch budget.

    Writes snapshots (checkpoint format) into ``out_dir/checkpoints`` at the
    configured cadence plus a final checkpoint, and aborts with a diagnostic
    snapshot on a non-finite loss.  ``resume`` takes a snapshot path and
    continues exactly where it left off.
    """
    stages = model.spec.stages
    phases = scheme_phases(config.scheme, stages, config)
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    unique_params = model.unique_parameters()
    owners = {p.name: _owning_stage(p.name) for p in unique_params}
    velocities: Dict[int, np.ndarray] = {}

    metrics: List[dict] = []
    grad_stats = GradientStats()
    epoch = 0
    phase_idx = 0
    epochs_in_phase = 0
    val_history: List[float] = []

    if resume is not None:
        from .architecture import load_model

        restored, data = load_model(resume, expected_spec=model.spec)
        by_name = {q.name: q for q in restored.unique_parameters()}
        for p in model.unique_parameters():
            p.tensor.data = by_name[p.name].tensor.data.astype(model.dtype, copy=True)
            vel = data.extra_arrays.get(f"velocity/{p.name}")
            if vel is not None:
                velocities[id(p.tensor)] = vel.astype(model.dtype, copy=True)
        state = data.extra["train_state"]
        epoch = int(state["epoch"])
        phase_idx = int(state["phase_idx"])
        epochs_in_phase = int(state["epochs_in_phase"])
        val_history = [float(v) for v in state["val_history"]]
        metrics = list(state["metrics_rows"])
        grad_stats = GradientStats.from_rows(state["grad_rows"])

    def train_state() -> dict:
        return {
            "epoch": epoch,
            "phase_idx": phase_idx,
            "epochs_in_phase": epochs_in_phase,
            "val_history": val_history,
            "metrics_rows": metrics,
            "grad_rows": grad_stats.to_rows(),
            "scheme": config.scheme,
            "seed": config.seed,
        }

    def snapshot(path) -> str:
        extra_arrays = {
            f"velocity/{p.name}": velocities[id(p.tensor)]
            for p in unique_params if id(p.tensor) in velocities
        }
        save_model(model, path, extra={"train_state": train_state()},
                   extra_arrays=extra_arrays)
        return str(path)

    final_path = None
    while phase_idx < len(phases) and epoch < config.epochs:
        phase = phases[phase_idx]
        if epochs_in_phase >= phase.max_epochs:
            phase_idx += 1
            epochs_in_phase = 0
            val_history = []
            continue

        epoch += 1
        epochs_in_phase += 1
        order = _rng(config.seed, _TAG_ORDER, epoch).permutation(len(train_data))
        trainable = [p for p in unique_params
                     if owners[p.name] in phase.trainable_stages]
        first_batch = True
        for start in range(0, len(order), config.batch_size):
            idxs = order[start:start + config.batch_size]
            samples = [
                augment(train_data.base(int(i)), _augment_seed(config.seed, epoch, int(i)),
                        rotation_range=config.rotation_range,
                        scale_range=config.scale_range, flip=config.flip)
                for i in idxs
            ]
            image, center, t1, later = assemble_batch(samples, model.spec,
                                                      config.sigma, model.dtype)
            targets = [t1] + [later] * (stages - 1)
            with Tape() as tape:
                outs = model.forward(image, center, up_to_stage=phase.forward_up_to)
                losses = {t: stage_loss(outs[t - 1], targets[t - 1])
                          for t in phase.loss_stages}
                objective = total_loss([losses[t] for t in phase.loss_stages])
                value = objective.item()
                if not math.isfinite(value):
                    msg = f"objective became non-finite ({value}) at epoch {epoch}"
                    if out_dir is not None:
                        path = snapshot(out_dir / "diverged.ckpt")
                        msg += f"; diagnostic snapshot at {path}"
                    raise TrainingDiverged(msg)
                backward(objective, tape)
            if first_batch:
                grad_stats.record_epoch(epoch, unique_params)
                first_batch = False
            sgd_step(trainable, config.learning_rate,
                     momentum=config.momentum,
                     velocities=velocities if config.momentum else None)
            for p in unique_params:
                p.tensor.grad = None

        if val_data is not None:
            losses, pcks = evaluate_model(model, val_data, config.sigma,
                                          eval_batch=config.eval_batch)
        else:
            losses, pcks = [float("nan")] * stages, [float("nan")] * stages
        for t in range(1, stages + 1):
            metrics.append({
                "epoch": epoch, "stage": t, "loss": losses[t - 1],
                "pck_at_0.2": pcks[t - 1],
                "in_objective": int(t in phase.loss_stages),
            })

        if phase.early_stop and val_data is not None:
            val_history.append(losses[phase.loss_stages[0] - 1])
            if _converged(val_history):
                phase_idx += 1
                epochs_in_phase = 0
                val_history = []

        if ckpt_dir is not None and config.snapshot_every and \
                epoch % config.snapshot_every == 0:
            snapshot(ckpt_dir / f"epoch_{epoch:04d}.ckpt")

    if out_dir is not None:
        final_path = snapshot(out_dir / "final.ckpt")
    return TrainResult(model=model, metrics=metrics, grad_stats=grad_stats,
                       epochs_run=epoch, final_checkpoint=final_path)


def _converged(history: List[float]) -> bool:
    """True when the last CONVERGENCE_WINDOW relative improvements are all < 1%."""
    if len(history) < CONVERGENCE_WINDOW + 1:
        return False
    recent = history[-(CONVERGENCE_WINDOW + 1):]
    for prev, cur in zip(recent, recent[1:]):
        if prev <= 0:
            continue
        if (prev - cur) / prev >= CONVERGENCE_THRESHOLD:
            return False
    return True


METRICS_FIELDS = ["epoch", "stage", "loss", "pck_at_0.2", "in_objective"]


def write_metrics_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in METRICS_FIELDS})


def read_metrics_csv(path) -> List[dict]:
    with open(path, "r", newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for row in reader:
            rows.append({
                "epoch": int(row["epoch"]), "stage": int(row["stage"]),
                "loss": float(row["loss"]), "pck_at_0.2": float(row["pck_at_0.2"]),
                "in_objective": int(row["in_objective"]),
            })
    return rows
