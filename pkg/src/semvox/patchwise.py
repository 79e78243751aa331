"""Memory-bounded block training: partition the parameter list, train one
contiguous patch at a time from a common snapshot, stitch the results.

Semantics are Jacobi-style: before EVERY patch, all parameters are restored
to the snapshot taken at entry, so each patch trains independently of the
others' updates. The final model carries, for each parameter, the value its
own patch produced. A sequential (Gauss-Seidel) mode is available for
comparison but is not the reference behavior.
"""

from __future__ import annotations

import csv
import math
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional

from .autodiff import (
    ToyModel,
    TrainingData,
    backward,
    forward,
    grad_buffer_count,
    joint_loss,
    set_trainable_slots,
    sgd_step,
    unfreeze_all,
)
from .errors import InvalidPercentage, TrainStepMutatedFrozen

REPORT_COLUMNS = ("epoch", "patch_index", "start", "end",
                  "loss_before", "loss_after", "max_grad_buffers")


@dataclass(frozen=True)
class PatchPlan:
    """Ordered partition of [0, n) parameter slots into ranges of size m."""

    n: int
    m: int
    ranges: tuple[tuple[int, int], ...]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def plan_patches(n: int, train_percentage: float) -> PatchPlan:
    """Patch size m = round-half-up(n * p), clamped to >= 1.

    The clamp matters: a literal round could produce m = 0 for small p*n,
    which would leave the iteration count undefined.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 0.0 < train_percentage <= 1.0:
        raise InvalidPercentage(f"train_percentage {train_percentage} not in (0, 1]")
    m = max(1, _round_half_up(n * train_percentage))
    ranges = tuple(
        (start, min(start + m, n)) for start in range(0, n, m)
    )
    return PatchPlan(n=n, m=m, ranges=ranges)


@dataclass
class PatchRecord:
    epoch: int
    patch_index: int
    start: int
    end: int
    loss_before: float
    loss_after: float
    max_grad_buffers: int
    steps: int = 1
    pre_checksum: int = 0
    post_checksum: int = 0


@dataclass
class PatchTrainReport:
    records: list[PatchRecord] = field(default_factory=list)
    total_time: float = 0.0

    def max_grad_buffers(self) -> int:
        return max((r.max_grad_buffers for r in self.records), default=0)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(REPORT_COLUMNS)
            for r in self.records:
                writer.writerow([r.epoch, r.patch_index, r.start, r.end,
                                 repr(r.loss_before), repr(r.loss_after),
                                 r.max_grad_buffers])


def _params_checksum(params) -> int:
    crc = 0
    for p in params:
        crc = zlib.crc32(p.data.tobytes(), crc)
    return crc


def patchwise_train(
    model: ToyModel,
    train_percentage: float,
    train_step: Callable[[ToyModel], Optional[float]],
    *,
    plan: Optional[PatchPlan] = None,
    sequential: bool = False,
    eval_fn: Optional[Callable[[ToyModel], float]] = None,
    epoch: int = 0,
) -> tuple[ToyModel, PatchTrainReport]:
    """One full sweep over the parameter patches.

    Per patch: restore every parameter to the entry snapshot, mark only the
    patch trainable, run train_step, then record the patch's weights. After
    the sweep each parameter carries its own patch's result. Slots beyond
    plan.n (when a restricted plan is passed) stay frozen at the snapshot.

    With sequential=True the restore step is skipped so each patch continues
    from the previous patch's weights; that is a comparison mode, not the
    reference semantics.
    """
    params = model.parameters()
    if plan is None:
        plan = plan_patches(len(params), train_percentage)
    snapshot = [p.data.copy() for p in params]
    updated: dict[int, object] = {}
    report = PatchTrainReport()
    t0 = time.perf_counter()
    for patch_index, (start, end) in enumerate(plan.ranges):
        if not sequential:
            for p, saved in zip(params, snapshot):
                p.data = saved.copy()
        # frozen slots must come back bit-identical to their state here
        ref_bytes = [p.data.tobytes() for p in params]
        set_trainable_slots(model, range(start, end))
        pre = _params_checksum(params)
        loss_before = float("nan") if eval_fn is None else eval_fn(model)
        train_step(model)
        loss_after = float("nan") if eval_fn is None else eval_fn(model)
        for i, p in enumerate(params):
            if start <= i < end:
                continue
            if p.data.tobytes() != ref_bytes[i]:
                raise TrainStepMutatedFrozen(f"parameter slot {i} changed")
        report.records.append(PatchRecord(
            epoch=epoch,
            patch_index=patch_index,
            start=start,
            end=end,
            loss_before=loss_before,
            loss_after=loss_after,
            max_grad_buffers=grad_buffer_count(model),
            pre_checksum=pre,
            post_checksum=_params_checksum(params),
        ))
        for i in range(start, end):
            updated[i] = params[i].data.copy()
    for i, p in enumerate(params):
        if i in updated:
            p.data = updated[i]
        elif not sequential:
            p.data = snapshot[i].copy()
    unfreeze_all(model)
    report.total_time = time.perf_counter() - t0
    return model, report


def make_sgd_train_step(data: TrainingData, learning_rate: float,
                        ssi_weight: float = 1.0, bce_weight: float = 1.0):
    """train_step doing one full joint-loss SGD pass over the data."""

    def step(model: ToyModel) -> float:
        disp, seg = forward(model, data.inputs)
        loss = joint_loss(disp, data.disparity, seg, data.seg, data.mask,
                          ssi_weight, bce_weight)
        backward(loss)
        sgd_step(model, learning_rate)
        return loss.item()

    return step


def make_joint_loss_eval(data: TrainingData, ssi_weight: float = 1.0,
                         bce_weight: float = 1.0):
    def evaluate(model: ToyModel) -> float:
        disp, seg = forward(model, data.inputs)
        return joint_loss(disp, data.disparity, seg, data.seg, data.mask,
                          ssi_weight, bce_weight).item()

    return evaluate


def run_patchwise_epochs(
    model: ToyModel,
    train_percentage: float,
    epochs: int,
    data: TrainingData,
    learning_rate: float,
    *,
    plan: Optional[PatchPlan] = None,
    sequential: bool = False,
) -> tuple[ToyModel, PatchTrainReport]:
    """Repeat the patch sweep for a number of epochs.

    train_step is fixed to one full joint-loss SGD pass over the data, so
    every patch sees the whole dataset once per epoch.
    """
    step = make_sgd_train_step(data, learning_rate)
    evaluate = make_joint_loss_eval(data)
    combined = PatchTrainReport()
    t0 = time.perf_counter()
    for epoch in range(epochs):
        model, report = patchwise_train(
            model, train_percentage, step,
            plan=plan, sequential=sequential, eval_fn=evaluate, epoch=epoch,
        )
        combined.records.extend(report.records)
    combined.total_time = time.perf_counter() - t0
    return model, combined


def plan_encoder_restricted(model: ToyModel, encoder_percentage: float,
                            train_percentage: float) -> PatchPlan:
    """Plan covering only the first round(EP * trunk_slots) parameter slots.

    Interpretation of the "encoder percentage" knob: patch training is
    restricted to a leading fraction of the trunk's parameter slots and all
    remaining slots stay frozen for the whole sweep. This reading is a
    documented guess; the knob has no precise published definition.
    """
    if not 0.0 < encoder_percentage <= 1.0:
        raise InvalidPercentage(f"encoder_percentage {encoder_percentage} not in (0, 1]")
    limit = max(1, _round_half_up(model.trunk_slot_count * encoder_percentage))
    return plan_patches(limit, train_percentage)
