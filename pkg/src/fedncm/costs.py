"""Communication and compute accounting.

Every transmitted parameter costs 4 bytes (float32). A dense layer's
forward pass costs ``2 * in * out`` FLOPs per sample; activations and bias
adds are free. A backward pass costs twice the matching forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .errors import ParameterError
from .model import ModelParams

BYTES_PER_PARAM = 4
BACKWARD_TO_FORWARD = 2

UP = "up"
DOWN = "down"

FORWARD_ONLY = "forward_only"
HEAD_ONLY = "forward_backward_head_only"
FULL = "full"
PASS_MODES = (FORWARD_ONLY, HEAD_ONLY, FULL)


@dataclass(frozen=True)
class CostModel:
    base_forward_flops: int
    head_forward_flops: int
    bytes_per_param: int = BYTES_PER_PARAM
    backward_to_forward_ratio: int = BACKWARD_TO_FORWARD

    @classmethod
    def from_params(cls, params: ModelParams) -> "CostModel":
        base = sum(2 * layer.in_dim * layer.out_dim for layer in params.layers)
        head = 2 * params.feature_dim * params.num_classes
        return cls(base, head)

    @property
    def forward_flops_per_sample(self) -> int:
        return self.base_forward_flops + self.head_forward_flops


@dataclass(frozen=True)
class CostLedger:
    """Running totals. ``initial_bytes_down`` is the part of ``bytes_down``
    spent on the one-time model distribution before any training."""

    bytes_up: int = 0
    bytes_down: int = 0
    initial_bytes_down: int = 0
    forward_passes: int = 0
    backward_passes: int = 0
    head_backward_passes: int = 0
    flops: int = 0

    @property
    def total_bytes(self) -> int:
        return self.bytes_up + self.bytes_down


def charge_bytes(ledger: CostLedger, nbytes: int, direction: str, initial: bool = False) -> CostLedger:
    if nbytes < 0:
        raise ParameterError("byte count must be non-negative")
    if direction == UP:
        if initial:
            raise ParameterError("the initial distribution only flows down")
        return replace(ledger, bytes_up=ledger.bytes_up + nbytes)
    if direction == DOWN:
        return replace(
            ledger,
            bytes_down=ledger.bytes_down + nbytes,
            initial_bytes_down=ledger.initial_bytes_down + (nbytes if initial else 0),
        )
    raise ParameterError(f"unknown direction {direction!r}")


def charge_model_transfer(
    ledger: CostLedger,
    param_count: int,
    direction: str,
    num_clients: int,
    initial: bool = False,
) -> CostLedger:
    """Charge ``param_count`` float32 values sent to (or from) each of ``num_clients``."""
    if param_count < 0 or num_clients < 0:
        raise ParameterError("parameter and client counts must be non-negative")
    return charge_bytes(ledger, param_count * BYTES_PER_PARAM * num_clients, direction, initial)


def charge_local_pass(ledger: CostLedger, model: CostModel, num_samples: int, mode: str) -> CostLedger:
    if num_samples < 0:
        raise ParameterError("num_samples must be non-negative")
    F = model.forward_flops_per_sample
    ratio = model.backward_to_forward_ratio
    if mode == FORWARD_ONLY:
        return replace(ledger, forward_passes=ledger.forward_passes + num_samples, flops=ledger.flops + num_samples * F)
    if mode == HEAD_ONLY:
        return replace(
            ledger,
            forward_passes=ledger.forward_passes + num_samples,
            head_backward_passes=ledger.head_backward_passes + num_samples,
            flops=ledger.flops + num_samples * (F + ratio * model.head_forward_flops),
        )
    if mode == FULL:
        return replace(
            ledger,
            forward_passes=ledger.forward_passes + num_samples,
            backward_passes=ledger.backward_passes + num_samples,
            flops=ledger.flops + num_samples * (1 + ratio) * F,
        )
    raise ParameterError(f"unknown pass mode {mode!r}")


def expected_flops(ledger: CostLedger, model: CostModel) -> int:
    r = model.backward_to_forward_ratio
    F = model.forward_flops_per_sample
    return ledger.forward_passes * F + ledger.backward_passes * r * F + ledger.head_backward_passes * r * model.head_forward_flops


def budget_curve(records: Sequence, axis: str = "bytes", exclude_initial: bool = False) -> list[tuple[int, float]]:
    """Best accuracy reached within each cumulative budget.

    ``records`` are round records in round order (anything with
    ``test_accuracy``, ``cumulative_bytes_up``, ``cumulative_bytes_down``,
    ``cumulative_flops`` and, for ``exclude_initial``, ``initial_bytes_down``).
    With ``exclude_initial`` the byte axis omits the one-time model
    distribution, which every method pays identically.
    """
    if not records:
        raise ParameterError("no records")
    if axis not in ("bytes", "flops"):
        raise ParameterError(f"unknown axis {axis!r}")
    curve = []
    best = float("-inf")
    for r in records:
        if axis == "bytes":
            cost = r.cumulative_bytes_up + r.cumulative_bytes_down
            if exclude_initial:
                cost -= r.initial_bytes_down
        else:
            cost = r.cumulative_flops
        best = max(best, r.test_accuracy)
        curve.append((cost, best))
    return curve


def best_within(curve: Iterable[tuple[int, float]], budget: int) -> float | None:
    """Accuracy available at ``budget`` on a curve from :func:`budget_curve`."""
    acc = None
    for cost, best in curve:
        if cost > budget:
            break
        acc = best
    return acc
