"""Time-slotted online policy updates under changing application mixes."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .distill import balanced_accuracy, make_test_set, teacher_label, train_student, train_teacher
from .gbdt import GbdtConfig
from .pcapio import DpiOracle
from .policy import CartConfig, DecisionTree, build_packet_dataset
from .synthetic import generate_synthetic, preset, uniform_mix
from .traffic import AppType, LabelKind

SLOT_SECONDS = 100_000.0

TABLE_III = (
    (AppType.AUDIO, AppType.FTP, AppType.VIDEO, AppType.VOIP, AppType.WEB),
    (AppType.FTP, AppType.MAIL, AppType.P2P, AppType.VIDEO, AppType.VOIP),
    (AppType.AUDIO, AppType.CHAT, AppType.FTP, AppType.MAIL, AppType.WEB),
)


class Mode(enum.Enum):
    Monitoring = "Monitoring"
    Retraining = "Retraining"


@dataclass(frozen=True)
class SlotSpec:
    apps: frozenset
    flows_per_slot: int = 2000

    def __post_init__(self):
        if not self.apps:
            raise ValueError("a slot needs at least one application")
        if self.flows_per_slot < 1:
            raise ValueError("flows_per_slot must be >= 1")


@dataclass(frozen=True)
class TrafficSchedule:
    slots: tuple[SlotSpec, ...]

    def __len__(self):
        return len(self.slots)


def default_schedule(n_slots: int = 30, period: int = 10, flows_per_slot: int = 2000,
                     patterns=TABLE_III) -> TrafficSchedule:
    """Cycle through the 5-application patterns, switching every ``period`` slots."""
    return TrafficSchedule(tuple(
        SlotSpec(frozenset(patterns[(i // period) % len(patterns)]), flows_per_slot)
        for i in range(n_slots)))


@dataclass(frozen=True)
class OnlineConfig:
    accuracy_threshold: float = 0.80
    saturation_threshold: float = 0.01
    dpi_flows_per_slot: int = 1000
    teacher_labeled_flows: int = 10000
    teacher_config: GbdtConfig = GbdtConfig()
    student_config: CartConfig = CartConfig()
    preset: str = "separable"
    seed: int = 0
    balance_students: bool = True

    def __post_init__(self):
        for name in ("accuracy_threshold", "saturation_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.dpi_flows_per_slot < 1 or self.teacher_labeled_flows < 1:
            raise ValueError("flow budgets must be >= 1")


@dataclass
class SimState:
    mode: Mode = Mode.Retraining
    current_policy: DecisionTree | None = None
    baseline_policy: DecisionTree | None = None
    last_accuracy: float = 0.0
    slot_index: int = 0
    dpi_flows_used: int = 0


@dataclass(frozen=True)
class SlotTraffic:
    """Test traffic of a slot plus a factory for its training pool."""

    test: object
    train_pool: callable = field(repr=False)


@dataclass(frozen=True)
class SlotMetrics:
    slot: int
    mode: str
    fphtc_accuracy: float
    baseline_accuracy: float
    dpi_flows_used: int
    rule_count: int
    baseline_rule_count: int
    swapped: bool


def _stream_seed(seed: int, slot: int, purpose: int) -> int:
    return int(np.random.SeedSequence([seed, slot, purpose]).generate_state(1)[0])


def _evaluate(tree: DecisionTree | None, test) -> float:
    if tree is None:
        return 0.0
    return balanced_accuracy(tree.predict(test.packets.X), test.packets.y)


def step(state: SimState, slot_traffic: SlotTraffic, cfg: OnlineConfig,
         measure=None) -> tuple[SimState, SlotMetrics]:
    """Advance one slot.

    Monitoring: measure the deployed policy; fall under the threshold and the
    next slot retrains. Retraining: DPI-label a fresh batch, train the
    teacher, teacher-label the pool, train and deploy a new policy (and a
    truth-labeled baseline), then measure; go back to monitoring once the
    accuracy is above the threshold and improved by less than the saturation
    threshold over the previous slot.

    ``measure`` overrides policy evaluation, mapping a tree to an accuracy.
    """
    measure = measure or (lambda tree: _evaluate(tree, slot_traffic.test))
    mode = state.mode
    policy, baseline = state.current_policy, state.baseline_policy
    used = 0
    swapped = False
    if mode is Mode.Retraining:
        pool = slot_traffic.train_pool()
        oracle = DpiOracle()
        k = min(cfg.dpi_flows_per_slot, len(pool))
        dpi = [f.with_app(oracle.label(f)) for f in pool[:k]]
        teacher = train_teacher(dpi, cfg.teacher_config, cfg.seed)
        labeled = teacher_label(teacher, pool[:cfg.teacher_labeled_flows])
        policy = train_student(build_packet_dataset(labeled, LabelKind.TeacherPredicted),
                               cfg.student_config, cfg.seed, cfg.balance_students)
        baseline = train_student(build_packet_dataset(dpi, LabelKind.Truth),
                                 cfg.student_config, cfg.seed, cfg.balance_students)
        used = oracle.flows_labeled
        swapped = True

    acc = measure(policy)
    base_acc = measure(baseline)
    if mode is Mode.Monitoring:
        next_mode = Mode.Retraining if acc < cfg.accuracy_threshold else Mode.Monitoring
    else:
        settled = acc >= cfg.accuracy_threshold and (acc - state.last_accuracy) < cfg.saturation_threshold
        next_mode = Mode.Monitoring if settled else Mode.Retraining

    metrics = SlotMetrics(
        slot=state.slot_index, mode=mode.value, fphtc_accuracy=acc, baseline_accuracy=base_acc,
        dpi_flows_used=used,
        rule_count=policy.n_leaves if policy is not None else 0,
        baseline_rule_count=baseline.n_leaves if baseline is not None else 0,
        swapped=swapped,
    )
    new_state = SimState(next_mode, policy, baseline, acc, state.slot_index + 1, state.dpi_flows_used + used)
    return new_state, metrics


def slot_traffic(schedule: TrafficSchedule, slot: int, cfg: OnlineConfig) -> SlotTraffic:
    spec = schedule.slots[slot]
    pr = preset(cfg.preset)
    mix = uniform_mix(sorted(spec.apps, key=lambda a: list(AppType).index(a)))
    t0 = slot * SLOT_SECONDS
    test_flows = generate_synthetic(pr.profiles, mix, spec.flows_per_slot,
                                    _stream_seed(cfg.seed, slot, 0), pr.client_subnets, t0)
    n_pool = max(cfg.dpi_flows_per_slot, cfg.teacher_labeled_flows)

    def pool():
        return generate_synthetic(pr.profiles, mix, n_pool, _stream_seed(cfg.seed, slot, 1),
                                  pr.client_subnets, t0 + SLOT_SECONDS / 2)

    return SlotTraffic(make_test_set(test_flows), pool)


def run_simulation(schedule: TrafficSchedule, cfg: OnlineConfig) -> list[SlotMetrics]:
    if not schedule.slots:
        raise ValueError("schedule has no slots")
    state = SimState()
    trace = []
    for slot in range(len(schedule)):
        state, m = step(state, slot_traffic(schedule, slot, cfg), cfg)
        trace.append(m)
    return trace


ONLINE_COLUMNS = ["slot", "mode", "fphtc_accuracy", "baseline_accuracy", "dpi_flows_used",
                  "rule_count", "baseline_rule_count"]


def write_trace_csv(trace: Sequence[SlotMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ONLINE_COLUMNS)
        for m in trace:
            w.writerow([m.slot, m.mode, f"{m.fphtc_accuracy:.6f}", f"{m.baseline_accuracy:.6f}",
                        m.dpi_flows_used, m.rule_count, m.baseline_rule_count])


def recovery_slots(trace: Sequence[SlotMetrics], change_slot: int, threshold: float) -> int | None:
    """Slots after ``change_slot`` until FPHTC accuracy is back at or above threshold."""
    for m in trace[change_slot + 1:]:
        if m.fphtc_accuracy >= threshold:
            return m.slot - change_slot
    return None
