"""Teacher/student experiment pipeline, the regular packet-based baseline, and metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import stats

from .features import feature_matrix
from .gbdt import GbdtConfig, GbdtModel, train_gbdt
from .pcapio import DpiOracle
from .policy import CartConfig, DecisionTree, PacketDataset, build_packet_dataset, train_cart
from .traffic import N_CLASSES, CoSLabel, Flow, FlowDataset, LabelKind, balance_dataset

log = logging.getLogger(__name__)


def balanced_accuracy(pred, truth) -> float:
    """Mean per-class recall over the classes present in ``truth``."""
    pred = np.asarray([int(v) for v in pred])
    truth = np.asarray([int(v) for v in truth])
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth lengths differ")
    if truth.size == 0:
        raise ValueError("need at least one sample")
    return float(np.mean([np.mean(pred[truth == c] == c) for c in np.unique(truth)]))


def per_class_recall(pred, truth) -> dict[str, float]:
    pred = np.asarray([int(v) for v in pred])
    truth = np.asarray([int(v) for v in truth])
    return {CoSLabel(int(c)).name: float(np.mean(pred[truth == c] == c)) for c in np.unique(truth)}


def confidence_interval(scores: Sequence[float], level: float = 0.90,
                        clamp: tuple[float, float] | None = (0.0, 1.0)) -> tuple[float, float]:
    """Two-sided Student-t interval for the mean of ``scores``."""
    x = np.asarray(scores, dtype=np.float64)
    if x.size < 2:
        raise ValueError("a confidence interval needs at least 2 scores")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    mean = float(x.mean())
    se = float(x.std(ddof=1)) / math.sqrt(x.size)
    half = float(stats.t.ppf(0.5 + level / 2.0, df=x.size - 1)) * se
    lo, hi = mean - half, mean + half
    if clamp is not None:
        lo, hi = max(clamp[0], lo), min(clamp[1], hi)
    return lo, hi


def balance_packets(ds: PacketDataset, seed: int) -> PacketDataset:
    """Upsample classes present in ``ds`` to the majority count, with replacement."""
    counts = ds.class_counts()
    present = [c for c in range(N_CLASSES) if counts[c] > 0]
    target = max(counts[c] for c in present)
    rng = np.random.default_rng(seed)
    parts = []
    for c in present:
        members = np.flatnonzero(ds.y == c)
        parts.append(members)
        if target > len(members):
            parts.append(members[rng.integers(0, len(members), target - len(members))])
    idx = np.concatenate(parts)
    idx = idx[rng.permutation(len(idx))]
    return PacketDataset(ds.X[idx], ds.y[idx], ds.conflicts)


@dataclass(frozen=True)
class ExperimentConfig:
    n: int
    lam: float
    teacher_config: GbdtConfig = GbdtConfig()
    student_config: CartConfig = CartConfig()
    c_dpi: float = 1.0
    seed: int = 0
    keep_dpi_truth: bool = False
    balance_students: bool = True

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"lambda must lie in (0, 1], got {self.lam}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.c_dpi < 0:
            raise ValueError("c_dpi must be >= 0")
        if self.n_dpi < 1:
            raise ValueError("round(n * lambda) must be >= 1")

    @property
    def n_dpi(self) -> int:
        return int(round(self.n * self.lam))


@dataclass
class ExperimentReport:
    n: int
    lam: float
    seed: int
    dpi_flows: int
    dpi_cost: float
    teacher_balanced_acc: float | None = None
    fphtc_balanced_acc: float | None = None
    baseline_balanced_acc: float | None = None
    rule_count: int | None = None
    baseline_rule_count: int | None = None
    fphtc_recall: dict = field(default_factory=dict)
    baseline_recall: dict = field(default_factory=dict)
    student_records: int = 0
    test_records: int = 0
    test_collisions: int = 0
    label_conflicts: int = 0

    def merge(self, other: "ExperimentReport") -> "ExperimentReport":
        """Fill unset fields from another report of the same replicate."""
        out = replace(self)
        for k, v in asdict(other).items():
            if getattr(out, k) in (None, {}, 0) and v not in (None, {}, 0):
                setattr(out, k, v)
        return out


@dataclass
class Artifacts:
    """Trained models of one pipeline run, for callers that want to keep them."""

    teacher: GbdtModel | None = None
    student: DecisionTree | None = None
    baseline: DecisionTree | None = None


def _draw(corpus: Sequence[Flow], cfg: ExperimentConfig) -> list[Flow]:
    if len(corpus) < cfg.n:
        raise ValueError(f"corpus has {len(corpus)} flows, need n = {cfg.n}")
    perm = np.random.default_rng(cfg.seed).permutation(len(corpus))
    return [corpus[i] for i in perm[:cfg.n]]


def _dpi_flows(drawn: list[Flow], cfg: ExperimentConfig, oracle: DpiOracle) -> list[Flow]:
    return [f.with_app(oracle.label(f)) for f in drawn[:cfg.n_dpi]]


def train_teacher(flows: Sequence[Flow], config: GbdtConfig, seed: int) -> GbdtModel:
    ds = balance_dataset(FlowDataset(tuple(flows)), seed)
    X = feature_matrix(ds.flows)
    return train_gbdt(X, ds.labels(), config, seed)


def teacher_label(model: GbdtModel, flows: Sequence[Flow]) -> list[Flow]:
    labels = model.predict_labels(feature_matrix(flows))
    return [f.with_teacher_label(CoSLabel(int(lab))) for f, lab in zip(flows, labels)]


def train_student(ds: PacketDataset, config: CartConfig, seed: int, balance: bool = True) -> DecisionTree:
    if balance:
        ds = balance_packets(ds, seed)
    return train_cart(ds, config, seed)


@dataclass
class TestSet:
    flows: list
    packets: PacketDataset


def make_test_set(test: Sequence[Flow]) -> TestSet:
    for f in test:
        if f.true_app is None:
            raise ValueError("test flows need ground truth")
    return TestSet(list(test), build_packet_dataset(test, LabelKind.Truth))


def _hygienic(test: TestSet, train_flows: Sequence[Flow]) -> tuple[PacketDataset, int]:
    """Drop test 4-tuples that also occur in training traffic."""
    seen = {(p.src_ip, p.dst_ip, p.src_port, p.dst_port) for f in train_flows for p in f.packets}
    keep = np.array([tuple(row) not in seen for row in test.packets.X.tolist()], dtype=bool)
    return PacketDataset(test.packets.X[keep], test.packets.y[keep]), int((~keep).sum())


def run_fphtc(corpus: Sequence[Flow], cfg: ExperimentConfig, test, artifacts: Artifacts | None = None) -> ExperimentReport:
    """Teacher on DPI-labeled flows, student on teacher-labeled packets.

    Steps: draw n flows, DPI-label the first round(n * lambda), balance and
    train the teacher, label all n flows with it, build the unique-packet
    dataset, balance and train the student CART, and evaluate the teacher on
    test flows and the student on unique test packets.
    """
    test = test if isinstance(test, TestSet) else make_test_set(test)
    drawn = _draw(corpus, cfg)
    oracle = DpiOracle(cfg.c_dpi)
    dpi = _dpi_flows(drawn, cfg, oracle)
    teacher = train_teacher(dpi, cfg.teacher_config, cfg.seed)

    labeled = teacher_label(teacher, drawn)
    if cfg.keep_dpi_truth:
        labeled[:cfg.n_dpi] = [f.with_teacher_label(f.true_cos) for f in labeled[:cfg.n_dpi]]
    packets = build_packet_dataset(labeled, LabelKind.TeacherPredicted)
    student = train_student(packets, cfg.student_config, cfg.seed, cfg.balance_students)

    t_pred = teacher.predict_labels(feature_matrix(test.flows))
    t_truth = [f.true_cos for f in test.flows]
    eval_ds, collisions = _hygienic(test, drawn)
    s_pred = student.predict(eval_ds.X)

    if artifacts is not None:
        artifacts.teacher, artifacts.student = teacher, student
    return ExperimentReport(
        n=cfg.n, lam=cfg.lam, seed=cfg.seed,
        dpi_flows=oracle.flows_labeled, dpi_cost=oracle.cost,
        teacher_balanced_acc=balanced_accuracy(t_pred, t_truth),
        fphtc_balanced_acc=balanced_accuracy(s_pred, eval_ds.y),
        rule_count=student.n_leaves,
        fphtc_recall=per_class_recall(s_pred, eval_ds.y),
        student_records=len(packets), test_records=len(eval_ds),
        test_collisions=collisions, label_conflicts=packets.conflicts,
    )


def run_regular_baseline(corpus: Sequence[Flow], cfg: ExperimentConfig, test,
                         artifacts: Artifacts | None = None) -> ExperimentReport:
    """CART trained directly on the DPI-labeled flows' packets."""
    test = test if isinstance(test, TestSet) else make_test_set(test)
    drawn = _draw(corpus, cfg)
    oracle = DpiOracle(cfg.c_dpi)
    dpi = _dpi_flows(drawn, cfg, oracle)
    packets = build_packet_dataset(dpi, LabelKind.Truth)
    tree = train_student(packets, cfg.student_config, cfg.seed, cfg.balance_students)
    eval_ds, collisions = _hygienic(test, drawn)
    pred = tree.predict(eval_ds.X)
    if artifacts is not None:
        artifacts.baseline = tree
    return ExperimentReport(
        n=cfg.n, lam=cfg.lam, seed=cfg.seed,
        dpi_flows=oracle.flows_labeled, dpi_cost=oracle.cost,
        baseline_balanced_acc=balanced_accuracy(pred, eval_ds.y),
        baseline_rule_count=tree.n_leaves,
        baseline_recall=per_class_recall(pred, eval_ds.y),
        test_records=len(eval_ds), test_collisions=collisions,
    )


def run_replicate(corpus, cfg: ExperimentConfig, test) -> ExperimentReport:
    test = test if isinstance(test, TestSet) else make_test_set(test)
    return run_fphtc(corpus, cfg, test).merge(run_regular_baseline(corpus, cfg, test))


REPORT_COLUMNS = [
    "n", "lam", "seed", "dpi_flows", "dpi_cost", "teacher_balanced_acc", "fphtc_balanced_acc",
    "baseline_balanced_acc", "rule_count", "baseline_rule_count", "student_records",
    "test_records", "test_collisions", "label_conflicts",
]


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return "" if v is None else str(v)


def write_reports_csv(reports: Sequence[ExperimentReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow([_fmt(getattr(r, c)) for c in REPORT_COLUMNS])


SUMMARY_METRICS = ("teacher_balanced_acc", "fphtc_balanced_acc", "baseline_balanced_acc")


def summarize(reports: Sequence[ExperimentReport], level: float = 0.90) -> list[dict]:
    """Per-n mean, median and t-interval of each accuracy column."""
    rows = []
    for n in sorted({r.n for r in reports}):
        group = [r for r in reports if r.n == n]
        row: dict = {"n": n, "replicates": len(group), "dpi_flows": group[0].dpi_flows}
        for m in SUMMARY_METRICS:
            vals = [getattr(r, m) for r in group if getattr(r, m) is not None]
            if not vals:
                continue
            row[f"{m}_mean"] = round(float(np.mean(vals)), 6)
            row[f"{m}_median"] = round(float(np.median(vals)), 6)
            if len(vals) >= 2:
                lo, hi = confidence_interval(vals, level)
                row[f"{m}_ci"] = [round(lo, 6), round(hi, 6)]
        rows.append(row)
    return rows


def write_summary_json(rows: list[dict], path, level: float = 0.90) -> None:
    with open(path, "w") as fh:
        json.dump({"confidence_level": level, "rows": rows}, fh, indent=2, sort_keys=True)
        fh.write("\n")
