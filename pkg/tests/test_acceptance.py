"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line with the measured
numbers before asserting, so ``pytest tests/test_acceptance.py`` doubles as
a readable report.
"""

import time

import numpy as np
import pytest

from fphtc import modelio
from fphtc.bounds import BoundParams, fphtc_bound, grid_argmin, optimal_lambda
from fphtc.cli import main
from fphtc.distill import ExperimentConfig, make_test_set, run_replicate
from fphtc.features import feature_matrix
from fphtc.gbdt import GbdtConfig, best_split, softmax_gradient_hessian, train_gbdt
from fphtc.online import OnlineConfig, default_schedule, run_simulation
from fphtc.pcapio import read_pcap, write_pcap
from fphtc.policy import (DOMAIN_HI, PacketDataset, balanced_class_weight, best_cart_split,
                          build_packet_dataset, check_partition, classify, compile_rules, export_policy,
                          import_policy, train_cart)
from fphtc.synthetic import synth_flows
from fphtc.traffic import LabelKind

from oracles import brute_cart_split, brute_gbdt_split, finite_difference

pytestmark = pytest.mark.slow

DISTILL_SEEDS = range(10)
DISTILL_GRID = (5000, 10000, 20000)
TEACHER_FLOWS = 1000
ONLINE_SEEDS = range(5)
CHANGE_SLOTS = (10, 20)


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, detail
    return emit


# --- distillation trend and teacher dominance -------------------------------

@pytest.fixture(scope="module")
def distill_runs():
    start = time.perf_counter()
    rows = []
    for seed in DISTILL_SEEDS:
        corpus = synth_flows("separable", max(DISTILL_GRID), seed=seed * 1000 + 1)
        test = make_test_set(synth_flows("separable", 3000, seed=seed * 1000 + 2, start_time=1e6))
        for n in DISTILL_GRID:
            rows.append(run_replicate(corpus, ExperimentConfig(n=n, lam=TEACHER_FLOWS / n, seed=seed), test))
    return rows, time.perf_counter() - start


def _medians(rows, field):
    return {n: float(np.median([getattr(r, field) for r in rows if r.n == n])) for n in DISTILL_GRID}


def test_distillation_trend(distill_runs, report):
    rows, elapsed = distill_runs
    fp = _medians(rows, "fphtc_balanced_acc")
    base = _medians(rows, "baseline_balanced_acc")
    gap = all(fp[n] > base[n] for n in DISTILL_GRID)
    mono = all(fp[b] >= fp[a] - 0.01 for a, b in zip(DISTILL_GRID, DISTILL_GRID[1:]))
    fast = elapsed < 300
    detail = ", ".join(f"n={n}: fphtc {fp[n]:.4f} vs baseline {base[n]:.4f}" for n in DISTILL_GRID)
    report("distillation trend (10 seeds, lambda*n=1000)", gap and mono and fast,
           f"{detail}; gap={gap} monotone={mono} runtime={elapsed:.0f}s")


def test_teacher_dominance(distill_runs, report):
    rows, _ = distill_runs
    te = _medians(rows, "teacher_balanced_acc")
    fp = _medians(rows, "fphtc_balanced_acc")
    ok = all(te[n] >= fp[n] for n in DISTILL_GRID)
    report("teacher dominance", ok,
           ", ".join(f"n={n}: teacher {te[n]:.4f} >= fphtc {fp[n]:.4f}" for n in DISTILL_GRID))


# --- analysis ---------------------------------------------------------------

def _random_bound_params(rng):
    return BoundParams(
        n=int(10 ** rng.uniform(1, 6)), lam=float(rng.uniform(0.01, 1.0)), alpha=float(rng.uniform(0.5, 1.0)),
        cap_fl=float(10 ** rng.uniform(-1, 3)), cap_rp=float(10 ** rng.uniform(-1, 2)),
        eps_fl=float(rng.uniform(0, 0.1)), eps_rp=float(rng.uniform(0, 0.1)), eps_pk=float(rng.uniform(0, 0.5)),
        K=float(10 ** rng.uniform(-1, 1)), c_dpi=float(10 ** rng.uniform(-7, 0)))


def test_lambda_star_matches_grid(report):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    clamped = 0
    for _ in range(100):
        p = _random_bound_params(rng)
        star = optimal_lambda(p)
        clamped += star.clamped
        worst = max(worst, abs(grid_argmin(p, 10_000) - star.value))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 + 1e-12 and elapsed < 10
    report("lambda* closed form vs 10^4-point grid", ok,
           f"max |grid - closed form| = {worst:.2e} (step 1e-4), {clamped}/100 clamped, {elapsed:.2f}s")


def test_bound_monotone_in_lambda(report):
    rng = np.random.default_rng(7)
    lams = np.arange(1, 101) / 100
    worst = -np.inf
    for _ in range(100):
        p = _random_bound_params(rng)
        worst = max(worst, float(np.max(np.diff([fphtc_bound(p.with_lambda(l)) for l in lams]))))
    report("fphtc_bound non-increasing in lambda", worst <= 0.0,
           f"largest step-to-step increase over 100 draws x 100 points = {worst:.3e}")


# --- teacher ----------------------------------------------------------------

def test_gradient_oracle(report):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        s = rng.normal(0, 3, 3)
        y = int(rng.integers(0, 3))
        g, h = softmax_gradient_hessian(s, y)
        fg, fh = finite_difference(s, y)
        worst = max(worst, float(np.max(np.abs(g - fg) / np.abs(fg))), float(np.max(np.abs(h - fh) / np.abs(fh))))
    report("softmax gradient/hessian vs central differences", worst <= 1e-4, f"max relative error {worst:.2e}")


def test_boosting_loss_monotone(report):
    flows = synth_flows("overlapping", 1000, seed=5)
    m = train_gbdt(feature_matrix(flows), [f.true_cos for f in flows], GbdtConfig())
    # entry 0 is the loss of the constant base score, then one entry per round
    steps = np.diff(m.train_loss)
    worst = float(steps.max())
    report("training log-loss non-increasing (overlapping preset)", len(m.train_loss) == 101 and worst <= 1e-9,
           f"{len(m.train_loss) - 1} rounds, loss {m.train_loss[0]:.4f} -> {m.train_loss[-1]:.4f}, "
           f"largest increase {worst:.2e}")


# --- splits -----------------------------------------------------------------

def test_split_oracles(report):
    rng = np.random.default_rng(99)
    gbdt_ok = cart_ok = fit_ok = 0
    for _ in range(50):
        n = int(rng.integers(2, 201))
        F = int(rng.integers(1, 11))
        X = rng.integers(0, 15, size=(n, F)).astype(float)
        g, h = rng.normal(size=n), rng.uniform(0.05, 0.25, size=n)
        idx = np.arange(n)
        got = best_split(idx, X, g, h, GbdtConfig(min_child_weight=0.0))
        want = brute_gbdt_split(idx, X, g, h, 1.0, 0.0)
        gbdt_ok += (got is None and want is None) or (
            got is not None and want is not None and abs(got.gain - want[0]) <= 1e-9 * max(1, abs(want[0]))
            and (got.feature_index, got.threshold) == (want[1], want[2]))

        Xc = rng.integers(0, 15, size=(n, 4))
        y = rng.integers(0, 3, size=n)
        cw = balanced_class_weight(y)
        got = best_cart_split(idx, Xc, y, cw)
        want = brute_cart_split(idx, Xc, y, cw)
        cart_ok += (got is None and want is None) or (
            got is not None and want is not None and abs(got.gain - want[0]) <= 1e-9
            and (got.feature_index, got.threshold) == (want[1], want[2]))

        Xu = np.unique(Xc, axis=0)
        yu = rng.integers(0, 3, size=len(Xu))
        fit_ok += bool(np.array_equal(train_cart(PacketDataset(Xu, yu)).predict(Xu), yu))
    ok = gbdt_ok == cart_ok == fit_ok == 50
    report("split oracles and CART shattering", ok,
           f"GBDT {gbdt_ok}/50, CART {cart_ok}/50 match brute force; 100% train accuracy {fit_ok}/50")


# --- policy -----------------------------------------------------------------

def test_tree_rule_equivalence(report):
    flows = synth_flows("separable", 3000, seed=3)
    ds = build_packet_dataset(flows, LabelKind.Truth)
    tree = train_cart(ds)
    pol = compile_rules(tree)
    rng = np.random.default_rng(5)
    P = np.column_stack([rng.integers(0, hi, 100_000) for hi in DOMAIN_HI]).astype(np.int64)
    # also probe near every threshold, where off-by-one translation errors would show
    probes = []
    for f, t in zip(tree.feature, tree.threshold):
        if f >= 0:
            for v in (np.floor(t), np.floor(t) + 1):
                q = P[len(probes) % len(P)].copy()
                q[f] = int(v)
                probes.append(q)
    P = np.vstack([P, np.array(probes)])
    actions, hits = pol.match_counts(P)
    same = bool(np.array_equal(actions, tree.predict(P)))
    exact_one = bool(np.all(hits == 1))
    try:
        check_partition(pol)
        partition = True
    except ValueError:
        partition = False
    scalar = all(classify(tree, f) == a for f, a in zip(P[:2000], actions[:2000]))
    ok = same and exact_one and partition and scalar and len(pol) == tree.n_leaves
    report("tree/rule equivalence", ok,
           f"{len(P)} points identical={same}, one match each={exact_one}, |rules|={len(pol)} "
           f"leaves={tree.n_leaves}, disjoint+exhaustive={partition}")


# --- online -----------------------------------------------------------------

def test_online_state_machine(report):
    start = time.perf_counter()
    traces = [run_simulation(default_schedule(), OnlineConfig(seed=s)) for s in ONLINE_SEEDS]
    elapsed = time.perf_counter() - start
    parts, ok = [], elapsed < 600
    for c in CHANGE_SLOTS:
        drop = float(np.median([t[c].fphtc_accuracy for t in traces]))
        engaged = sum(t[c + 1].mode == "Retraining" for t in traces if t[c].fphtc_accuracy < 0.80)
        dropped = sum(t[c].fphtc_accuracy < 0.80 for t in traces)
        rec = []
        for t in traces:
            later = [m.slot - c for m in t[c + 1:c + 6] if m.fphtc_accuracy >= 0.80]
            rec.append(later[0] if later else 99)
        rec_med = float(np.median(rec))
        fp_level = float(np.median([np.mean([m.fphtc_accuracy for m in t[c + 1:c + 6]]) for t in traces]))
        bl_level = float(np.median([np.mean([m.baseline_accuracy for m in t[c + 1:c + 6]]) for t in traces]))
        ok &= drop < 0.80 and engaged == dropped and dropped >= 3 and rec_med <= 5 and bl_level < fp_level
        parts.append(f"slot {c}: median acc {drop:.3f}, {dropped}/5 dropped, retraining next slot {engaged}/"
                     f"{dropped}, median recovery {rec_med:.0f} slot(s), post-change level fphtc {fp_level:.3f}"
                     f" vs baseline {bl_level:.3f}")
    report("online state machine (5 seeds, 30 slots)", ok, "; ".join(parts) + f"; runtime {elapsed:.0f}s")


# --- determinism and round-trips --------------------------------------------

def _cli_outputs(root):
    root.mkdir()
    steps = [
        ["synth", "--flows", "200", "--out", str(root / "corpus")],
        ["distill", "--n-grid", "400,800", "--dpi-flows", "200", "--replicates", "2", "--test-flows", "300",
         "--out", str(root / "distill")],
        ["bounds", "--out", str(root / "bounds.csv")],
        ["online", "--slots", "4", "--period", "2", "--flows-per-slot", "200", "--dpi-flows", "200",
         "--teacher-flows", "600", "--out", str(root / "online.csv")],
        ["export-policy", "--n", "1000", "--dpi-flows", "250", "--out", str(root / "policy.txt"),
         "--save-student", str(root / "student.json"), "--save-teacher", str(root / "teacher.json")],
        ["classify", "--policy", str(root / "policy.txt"), "--pcap", str(root / "corpus" / "web.pcap"),
         "--out", str(root / "actions.txt")],
    ]
    codes = [main(argv + ["--seed", "31"]) for argv in steps]
    return codes, {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_cli_determinism(tmp_path, report):
    codes_a, a = _cli_outputs(tmp_path / "a")
    codes_b, b = _cli_outputs(tmp_path / "b")
    differing = sorted(k for k in a if a.get(k) != b.get(k)) + sorted(set(b) - set(a))
    ok = codes_a == codes_b == [0] * 6 and not differing
    report("CLI byte-identical outputs", ok,
           f"6 commands, {len(a)} files compared, differing: {differing or 'none'}, exit codes {codes_a}")


def test_round_trips(tmp_path, report):
    flows = synth_flows("separable", 300, seed=17)
    packets = sorted((p for f in flows for p in f.packets), key=lambda p: p.timestamp)
    write_pcap(tmp_path / "c.pcap", packets)
    back = read_pcap(tmp_path / "c.pcap")
    pcap_ok = len(back) == len(packets) and all(
        (a.src_ip, a.dst_ip, a.src_port, a.dst_port) == (b.src_ip, b.dst_ip, b.src_port, b.dst_port)
        and round(a.timestamp * 1e6) == round(b.timestamp * 1e6) for a, b in zip(packets, back))

    rng = np.random.default_rng(8)
    teacher = train_gbdt(feature_matrix(flows), [f.true_cos for f in flows], GbdtConfig(n_rounds=20))
    modelio.save_model(teacher, tmp_path / "t.json")
    t2 = modelio.load_model(tmp_path / "t.json")
    Z = feature_matrix(synth_flows("separable", 1000, seed=18)) * rng.uniform(0.5, 1.5, size=(1000, 44))
    teacher_ok = np.array_equal(teacher.predict_scores(Z), t2.predict_scores(Z)) and \
        modelio.dumps(t2) == modelio.dumps(teacher)

    student = train_cart(build_packet_dataset(flows, LabelKind.Truth))
    modelio.save_model(student, tmp_path / "s.json")
    s2 = modelio.load_model(tmp_path / "s.json")
    P = np.column_stack([rng.integers(0, hi, 1000) for hi in DOMAIN_HI]).astype(np.int64)
    student_ok = np.array_equal(student.predict(P), s2.predict(P)) and modelio.dumps(s2) == modelio.dumps(student)

    pol = compile_rules(student)
    export_policy(pol, tmp_path / "p.txt")
    p2 = import_policy(tmp_path / "p.txt")
    policy_ok = p2 == pol and np.array_equal(p2.classify_many(P), pol.classify_many(P))
    ok = pcap_ok and teacher_ok and student_ok and policy_ok
    report("round-trips", ok, f"pcap {len(back)}/{len(packets)} packets exact={pcap_ok}, teacher={teacher_ok}, "
                              f"student={student_ok}, policy={policy_ok} (1000 random inputs each)")
