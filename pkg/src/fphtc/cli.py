"""``fphtc`` command line: synthetic corpora, experiments, bounds and policies.

Every subcommand accepts ``--config FILE`` (YAML or JSON). The file may set a
top-level ``seed`` and one mapping per subcommand whose keys mirror the long
flag names with dashes turned into underscores; flags given on the command
line take precedence. Without ``--seed`` or a config seed, ``FPHTC_SEED`` is
read from the environment, then 0.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 invariant
violation.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np

from . import bounds, modelio
from .config import ConfigError, load_document, validate
from .distill import (Artifacts, ExperimentConfig, make_test_set, run_fphtc, run_replicate,
                      summarize, write_reports_csv, write_summary_json)
from .gbdt import GBDT_PRESETS
from .online import OnlineConfig, default_schedule, run_simulation, write_trace_csv
from .pcapio import PcapFormatError, read_corpus, read_pcap, write_corpus
from .policy import (CartConfig, DecisionTree, compile_rules, check_partition, export_policy,
                     import_policy)
from .synthetic import PRESET_NAMES, generate_synthetic, load_profiles, synth_flows, uniform_mix
from .traffic import TCP, AppType, CoSLabel, int_to_ip

log = logging.getLogger("fphtc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class InvariantError(Exception):
    pass


# --- option plumbing --------------------------------------------------------

_REQUIRED = object()

# (flag, type, default, help); _REQUIRED means "flag or config entry needed"
_OPTIONS = {
    "synth": [
        ("preset", str, "separable", f"synthetic preset ({', '.join(PRESET_NAMES)})"),
        ("profiles", str, "", "YAML/JSON profile file overriding the preset"),
        ("flows", int, 1000, "number of flows"),
        ("apps", str, "", "comma-separated application types (default: all)"),
        ("out", str, _REQUIRED, "output directory for pcaps and manifest.tsv"),
    ],
    "distill": [
        ("preset", str, "separable", "synthetic preset used when no corpus is given"),
        ("corpus", str, "", "manifest.tsv of a labeled capture corpus"),
        ("n_grid", str, "1000,5000,10000", "comma-separated student corpus sizes n"),
        ("lam", float, None, "DPI fraction lambda; overrides dpi_flows when set"),
        ("dpi_flows", int, 1000, "fixed DPI budget lambda*n, used when lam is unset"),
        ("replicates", int, 10, "seed replicates per operating point"),
        ("test_flows", int, 3000, "held-out test flows"),
        ("teacher", str, "depthwise", f"teacher preset ({', '.join(GBDT_PRESETS)})"),
        ("confidence", float, 0.90, "confidence level of the t-interval"),
        ("out", str, _REQUIRED, "output directory for reports.csv and summary.json"),
    ],
    "bounds": [
        ("n", int, 10000, "student corpus size"),
        ("alpha", float, 0.75, "distillation rate exponent in [0.5, 1]"),
        ("cap_fl", float, 50.0, "teacher hypothesis-class capacity"),
        ("cap_rp", float, 1.0, "policy hypothesis-class capacity"),
        ("eps_fl", float, 0.01, "teacher approximation error"),
        ("eps_rp", float, 0.01, "policy approximation error"),
        ("eps_pk", float, 0.3, "packet-classifier approximation error"),
        ("k_weight", float, 1.0, "weight of the bound against DPI cost"),
        ("c_dpi", float, 1e-3, "DPI cost per flow"),
        ("points", int, 100, "lambda grid points on (0, 1]"),
        ("out", str, _REQUIRED, "output CSV"),
    ],
    "online": [
        ("preset", str, "separable", "synthetic preset"),
        ("slots", int, 30, "number of time slots"),
        ("period", int, 10, "slots between traffic-pattern changes"),
        ("flows_per_slot", int, 2000, "test flows per slot"),
        ("dpi_flows", int, 1000, "DPI-labeled flows per retraining slot"),
        ("teacher_flows", int, 10000, "teacher-labeled flows per retraining slot"),
        ("accuracy_threshold", float, 0.80, "retraining trigger"),
        ("saturation_threshold", float, 0.01, "retraining stop improvement"),
        ("out", str, _REQUIRED, "output CSV"),
    ],
    "export-policy": [
        ("model", str, "", "saved student tree to compile (skips training)"),
        ("preset", str, "separable", "synthetic preset used when no corpus is given"),
        ("corpus", str, "", "manifest.tsv of a labeled capture corpus"),
        ("n", int, 5000, "student corpus size"),
        ("dpi_flows", int, 1000, "DPI-labeled flows for the teacher"),
        ("teacher", str, "depthwise", f"teacher preset ({', '.join(GBDT_PRESETS)})"),
        ("save_teacher", str, "", "also save the teacher model here"),
        ("save_student", str, "", "also save the student tree here"),
        ("out", str, _REQUIRED, "output policy file"),
    ],
    "classify": [
        ("policy", str, _REQUIRED, "policy file"),
        ("pcap", str, _REQUIRED, "capture to classify"),
        ("out", str, "", "write the action stream here instead of stdout"),
    ],
}

_JSON_TYPES = {str: "string", int: "integer", float: "number"}


def _config_schema() -> dict:
    props: dict = {"seed": {"type": "integer", "minimum": 0}}
    for cmd, opts in _OPTIONS.items():
        props[cmd] = {
            "type": "object", "additionalProperties": False,
            "properties": {name: {"type": _JSON_TYPES[typ]} for name, typ, _, _ in opts},
        }
    return {"type": "object", "additionalProperties": False, "properties": props}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fphtc", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for cmd, opts in _OPTIONS.items():
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", help="YAML or JSON run configuration")
        sp.add_argument("--seed", type=int, help="64-bit seed (falls back to FPHTC_SEED)")
        for name, typ, default, help_ in opts:
            if default is _REQUIRED:
                help_ += " (required)"
            elif default != "":
                help_ += f" (default: {default})"
            sp.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None, help=help_)
    return p


def _resolve(args: argparse.Namespace) -> dict:
    doc = {}
    if args.config:
        try:
            doc = load_document(args.config)
        except FileNotFoundError:
            raise UsageError(f"config file {args.config} not found") from None
        validate(doc, _config_schema(), Path(args.config).name)
    section = doc.get(args.command, {})
    opts = {}
    for name, _, default, _ in _OPTIONS[args.command]:
        value = getattr(args, name)
        if value is None:
            value = section.get(name, default)
        if value is _REQUIRED:
            raise UsageError(f"--{name.replace('_', '-')} is required")
        opts[name] = value
    if args.seed is not None:
        seed = args.seed
    elif "seed" in doc:
        seed = doc["seed"]
    else:
        env = os.environ.get("FPHTC_SEED", "0")
        try:
            seed = int(env)
        except ValueError:
            raise UsageError(f"FPHTC_SEED must be an integer, got {env!r}") from None
    if not 0 <= seed < 2 ** 64:
        raise UsageError("seed must be a 64-bit unsigned integer")
    opts["seed"] = seed
    return opts


def _sub_seed(seed: int, *path: int) -> int:
    """Independent 32-bit seed for one stochastic stage."""
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


def _int_list(text: str, what: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise UsageError(f"{what} needs positive integers")
    return values


def _apps(text: str) -> list[AppType] | None:
    if not text:
        return None
    try:
        return [AppType[a.strip()] for a in text.split(",") if a.strip()]
    except KeyError as exc:
        raise UsageError(f"unknown application {exc.args[0]}; choose from "
                         f"{', '.join(a.name for a in AppType)}") from None


def _check_preset(name: str) -> None:
    if name not in PRESET_NAMES:
        raise UsageError(f"unknown preset {name!r}; available presets: {', '.join(PRESET_NAMES)}")


def _teacher_config(name: str):
    if name not in GBDT_PRESETS:
        raise UsageError(f"unknown teacher preset {name!r}; choose from {', '.join(GBDT_PRESETS)}")
    return GBDT_PRESETS[name]


def _corpus_and_test(o: dict, n_max: int, seed: int):
    """Training corpus of at least ``n_max`` flows plus a disjoint test set."""
    if o["corpus"]:
        flows = read_corpus(o["corpus"])
        n_test = o.get("test_flows", 0)
        if len(flows) < n_max + n_test:
            raise DataError(f"corpus holds {len(flows)} flows, need {n_max} + {n_test} test flows")
        order = np.random.default_rng(_sub_seed(seed, 0)).permutation(len(flows))
        test = [flows[i] for i in order[:n_test]]
        return [flows[i] for i in order[n_test:]], test
    _check_preset(o["preset"])
    corpus = synth_flows(o["preset"], n_max, _sub_seed(seed, 1))
    test = synth_flows(o["preset"], o.get("test_flows", 0), _sub_seed(seed, 2), start_time=1e6)
    return corpus, test


# --- subcommands ------------------------------------------------------------

def cmd_synth(o: dict) -> int:
    if o["flows"] < 1:
        raise UsageError("--flows must be >= 1")
    apps = _apps(o["apps"])
    if o["profiles"]:
        profiles, clients = load_profiles(o["profiles"])
        if apps is None:
            apps = list(profiles)
        missing = [a.name for a in apps if a not in profiles]
        if missing:
            raise UsageError(f"profiles file lacks {', '.join(missing)}")
        flows = generate_synthetic(profiles, uniform_mix(apps), o["flows"], o["seed"], clients or None)
    else:
        _check_preset(o["preset"])
        flows = synth_flows(o["preset"], o["flows"], o["seed"], apps)
    try:
        manifest = write_corpus(flows, o["out"])
    except OSError as exc:
        raise DataError(f"cannot write corpus to {o['out']}: {exc}") from None
    apps_count = Counter(f.true_app.name for f in flows)
    cos_count = Counter(f.true_cos.name for f in flows)
    print(f"flows\t{len(flows)}")
    print(f"packets\t{sum(len(f.packets) for f in flows)}")
    for a in AppType:
        if apps_count[a.name]:
            print(f"app\t{a.name}\t{apps_count[a.name]}")
    for c in sorted(cos_count):
        print(f"cos\t{c}\t{cos_count[c]}")
    print(f"manifest\t{manifest}")
    return EXIT_OK


def cmd_distill(o: dict) -> int:
    grid = _int_list(o["n_grid"], "--n-grid")
    if o["lam"] is not None and not 0.0 < o["lam"] <= 1.0:
        raise UsageError(f"lambda must lie in (0, 1], got {o['lam']}")
    if o["replicates"] < 1 or o["test_flows"] < 1:
        raise UsageError("--replicates and --test-flows must be >= 1")
    if o["replicates"] == 1:
        print("fphtc distill: warning: a single replicate gives no confidence interval; "
              "CI columns omitted", file=sys.stderr)
    teacher = _teacher_config(o["teacher"])
    reports = []
    for r in range(o["replicates"]):
        rseed = _sub_seed(o["seed"], 10, r)
        corpus, test = _corpus_and_test(o, max(grid), rseed)
        test = make_test_set(test)
        for n in grid:
            lam = o["lam"] if o["lam"] is not None else o["dpi_flows"] / n
            if not 0.0 < lam <= 1.0:
                raise UsageError(f"dpi_flows={o['dpi_flows']} exceeds n={n} (lambda {lam:.3g} > 1)")
            cfg = ExperimentConfig(n=n, lam=lam, teacher_config=teacher, seed=rseed)
            rep = run_replicate(corpus, cfg, test)
            rep.seed = r
            reports.append(rep)
            log.info("replicate %d n=%d: teacher %.4f fphtc %.4f baseline %.4f", r, n,
                     rep.teacher_balanced_acc, rep.fphtc_balanced_acc, rep.baseline_balanced_acc)
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_reports_csv(reports, out / "reports.csv")
    rows = summarize(reports, o["confidence"])
    write_summary_json(rows, out / "summary.json", o["confidence"])
    print("n\tteacher\tfphtc\tbaseline\t(medians)")
    for row in rows:
        print(f"{row['n']}\t{row['teacher_balanced_acc_median']:.4f}\t"
              f"{row['fphtc_balanced_acc_median']:.4f}\t{row['baseline_balanced_acc_median']:.4f}")
    return EXIT_OK


BOUNDS_COLUMNS = ["lambda", "fphtc_bound", "packet_bound", "teacher_bound", "total_cost"]


def cmd_bounds(o: dict) -> int:
    if o["points"] < 2:
        raise UsageError("--points must be >= 2")
    try:
        p = bounds.BoundParams(n=o["n"], lam=1.0, alpha=o["alpha"], cap_fl=o["cap_fl"],
                               cap_rp=o["cap_rp"], eps_fl=o["eps_fl"], eps_rp=o["eps_rp"],
                               eps_pk=o["eps_pk"], K=o["k_weight"], c_dpi=o["c_dpi"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = bounds.sweep(p, o["points"])
    with open(o["out"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BOUNDS_COLUMNS)
        for row in rows:
            w.writerow([repr(row[c]) for c in BOUNDS_COLUMNS])
    star = bounds.optimal_lambda(p)
    grid = bounds.grid_argmin(p)
    if abs(grid - star.value) > 1e-4 + 1e-12:
        raise InvariantError(f"closed-form lambda* {star.value} disagrees with grid argmin {grid}")
    print(f"lambda_star\t{star.value!r}")
    print(f"lambda_star_unclamped\t{star.unclamped!r}")
    print(f"clamped\t{str(star.clamped).lower()}")
    print(f"grid_argmin\t{grid!r}")
    chk = bounds.outperformance_check(p.with_lambda(star.value))
    print(f"fphtc_better_at_lambda_star\t{str(chk.fphtc_better).lower()}")
    return EXIT_OK


def cmd_online(o: dict) -> int:
    _check_preset(o["preset"])
    if o["slots"] < 1 or o["period"] < 1 or o["flows_per_slot"] < 1:
        raise UsageError("--slots, --period and --flows-per-slot must be >= 1")
    try:
        cfg = OnlineConfig(accuracy_threshold=o["accuracy_threshold"],
                           saturation_threshold=o["saturation_threshold"],
                           dpi_flows_per_slot=o["dpi_flows"], teacher_labeled_flows=o["teacher_flows"],
                           preset=o["preset"], seed=o["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    trace = run_simulation(default_schedule(o["slots"], o["period"], o["flows_per_slot"]), cfg)
    write_trace_csv(trace, o["out"])
    retrain = sum(m.mode == "Retraining" for m in trace)
    print(f"slots\t{len(trace)}\nretraining_slots\t{retrain}\n"
          f"dpi_flows_used\t{sum(m.dpi_flows_used for m in trace)}")
    return EXIT_OK


def cmd_export_policy(o: dict) -> int:
    if o["model"]:
        tree = modelio.load_model(o["model"])
        if not isinstance(tree, DecisionTree):
            raise DataError(f"{o['model']} holds a teacher ensemble, not a student tree")
    else:
        if o["n"] < 1 or not 1 <= o["dpi_flows"] <= o["n"]:
            raise UsageError("need 1 <= --dpi-flows <= --n")
        corpus, test = _corpus_and_test({**o, "test_flows": 1}, o["n"], o["seed"])
        cfg = ExperimentConfig(n=o["n"], lam=o["dpi_flows"] / o["n"],
                               teacher_config=_teacher_config(o["teacher"]), seed=_sub_seed(o["seed"], 3))
        art = Artifacts()
        run_fphtc(corpus, cfg, test, art)
        tree = art.student
        if o["save_teacher"]:
            modelio.save_model(art.teacher, o["save_teacher"])
        if o["save_student"]:
            modelio.save_model(tree, o["save_student"], CartConfig())
    policy = compile_rules(tree)
    try:
        check_partition(policy)
    except ValueError as exc:
        raise InvariantError(f"compiled policy is not a partition: {exc}") from None
    if len(policy) != tree.n_leaves:
        raise InvariantError(f"{len(policy)} rules for {tree.n_leaves} leaves")
    export_policy(policy, o["out"])
    print(f"rules\t{len(policy)}")
    return EXIT_OK


def format_action(p, action: int) -> str:
    return (f"{int_to_ip(p.src_ip)} {int_to_ip(p.dst_ip)} {p.src_port} {p.dst_port} "
            f"-> {CoSLabel(int(action)).name}")


def cmd_classify(o: dict) -> int:
    policy = import_policy(o["policy"])
    packets = [p for p in read_pcap(o["pcap"]) if p.protocol == TCP]
    start = time.perf_counter()
    X = np.array([(p.src_ip, p.dst_ip, p.src_port, p.dst_port) for p in packets],
                 dtype=np.int64).reshape(-1, 4)
    actions, hits = policy.match_counts(X)
    elapsed = time.perf_counter() - start
    unmatched = int(np.sum(hits == 0))
    if np.any(hits > 1):
        raise InvariantError("policy rules overlap on some packets")
    lines = []
    for p, a, h in zip(packets, actions, hits):
        lines.append(format_action(p, a) if h else
                     f"{int_to_ip(p.src_ip)} {int_to_ip(p.dst_ip)} {p.src_port} {p.dst_port} -> UNMATCHED")
    text = "".join(line + "\n" for line in lines)
    if o["out"]:
        Path(o["out"]).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    rate = len(packets) / elapsed if elapsed > 0 else float("inf")
    # timing goes to stderr so the action stream stays reproducible
    print(f"classified {len(packets)} packets ({unmatched} unmatched), {rate:.0f} packets/s",
          file=sys.stderr)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "distill": cmd_distill, "bounds": cmd_bounds, "online": cmd_online,
    "export-policy": cmd_export_policy, "classify": cmd_classify,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        opts = _resolve(args)
        return COMMANDS[args.command](opts)
    except (UsageError, ConfigError) as exc:
        print(f"fphtc {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantError as exc:
        print(f"fphtc {args.command}: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (DataError, PcapFormatError, modelio.ModelFormatError, ValueError, KeyError, OSError) as exc:
        print(f"fphtc {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
