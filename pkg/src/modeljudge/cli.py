"""Command-line interface.

Every subcommand reads and writes JSON files, so a verdict can be replayed
and audited from its artifacts alone.  Exit codes: 0 a decision was made
(or the stage finished), 2 bad configuration or input, 3 provenance or
hash mismatch, 4 no metric applicable.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import forge, jsonio, judge, metrics, nn, pipeline, testgen
from .jsonio import FormatError
from .pipeline import ConfigError, RunConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROVENANCE = 3
EXIT_UNDECIDABLE = 4

log = logging.getLogger("modeljudge")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _config(args) -> RunConfig:
    cfg = pipeline.load_config(args.config) if args.config else RunConfig()
    return cfg


def _load_model(path) -> nn.Model:
    try:
        return nn.load_model(path)
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"model file {path} not found") from None


def _load_suite(path) -> testgen.TestSuite:
    try:
        return testgen.load_suite(path)
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"suite file {path} not found") from None


def _write(path, obj) -> str:
    h = jsonio.write(path, obj)
    log.info("wrote %s", path)
    return h


def _model_path(p: str) -> Path:
    path = Path(p)
    return path / "model.json" if path.is_dir() else path


def _model_id(p: str) -> str:
    path = Path(p).resolve()
    return path.name if path.is_dir() else path.parent.name


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = _config(args)
    victim_half, _, test = pipeline.load_data(cfg)
    model = pipeline.train_victim(cfg, victim_half)
    pipeline.save_model_dir(model, Path(args.out))
    print(f"victim {nn.model_hash(model)[:16]} test accuracy {forge.accuracy(model, test):.4f}")
    return EXIT_OK


def cmd_negatives(args) -> int:
    cfg = _config(args)
    if args.count is not None:
        if args.count < 0:
            raise CliError(EXIT_CONFIG, "count: must be >= 0")
        cfg = RunConfig.from_dict({**cfg.to_dict(), "neg1_count": (args.count + 1) // 2,
                                   "neg2_count": args.count // 2})
    victim_half, negative_half, _ = pipeline.load_data(cfg)
    models = pipeline.train_negatives(cfg, victim_half, negative_half)
    for name, m in models.items():
        pipeline.save_model_dir(m, Path(args.out) / name)
        print(f"{name} {nn.model_hash(m)[:16]}")
    return EXIT_OK


def cmd_derive(args) -> int:
    cfg = _config(args)
    if args.attack not in forge.ATTACK_KINDS:
        raise CliError(EXIT_CONFIG, f"attack: unknown kind {args.attack!r}; expected one of {forge.ATTACK_KINDS}")
    victim = _load_model(_model_path(args.victim))
    suite = None
    if args.suite:
        suite = _load_suite(args.suite)
        metrics.check_provenance(victim, suite)
    datasets = pipeline.load_data(cfg)
    if args.attack == "prune" and args.ratio is None:
        raise CliError(EXIT_CONFIG, "ratio: required for --attack prune")
    model = pipeline.derive(cfg, victim, args.attack, args.copy, args.ratio, suite, datasets)
    test = datasets[2]
    if args.attack in ("knockoff", "jba"):
        model.metadata["agreement"] = format(forge.agreement(victim, model, test.inputs), ".6f")
    if args.attack != "vtl":
        model.metadata["test_accuracy"] = format(forge.accuracy(model, test), ".6f")
    if args.attack == "prune":
        model.metadata["ratio"] = str(args.ratio)
    pipeline.save_model_dir(model, Path(args.out))
    print(f"{args.attack} {nn.model_hash(model)[:16]}")
    return EXIT_OK


def cmd_seeds(args) -> int:
    cfg = _config(args)
    victim = _load_model(_model_path(args.victim))
    _, _, test = pipeline.load_data(cfg)
    count = args.count or cfg.seed_count
    try:
        seeds = testgen.gini_select(victim, test, count, args.order or cfg.seed_order)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"count: {exc}") from None
    _write(args.out, testgen.seeds_to_dict(seeds, nn.model_hash(victim)))
    return EXIT_OK


def cmd_testgen(args) -> int:
    cfg = _config(args)
    victim = _load_model(_model_path(args.victim))
    try:
        seeds, seed_victim = testgen.seeds_from_dict(jsonio.read(args.seeds))
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"seed file {args.seeds} not found") from None
    if len(seeds) == 0:
        raise CliError(EXIT_CONFIG, f"seeds: {args.seeds} holds no seeds")
    if seed_victim != nn.model_hash(victim):
        raise CliError(EXIT_PROVENANCE, "seeds were selected with a different victim model")
    if args.mode == "whitebox":
        victim_half, _, _ = pipeline.load_data(cfg)
        layer = args.layer or pipeline.metric_layer(cfg, victim)
        m = cfg.wb_m if args.m is None else args.m
        iters = cfg.wb_iters if args.iters is None else args.iters
        try:
            th = testgen.neuron_thresholds(victim, victim_half, layer, m)
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, f"layer: {exc}") from None
        suite = testgen.gen_whitebox(victim, seeds, layer, th, cfg.wb_lr, iters)
    else:
        eps = cfg.epsilon if args.epsilon is None else args.epsilon
        if args.mode == "fgsm":
            suite = testgen.gen_fgsm(victim, seeds, eps)
        elif args.mode == "pgd":
            suite = testgen.gen_pgd(victim, seeds, eps, cfg.pgd_steps if args.steps is None else args.steps)
        else:
            suite = testgen.gen_cw(victim, seeds, cfg.cw_c, cfg.cw_iters if args.iters is None else args.iters,
                                   cfg.cw_lr, cfg.cw_loss)
    _write(args.out, testgen.suite_to_dict(suite))
    print(f"{suite.mode} suite: {len(suite)} cases, {suite.failures} failures")
    return EXIT_OK


def _measure(victim, suspect, bb, wb, beta):
    return metrics.measure_all(victim, suspect, bb, wb, beta)


def cmd_measure(args) -> int:
    cfg = _config(args)
    victim = _load_model(_model_path(args.victim))
    suspect = _load_model(_model_path(args.suspect))
    bb = _load_suite(args.bb_suite) if args.bb_suite else None
    wb = _load_suite(args.wb_suite) if args.wb_suite else None
    if bb is None and wb is None:
        raise CliError(EXIT_CONFIG, "suites: give --bb-suite and/or --wb-suite")
    reports = _measure(victim, suspect, bb, wb, cfg.beta)
    sid = args.id or _model_id(args.suspect)
    doc = metrics.scores_to_dict(sid, nn.model_hash(victim), nn.model_hash(suspect), reports)
    _write(args.out, doc)
    for r in reports:
        print(f"{r.metric} {r.value:.6g}")
    return EXIT_OK


def _read_scores(paths) -> list[dict]:
    docs = []
    for p in paths:
        try:
            docs.append(jsonio.read(p))
        except FileNotFoundError:
            raise CliError(EXIT_CONFIG, f"scores file {p} not found") from None
    if not docs:
        raise CliError(EXIT_CONFIG, "scores: at least one scores file is required")
    victims = {d.get("victim_hash") for d in docs}
    if len(victims) != 1:
        raise CliError(EXIT_PROVENANCE, "scores files refer to different victim models")
    return docs


def _suite_hashes(docs) -> dict:
    out: dict[str, str] = {}
    for d in docs:
        for r in d["reports"]:
            mode = "blackbox" if r["metric"] in metrics.BLACKBOX_METRICS else "whitebox"
            if out.setdefault(mode, r["suite_hash"]) != r["suite_hash"]:
                raise CliError(EXIT_PROVENANCE, f"scores files were measured on different {mode} suites")
    return out


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    docs = _read_scores(args.scores)
    suite_hashes = _suite_hashes(docs)
    reports = [[metrics.MetricReport.from_dict(r) for r in d["reports"]] for d in docs]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ts = judge.calibrate(judge.NegativeStats.from_reports(reports),
                             cfg.alpha_blackbox if args.alpha_blackbox is None else args.alpha_blackbox,
                             cfg.alpha_whitebox if args.alpha_whitebox is None else args.alpha_whitebox,
                             cfg.confidence if args.confidence is None else args.confidence)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    negatives = {d["suspect_id"]: d["suspect_hash"] for d in docs}
    doc = pipeline.thresholds_document(ts, docs[0]["victim_hash"], suite_hashes, negatives)
    _write(args.out, doc)
    for m, t in ts.thresholds.items():
        print(f"{m} lb={t.lb:.6g} tau={t.tau:.6g} n={t.n}")
    return EXIT_OK


def cmd_judge(args) -> int:
    cfg = _config(args)
    if not args.thresholds or not Path(args.thresholds).exists():
        raise CliError(EXIT_PROVENANCE, "thresholds file is missing")
    tdoc = jsonio.read(args.thresholds)
    pipeline.verify_thresholds_document(tdoc)
    ts = judge.ThresholdSet.from_dict(tdoc)
    victim = _load_model(_model_path(args.victim))
    suspect = _load_model(_model_path(args.suspect))
    vh = nn.model_hash(victim)
    if tdoc.get("victim_hash") != vh:
        raise CliError(EXIT_PROVENANCE, "thresholds were calibrated for a different victim")
    suites = {}
    for mode, path in (("blackbox", args.bb_suite), ("whitebox", args.wb_suite)):
        if path:
            s = _load_suite(path)
            if s.mode != mode:
                raise CliError(EXIT_CONFIG, f"{path} holds a {s.mode} suite, expected {mode}")
            if s.digest() != tdoc.get("suite_hashes", {}).get(mode):
                raise CliError(EXIT_PROVENANCE, f"{mode} suite differs from the one used for calibration")
            suites[mode] = s
    if not suites:
        raise CliError(EXIT_CONFIG, "suites: give --bb-suite and/or --wb-suite")
    reports = _measure(victim, suspect, suites.get("blackbox"), suites.get("whitebox"), cfg.beta)
    names = [m for m in metrics.ALL_METRICS if m in ts.thresholds and
             ((m in metrics.BLACKBOX_METRICS and "blackbox" in suites) or
              (m in metrics.WHITEBOX_METRICS and "whitebox" in suites))]
    verdict = judge.vote(reports, ts, names)
    hashes = {"victim": vh, "suspect": nn.model_hash(suspect),
              **{f"{k}_suite": s.digest() for k, s in suites.items()},
              "thresholds": jsonio.file_sha256(args.thresholds)}
    sid = args.id or _model_id(args.suspect)
    if args.out:
        _write(args.out, pipeline.verdict_document(verdict, sid, hashes))
    print(verdict.summary())
    return EXIT_OK


def similarity_rows(docs: list[dict], negative_prefix: str) -> tuple[list[dict], dict]:
    """Per (suspect, metric): distance, min-max normalised similarity and the metric's AUC."""
    by_metric: dict[str, list[tuple[str, dict]]] = {}
    for d in docs:
        for r in d["reports"]:
            by_metric.setdefault(r["metric"], []).append((d["suspect_id"], r))
    aucs = {}
    rows = []
    for metric in [m for m in metrics.ALL_METRICS if m in by_metric]:
        entries = by_metric[metric]
        values = np.array([r["value"] for _, r in entries])
        lo, hi = values.min(), values.max()
        neg = [v for (sid, _), v in zip(entries, values) if sid.startswith(negative_prefix)]
        pos = [v for (sid, _), v in zip(entries, values) if not sid.startswith(negative_prefix)]
        auc = None
        if neg and pos:
            points, auc = judge.roc_auc(pos, neg)
            aucs[metric] = {"auc": auc, "roc": [list(p) for p in points]}
        for (sid, r), v in zip(entries, values):
            norm = (v - lo) / (hi - lo) if hi > lo else 0.0
            rows.append({"suspect_id": sid, "metric": metric, "value": float(v), "layer": r.get("layer"),
                         "similarity": 1.0 - float(norm), "auc": auc})
    return rows, aucs


def cmd_report(args) -> int:
    docs = _read_scores(args.scores)
    rows, aucs = similarity_rows(docs, args.negative_prefix)
    if args.format == "csv":
        lines = ["suspect_id,metric,value,layer,similarity,auc"]
        for r in rows:
            lines.append(",".join([r["suspect_id"], r["metric"], format(r["value"], ".17g"),
                                   "" if r["layer"] is None else str(r["layer"]),
                                   format(r["similarity"], ".17g"),
                                   "" if r["auc"] is None else format(r["auc"], ".17g")]))
        text = "\n".join(lines) + "\n"
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        _write(args.out, {"format_version": jsonio.FORMAT_VERSION, "victim_hash": docs[0]["victim_hash"],
                          "rows": rows, "roc": aucs})
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    result = pipeline.run(cfg, args.out)
    for name, v in result.verdicts.items():
        print(f"{name}: {v.summary()}")
    print("AUC " + " ".join(f"{k}={v:.3f}" for k, v in result.aucs.items()))
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modeljudge", description="Test whether a suspect model is a copy of a victim model.")
    p.add_argument("--explain-config", action="store_true", help="describe every configuration key and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON configuration file (flat key/value)")
        sp.set_defaults(func=func)
        return sp

    sp = add("train", cmd_train, "train the victim model")
    sp.add_argument("--out", required=True, help="output model directory")

    sp = add("negatives", cmd_negatives, "train independent negative models")
    sp.add_argument("--count", type=int, help="total negatives, split evenly between the two data halves")
    sp.add_argument("--out", required=True, help="output directory (one subdirectory per model)")

    sp = add("derive", cmd_derive, "derive a suspect from the victim")
    sp.add_argument("--victim", required=True)
    sp.add_argument("--attack", required=True, help=", ".join(forge.ATTACK_KINDS))
    sp.add_argument("--ratio", type=float, help="pruning ratio")
    sp.add_argument("--copy", type=int, default=0, help="copy index (varies data slice and seeds)")
    sp.add_argument("--suite", help="exposed suite for adapt-b / adapt-w")
    sp.add_argument("--out", required=True)

    sp = add("seeds", cmd_seeds, "select seeds from the test set")
    sp.add_argument("--victim", required=True)
    sp.add_argument("--count", type=int)
    sp.add_argument("--order", choices=("high", "low"))
    sp.add_argument("--out", required=True)

    sp = add("testgen", cmd_testgen, "generate a test suite")
    sp.add_argument("--victim", required=True)
    sp.add_argument("--seeds", required=True)
    sp.add_argument("--mode", required=True, choices=("fgsm", "pgd", "cw", "whitebox"))
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--m", type=float)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--layer", type=int)
    sp.add_argument("--out", required=True)

    sp = add("measure", cmd_measure, "compute distances between victim and suspect")
    sp.add_argument("--victim", required=True)
    sp.add_argument("--suspect", required=True)
    sp.add_argument("--bb-suite")
    sp.add_argument("--wb-suite")
    sp.add_argument("--id", help="suspect id (default: model directory name)")
    sp.add_argument("--out", required=True)

    sp = add("calibrate", cmd_calibrate, "thresholds from negative-model scores")
    sp.add_argument("--scores", nargs="+", required=True)
    sp.add_argument("--alpha-blackbox", type=float)
    sp.add_argument("--alpha-whitebox", type=float)
    sp.add_argument("--confidence", type=float)
    sp.add_argument("--out", required=True)

    sp = add("judge", cmd_judge, "verdict for one suspect")
    sp.add_argument("--victim", required=True)
    sp.add_argument("--suspect", required=True)
    sp.add_argument("--bb-suite")
    sp.add_argument("--wb-suite")
    sp.add_argument("--thresholds")
    sp.add_argument("--id")
    sp.add_argument("--out")

    sp = add("report", cmd_report, "similarity and ROC data for radar/ROC plots")
    sp.add_argument("--scores", nargs="+", required=True)
    sp.add_argument("--format", choices=("json", "csv"), default="json")
    sp.add_argument("--negative-prefix", default="neg", help="suspect ids starting with this are negatives")
    sp.add_argument("--out", required=True)

    sp = add("pipeline", cmd_pipeline, "run everything end to end")
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.explain_config:
        print(RunConfig.explain())
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except metrics.ProvenanceError as exc:
        print(f"provenance error: {exc}", file=sys.stderr)
        return EXIT_PROVENANCE
    except judge.Undecidable as exc:
        print(f"undecidable: {exc}", file=sys.stderr)
        return EXIT_UNDECIDABLE
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
