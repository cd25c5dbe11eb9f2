"""Command-line entry point: simulate, fit, classify, evaluate, report.

Every command reads the same JSON config and writes into ``--out``; each
output names the config hash and seed that produced it, and the resolved
config is written next to the outputs. Exit codes: 0 success, 1 runtime
failure, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .errors import AdaptiveLimitsError, ConfigError
from .evaluation import (
    curves_svg,
    evaluate,
    evaluate_oversampled,
    limits_svg,
    write_curve_csv,
    write_report_csv,
)
from .multivariate import MvChain, resume_gibbs
from .occ import (
    ClassifierPolicy,
    MultivariateLimits,
    PopulationThresholds,
    classify_collection,
    decisions_from_jsonl,
)
from .pipeline import build_model, policy_rngs, split_athletes
from .profiles import ProfileCollection, Sex, ingest_csv, log_transform, write_csv
from .cohort import simulate_cohort
from .stochastic import make_rng

log = logging.getLogger("adaptive_limits")

COHORT_FILE = "cohort.csv"
TRUTH_FILE = "truth.json"
CHAIN_DIR = "chains"
DECISION_DIR = "decisions"
REPORT_DIR = "report"


def policy_slug(policy: ClassifierPolicy) -> str:
    return policy.name.replace(":", "__").replace("+", "-")


class Run:
    """Paths and provenance shared by the commands of one invocation."""

    def __init__(self, cfg: RunConfig, out: Path, threads: int):
        self.cfg = cfg
        self.out = out
        self.threads = threads
        out.mkdir(parents=True, exist_ok=True)

    def write(self, rel: str, text: str) -> Path:
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        log.info("wrote %s", path)
        return path

    def write_resolved_config(self, command: str) -> None:
        self.write(f"resolved_config.{command}.json", self.cfg.resolved_json())

    def load_collection(self) -> ProfileCollection:
        path = Path(self.cfg.data) if self.cfg.data else self.out / COHORT_FILE
        if not path.exists():
            raise ConfigError("data", f"no cohort file at {path}; run 'simulate' or set 'data'")
        with path.open() as fh:
            coll = ingest_csv(fh)
        if coll.rejects:
            log.warning("%d malformed row(s) skipped in %s", len(coll.rejects), path)
        return coll

    @property
    def thresholds(self) -> PopulationThresholds:
        if self.cfg.thresholds is None:
            return PopulationThresholds.default()
        try:
            return PopulationThresholds.from_dict(self.cfg.thresholds)
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError("thresholds", f"malformed thresholds ({exc})") from None


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(run: Run) -> None:
    cohort = simulate_cohort(run.cfg.cohort, make_rng(run.cfg.seed))
    run.write(COHORT_FILE, write_csv(cohort.collection, comment=run.cfg.provenance()))
    truth = cohort.truth_record()
    truth["provenance"] = {"config_sha256": run.cfg.sha256, "seed": run.cfg.seed}
    run.write(TRUTH_FILE, json.dumps(truth, indent=1, sort_keys=True) + "\n")
    run.write_resolved_config("simulate")


def _chain_path(run: Run, policy: ClassifierPolicy, sex: Sex) -> Path:
    return run.out / CHAIN_DIR / f"{policy_slug(policy)}__{sex.value}.npz"


def _test_sexes(test) -> list[Sex]:
    return sorted({a.sex for a in test}, key=lambda s: s.value)


def cmd_fit(run: Run, resume_iterations: int = 0) -> None:
    coll = run.load_collection()
    train, test = split_athletes(coll)
    rows = []
    prior_rows = []
    for policy in run.cfg.policies:
        fit_rng, _ = policy_rngs(policy, run.cfg.seed)
        model = build_model(policy, coll, run.cfg.settings, fit_rng, _test_sexes(test), train)
        if policy.model == "univariate":
            for sex, by_marker in sorted(model.mu0.items(), key=lambda kv: kv[0].value):
                for m in policy.marker_tuple:
                    p = model.prior(sex, m)
                    prior_rows.append([policy.name, sex.value, m.value, repr(p.mu), repr(p.kappa),
                                       repr(p.alpha), repr(p.beta)])
            continue
        for sex, chain in sorted(model.chains.items(), key=lambda kv: kv[0].value):
            if resume_iterations:
                chain = resume_gibbs(chain, model.training[sex], resume_iterations)
            path = _chain_path(run, policy, sex)
            path.parent.mkdir(parents=True, exist_ok=True)
            chain.save(path, {"config_sha256": run.cfg.sha256, "seed": run.cfg.seed,
                              "policy": policy.name, "sex": sex.value})
            log.info("wrote %s", path)
            diag = chain.diagnostics or chain.compute_diagnostics()
            for name, ess, rhat in zip(diag["names"], diag["ess"], diag["split_rhat"]):
                rows.append([policy.name, sex.value, name, repr(float(ess)), repr(float(rhat))])
    buf = io.StringIO()
    buf.write(f"# {run.cfg.provenance()}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy", "sex", "scalar", "ess", "split_rhat"])
    w.writerows(rows)
    run.write("diagnostics.csv", buf.getvalue())
    buf = io.StringIO()
    buf.write(f"# {run.cfg.provenance()}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy", "sex", "marker", "mu0", "kappa0", "alpha0", "beta0"])
    w.writerows(prior_rows)
    run.write("univariate_priors.csv", buf.getvalue())
    run.write_resolved_config("fit")


def _load_model(run: Run, policy: ClassifierPolicy, coll, train, test):
    fit_rng, run_rng = policy_rngs(policy, run.cfg.seed)
    sexes = _test_sexes(test)
    if policy.model == "multivariate" and run.cfg.settings.update == "athlete":
        paths = {s: _chain_path(run, policy, s) for s in sexes}
        if all(p.exists() for p in paths.values()):
            chains = {s: MvChain.load(p) for s, p in paths.items()}
            log.info("loaded fitted chains for %s", policy.name)
            return MultivariateLimits(chains, policy.marker_tuple, n_rep=run.cfg.settings.n_rep), run_rng
    return build_model(policy, coll, run.cfg.settings, fit_rng, sexes, train), run_rng


def cmd_classify(run: Run) -> None:
    coll = run.load_collection()
    train, test = split_athletes(coll)
    for policy in run.cfg.policies:
        model, rng = _load_model(run, policy, coll, train, test)
        decisions = classify_collection(test, policy, model, rng, run.thresholds, run.threads)
        lines = []
        for d in decisions:
            rec = d.to_record()
            rec["policy"] = policy.name
            rec["config_sha256"] = run.cfg.sha256
            rec["seed"] = run.cfg.seed
            lines.append(json.dumps(rec, sort_keys=True))
        run.write(f"{DECISION_DIR}/{policy_slug(policy)}.jsonl", "\n".join(lines) + "\n")
        log.info("%s: %d decisions, %d flagged", policy.name, len(decisions),
                 sum(d.suspicious for d in decisions))
    run.write_resolved_config("classify")


def _read_decisions(run: Run, policy: ClassifierPolicy):
    path = run.out / DECISION_DIR / f"{policy_slug(policy)}.jsonl"
    if not path.exists():
        raise ConfigError("policies", f"no decisions for {policy.name} at {path}; run 'classify'")
    return decisions_from_jsonl(path.read_text())


def cmd_evaluate(run: Run) -> None:
    reports = []
    for policy in run.cfg.policies:
        decisions = _read_decisions(run, policy)
        rep = evaluate(decisions, policy.name)
        reports.append(rep)
        slug = policy_slug(policy)
        comment = f"{run.cfg.provenance()} policy={policy.name}"
        if rep.roc is not None:
            run.write(f"curves/{slug}.roc.csv", write_curve_csv(rep.roc, "roc", comment=comment))
            run.write(f"curves/{slug}.pr.csv", write_curve_csv(rep.pr, "pr", comment=comment))
        if run.cfg.oversample:
            labels = [d.label for d in decisions]
            from .occ import binarize_labels

            if len({binarize_labels(v) for v in labels}) == 2:
                _, rng = policy_rngs(policy, run.cfg.seed + 1)
                reports.append(evaluate_oversampled(decisions, policy.name + ":oversampled", rng))
    run.write("report.csv", write_report_csv(reports, comment=run.cfg.provenance()))
    run.write_resolved_config("evaluate")


def cmd_report(run: Run) -> None:
    coll = run.load_collection()
    roc, pr = [], []
    lines = [f"# {run.cfg.provenance()}", ""]
    for policy in run.cfg.policies:
        decisions = _read_decisions(run, policy)
        rep = evaluate(decisions, policy.name)
        m = rep.metrics
        lines.append(f"{policy.name}: G-mean {m.g_mean:.3f}  F1 {m.f1:.3f}  sensitivity "
                     f"{m.sensitivity:.3f}  specificity {m.specificity:.3f}")
        if rep.roc is not None:
            roc.append((policy.name, rep.roc))
            pr.append((policy.name, rep.pr))
        if run.cfg.svg and decisions:
            first = decisions[0].athlete_id
            series = [d for d in decisions if d.athlete_id == first]
            ath = coll.athlete(first)
            vals = [log_transform(s, policy.marker_tuple).log_values[0] for s in ath.samples]
            run.write(f"{REPORT_DIR}/{policy_slug(policy)}.limits.svg", limits_svg(series, 0, vals))
    if run.cfg.svg and roc:
        run.write(f"{REPORT_DIR}/roc.svg", curves_svg(roc, "roc"))
        run.write(f"{REPORT_DIR}/pr.svg", curves_svg(pr, "pr"))
    run.write(f"{REPORT_DIR}/summary.txt", "\n".join(lines) + "\n")
    run.write_resolved_config("report")


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
    common.add_argument("--seed", type=int, default=0, help="master seed (u64)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads for classification")
    common.add_argument("--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="adaptive-limits", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate a labeled cohort and its truth")
    fit = sub.add_parser("fit", parents=[common], help="fit population models, write chains and diagnostics")
    fit.add_argument("--resume", type=int, default=0, metavar="N",
                     help="continue each chain for N more sweeps from its last state")
    sub.add_parser("classify", parents=[common], help="write one decision record per sample")
    sub.add_parser("evaluate", parents=[common], help="score decisions; write metrics and curves")
    sub.add_parser("report", parents=[common], help="plain-text summary and optional SVG plots")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if not 0 <= args.seed < 2 ** 64:
        parser.error("--seed must lie in [0, 2^64)")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        cfg = load_config(args.config, args.seed)
        run = Run(cfg, Path(args.out), args.threads)
        if args.command == "simulate":
            cmd_simulate(run)
        elif args.command == "fit":
            cmd_fit(run, args.resume)
        elif args.command == "classify":
            cmd_classify(run)
        elif args.command == "evaluate":
            cmd_evaluate(run)
        else:
            cmd_report(run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (AdaptiveLimitsError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
