"""
Command-line front end.

    simicd run CONFIG        closed-loop episode -> egm.csv, events.jsonl, report.json
    simicd replay EGM_CSV    open-loop sensing/detection/prescription over a recording
    simicd induce CONFIG     re-entry induction -> checkpoint + activation map
    simicd sweep CONFIG      ATP parameter grid -> one report per cell + summary.csv
    simicd plot RUN_DIR      SVG figures from a finished run

Exit codes: 0 success, 1 simulation error, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .device_logic import DetectionParams, ZoneId
from .ep.reentry import InductionError, induce_reentry
from .ep.solver import Simulator
from .orchestrator import Outcome, initial_state, replay_open_loop, run_closed_loop
from .plots import egm_svg, periods_svg
from .scenarios import ConfigError, icd_from_config, load_run_config, scenario_from_config, with_atp
from .sensing import EgmFormatError, read_egm_csv, write_egm_csv

__all__ = ["main"]

EXIT_OK, EXIT_SIM, EXIT_CONFIG = 0, 1, 2
log = logging.getLogger("simicd")


def _setup_logging(verbosity):
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbosity, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr)


def _output_dir(args, doc, default):
    out = Path(args.output or doc.get("output_dir") or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run_outputs(result, out, plots=False):
    """Write egm.csv, events.jsonl and report.json (and SVGs) for one run."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_egm_csv(result.egm, out / "egm.csv")
    (out / "events.jsonl").write_text(result.report.events_jsonl())
    (out / "report.json").write_text(result.report.to_json() + "\n")
    if plots:
        write_plots(out, result.egm, result.report.events, _detection_from_report(result.report.summary()))


def _detection_from_report(summary):
    det = summary.get("scenario", {}).get("detection")
    return DetectionParams(**det) if det else DetectionParams()


def write_plots(out, egm, events, detection):
    out = Path(out)
    (out / "egm.svg").write_text(egm_svg(egm, events))
    (out / "periods.svg").write_text(periods_svg(events, detection))


def _load(path):
    doc = load_run_config(path)
    return doc, scenario_from_config(doc)


# ------------------------------------------------------------------ commands

def cmd_run(args):
    doc, scenario = _load(args.config)
    _setup_logging(args.verbose or doc.get("verbosity", 0))
    out = _output_dir(args, doc, "run_out")
    log.info("running patient %d %s episode for %.0f ms", scenario.patient_id, scenario.episode.kind,
             scenario.duration_ms)
    result = run_closed_loop(scenario)
    write_run_outputs(result, out, doc.get("plots", False) or args.plots)
    rep = result.report
    print(f"outcome: {rep.outcome} (therapies: {rep.n_therapies})")
    if rep.outcome == Outcome.ERROR:
        print(f"error: {rep.error}", file=sys.stderr)
        return EXIT_SIM
    return EXIT_OK


def cmd_replay(args):
    doc = load_run_config(args.config) if args.config else {}
    icd = icd_from_config(doc.get("icd"))
    try:
        trace = read_egm_csv(args.egm)
    except OSError as exc:
        raise ConfigError(f"cannot read {args.egm}: {exc}") from exc
    except EgmFormatError as exc:
        print(f"{args.egm}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = replay_open_loop(trace, icd)
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        (out / "events.jsonl").write_text(report.events_jsonl())
        (out / "report.json").write_text(report.to_json() + "\n")
    else:
        sys.stdout.write(report.events_jsonl())
    print(f"outcome: {report.outcome} (therapies prescribed: {report.n_therapies})", file=sys.stderr)
    return EXIT_OK


def cmd_induce(args):
    doc, scenario = _load(args.config)
    _setup_logging(args.verbose or doc.get("verbosity", 0))
    if scenario.episode.kind != "reentrant":
        raise ConfigError("induce needs a reentrant episode")
    out = _output_dir(args, doc, "induce_out")
    sim = Simulator(scenario.grid(), scenario.preset.ionic, scenario.dt_ms)
    protocol = scenario.induction_protocol
    try:
        ck = induce_reentry(sim, initial_state(sim), protocol)
    except InductionError as exc:
        if exc.activation_map is not None:
            np.savetxt(out / "activation_map.csv", exc.activation_map, delimiter=",", fmt="%.3f")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SIM
    ck.save(out / "checkpoint.npz")
    np.savetxt(out / "activation_map.csv", ck.state.act_ms, delimiter=",", fmt="%.3f")
    mids = ck.meta["isthmus_activations_ms"]
    cls = np.diff(mids)
    summary = {
        "restored_at_ms": ck.meta["restored_at_ms"],
        "cycles": len(cls),
        "cycle_length_ms": float(np.median(cls)) if cls.size else None,
        "config_hash": ck.config_hash,
    }
    (out / "induction.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"re-entry induced: cycle length {summary['cycle_length_ms']} ms over {summary['cycles']} cycles")
    return EXIT_OK


def _sweep_cell(job):
    scenario, cell_dir, plots = job
    result = run_closed_loop(scenario)
    write_run_outputs(result, cell_dir, plots)
    rep = result.report
    return rep.outcome, rep.n_therapies, rep.error


def sweep_grid(doc, pct=None, pulses=None, decrements=None):
    """Cartesian product of the swept ATP settings; command-line lists win over the config."""
    spec = doc.get("sweep", {})

    def pick(cli, key, default):
        if cli is not None:
            return cli
        return spec.get(key, default)

    pct = pick(pct, "pulse_interval_pct", [81.0, 88.0])
    pulses = pick(pulses, "n_pulses", list(range(8, 16)))
    decrements = pick(decrements, "ramp_decrement_ms", [None])
    return list(itertools.product(pct, pulses, decrements))


def _threads():
    raw = os.environ.get("SIMICD_THREADS", "")
    try:
        n = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        raise ConfigError(f"SIMICD_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def cmd_sweep(args):
    doc, scenario = _load(args.config)
    _setup_logging(args.verbose or doc.get("verbosity", 0))
    cells = sweep_grid(doc, args.pct, args.pulses, args.decrement)
    if not cells:
        raise ConfigError("empty sweep grid")
    zone = doc.get("sweep", {}).get("zone")
    zones = [zone] if zone else ["VT1", "VT"]
    out = _output_dir(args, doc, "sweep_out")
    jobs = []
    names = []
    for pct, n, dec in cells:
        sc = scenario
        for z in zones:
            base = sc.icd.atp[ZoneId[z]]
            params = replace(base, pulse_interval_pct=pct, coupling_interval_pct=pct, n_pulses=n,
                             ramp_decrement_ms=base.ramp_decrement_ms if dec is None else dec)
            sc = with_atp(sc, z, params)
        name = f"pct{pct:g}_n{n}" + ("" if dec is None else f"_dec{dec:g}")
        names.append(name)
        jobs.append((sc, out / name, doc.get("plots", False)))
    workers = min(_threads(), len(jobs))
    log.info("sweeping %d cells on %d worker(s)", len(jobs), workers)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_sweep_cell, jobs))
    else:
        results = [_sweep_cell(j) for j in jobs]

    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", "pulse_interval_pct", "n_pulses", "ramp_decrement_ms", "outcome", "n_therapies",
                    "terminated_in_one_round"])
        for name, (pct, n, dec), (outcome, k, _) in zip(names, cells, results):
            one = outcome == Outcome.TERMINATED and k == 1
            w.writerow([name, f"{pct:g}", n, "" if dec is None else f"{dec:g}", outcome, k, int(one)])
            print(f"{name:>18}  {outcome:<30} therapies={k}{'  *' if one else ''}")
    return EXIT_SIM if any(r[0] == Outcome.ERROR for r in results) else EXIT_OK


def cmd_plot(args):
    run_dir = Path(args.run_dir)
    try:
        egm = read_egm_csv(run_dir / "egm.csv")
        events = [json.loads(line) for line in (run_dir / "events.jsonl").read_text().splitlines() if line]
        summary = json.loads((run_dir / "report.json").read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read run outputs in {run_dir}: {exc}") from exc
    write_plots(args.output or run_dir, egm, events, _detection_from_report(summary))
    print(f"wrote {Path(args.output or run_dir) / 'egm.svg'} and periods.svg")
    return EXIT_OK


# ------------------------------------------------------------------ entry point

def build_parser():
    p = argparse.ArgumentParser(prog="simicd", description="Closed-loop ICD / cardiac tissue simulator.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one closed-loop episode")
    r.add_argument("config")
    r.add_argument("-o", "--output")
    r.add_argument("--plots", action="store_true")
    r.set_defaults(func=cmd_run)

    r = sub.add_parser("replay", help="open-loop device replay of an EGM CSV")
    r.add_argument("egm")
    r.add_argument("-c", "--config", help="run config supplying the icd section")
    r.add_argument("-o", "--output")
    r.set_defaults(func=cmd_replay)

    r = sub.add_parser("induce", help="induce re-entry and save the checkpoint")
    r.add_argument("config")
    r.add_argument("-o", "--output")
    r.set_defaults(func=cmd_induce)

    r = sub.add_parser("sweep", help="ATP parameter sweep")
    r.add_argument("config")
    r.add_argument("-o", "--output")
    r.add_argument("--pct", type=float, nargs="+")
    r.add_argument("--pulses", type=int, nargs="+")
    r.add_argument("--decrement", type=float, nargs="+")
    r.set_defaults(func=cmd_sweep)

    r = sub.add_parser("plot", help="SVG figures for a finished run")
    r.add_argument("run_dir")
    r.add_argument("-o", "--output")
    r.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"config error: invalid JSON at line {exc.lineno}: {exc.msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (InductionError, FloatingPointError, RuntimeError) as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIM


if __name__ == "__main__":
    sys.exit(main())
