"""Command-line front end.

Subcommands::

    fpqkd simulate [--config F] [--seed S] [--samples N] [--out DIR] [--trace PATH]
    fpqkd analyze TRACE [--config F] [--seed S] [--out DIR]
    fpqkd sweep [--config F] [--grid SPEC] [--km] [--out DIR]
    fpqkd bounds TALLIES [--moments MOMENTS] [--config F] [--out DIR]

Exit codes: 0 success, 2 configuration or usage error, 3 data error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import detection as det
from . import traces
from .config import ConfigError, RunConfig, config_hash, dumps, load_config, loads
from .decoy import InfeasibleError, PhotonMoments, empirical_moments
from .keyrate import SWEEP_COLUMNS, db_to_km, sweep
from .pipeline import (Setup, analyze_point, block_sizes, observations_from_tallies,
                       simulate)
from .postselect import ReshapedDensity, accept_pair, azimuth_batch, classify_batch
from .source import STREAM_ACCEPT, STREAM_SOURCE, block_rng, generate_iid, readout_da

log = logging.getLogger("fpqkd")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
CLAMP_WARN_FRACTION = 0.01
VERSION = __version__

TALLY_COLUMNS = ("loss_db", "region", "basis", "n_sent", "n_matched", "n_detected", "n_error",
                 "Q", "QE", "E", "sigma_Q", "sigma_QE")
LP_NAMES = ("Y1_Z", "Y1_X", "e1Y1_X")
BOUND_COLUMNS = ("loss_db", "Y1_low", "e1Y1_high", "e1_high", "Y1_low_X",
                 *(f"{n}_{k}" for n in LP_NAMES for k in ("status", "k_sigma")), "flags")
RATE_COLUMNS = ("loss_db", "distance_km", "P_Z", "P1_avg", "Y1_low", "e1_high", "Q_Z", "QE_Z",
                "f_e", "single_photon_term", "ec_term", "rate", "rate_clamped", "diagnostics")


class DataError(ValueError):
    """Bad input data (trace or tally file)."""


class UsageError(ValueError):
    pass


def fmt(v) -> str:
    # shortest string that round-trips exactly
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, columns, rows, chash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_sha256={chash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row[c]) for c in columns])


def read_csv(path: Path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    return list(csv.DictReader(lines))


def write_manifest(out: Path, cfg: RunConfig, command: str, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "seed": cfg.run.seed,
        "n_samples": cfg.run.n_samples,
        "config_sha256": config_hash(cfg),
        "config": dumps(cfg),
        "versions": {"fpqkd": VERSION, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# report rows


def tally_rows(loss, setup: Setup, tallies: det.TallySet):
    for r in setup.regions:
        t = tallies[r.label]
        yield {"loss_db": loss, "region": r.label, "basis": r.basis, "n_sent": t.n_sent,
               "n_matched": t.n_matched, "n_detected": t.n_detected, "n_error": t.n_error,
               "Q": t.Q, "QE": t.QE, "E": t.E, "sigma_Q": t.sigma_Q, "sigma_QE": t.sigma_QE}


def tallies_from_rows(rows) -> dict[float, det.TallySet]:
    out: dict[float, det.TallySet] = {}
    for i, row in enumerate(rows):
        try:
            loss = float(row["loss_db"])
            t = det.RegionTally(*(int(row[k]) for k in ("n_sent", "n_matched", "n_detected", "n_error")))
            label = row["region"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"tally row {i}: {exc}") from None
        if min(t.n_sent, t.n_matched, t.n_detected, t.n_error) < 0 or not (
                t.n_error <= t.n_detected <= t.n_matched <= t.n_sent):
            raise DataError(f"tally row {i}: inconsistent counts")
        out.setdefault(loss, det.TallySet()).tallies[label] = t
    return out


def moment_columns(n_cut: int) -> tuple[str, ...]:
    return ("loss_db", "region", "n_sent", *(f"sum_p{n}" for n in range(n_cut + 1)))


def moment_rows(loss, setup: Setup, tallies: det.TallySet, sums: np.ndarray):
    for k, r in enumerate(setup.regions):
        row = {"loss_db": loss, "region": r.label, "n_sent": tallies[r.label].n_sent}
        row.update({f"sum_p{n}": float(v) for n, v in enumerate(sums[k])})
        yield row


def moments_from_rows(rows, setup: Setup) -> dict[float, dict[str, PhotonMoments]]:
    """Group moments per loss point from a moments.csv written by ``simulate``."""
    per_loss: dict[float, dict[str, tuple[int, np.ndarray]]] = {}
    cols = [f"sum_p{n}" for n in range(setup.n_cut + 1)]
    for i, row in enumerate(rows):
        try:
            loss = float(row["loss_db"])
            per_loss.setdefault(loss, {})[row["region"]] = (
                int(row["n_sent"]), np.array([float(row[c]) for c in cols]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"moment row {i}: {exc}") from None
    out = {}
    for loss, regs in per_loss.items():
        out[loss] = {}
        for g, labels in setup.groups.items():
            try:
                count = sum(regs[k][0] for k in labels)
                sums = sum(regs[k][1] for k in labels)
                out[loss][g] = empirical_moments(g, sums, count)
            except (KeyError, ValueError) as exc:
                raise DataError(f"moments for {loss:g} dB, group {g}: {exc}") from None
    return out


def point_rows(loss, setup: Setup, tallies: det.TallySet, cfg: RunConfig,
               moments: dict[str, PhotonMoments] | None = None):
    """Decoy bounds and key rate for one tally set. Returns (bound_row, rate_row)."""
    obs = observations_from_tallies(setup, tallies)
    km = float(db_to_km(loss))
    try:
        res = analyze_point(setup, obs, loss, cfg.keyrate.f_e, cfg.decoy.k_sigma, moments)
    except InfeasibleError as exc:
        log.warning("loss %.6g dB: decoy program infeasible (%s)", loss, exc)
        nan = math.nan
        b = {c: nan for c in BOUND_COLUMNS} | {"loss_db": loss, "flags": f"infeasible: {exc}"}
        r = {c: nan for c in RATE_COLUMNS} | {"loss_db": loss, "distance_km": km, "rate": 0.0,
                                               "rate_clamped": 0.0, "diagnostics": "decoy infeasible"}
        return b, r
    bd = res.bounds
    b = {"loss_db": loss, "Y1_low": bd.Y1_low, "e1Y1_high": bd.e1Y1_high, "e1_high": bd.e1_high,
         "Y1_low_X": bd.Y1_low_X, "flags": ";".join(bd.flags)}
    for n in LP_NAMES:
        b[f"{n}_status"] = bd.lp_status[n]["status"]
        b[f"{n}_k_sigma"] = float(bd.lp_status[n]["k_sigma"])
    r = {"loss_db": loss, "distance_km": km} | res.report.as_row()
    r["diagnostics"] = ";".join(res.report.diagnostics)
    return b, r


def write_reports(out: Path, cfg: RunConfig, setup: Setup, results: dict[float, det.TallySet],
                  moments: dict[float, dict[str, PhotonMoments]] | None = None,
                  with_tallies: bool = True) -> list[dict]:
    chash = config_hash(cfg)
    tally, bounds, rates = [], [], []
    for loss, ts in results.items():
        tally.extend(tally_rows(loss, setup, ts))
        b, r = point_rows(loss, setup, ts, cfg, (moments or {}).get(loss))
        bounds.append(b)
        rates.append(r)
    if with_tallies:
        write_csv(out / "tallies.csv", TALLY_COLUMNS, tally, chash)
    write_csv(out / "bounds.csv", BOUND_COLUMNS, bounds, chash)
    write_csv(out / "keyrate.csv", RATE_COLUMNS, rates, chash)
    return rates


# ---------------------------------------------------------------------------
# commands


def make_setup(cfg: RunConfig) -> Setup:
    return Setup(cfg.region_list(), ReshapedDensity(cfg.source.mu_max_per_pol), cfg.decoy.n_cut)


def export_trace(path: Path, cfg: RunConfig) -> int:
    """Write the local readings of every raw sample, block by block."""
    with traces.TraceWriter(path) as w:
        for i, n in enumerate(block_sizes(cfg.run.n_samples)):
            b = generate_iid(n, cfg.source, block_rng(cfg.run.seed, i, STREAM_SOURCE))
            mu_d, _ = readout_da(b.mu_H, b.mu_V, b.phi_HV)
            w.write(b.mu_H, b.mu_V, mu_d)
        return w.count


def cmd_simulate(cfg: RunConfig, out: Path, trace: Path | None = None) -> dict:
    setup = make_setup(cfg)
    reshape = cfg.reshape_spec()
    results, kept, moments, mrows = {}, {}, {}, []
    for loss in cfg.channel.loss_db:
        loss = float(loss)
        log.info("simulating %d samples at %.6g dB", cfg.run.n_samples, loss)
        res = simulate(cfg.run.n_samples, cfg.run.seed, cfg.source, reshape, setup.regions,
                       cfg.channel.at(loss), shards=cfg.run.shards, n_cut=cfg.decoy.n_cut)
        results[loss] = res.tallies
        kept[fmt(loss)] = res.n_kept
        if cfg.decoy.moments == "empirical":
            moments[loss] = res.moments(setup)
        mrows.extend(moment_rows(loss, setup, res.tallies, res.moment_sums))
    rates = write_reports(out, cfg, setup, results, moments)
    write_csv(out / "moments.csv", moment_columns(cfg.decoy.n_cut), mrows, config_hash(cfg))
    extra = {"n_kept": kept}
    if trace is not None:
        extra["trace"] = {"path": str(trace), "records": export_trace(trace, cfg)}
    write_manifest(out, cfg, "simulate", extra)
    return {"rates": rates}


def cmd_analyze(trace_path: Path, cfg: RunConfig, out: Path) -> dict:
    """Reshape and classify recorded local readings; no Bob-side data is used.

    Records are processed in the same fixed blocks as ``simulate`` with the
    same acceptance stream, so a trace exported by ``simulate`` classifies
    identically.
    """
    mu_max = cfg.source.mu_max_per_pol
    try:
        tr = traces.read_trace(trace_path, mu_max)
    except OSError as exc:
        raise DataError(f"{trace_path}: {exc.strerror}") from None
    except traces.TraceError as exc:
        raise DataError(f"{trace_path}: {exc}") from None
    regions = cfg.region_list()
    reshape = cfg.reshape_spec()
    counts = {r.label: {s: 0 for s in ("n_sent", "H", "V", "D", "A")} for r in regions}
    n_kept = n_clamped = start = 0
    for i, n in enumerate(block_sizes(len(tr))):
        sl = slice(start, start + n)
        start += n
        h, v, d = tr.mu_h[sl], tr.mu_v[sl], tr.mu_d[sl]
        keep = accept_pair(h, v, reshape, block_rng(cfg.run.seed, i, STREAM_ACCEPT))
        h, v, d = h[keep], v[keep], d[keep]
        phi, clamped = azimuth_batch(h, v, d, np.clip(h + v - d, 0.0, None))
        n_kept += len(h)
        n_clamped += int(clamped.sum())
        member, states = classify_batch(h, v, phi, regions, mu_max)
        for k, r in enumerate(regions):
            c = counts[r.label]
            c["n_sent"] += int(member[k].sum())
            for s in ("H", "V", "D", "A"):
                c[s] += int(np.count_nonzero(member[k] & (states[k] == s)))
    clamp_frac = n_clamped / n_kept if n_kept else 0.0
    if clamp_frac > CLAMP_WARN_FRACTION:
        log.warning("WARNING: %.2f%% of azimuths were clamped into [-1, 1]; "
                    "check the trace calibration", 100 * clamp_frac)
    chash = config_hash(cfg)
    rows = [{"region": r.label, "basis": r.basis} | counts[r.label] for r in regions]
    write_csv(out / "tallies.csv", ("region", "basis", "n_sent", "H", "V", "D", "A"), rows, chash)
    summary = {"records": len(tr), "n_kept": n_kept,
               "keep_fraction": n_kept / len(tr) if len(tr) else 0.0,
               "clamped_fraction": clamp_frac}
    write_manifest(out, cfg, "analyze", {"trace": str(trace_path)} | summary)
    return summary | {"counts": counts}


def parse_grid(spec: str | None, cfg: RunConfig) -> list[float]:
    """``lo:hi:step`` (inclusive) or a comma/space separated list."""
    if spec is None:
        s = cfg.sweep
        return list(np.round(np.arange(s.loss_min, s.loss_max + s.loss_step / 2, s.loss_step), 12))
    spec = spec.strip()
    try:
        if ":" in spec:
            lo, hi, step = (float(x) for x in spec.split(":"))
            if step <= 0 or hi < lo:
                raise UsageError(f"bad grid {spec!r}: need step > 0 and hi >= lo")
            return list(np.round(np.arange(lo, hi + step / 2, step), 12))
        pts = [float(x) for x in spec.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"cannot parse grid {spec!r}") from None
    if not pts:
        raise UsageError("empty grid")
    return pts


def cmd_sweep(cfg: RunConfig, grid: list[float], out: Path, km: bool = False) -> list:
    if not grid:
        raise UsageError("empty grid")
    rows = sweep(grid, cfg, unit="km" if km else "dB")
    write_csv(out / "keyrate_curve.csv", SWEEP_COLUMNS, [vars(r) for r in rows], config_hash(cfg))
    write_manifest(out, cfg, "sweep", {"grid_unit": "km" if km else "dB", "grid": grid})
    return rows


def cmd_bounds(tallies_path: Path, cfg: RunConfig, out: Path,
               moments_path: Path | None = None) -> list[dict]:
    """Decoy bounds and rates from saved tallies.

    With ``moments_path`` (a moments.csv from ``simulate``) the empirical
    region moments are used; otherwise the quadrature moments.
    """
    results = tallies_from_rows(read_csv(tallies_path))
    if not results:
        raise DataError(f"{tallies_path}: no tally rows")
    setup = make_setup(cfg)
    moments = None
    if moments_path is not None:
        moments = moments_from_rows(read_csv(moments_path), setup)
        missing = set(results) - set(moments)
        if missing:
            raise DataError(f"{moments_path}: no moments for loss {sorted(missing)}")
    for loss, ts in results.items():
        missing = [r.label for r in setup.regions if r.label not in ts.tallies]
        if missing:
            raise DataError(f"{tallies_path}: loss {loss:g} dB lacks regions {missing}")
    rates = write_reports(out, cfg, setup, results, moments, with_tallies=False)
    write_manifest(out, cfg, "bounds", {"tallies": str(tallies_path),
                                        "moments": str(moments_path) if moments_path else "quadrature"})
    return rates


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI configuration file (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--samples", type=int, help="override run.n_samples")
    common.add_argument("--out", type=Path, help="output directory (overrides run.output)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fpqkd", description="Passive decoy-state BB84 simulator")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="Monte Carlo run at the configured losses")
    s.add_argument("--shards", type=int, help="worker processes (does not change results)")
    s.add_argument("--loss", type=str, help="comma separated loss points in dB")
    s.add_argument("--trace", type=Path, help="also export raw local readings (.csv or binary)")
    a = sub.add_parser("analyze", parents=[common], help="reshape and classify a recorded trace")
    a.add_argument("trace", type=Path)
    w = sub.add_parser("sweep", parents=[common], help="analytic key-rate curve")
    w.add_argument("--grid", help="lo:hi:step or a list of points")
    w.add_argument("--km", action="store_true", help="grid is in km (0.2 dB/km)")
    b = sub.add_parser("bounds", parents=[common], help="decoy bounds and rate from a tallies.csv")
    b.add_argument("tallies", type=Path)
    b.add_argument("--moments", type=Path, help="moments.csv from simulate (default: quadrature)")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else loads("")
    run = cfg.run
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    if args.samples is not None:
        run = replace(run, n_samples=args.samples)
    if args.out is not None:
        run = replace(run, output=str(args.out))
    if getattr(args, "shards", None) is not None:
        run = replace(run, shards=args.shards)
    cfg = replace(cfg, run=run)
    if getattr(args, "loss", None):
        try:
            losses = tuple(float(x) for x in args.loss.replace(",", " ").split())
        except ValueError:
            raise ConfigError(f"--loss: cannot parse {args.loss!r}") from None
        cfg = replace(cfg, channel=replace(cfg.channel, loss_db=losses))
    return cfg.validate()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.run.output)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            res = cmd_simulate(cfg, out, args.trace)
            for r in res["rates"]:
                print(f"{r['loss_db']:g} dB: R = {r['rate']:.6g}")
        elif args.command == "analyze":
            res = cmd_analyze(args.trace, cfg, out)
            print(f"records {res['records']}, kept {res['n_kept']} "
                  f"({100 * res['keep_fraction']:.3f}%)")
        elif args.command == "sweep":
            rows = cmd_sweep(cfg, parse_grid(args.grid, cfg), out, args.km)
            print(f"{len(rows)} points written to {out / 'keyrate_curve.csv'}")
        elif args.command == "bounds":
            for r in cmd_bounds(args.tallies, cfg, out, args.moments):
                print(f"{r['loss_db']:g} dB: R = {r['rate']:.6g}")
    except (ConfigError, UsageError) as exc:
        print(f"fpqkd: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"fpqkd: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"fpqkd: I/O error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
