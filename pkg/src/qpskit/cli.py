"""Batch command line: qpskit {simulate,detect,localize,accuracy-map,decompose,report} CONFIG.

Every stage reads its inputs from the run's output folder (or the paths
given on the command line) and writes its outputs there, so any stage can
be rerun on its own. Exit codes: 0 ok, 2 configuration error, 3 I/O or
input-format error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import io as qio
from .config import PipelineConfig, load_config
from .decompose import decompose
from .errors import ConfigInvalid, NoConvergence
from .events import assign_events_to_clusters, jump_statistic
from .pipeline import detect, localize_clusters, operating_sensors, pipeline_solver
from .qps import ISO_LEVELS, accuracy_map
from .telegraph import run_simulation

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4
MANIFEST = "run-manifest.json"

log = logging.getLogger("qpskit")


class JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(), "stage": getattr(record, "stage", None),
                           "message": record.getMessage()}, sort_keys=True)


def setup_logging(quiet=False, as_json=False):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter() if as_json else logging.Formatter("%(levelname)s %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.WARNING if quiet else logging.INFO)
    log.propagate = False


def _versions():
    return {"qpskit": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def record_stage(cfg: PipelineConfig, stage: str, paths) -> None:
    """Add a stage's output hashes to the run manifest, resetting it if the config changed."""
    path = cfg.output_dir / MANIFEST
    doc = None
    if path.exists():
        try:
            doc = qio.read_json(path, "run-manifest")
        except qio.DataFormatError:
            doc = None
    if doc is None or doc.get("config_sha256") != cfg.digest():
        doc = {"schema_version": qio.SCHEMA_VERSION, "kind": "run-manifest", "config_sha256": cfg.digest(),
               "rng_seed": cfg.rng_seed, "stages": {}}
    doc["versions"] = _versions()
    doc["stages"][stage] = {"outputs": {Path(p).name: qio.sha256_file(p) for p in paths}}
    qio.write_json(path, doc)


def _doc(kind, **body):
    return {"schema_version": qio.SCHEMA_VERSION, "kind": kind, **body}


INPUT_FILES = {"samples": "samples.csv", "clusters": "clusters.json", "events": "events.json",
               "defects": "defects.json", "truth": "truth.json"}


def _input(args, name, cfg):
    given = getattr(args, name, None)
    return Path(given) if given else cfg.output_dir / INPUT_FILES[name]


def _load_samples(path, cfg):
    values, _ = qio.read_samples(path, [s.id for s in cfg.sensors])
    return values


# ---------------------------------------------------------------------------
# stages


def cmd_simulate(cfg: PipelineConfig, args) -> list:
    run = run_simulation(cfg.sim)
    ids = [s.id for s in cfg.sensors]
    out = cfg.output_dir
    truth = _doc(
        "truth",
        sensors=[qio.sensor_to_dict(s) for s in cfg.sensors],
        effective_sensors=[qio.sensor_to_dict(s) for s in run.effective_sensors()],
        mean_environment_field_V_per_cm=run.mean_environment_field(),
        defects=[qio.defect_to_dict(d) for d in run.defects],
        traces=[qio.trace_to_dict(t) for t in run.traces],
        background_V_per_cm=run.background,
        sensor_charges_e=run.sensor_charges,
        response=run.response,
    )
    paths = [out / "samples.csv", out / "truth.json"]
    qio.write_samples(paths[0], run.values, ids)
    qio.write_json(paths[1], truth)
    log.info("simulated %d epochs, %d sensors, %d defects", run.n_epochs, len(ids), len(run.defects),
             extra={"stage": "simulate"})
    return paths


def cmd_detect(cfg: PipelineConfig, args) -> list:
    values = _load_samples(_input(args, "samples", cfg), cfg)
    det = detect(values, cfg.noise, cfg.detector)
    assignments, unassigned = assign_events_to_clusters(det.jumps, det.clusters, cfg.noise, cfg.detector)
    jumps = []
    for ev in det.jumps:
        d = qio.event_to_dict(ev)
        d["statistic"] = jump_statistic(ev, cfg.noise)
        jumps.append(d)
    events = _doc(
        "events",
        n_epochs=len(values),
        n_candidates=len(det.candidates),
        jumps=jumps,
        unassociated=[qio.event_to_dict(e) for e in det.unassociated],
        assignments=[qio.assignment_to_dict(a) for a in assignments],
        unassigned_epochs=[e.epoch for e in unassigned],
    )
    clusters = _doc(
        "clusters",
        noise={"sigma_f_MHz": cfg.noise.sigma_f},
        clusters=[qio.cluster_to_dict(c) for c in det.clusters],
        combinations=[qio.cluster_to_dict(c) for c in det.combinations],
    )
    paths = [cfg.output_dir / "events.json", cfg.output_dir / "clusters.json"]
    qio.write_json(paths[0], events)
    qio.write_json(paths[1], clusters)
    log.info("%d jumps, %d clusters, %d unassociated", len(det.jumps), len(det.clusters), len(det.unassociated),
             extra={"stage": "detect"})
    return paths


def _fit_sensors(cfg: PipelineConfig, args):
    if cfg.operating_point == "config":
        return list(cfg.sensors)
    if cfg.operating_point == "truth":
        truth = qio.read_json(_input(args, "truth", cfg), "truth")
        return [qio.sensor_from_dict(d) for d in truth["effective_sensors"]]
    return operating_sensors(cfg.sensors, values=_load_samples(_input(args, "samples", cfg), cfg))


def cmd_localize(cfg: PipelineConfig, args) -> list:
    doc = qio.read_json(_input(args, "clusters", cfg), "clusters")
    clusters = [qio.cluster_from_dict(d) for d in doc["clusters"]]
    sensors = _fit_sensors(cfg, args)
    located = localize_clusters(clusters, sensors, cfg.noise, pipeline_solver(cfg.solver), cfg.constants)
    results = []
    for lc in located:
        results.append({
            "cluster_id": lc.cluster.id,
            "cluster_size": lc.cluster.size,
            "accepted": lc.result is not None and lc.result.passes(cfg.solver.alpha),
            "error": lc.error,
            "result": None if lc.result is None else qio.result_to_dict(lc.result),
        })
    out = _doc("defects", operating_point=cfg.operating_point, alpha=cfg.solver.alpha,
               fit_sensors=[qio.sensor_to_dict(s) for s in sensors], results=results)
    path = cfg.output_dir / "defects.json"
    qio.write_json(path, out)
    n_ok = sum(r["accepted"] for r in results)
    log.info("localized %d clusters, %d accepted", len(results), n_ok, extra={"stage": "localize"})
    return [path]


def cmd_accuracy_map(cfg: PipelineConfig, args) -> list:
    amap = accuracy_map(cfg.sensors, cfg.noise.sigma_f, cfg.grid, -1.0, cfg.constants)
    regions = [amap.region(lv) for lv in ISO_LEVELS]
    nested = all(bool(np.all(regions[k + 1] <= regions[k])) and int(regions[k + 1].sum()) < int(regions[k].sum())
                 for k in range(len(regions) - 1))
    vols = _doc(
        "isoregion-volumes",
        grid={"origin_nm": cfg.grid.origin, "spacing_nm": cfg.grid.spacing, "dims": cfg.grid.dims},
        sigma_f_MHz=cfg.noise.sigma_f,
        regions=[{"fwhm_nm": lv, "voxels": int(r.sum()), "volume_nm3": amap.volume(lv)}
                 for lv, r in zip(ISO_LEVELS, regions)],
        strictly_nested=nested,
    )
    paths = [cfg.output_dir / "fwhm_grid.csv", cfg.output_dir / "isoregion_volumes.json"]
    qio.atomic_write_bytes(paths[0], qio.fwhm_grid_csv(amap).encode())
    qio.write_json(paths[1], vols)
    log.info("accuracy map on %s grid, isoregions %s", "x".join(map(str, cfg.grid.dims)),
             [r["voxels"] for r in vols["regions"]], extra={"stage": "accuracy-map"})
    return paths


def cmd_decompose(cfg: PipelineConfig, args) -> list:
    values = _load_samples(_input(args, "samples", cfg), cfg)
    clusters = [qio.cluster_from_dict(d) for d in qio.read_json(_input(args, "clusters", cfg), "clusters")["clusters"]]
    events = qio.read_json(_input(args, "events", cfg), "events")
    assignments = [qio.assignment_from_dict(d) for d in events["assignments"]]
    accepted = None
    defects_path = _input(args, "defects", cfg)
    if defects_path.exists():
        accepted = [r["cluster_id"] for r in qio.read_json(defects_path, "defects")["results"] if r["accepted"]]
    charges = None
    truth_path = _input(args, "truth", cfg)
    if truth_path.exists() and not args.no_truth:
        raw = qio.read_json(truth_path, "truth").get("sensor_charges_e")
        if raw is not None:
            charges = np.array(raw, dtype=float)
            if charges.shape != values.shape[:2]:
                raise qio.DataFormatError(f"{truth_path}: sensor charges do not match the samples")
    rep = decompose(values, cfg.sensors, clusters, assignments, charges, cfg.sim.response, True, cfg.constants)
    out = _doc(
        "decomposition",
        cluster_ids=[c.id for c in clusters],
        accepted_cluster_ids=accepted,
        sensor_mutual_fields_removed=charges is not None,
        traces=[qio.trace_to_dict(t) for t in rep.defect_traces],
        background_V_per_cm=rep.background,
        residual_std_MHz=rep.residual_std,
        std_before_MHz=rep.std_before,
        peak_to_peak_before_MHz=rep.peak_to_peak_before,
        peak_to_peak_after_MHz=rep.peak_to_peak_after,
        reduction=rep.reduction,
        flags={k: list(v) for k, v in sorted(rep.flags.items())},
    )
    paths = [cfg.output_dir / "decomposition.json", cfg.output_dir / "corrected.csv"]
    qio.write_json(paths[0], out)
    qio.write_samples(paths[1], rep.corrected, [s.id for s in cfg.sensors])
    with np.errstate(all="ignore"):
        red = float(np.nanmin(rep.reduction)) if rep.reduction.size else float("nan")
    log.info("corrected %d epochs with %d traces, min peak-to-peak reduction %.3g", len(values),
             len(rep.defect_traces), red, extra={"stage": "decompose"})
    return paths


def cmd_report(cfg: PipelineConfig, args) -> list:
    """Run every stage in order and summarize the run."""
    paths = []
    stages = [("simulate", cmd_simulate), ("detect", cmd_detect), ("localize", cmd_localize),
              ("decompose", cmd_decompose)]
    if not args.skip_map:
        stages.append(("accuracy-map", cmd_accuracy_map))
    for name, fn in stages:
        out = fn(cfg, args)
        record_stage(cfg, name, out)
        paths += out
    defects = qio.read_json(cfg.output_dir / "defects.json", "defects")["results"]
    dec = qio.read_json(cfg.output_dir / "decomposition.json", "decomposition")
    summary = _doc(
        "report",
        n_clusters=len(defects),
        accepted=[{"cluster_id": r["cluster_id"], "position_nm": r["result"]["position_nm"],
                   "fwhm_nm": r["result"]["fwhm_nm"], "p_value": r["result"]["p_value"]}
                  for r in defects if r["accepted"]],
        peak_to_peak_before_MHz=dec["peak_to_peak_before_MHz"],
        peak_to_peak_after_MHz=dec["peak_to_peak_after_MHz"],
        outputs=sorted(Path(p).name for p in paths),
    )
    path = cfg.output_dir / "report.json"
    qio.write_json(path, summary)
    if not args.quiet:
        print(f"{len(summary['accepted'])} of {len(defects)} clusters localized; outputs in {cfg.output_dir}")
    return [path]


COMMANDS = {
    "simulate": (cmd_simulate, "simulate spectra; writes samples.csv, truth.json"),
    "detect": (cmd_detect, "find and cluster jumps; writes events.json, clusters.json"),
    "localize": (cmd_localize, "fit a point charge per cluster; writes defects.json"),
    "accuracy-map": (cmd_accuracy_map, "localization FWHM on a grid; writes fwhm_grid.csv, isoregion_volumes.json"),
    "decompose": (cmd_decompose, "reconstruct traces and correct spectra; writes decomposition.json, corrected.csv"),
    "report": (cmd_report, "run every stage and write report.json"),
}

INPUTS = {
    "detect": ("samples",),
    "localize": ("clusters", "samples", "truth"),
    "decompose": ("samples", "clusters", "events", "defects", "truth"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qpskit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"qpskit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="JSON run configuration")
        p.add_argument("--out", help="output folder (overrides output_dir)")
        p.add_argument("--seed", type=int, help="override rng_seed")
        p.add_argument("--quiet", action="store_true", help="log warnings and errors only")
        p.add_argument("--json", action="store_true", help="log one JSON object per line")
        for inp in INPUTS.get(name, ()):
            p.add_argument(f"--{inp}", help=f"{inp} input (default: in the output folder)")
        if name in ("decompose", "report"):
            p.add_argument("--no-truth", action="store_true",
                           help="do not remove sensor-mutual fields recorded in truth.json")
        if name == "report":
            p.add_argument("--skip-map", action="store_true", help="skip the accuracy map")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.quiet, args.json)
    try:
        cfg = load_config(args.config, args.seed)
        if args.out:
            cfg.output_dir = Path(args.out)
        fn = COMMANDS[args.command][0]
        paths = fn(cfg, args)
        if args.command != "report":
            record_stage(cfg, args.command, paths)
    except ConfigInvalid as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (OSError, qio.DataFormatError, KeyError, TypeError) as exc:
        log.error("I/O failure: %s", exc)
        return EXIT_IO
    except (NoConvergence, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
