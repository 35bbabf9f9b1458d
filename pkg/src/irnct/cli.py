"""Config-driven experiment runner.

``irnct run cfg.yaml`` generates a phantom, simulates a full circular scan,
subsamples it to each requested angle count, reconstructs with every listed
algorithm and writes the artifact tree::

    <output>/
        config.resolved.yaml
        ground_truth.raw / .meta.json
        prior.raw / .meta.json          (when a prior is used)
        metrics.csv                     one row per (angles, algorithm)
        timing.csv                      wall-clock per (angles, algorithm)
        n020/<label>/
            recon.raw / .meta.json
            diff.raw / .meta.json       recon - ground truth
            recon.pgm, diff.pgm         central axial slice, 8-bit P5
            errors.csv                  relative error per inner iteration

``metrics.csv`` holds only deterministic columns so two runs with the same
seed are byte-identical. Wall-clock lives in ``timing.csv``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import recon
from .core import (ConeBeamGeometry, ConfigurationError, ProjectionSet, Volume,
                   circular_geometry, load_volume, save_volume)
from .metrics import evaluate
from .phantoms import NoiseModel, PhantomSpec, make_phantom, simulate_scan, subsample_angles
from .projector import BACKEND

log = logging.getLogger("irnct")

SCHEMA_VERSION = 1
METRICS_COLUMNS = ("angles", "algorithm", "iterations", "psnr", "ssim", "rel_error", "status")
TIMING_COLUMNS = ("angles", "algorithm", "wall_clock_s")
SWEEP_COLUMNS = ("angles", "algorithm", "alpha", "lambda", "iterations", "psnr", "ssim",
                 "rel_error", "status", "best")

ALGORITHMS = ("fdk", "cgls", "sirt", "irn-tv", "irn-piple", "irn-piccs", "asd-pocs-tv")
PRIOR_USERS = ("irn-piple", "irn-piccs")
_IRN_KEYS = {f.name for f in fields(recon.RegularizationParams)}
_ASD_KEYS = {f.name for f in fields(recon.AsdPocsConfig)}
_ALG_KEYS = {
    "fdk": {"filter"},
    "cgls": {"iters"},
    "sirt": {"iters", "relaxation"},
    "irn-tv": _IRN_KEYS,
    "irn-piple": _IRN_KEYS,
    "irn-piccs": _IRN_KEYS,
    "asd-pocs-tv": _ASD_KEYS,
}
_TOP_KEYS = {"schema_version", "seed", "output", "phantom", "geometry", "angle_counts",
             "noise", "prior", "algorithms", "start", "display"}


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class AlgorithmSpec:
    name: str
    label: str
    params: dict = field(default_factory=dict, hash=False)


@dataclass(frozen=True)
class PriorSource:
    """Where the prior image comes from.

    ``clean-scan``: CGLS with ``iters`` iterations on a noiseless full scan of
    the phantom without inserts. ``file``: a saved volume. ``none``: no prior.
    """

    source: str = "none"
    path: Optional[str] = None
    iters: int = 50


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomSpec
    geometry: dict
    angle_counts: tuple
    algorithms: tuple
    noise: NoiseModel = NoiseModel()
    prior: PriorSource = PriorSource()
    seed: int = 0
    output: str = "irnct-out"
    start: str = "zero"
    display: dict = field(default_factory=dict, hash=False)

    @classmethod
    def from_dict(cls, d: dict, base: Optional[Path] = None) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigurationError("config must be a mapping")
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported schema_version {d['schema_version']}")
        for key in ("phantom", "geometry", "algorithms"):
            if key not in d:
                raise ConfigurationError(f"config is missing '{key}'")
        try:
            phantom = PhantomSpec.from_dict(d["phantom"])
            noise = NoiseModel(**(d.get("noise") or {}))
            prior = PriorSource(**(d.get("prior") or {}))
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None
        if prior.source == "file" and prior.path and base is not None:
            prior = PriorSource("file", str((base / prior.path).resolve()), prior.iters)
        geometry = dict(d["geometry"])
        algs = []
        for entry in d["algorithms"] or []:
            entry = {"name": entry} if isinstance(entry, str) else dict(entry)
            name = entry.pop("name", None)
            label = entry.pop("label", name)
            algs.append(AlgorithmSpec(name, label, entry))
        n_full = int(geometry.get("n_angles", 0))
        counts = tuple(int(n) for n in d.get("angle_counts", [n_full]))
        cfg = cls(phantom, geometry, counts, tuple(algs), noise, prior, int(d.get("seed", 0)),
                  str(d.get("output", "irnct-out")), d.get("start", "zero"),
                  dict(d.get("display") or {}))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"malformed config: {exc}") from None
        return cls.from_dict(raw, path.parent)

    def validate(self):
        geom = self.full_geometry()
        if not self.algorithms:
            raise ConfigurationError("algorithm list is empty")
        labels = [a.label for a in self.algorithms]
        if len(set(labels)) != len(labels):
            raise ConfigurationError("algorithm labels must be unique")
        for a in self.algorithms:
            if a.name not in ALGORITHMS:
                raise ConfigurationError(f"unknown algorithm {a.name!r}; choose from {ALGORITHMS}")
            extra = set(a.params) - _ALG_KEYS[a.name]
            if extra:
                raise ConfigurationError(f"{a.label}: unknown parameters {sorted(extra)}")
            if a.name in PRIOR_USERS and self.prior.source == "none":
                raise ConfigurationError(f"{a.label} needs a prior source")
        if self.prior.source not in ("none", "clean-scan", "file"):
            raise ConfigurationError(f"unknown prior source {self.prior.source!r}")
        if self.prior.source == "file" and not self.prior.path:
            raise ConfigurationError("prior source 'file' needs a path")
        if self.start not in ("zero", "prior"):
            raise ConfigurationError("start must be 'zero' or 'prior'")
        if self.start == "prior" and self.prior.source == "none":
            raise ConfigurationError("start: prior needs a prior source")
        if not self.angle_counts:
            raise ConfigurationError("angle_counts is empty")
        for n in self.angle_counts:
            if not 1 <= n <= geom.n_angles:
                raise ConfigurationError(
                    f"angle count {n} outside 1..{geom.n_angles} of the full scan")

    def full_geometry(self) -> ConeBeamGeometry:
        g = self.geometry
        try:
            return circular_geometry(int(g["n_angles"]), float(g["dso"]), float(g["dsd"]),
                                     tuple(g["detector_shape"]), tuple(g["pixel_pitch"]),
                                     float(g.get("span", 2 * np.pi)), float(g.get("start", 0.0)),
                                     tuple(g.get("offset", (0.0, 0.0))))
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"bad geometry: {exc}") from None

    def replace(self, **changes) -> "ExperimentConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        cfg = ExperimentConfig(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        p = self.phantom
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "output": self.output,
            "phantom": {"kind": p.kind, "dims": list(p.dims), "spacing": list(p.spacing),
                        "intensity": p.intensity,
                        "inserts": [{"shape": i.shape, "center": list(i.center),
                                     "size": list(i.size) if np.ndim(i.size) else i.size,
                                     "intensity": i.intensity, "axis": i.axis}
                                    for i in p.inserts]},
            "geometry": self.geometry,
            "angle_counts": list(self.angle_counts),
            "noise": asdict(self.noise),
            "prior": asdict(self.prior),
            "start": self.start,
            "display": self.display,
            "algorithms": [{"name": a.name, "label": a.label, **a.params}
                           for a in self.algorithms],
        }


# ---------------------------------------------------------------------------
# pipeline

@dataclass
class Inputs:
    truth: Volume
    scans: dict
    prior: Optional[Volume]


_PRIOR_CACHE: dict = {}


def _clean_scan_prior(cfg: ExperimentConfig) -> Volume:
    # deterministic in its inputs, so reruns within one process can share it
    key = json.dumps([cfg.to_dict()["phantom"], cfg.geometry, cfg.prior.iters, BACKEND],
                     sort_keys=True)
    if key not in _PRIOR_CACHE:
        geom = cfg.full_geometry()
        base = make_phantom(cfg.phantom.without_inserts())
        clean = simulate_scan(base, geom)
        rep = recon.run_cgls(clean, geom, cfg.prior.iters, dims=base.dims, spacing=base.spacing)
        _PRIOR_CACHE[key] = rep.volume
    return _PRIOR_CACHE[key]


def prepare(cfg: ExperimentConfig) -> Inputs:
    truth = make_phantom(cfg.phantom)
    full = simulate_scan(truth, cfg.full_geometry(), cfg.noise, seed=cfg.seed)
    scans = {n: subsample_angles(full, n) for n in cfg.angle_counts}
    prior = None
    if cfg.prior.source == "clean-scan":
        prior = _clean_scan_prior(cfg)
    elif cfg.prior.source == "file":
        prior = load_volume(cfg.prior.path)
        if prior.dims != truth.dims:
            raise ConfigurationError(f"prior dims {prior.dims} differ from phantom {truth.dims}")
    return Inputs(truth, scans, prior)


@dataclass
class AlgorithmResult:
    volume: Optional[Volume]
    iterations: int = 0
    seconds: float = 0.0
    errors: list = field(default_factory=list)
    cycle_starts: list = field(default_factory=list)
    status: str = "ok"


def _irn_params(params: dict, scan: ProjectionSet, truth: Volume) -> recon.RegularizationParams:
    p = dict(params)
    if p.get("alpha", "auto") == "auto":
        p["alpha"] = recon.default_alpha(scan, scan.geometry, truth.dims, truth.spacing)
    p.setdefault("lam", p["alpha"])
    return recon.RegularizationParams(**{k: (float(v) if k in ("alpha", "lam") else v)
                                         for k, v in p.items()})


def reconstruct(alg: AlgorithmSpec, scan: ProjectionSet, inputs: Inputs,
                start: str = "zero") -> AlgorithmResult:
    """Run one algorithm. Wall-clock covers the solver call only."""
    truth, geom = inputs.truth, scan.geometry
    x0 = inputs.prior if start == "prior" and alg.name != "fdk" else None
    kw = dict(dims=truth.dims, spacing=truth.spacing, truth=truth)
    p = alg.params
    if alg.name == "fdk":
        t = time.perf_counter()
        vol = recon.fdk(scan, geom, truth.dims, truth.spacing, p.get("filter", "ram-lak"))
        return AlgorithmResult(vol, 0, time.perf_counter() - t)
    if alg.name in ("cgls", "sirt"):
        fn = recon.run_cgls if alg.name == "cgls" else recon.run_sirt
        extra = {"relaxation": float(p["relaxation"])} if "relaxation" in p else {}
        t = time.perf_counter()
        rep = fn(scan, geom, int(p.get("iters", 100)), x0, **kw, **extra)
    elif alg.name == "asd-pocs-tv":
        config = recon.AsdPocsConfig(**p)
        t = time.perf_counter()
        rep = recon.asd_pocs_tv(scan, geom, config, x0, **kw)
    else:
        params = _irn_params(p, scan, truth)
        t = time.perf_counter()
        if alg.name == "irn-tv":
            rep = recon.irn_tv(scan, geom, params, x0, **kw)
        else:
            fn = recon.irn_piple if alg.name == "irn-piple" else recon.irn_piccs
            rep = fn(scan, geom, params, inputs.prior, x0, **kw)
    seconds = time.perf_counter() - t
    return AlgorithmResult(rep.volume, rep.iterations, seconds, rep.errors, rep.cycle_starts)


def _safe_reconstruct(alg, scan, inputs, start) -> AlgorithmResult:
    try:
        return reconstruct(alg, scan, inputs, start)
    except Exception as exc:  # recorded, the remaining algorithms still run
        log.exception("%s failed", alg.label)
        msg = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        return AlgorithmResult(None, status=f"failed: {msg}")


# ---------------------------------------------------------------------------
# writers

def _fmt(v) -> str:
    return f"{v:.6f}"


def _write_csv(path: Path, columns, rows, comment: str):
    buf = io.StringIO()
    buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def read_csv(path) -> list[dict]:
    """Parse a CSV written by this module, skipping the version comment."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_pgm(path, image, lo: float, hi: float):
    """8-bit binary PGM with ``lo`` mapped to 0 and ``hi`` to 255."""
    img = np.asarray(image, dtype=np.float64)
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pix = np.clip(np.rint((img - lo) * scale), 0, 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, w, h, maxval, rest = raw.split(maxsplit=4)
    if magic != b"P5" or int(maxval) != 255:
        raise ValueError("not an 8-bit P5 file")
    return np.frombuffer(rest, dtype=np.uint8).reshape(int(h), int(w))


def _display_window(cfg: ExperimentConfig, truth: Volume):
    lo, hi = cfg.display.get("window", (float(truth.data.min()), float(truth.data.max())))
    diff_max = cfg.display.get("diff_max", 0.5 * (hi - lo))
    return float(lo), float(hi), float(diff_max)


def _write_algorithm(folder: Path, res: AlgorithmResult, truth: Volume, window):
    folder.mkdir(parents=True, exist_ok=True)
    lo, hi, diff_max = window
    save_volume(res.volume, folder / "recon.raw")
    diff = res.volume.with_data(res.volume.data - truth.data)
    save_volume(diff, folder / "diff.raw")
    mid = truth.dims[2] // 2
    write_pgm(folder / "recon.pgm", res.volume.as_array()[mid], lo, hi)
    write_pgm(folder / "diff.pgm", np.abs(diff.as_array()[mid]), 0.0, diff_max)
    starts = set(res.cycle_starts)
    cycle, rows = -1, []
    for i, e in enumerate(res.errors):
        cycle += i in starts
        rows.append((i + 1, max(cycle, 0), f"{e:.8e}"))
    _write_csv(folder / "errors.csv", ("iteration", "cycle", "rel_error"), rows,
               f"irnct error-history v{SCHEMA_VERSION}")


def _metric_row(n, label, res: AlgorithmResult, truth: Volume):
    if res.volume is None:
        return [n, label, res.iterations, "", "", "", res.status]
    m = evaluate(res.volume, truth)
    return [n, label, res.iterations, _fmt(m.psnr), _fmt(m.ssim), _fmt(m.rel_error), res.status]


@dataclass
class ExperimentOutcome:
    output: Path
    metrics: list
    timings: list

    @property
    def all_failed(self) -> bool:
        return all(r[-1] != "ok" for r in self.metrics)


def run_experiment(cfg: ExperimentConfig, inputs: Optional[Inputs] = None) -> ExperimentOutcome:
    """Generate, scan, subsample, reconstruct and score; write the artifact tree."""
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    inputs = inputs or prepare(cfg)
    truth = inputs.truth
    (out / "config.resolved.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    save_volume(truth, out / "ground_truth.raw")
    if inputs.prior is not None:
        save_volume(inputs.prior, out / "prior.raw")
    window = _display_window(cfg, truth)

    metrics, timings = [], []
    for n in cfg.angle_counts:
        scan = inputs.scans[n]
        for alg in cfg.algorithms:
            log.info("n=%d %s", n, alg.label)
            res = _safe_reconstruct(alg, scan, inputs, cfg.start)
            if res.volume is not None:
                _write_algorithm(out / f"n{n:03d}" / alg.label, res, truth, window)
            metrics.append(_metric_row(n, alg.label, res, truth))
            timings.append([n, alg.label, f"{res.seconds:.3f}"])
    _write_csv(out / "metrics.csv", METRICS_COLUMNS, metrics, f"irnct metrics v{SCHEMA_VERSION}")
    _write_csv(out / "timing.csv", TIMING_COLUMNS, timings, f"irnct timing v{SCHEMA_VERSION}")
    return ExperimentOutcome(out, metrics, timings)


def sweep_params(cfg: ExperimentConfig, alphas, lambdas=None, algorithm: Optional[str] = None,
                 inputs: Optional[Inputs] = None) -> Path:
    """Grid over ``alpha`` (outer) and ``lambda`` (inner); writes ``sweep.csv``.

    ``algorithm`` is a label from the config and defaults to the first IRN
    entry. ``irn-tv`` has no lambda, so only the alpha axis is swept.
    """
    alphas = [float(a) for a in alphas]
    candidates = [a for a in cfg.algorithms if a.name.startswith("irn-")]
    if algorithm is not None:
        candidates = [a for a in cfg.algorithms if a.label == algorithm]
        if candidates and not candidates[0].name.startswith("irn-"):
            raise ConfigurationError(f"{algorithm} has no alpha/lambda to sweep")
    if not candidates:
        raise ConfigurationError("no algorithm with alpha/lambda parameters in config")
    alg = candidates[0]
    if alg.name == "irn-tv":
        lambdas = [0.0]
    elif lambdas is None:
        lambdas = [alg.params["lam"]] if "lam" in alg.params else [None]
    if not alphas or not lambdas:
        raise ConfigurationError("parameter grid is empty")

    inputs = inputs or prepare(cfg)
    rows = []
    for n in cfg.angle_counts:
        block = []
        for a in alphas:
            for lam in lambdas:
                params = dict(alg.params, alpha=a)
                params["lam"] = a if lam is None else float(lam)
                res = _safe_reconstruct(AlgorithmSpec(alg.name, alg.label, params),
                                        inputs.scans[n], inputs, cfg.start)
                row = _metric_row(n, alg.label, res, inputs.truth)
                block.append(row[:2] + [_fmt(a), _fmt(params["lam"])] + row[2:] + [0])
        scored = [i for i, r in enumerate(block) if r[8] == "ok"]
        if scored:
            best = max(scored, key=lambda i: float(block[i][5]))
            block[best][-1] = 1
        rows.extend(block)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    _write_csv(path, SWEEP_COLUMNS, rows, f"irnct sweep v{SCHEMA_VERSION}")
    return path


# ---------------------------------------------------------------------------
# entry point

def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="irnct", description="Cone-beam CT reconstruction experiments.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config")
    run.add_argument("--output", help="override the output directory")
    run.add_argument("--seed", type=int, help="override the noise seed")

    sw = sub.add_parser("sweep", help="grid search over alpha and lambda")
    sw.add_argument("config")
    sw.add_argument("--alpha", type=float, nargs="+", required=True)
    sw.add_argument("--lambda", dest="lam", type=float, nargs="+")
    sw.add_argument("--algorithm", help="label of the algorithm to sweep")
    sw.add_argument("--output")
    sw.add_argument("--seed", type=int)

    me = sub.add_parser("metrics", help="score a volume against ground truth")
    me.add_argument("volume")
    me.add_argument("ground_truth")
    me.add_argument("--data-range", type=float, help="PSNR/SSIM range (default: truth max-min)")
    me.add_argument("--window", type=int, default=7)
    return ap


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    changes = {}
    if args.output:
        changes["output"] = args.output
    if args.seed is not None:
        changes["seed"] = args.seed
    return cfg.replace(**changes) if changes else cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            outcome = run_experiment(_load(args))
            for row in outcome.metrics:
                print(",".join(str(c) for c in row))
            if outcome.all_failed:
                print("error: every algorithm failed", file=sys.stderr)
                return 3
            return 0
        if args.command == "sweep":
            path = sweep_params(_load(args), args.alpha, args.lam, args.algorithm)
            print(path)
            return 0
        vol, gt = load_volume(args.volume), load_volume(args.ground_truth)
        m = evaluate(vol, gt, args.data_range, args.window)
        print(f"psnr={m.psnr:.6f} ssim={m.ssim:.6f} rel_error={m.rel_error:.6f}")
        return 0
    except (ConfigurationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
