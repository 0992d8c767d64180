"""`superatom-lab` command line: scenario-driven pipeline stages and reproduction recipes."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from importlib import metadata
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import analysis, atomphys, chainmc, eitmodel, imaging, pairint
from .config import Scenario, load_scenario, sanity_warnings
from .errors import ConfigurationError, DependencyError, SuperatomError

STAGES = ("potentials", "scan-c6", "spectrum", "chain-sim", "image-sim", "detect", "analyze")
RENDER_STREAM = 1

CHAIN_CSV = "chain.csv"
FRAME_DIR = "frames"
FRAME_META = "frame_meta.json"
DETECTIONS_CSV = "detections.csv"


# ------------------------------------------------------------------ helpers


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("numpy", "scipy", "sympy", "pydantic"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            pass
    try:
        out["superatom_lab"] = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pass
    return out


def _pmap(fn, items: list, workers: int) -> list:
    """Ordered map, in-process for one worker."""
    if workers <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=chunk))


class Context:
    def __init__(self, scenario: Scenario, out_dir: Path, seed: int | None = None, workers: int = 1):
        self.sc = scenario
        self.out = Path(out_dir)
        self.seed = scenario.seed if seed is None else int(seed)
        self.workers = max(1, int(workers))
        self.out.mkdir(parents=True, exist_ok=True)

    @property
    def table(self):
        return atomphys.load_quantum_defects(self.sc.quantum_defects) if self.sc.quantum_defects \
            else atomphys.default_table()

    @property
    def env(self):
        return atomphys.FieldEnvironment(self.sc.field.B, self.sc.field.theta)

    def cloud(self) -> eitmodel.CloudGeometry:
        c = self.sc.cloud
        return eitmodel.CloudGeometry(c.sigma_r, c.n0, c.a_x, c.x_extent)

    def eit(self) -> eitmodel.EitParams:
        return eitmodel.EitParams(**self.sc.eit.model_dump())

    def chain_model(self) -> chainmc.ChainModel:
        ch = self.sc.chain
        return chainmc.ChainModel(a_x=self.sc.cloud.a_x, n_atoms=ch.n_atoms, r_block=ch.r_block,
                                  sigma_r=self.sc.cloud.sigma_r, seed=self.seed,
                                  blockade_rule=ch.blockade_rule, transverse_jitter=ch.transverse_jitter)

    def manifest(self, stage: str, outputs: list[Path], inputs: list[Path] = (), t0: float = 0.0,
                 **extra) -> Path:
        rel = lambda p: str(Path(p).relative_to(self.out))
        body = {
            "stage": stage,
            "scenario": self.sc.name,
            "scenario_sha256": self.sc.digest(),
            "seed": self.seed,
            "versions": _versions(),
            "wall_time_s": round(time.perf_counter() - t0, 3),
            "inputs": {rel(p): sha256_file(p) for p in inputs},
            "outputs": {rel(p): sha256_file(p) for p in outputs},
        }
        body.update(extra)
        return write_json(self.out / f"manifest_{stage}.json", body)

    def require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise DependencyError(f"missing {path.name}: run the '{stage}' stage first")
        return path


def _center_pair(sc: Scenario, nprime: int | None = None) -> atomphys.PairState:
    s = sc.pair.n_fixed
    a = atomphys.RydbergState(s.n, s.l, s.j, s.mj)
    return atomphys.PairState(a, atomphys.RydbergState(nprime or sc.pair.nprime, 0, 0.5, 0.5))


# ------------------------------------------------------------------ stages


def stage_potentials(ctx: Context) -> dict:
    t0 = time.perf_counter()
    p = ctx.sc.pair
    res = pairint.c6_for_pair(_center_pair(ctx.sc), ctx.env, ctx.table, windows=p.windows,
                              prune_mhz=p.prune_mhz, r_max=p.r_max, n_fit_points=p.n_fit_points)
    curve = res.curve
    out_csv = write_csv(ctx.out / "curves.csv", ["R_um", "energy_mhz", "center_overlap"],
                        zip(curve.R_grid, curve.energies, curve.overlaps))
    summary = {"c6_ghz_um6": res.c6, "r_vdw_um": res.fit.r_vdw, "r_min_fit_um": res.fit.r_min_fit,
               "rms_residual_mhz": res.fit.rms_residual, "basis_size": res.basis_size,
               "strongest_channel": str(res.channel), "coupling_ghz_um3": res.coupling,
               "forster_defect_mhz": res.defect, "fit_warning": res.fit.warning}
    out_json = write_json(ctx.out / "c6.json", summary)
    ctx.manifest("potentials", [out_csv, out_json], t0=t0)
    return summary


def stage_scan_c6(ctx: Context) -> dict:
    t0 = time.perf_counter()
    p = ctx.sc.pair
    s = p.n_fixed
    fixed = atomphys.RydbergState(s.n, s.l, s.j, s.mj)
    npr = list(range(p.nprime_range[0], p.nprime_range[1] + 1))
    scan_n = pairint.scan_c6_vs_nprime(fixed, npr, ctx.env, ctx.table, workers=ctx.workers,
                                       windows=p.windows, prune_mhz=p.scan_prune_mhz,
                                       r_max=p.r_max, n_fit_points=p.n_fit_points)
    f1 = write_csv(ctx.out / "scan_c6_nprime.csv", ["nprime", "c6_ghz_um6"], scan_n)
    scan_t = pairint.scan_c6_vs_theta(_center_pair(ctx.sc), p.theta_grid, ctx.env, ctx.table,
                                      workers=ctx.workers, windows=p.windows, prune_mhz=p.prune_mhz,
                                      r_max=p.r_max, n_fit_points=p.n_fit_points)
    f2 = write_csv(ctx.out / "scan_c6_theta.csv", ["theta_deg", "c6_ghz_um6"], scan_t)
    f3 = _write_forster_map(ctx)
    best = max(scan_n, key=lambda r: abs(r[1]))
    summary = {"nprime_peak": best[0], "c6_peak_ghz_um6": best[1],
               "theta_max_deg": max(scan_t, key=lambda r: abs(r[1]))[0]}
    ctx.manifest("scan-c6", [f1, f2, f3], t0=t0, summary=summary)
    return summary


def _write_forster_map(ctx: Context, B: float = 0.0) -> Path:
    """min |dE| over all channels at zero field (the map's reference condition)."""
    p = ctx.sc.pair
    ns = list(range(p.forster_n_range[0], p.forster_n_range[1] + 1))
    nps = list(range(p.forster_nprime_range[0], p.forster_nprime_range[1] + 1))
    grid = atomphys.forster_defect_map(ns, nps, atomphys.FieldEnvironment(B, ctx.sc.field.theta), ctx.table)
    rows = ([n] + list(row) for n, row in zip(ns, grid))
    return write_csv(ctx.out / "forster_map.csv", ["n"] + [f"nprime_{k}" for k in nps], rows)


def spectrum_cases(ctx: Context) -> dict:
    sp = ctx.sc.spectrum
    eit = ctx.eit()
    gamma = eitmodel.eit_linewidth(eit.omega_c_eff, eit.gamma_e)
    radii = {"r0": eitmodel.blockade_radius(sp.c6_r0, gamma), "r1": eitmodel.blockade_radius(sp.c6_r1, gamma)}
    a_x = ctx.sc.cloud.a_x
    return {"bare": None,
            "r1": eitmodel.chain_impurities(a_x, sp.impurity_spacing, radii["r1"]),
            "r0": eitmodel.chain_impurities(a_x, sp.impurity_spacing, radii["r0"])}, radii


def stage_spectrum(ctx: Context) -> dict:
    t0 = time.perf_counter()
    sp = ctx.sc.spectrum
    cloud, eit = ctx.cloud(), ctx.eit()
    grid = np.linspace(sp.delta_min, sp.delta_max, sp.n_points)
    cases, radii = spectrum_cases(ctx)
    spectra = {k: eitmodel.impurity_spectrum(cloud, eit, imp, grid, dx=sp.column_step)
               for k, imp in cases.items()}
    out_csv = write_csv(ctx.out / "spectrum.csv", ["delta_p_mhz", "T_bare", "T_r1", "T_r0"],
                        zip(grid, spectra["bare"], spectra["r1"], spectra["r0"]))
    peak = eitmodel.find_eit_peak(cloud, eit)
    peak_d = peak[0] if peak else float(grid[np.argmax(spectra["bare"])])
    at_peak = {k: float(eitmodel.impurity_spectrum(cloud, eit, imp, [peak_d], dx=sp.column_step)[0])
               for k, imp in cases.items()}
    meta = {"blockade_radius_um": radii, "eit_peak_detuning_mhz": peak_d,
            "peak_transmission": at_peak, "n_impurities": len(cases["r0"].positions),
            "optical_depth_on_axis": eitmodel.SIGMA0_UM2 * cloud.column_density(0.0)}
    out_json = write_json(ctx.out / "spectrum.json", meta)
    ctx.manifest("spectrum", [out_csv, out_json], t0=t0)
    return meta


def stage_chain_sim(ctx: Context) -> dict:
    t0 = time.perf_counter()
    m = ctx.chain_model()
    shots = chainmc.sample_shots(m, ctx.sc.chain.n_shots, workers=ctx.workers)
    n = m.n_atoms
    header = ["shot_id"] + [f"x{i + 1}" for i in range(n)] + [f"y{i + 1}" for i in range(n)]
    out = write_csv(ctx.out / CHAIN_CSV, header,
                    ([s.shot_id] + list(s.x) + list(s.y) for s in shots))
    acc = len(shots) / sum(s.attempts for s in shots)
    model = {"a_x": m.a_x, "n_atoms": m.n_atoms, "r_block": m.r_block, "sigma_r": m.sigma_r,
             "blockade_rule": m.blockade_rule, "transverse_jitter": m.transverse_jitter}
    ctx.manifest("chain-sim", [out], t0=t0, model=model, acceptance_rate=acc)
    return {"n_shots": len(shots), "acceptance_rate": acc}


def load_chain_csv(path: Path) -> list[chainmc.ChainSample]:
    rows = read_csv(path)
    out = []
    for r in rows:
        xs = [float(v) for k, v in r.items() if k.startswith("x")]
        ys = [float(v) for k, v in r.items() if k.startswith("y")]
        out.append(chainmc.ChainSample(np.column_stack([xs, ys]), int(r["shot_id"])))
    return out


def _render_job(args):
    sample, cloud, spot, noise, pitch, seed = args
    rng = chainmc.shot_rng(seed, sample.shot_id, RENDER_STREAM)
    return imaging.render_frame(sample, cloud, spot, noise, rng, pitch=pitch).to_bytes()


def stage_image_sim(ctx: Context) -> dict:
    t0 = time.perf_counter()
    src = ctx.require(ctx.out / CHAIN_CSV, "chain-sim")
    shots = load_chain_csv(src)
    cloud = ctx.cloud()
    spot = imaging.SpotModel(**ctx.sc.spot.model_dump())
    noise = imaging.NoiseModel(**ctx.sc.noise.model_dump())
    pitch = ctx.sc.detection.pixel_pitch
    fdir = ctx.out / FRAME_DIR
    fdir.mkdir(exist_ok=True)
    blobs = _pmap(_render_job, [(s, cloud, spot, noise, pitch, ctx.seed) for s in shots], ctx.workers)
    files = []
    for s, blob in zip(shots, blobs):
        f = fdir / f"shot_{s.shot_id:05d}.saf"
        f.write_bytes(blob)
        files.append(f)
    w, h, x0, y0 = imaging.frame_geometry(cloud, pitch)
    meta = write_json(ctx.out / FRAME_META, {"width": w, "height": h, "pixel_pitch": pitch, "x0": x0,
                                             "y0": y0, "n_shots": len(shots),
                                             "shot_ids": [s.shot_id for s in shots]})
    ctx.manifest("image-sim", files + [meta], [src], t0=t0)
    return {"n_frames": len(files), "width": w, "height": h}


def regions(sc: Scenario) -> dict:
    a, d = sc.cloud.a_x, sc.detection
    return {"in": (0.0, a, -d.y_band, d.y_band),
            "off": (a + d.off_region_gap, 2 * a + d.off_region_gap, -d.y_band, d.y_band)}


def _in_region(det, reg) -> bool:
    return reg[0] <= det.x < reg[1] and reg[2] <= det.y <= reg[3]


def _detect_job(args):
    path, x0, y0, det_spec, regs, shot_id = args
    frame = imaging.ImageFrame.load(path, x0, y0)
    dets = imaging.process_frame(frame, det_spec["filter_px"], det_spec["a_thld"],
                                 det_spec["min_separation_px"], fit=False)
    rows = []
    for d in dets:
        name = next((k for k, r in regs.items() if _in_region(d, r)), None)
        if name is None:
            continue
        if det_spec["fit"]:
            imaging.attach_fit(d, imaging.fit_spot_2d(frame, d))
        rows.append([shot_id, name, d.x, d.y, d.a_peak, d.sigma_x, d.sigma_y, d.above_threshold, d.fit_ok])
    return rows


DETECTION_HEADER = ["shot_id", "region", "x", "y", "a_peak", "sigma_x", "sigma_y", "above_threshold", "fit_ok"]


def stage_detect(ctx: Context, a_thld: float | None = None, filter_px: float | None = None) -> dict:
    t0 = time.perf_counter()
    meta_path = ctx.require(ctx.out / FRAME_META, "image-sim")
    meta = json.loads(meta_path.read_text())
    det_cfg = ctx.sc.detection.model_dump()
    if a_thld is not None:
        det_cfg["a_thld"] = a_thld
    if filter_px is not None:
        det_cfg["filter_px"] = filter_px
    regs = regions(ctx.sc)
    paths = [ctx.out / FRAME_DIR / f"shot_{i:05d}.saf" for i in meta["shot_ids"]]
    for p in paths:
        ctx.require(p, "image-sim")
    jobs = [(p, meta["x0"], meta["y0"], det_cfg, regs, i) for p, i in zip(paths, meta["shot_ids"])]
    rows = [r for block in _pmap(_detect_job, jobs, ctx.workers) for r in block]
    out = write_csv(ctx.out / DETECTIONS_CSV, DETECTION_HEADER, rows)
    ctx.manifest("detect", [out], [meta_path] + paths, t0=t0, detection=det_cfg)
    return {"n_detections": len(rows)}


def stage_analyze(ctx: Context) -> dict:
    t0 = time.perf_counter()
    src = ctx.require(ctx.out / DETECTIONS_CSV, "detect")
    meta_path = ctx.require(ctx.out / FRAME_META, "image-sim")
    meta = json.loads(meta_path.read_text())
    rows = read_csv(src)
    res = analyse_detections(rows, meta, ctx.sc)
    out = ctx.out
    files = [
        write_csv(out / "g2.csv", ["lag_um", "g2", "counts"],
                  zip(res["g2"].delta_x, res["g2"].g2, res["g2"].counts)),
        write_csv(out / "hist1d.csv", ["x_center_um", "count"],
                  zip(res["stats"].x_centers, res["stats"].hist_1d)),
        write_csv(out / "fft.csv", ["spatial_frequency_per_um", "magnitude"],
                  zip(res["fft"].spatial_frequency, res["fft"].magnitude)),
        write_csv(out / "amplitudes.csv", ["a_lo", "a_hi", "in_region", "off_region"],
                  zip(res["amp_edges"][:-1], res["amp_edges"][1:], res["amp_in"], res["amp_off"])),
        write_json(out / "summary.json", res["summary"]),
    ]
    ctx.manifest("analyze", files, [src, meta_path], t0=t0)
    return res["summary"]


def analyse_detections(rows: list[dict], meta: dict, sc: Scenario) -> dict:
    """Reduce detection rows to g2, histograms, FFT and threshold statistics."""
    ids = meta["shot_ids"]
    per_shot = {i: [] for i in ids}
    amp_in, amp_off, sig_spots, noise_spots = [], [], [], []
    for r in rows:
        a = float(r["a_peak"])
        ok = r["fit_ok"] in ("1", "True")
        if r["region"] == "in":
            amp_in.append(a)
            if r["above_threshold"] in ("1", "True"):
                per_shot[int(r["shot_id"])].append((float(r["x"]), float(r["y"])))
                if ok:
                    sig_spots.append((float(r["sigma_x"]), float(r["sigma_y"])))
        else:
            amp_off.append(a)
            if ok:
                noise_spots.append((float(r["sigma_x"]), float(r["sigma_y"])))
    shots = [np.array(per_shot[i]).reshape(-1, 2) for i in ids]
    an = sc.analysis
    pitch = meta["pixel_pitch"]
    if abs(an.bin_width - pitch) < 1e-9:
        edges = analysis.pixel_edges(meta["x0"], pitch, 0.0, sc.cloud.a_x)
    else:
        n = max(int(round(sc.cloud.a_x / an.bin_width)), 1)
        edges = np.linspace(0.0, sc.cloud.a_x, n + 1)
    yb = sc.detection.y_band
    stats = analysis.position_histograms(shots, an.bin_width, edges, (-yb, yb), an.n_target)
    g2 = analysis.pair_correlation(shots, edges, an.n_target) if len(shots) >= 2 else None
    fft = analysis.fft_spectrum(stats.hist_1d, stats.bin_width, an.fft_window)
    thr, fid = (imaging.equal_error_threshold(amp_in, amp_off) if amp_in and amp_off
                else (float("nan"), float("nan")))
    hi = max(amp_in + amp_off + [0.2])
    amp_in_h, amp_off_h, amp_edges = (analysis.amplitude_histograms(amp_in, amp_off, np.linspace(-0.05, hi, 51))
                                      if amp_in and amp_off else (np.zeros(50), np.zeros(50), np.linspace(-0.05, hi, 51)))
    sig = np.array(sig_spots).reshape(-1, 2)
    noi = np.array(noise_spots).reshape(-1, 2)
    summary = {
        "n_shots": len(ids),
        "n_detections_in_region": len(amp_in),
        "n_detections_off_region": len(amp_off),
        "n_above_threshold_in_region": int(sum(len(s) for s in shots)),
        "peak_frequency_per_um": fft.peak_frequency,
        "peak_period_um": 1.0 / fft.peak_frequency,
        "hist1d_peaks": analysis.count_peaks(stats.hist_1d),
        "threshold": thr,
        "fidelity": fid,
        "signal_sigma_median_um": np.median(sig, axis=0).tolist() if len(sig) else None,
        "noise_sigma_median_um": float(np.median(np.sqrt(noi[:, 0] * noi[:, 1]))) if len(noi) else None,
        "g2_max_below_10um": (float(np.nanmax(g2.g2[g2.delta_x < 10.0]))
                              if g2 is not None and np.any(g2.delta_x < 10.0) else None),
    }
    return {"g2": g2, "stats": stats, "fft": fft, "amp_in": amp_in_h, "amp_off": amp_off_h,
            "amp_edges": amp_edges, "summary": summary, "shots": shots}


STAGE_FUNCS = {
    "potentials": stage_potentials,
    "scan-c6": stage_scan_c6,
    "spectrum": stage_spectrum,
    "chain-sim": stage_chain_sim,
    "image-sim": stage_image_sim,
    "detect": stage_detect,
    "analyze": stage_analyze,
}


def run_pipeline(scenario: Scenario, stages: Sequence[str], out_dir, seed: int | None = None,
                 workers: int = 1) -> dict:
    """Run the requested stages in canonical order; returns per-stage summaries."""
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ConfigurationError(f"unknown stage(s): {', '.join(unknown)}")
    ctx = Context(scenario, Path(out_dir), seed, workers)
    return {s: STAGE_FUNCS[s](ctx) for s in STAGES if s in stages}


def validate_scenario(path) -> dict:
    sc = load_scenario(path)
    return {"scenario": sc.name, "valid": True, "warnings": sanity_warnings(sc)}


# ------------------------------------------------------------------ recipes


def repro(figure: str, scenario: Scenario | None, out_dir: Path, seed, workers) -> dict:
    out_dir = Path(out_dir) / figure
    if figure == "fig1c":
        sc = scenario or load_scenario("chain_126um")
        return run_pipeline(sc, ["scan-c6"], out_dir, seed, workers)
    if figure == "fig2":
        sc = scenario or load_scenario("spectroscopy_350um")
        return run_pipeline(sc, ["spectrum"], out_dir, seed, workers)
    if figure == "fig4":
        sc = scenario or load_scenario("chain_126um")
        return run_pipeline(sc, ["chain-sim", "image-sim", "detect", "analyze"], out_dir, seed, workers)
    raise ConfigurationError(f"unknown figure {figure!r}; choose fig1c, fig2 or fig4")


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", default=None, help="scenario file or shipped scenario name")
    common.add_argument("--out-dir", default="out", type=Path)
    common.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    common.add_argument("--workers", type=int, default=1, help="process pool size cap")

    ap = argparse.ArgumentParser(prog="superatom-lab", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("potentials", "scan-c6", "spectrum", "chain-sim", "image-sim", "analyze"):
        sub.add_parser(name, parents=[common])
    det = sub.add_parser("detect", parents=[common])
    det.add_argument("--filter-px", type=float, default=None)
    det.add_argument("--a-thld", type=float, default=None)
    sub.add_parser("validate", parents=[common])
    rp = sub.add_parser("repro", parents=[common])
    rp.add_argument("figure", choices=["fig1c", "fig2", "fig4"])
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            if args.scenario is None:
                raise ConfigurationError("validate needs --scenario")
            rep = validate_scenario(args.scenario)
            print(json.dumps(rep, indent=2))
            return 0
        sc = load_scenario(args.scenario) if args.scenario else None
        if args.command == "repro":
            res = repro(args.figure, sc, args.out_dir, args.seed, args.workers)
        else:
            if sc is None:
                raise ConfigurationError(f"{args.command} needs --scenario")
            ctx = Context(sc, args.out_dir, args.seed, args.workers)
            if args.command == "detect":
                res = stage_detect(ctx, args.a_thld, args.filter_px)
            else:
                res = STAGE_FUNCS[args.command](ctx)
        print(json.dumps(res, indent=2, default=_json_default, sort_keys=True))
        return 0
    except SuperatomError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigurationError.exit_code


if __name__ == "__main__":
    sys.exit(main())
