"""Command-line interface: composable stages and the one-shot pipeline.

Exit codes: 0 success, 2 input error, 3 numeric failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import ambi, erdur, irsynth, matopt, scene as scene_mod, sweep_analysis, tracer
from .dsp_io import DEFAULT_RATE, Signal, WavError, read_signal, write_signal

log = logging.getLogger("sceneaudio")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

DEFAULT_RAYS = 20000
DEFAULT_SYNTH_RAYS = 4000
DEFAULT_FIT_TIME = 0.5


class ErNotFoundError(RuntimeError):
    """No isotropic window within the horizon."""


class StageError(Exception):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.code = exit_code_for(cause)


def exit_code_for(exc):
    """Map an exception to the CLI exit code."""
    if isinstance(exc, (FileNotFoundError, IsADirectoryError)):
        return EXIT_INPUT
    if isinstance(exc, (WavError, OSError)):
        return EXIT_IO
    numeric = (matopt.OptimizationError, ErNotFoundError, sweep_analysis.DegenerateDecayError,
               irsynth.SynthesisError, FloatingPointError)
    if isinstance(exc, numeric):
        return EXIT_NUMERIC
    return EXIT_INPUT


# ----------------------------------------------------------------------------
# shared helpers

def parse_point(text):
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,z in meters, got {text!r}") from None
    if len(values) != 3 or not np.all(np.isfinite(values)):
        raise argparse.ArgumentTypeError(f"expected three finite coordinates, got {text!r}")
    return np.array(values)


def write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON ({exc})") from exc


def load_measured_ir(path, rate=DEFAULT_RATE):
    return sweep_analysis.ImpulseResponse.from_signal(read_signal(path, rate))


def materials_doc(scene, report=None, scale=1.0):
    doc = {"materials": [{"name": m.name, "reflectance": m.reflectance.tolist()} for m in scene.materials],
           "scale": float(scale)}
    if report is not None:
        doc["optimization"] = report.to_dict()
    return doc


def apply_materials(scene, doc):
    """Scene with reflectances (and scale) from a materials document."""
    mats = doc.get("materials")
    if not isinstance(mats, list) or len(mats) != scene.n_materials:
        raise scene_mod.SceneError(f"materials file lists {len(mats) if isinstance(mats, list) else 0} "
                                   f"materials, scene has {scene.n_materials}")
    table = np.array([m["reflectance"] for m in mats], dtype=np.float64)
    if table.shape != (scene.n_materials, scene.n_bands):
        raise scene_mod.SceneError("materials file has the wrong number of bands")
    scale = float(doc.get("scale", 1.0))
    fitted = scene.with_reflectances(table)
    return (fitted.scaled(scale) if scale != 1.0 else fitted), scale


def decay_for(paths, decay, n_materials, t0, init=matopt.DEFAULT_INIT, method="lbfgsb", workers=None):
    problem = matopt.OptProblem.from_decay(paths, decay, n_materials, t0)
    return matopt.optimize_materials(problem, init=init, method=method, workers=workers)


def room_modulation(scene, source, listener, measured, rays, seed, radius, max_time, workers=1, bank=None):
    """Per-room magnitude ratio between the measured and simulated IR."""
    paths = tracer.trace_paths(scene, source, listener, rays, max_time, seed=seed,
                               receiver_radius=radius, workers=workers)
    if paths.direct_index() is None:
        raise scene_mod.OccludedError("measurement pair has no direct path")
    sim = matopt.simulate_ir_from_paths(paths, measured.rate, bank)
    n = max(sim.samples.size, measured.samples.size)
    sim = Signal(np.pad(sim.samples, (0, n - sim.samples.size)), sim.rate)
    meas = Signal(np.pad(measured.samples, (0, n - measured.samples.size)), measured.rate)
    return irsynth.compute_modulation(meas, sim, measured.first_arrival, match_level=True)


def position_synthesizer(scene, source, measured, t_er, curve, bank, rays, seed, radius, window, workers=1):
    """Callable building the DirectionalIr at a listener position."""
    meas = measured.to_signal() if hasattr(measured, "to_signal") else measured

    def synthesize(index, position):
        paths = tracer.trace_paths(scene, source, position, rays, t_er, seed=seed,
                                   receiver_radius=radius, workers=workers)
        return irsynth.build_directional_ir(paths, meas, t_er, curve, bank, window)

    return synthesize


def er_duration(paths, window, threshold, horizon=None):
    res = erdur.find_er_duration(paths, window=window, threshold=threshold, horizon=horizon)
    if res is None:
        raise ErNotFoundError("no isotropic window found before the horizon; "
                              "trace longer or raise the threshold")
    return res


def er_doc(res, window, threshold):
    return {"t_er": res.t_er, "pass_window_index": res.pass_window_index,
            "window_ms": window * 1e3, "threshold": threshold,
            "window_starts": res.window_starts.tolist(),
            "distances": [[float(a), float(b)] for a, b in res.distances]}


def read_t_er(path):
    doc = read_json(path)
    try:
        return float(doc["t_er"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path}: missing t_er") from exc


# ----------------------------------------------------------------------------
# pipeline

@dataclass
class PipelineConfig:
    """Inputs and knobs of the end-to-end pipeline."""

    scene: str
    ir: str
    dry: str
    source: np.ndarray
    listener: np.ndarray
    outdir: str
    trajectory: str | None = None
    rays: int = DEFAULT_RAYS
    synth_rays: int = DEFAULT_SYNTH_RAYS
    seed: int = 0
    order: int = 1
    fit_time: float = DEFAULT_FIT_TIME
    receiver_radius: float = tracer.DEFAULT_RECEIVER_RADIUS
    window: float = erdur.DEFAULT_WINDOW
    threshold: float = erdur.DEFAULT_THRESHOLD
    init: float = matopt.DEFAULT_INIT
    threads: int = 1
    normalization: str = "w-sqrt-half"
    floor_db: float = sweep_analysis.NOISE_FLOOR_DB

    def check_inputs(self):
        for name in ("ir", "scene", "dry") + (("trajectory",) if self.trajectory else ()):
            if not os.path.isfile(getattr(self, name)):
                raise FileNotFoundError(f"{name} file not found: {getattr(self, name)}")


@dataclass
class PipelineResult:
    exit_code: int
    report: dict
    artifacts: dict = field(default_factory=dict)


STAGES = ("ir-analysis", "calibrate", "trace", "fit-materials", "er-duration", "modulation", "synth")


def run_pipeline(config):
    """Trace, fit materials, find T_ER, compute M and render the ambisonic output.

    Writes ``out.wav`` (+ sidecar), ``materials.json``, ``er.json``,
    ``decay.json`` and ``report.json`` into ``config.outdir``. A failing stage
    stops the run; ``report.json`` still records completed stages and flags
    the artifacts written so far as partial.
    """
    os.makedirs(config.outdir, exist_ok=True)
    out = {k: os.path.join(config.outdir, v) for k, v in (
        ("wav", "out.wav"), ("materials", "materials.json"), ("er", "er.json"),
        ("decay", "decay.json"), ("report", "report.json"))}
    report = {"stages": {s: {"status": "pending"} for s in STAGES}, "seed": config.seed,
              "rays": config.rays, "order": config.order}
    written = {}
    state = {}
    workers = max(1, config.threads)

    def stage(name, fn):
        t = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            report["stages"][name] = {"status": "failed", "seconds": time.perf_counter() - t}
            raise StageError(name, exc) from exc
        report["stages"][name] = {"status": "ok", "seconds": time.perf_counter() - t}
        return result

    def ir_analysis():
        config.check_inputs()
        scene = scene_mod.load_scene(config.scene)
        measured = load_measured_ir(config.ir)
        decay = sweep_analysis.fit_band_decays(measured, centers=scene.band_centers, floor_db=config.floor_db)
        sweep_analysis.write_decay(out["decay"], decay)
        written["decay"] = out["decay"]
        state.update(scene=scene, measured=measured, decay=decay)
        report["first_arrival"] = measured.first_arrival
        report["decay_gamma"] = decay.rates.tolist()

    def calibrate():
        scaled, s = scene_mod.calibrate_scale(state["scene"], config.source, config.listener,
                                              state["measured"].first_arrival)
        state.update(scene=scaled, scale=s, source=config.source * s, listener=config.listener * s)
        report["scale"] = s

    def trace():
        horizon = min(config.fit_time, state["measured"].duration)
        paths = tracer.trace_paths(state["scene"], state["source"], state["listener"], config.rays, horizon,
                                   seed=config.seed, receiver_radius=config.receiver_radius, workers=workers)
        state.update(paths=paths, horizon=horizon)
        report["n_paths"] = len(paths)

    def fit():
        rep = decay_for(state["paths"], state["decay"], state["scene"].n_materials,
                        state["measured"].first_arrival, init=config.init, workers=workers)
        fitted = state["scene"].with_reflectances(rep.p_opt)
        state.update(scene=fitted, paths=state["paths"].with_reflectances(rep.p_opt))
        unscaled = fitted.scaled(1.0 / state["scale"])
        write_json(out["materials"], materials_doc(unscaled, rep, state["scale"]))
        written["materials"] = out["materials"]
        report["J_initial"] = rep.j_initial.tolist()
        report["J_final"] = rep.j_final.tolist()
        report["reflectance"] = rep.p_opt.tolist()

    def er():
        res = er_duration(state["paths"], config.window, config.threshold, state["horizon"])
        write_json(out["er"], er_doc(res, config.window, config.threshold))
        written["er"] = out["er"]
        state["t_er"] = res.t_er
        report["t_er"] = res.t_er

    def modulation():
        bank = irsynth.CrossoverBank.for_bands(state["scene"].band_centers, DEFAULT_RATE)
        curve = room_modulation(state["scene"], state["source"], state["listener"], state["measured"],
                                config.rays, config.seed, config.receiver_radius,
                                state["t_er"] + 2 * irsynth.MODULATION_WINDOW / DEFAULT_RATE, workers, bank)
        state.update(curve=curve, bank=bank)
        report["modulation_ratio"] = curve.ratio.tolist()

    def synth():
        dry = read_signal(config.dry)
        if config.trajectory:
            traj = scene_mod.load_trajectory(config.trajectory)
            traj = scene_mod.Trajectory(traj.times, traj.positions * state["scale"], traj.orientations)
        else:
            traj = scene_mod.Trajectory([0.0], state["listener"][None], [[1.0, 0.0, 0.0, 0.0]])
        synthesize = position_synthesizer(state["scene"], state["source"], state["measured"], state["t_er"],
                                          state["curve"], state["bank"], config.synth_rays, config.seed,
                                          config.receiver_radius, config.window, workers)
        result = ambi.render_trajectory(dry, traj, synthesize, order=config.order,
                                        spacing=ambi.TRAJECTORY_SPACING * state["scale"],
                                        normalization=config.normalization)
        ambi.write_ambisonic(out["wav"], result.buffer, trajectory=traj)
        written["wav"] = out["wav"]
        report["positions"] = len(result.positions)
        report["channels"] = result.buffer.channels.shape[0]

    code = EXIT_OK
    try:
        for name, fn in zip(STAGES, (ir_analysis, calibrate, trace, fit, er, modulation, synth)):
            stage(name, fn)
    except StageError as exc:
        code = exc.code
        report["error"] = {"stage": exc.stage, "message": str(exc.cause), "exit_code": code}
        report["partial_artifacts"] = sorted(written.values())
        log.error("%s", exc)
    report["status"] = "ok" if code == EXIT_OK else "failed"
    report["total_seconds"] = sum(s.get("seconds", 0.0) for s in report["stages"].values())
    write_json(out["report"], report)
    written["report"] = out["report"]
    return PipelineResult(code, report, written)


# ----------------------------------------------------------------------------
# subcommands

def cmd_sweep_gen(args):
    sweep = sweep_analysis.gen_sweep(args.f1, args.f2, args.duration, args.rate)
    write_signal(args.output, sweep, args.format)


def cmd_sweep_deconvolve(args):
    rec = read_signal(args.recording, args.rate)
    swp = read_signal(args.sweep, args.rate)
    ir = sweep_analysis.deconvolve_ir(rec, swp)
    write_signal(args.output, ir.to_signal())
    print(json.dumps({"first_arrival": ir.first_arrival, "samples": int(ir.samples.size)}))


def cmd_analyze_decay(args):
    ir = load_measured_ir(args.ir)
    decay = sweep_analysis.fit_band_decays(ir, floor_db=args.floor_db, smoothing=args.smoothing_ms * 1e-3)
    sweep_analysis.write_decay(args.output, decay)


def cmd_trace(args):
    scene = scene_mod.load_scene(args.scene)
    if args.scale != 1.0:
        scene = scene.scaled(args.scale)
    paths = tracer.trace_paths(scene, args.source * args.scale, args.listener * args.scale, args.rays,
                               args.max_time, seed=args.seed, receiver_radius=args.receiver_radius,
                               workers=args.threads)
    if len(paths) == 0:
        log.warning("no paths reached the listener")
    tracer.write_pathset(args.output, paths)
    print(json.dumps({"paths": len(paths)}))


def cmd_fit_materials(args):
    scene = scene_mod.load_scene(args.scene)
    paths = tracer.read_pathset(args.paths)
    decay = sweep_analysis.load_decay(args.decay)
    t0 = args.t0 if args.t0 is not None else decay.first_arrival
    if t0 is None:
        raise ValueError("decay file has no first_arrival; pass --t0")
    rep = decay_for(paths, decay, scene.n_materials, t0, init=args.init, method=args.method,
                    workers=args.threads)
    write_json(args.output, materials_doc(scene.with_reflectances(rep.p_opt), rep, args.scale))


def cmd_er_duration(args):
    paths = tracer.read_pathset(args.paths)
    window = args.window_ms * 1e-3
    res = er_duration(paths, window, args.threshold, args.horizon)
    write_json(args.output, er_doc(res, window, args.threshold))


def _synthesis_inputs(args):
    scene, scale = apply_materials(scene_mod.load_scene(args.scene), read_json(args.materials))
    measured = load_measured_ir(args.ir)
    return scene, scale, measured


def _t_er_or_trace(args, scene, source, listener):
    if args.t_er:
        return read_t_er(args.t_er)
    paths = tracer.trace_paths(scene, source, listener, args.rays, DEFAULT_FIT_TIME, seed=args.seed,
                               receiver_radius=args.receiver_radius, workers=args.threads)
    return er_duration(paths, erdur.DEFAULT_WINDOW, erdur.DEFAULT_THRESHOLD).t_er


def cmd_synth_ir(args):
    scene, scale, measured = _synthesis_inputs(args)
    source, listener = args.source * scale, args.listener * scale
    ref = (args.measure_listener if args.measure_listener is not None else args.listener) * scale
    t_er = _t_er_or_trace(args, scene, source, ref)
    bank = irsynth.CrossoverBank.for_bands(scene.band_centers, measured.rate)
    curve = room_modulation(scene, source, ref, measured, args.rays, args.seed, args.receiver_radius,
                            t_er + 2 * irsynth.MODULATION_WINDOW / measured.rate, args.threads, bank)
    synthesize = position_synthesizer(scene, source, measured, t_er, curve, bank, args.rays, args.seed,
                                      args.receiver_radius, erdur.DEFAULT_WINDOW, args.threads)
    irsynth.write_directional_ir(args.output, synthesize(0, listener))


def cmd_synth(args):
    scene, scale, measured = _synthesis_inputs(args)
    traj = scene_mod.load_trajectory(args.trajectory)
    traj = scene_mod.Trajectory(traj.times, traj.positions * scale, traj.orientations)
    source = args.source * scale
    ref = args.measure_listener * scale if args.measure_listener is not None else traj.positions[0]
    t_er = _t_er_or_trace(args, scene, source, ref)
    dry = read_signal(args.dry, measured.rate)
    bank = irsynth.CrossoverBank.for_bands(scene.band_centers, measured.rate)
    curve = room_modulation(scene, source, ref, measured, args.rays, args.seed, args.receiver_radius,
                            t_er + 2 * irsynth.MODULATION_WINDOW / measured.rate, args.threads, bank)
    synthesize = position_synthesizer(scene, source, measured, t_er, curve, bank, args.rays, args.seed,
                                      args.receiver_radius, erdur.DEFAULT_WINDOW, args.threads)
    result = ambi.render_trajectory(dry, traj, synthesize, order=args.order,
                                    spacing=ambi.TRAJECTORY_SPACING * scale)
    buf = result.buffer.renormalized("sn3d") if args.sn3d else result.buffer
    ambi.write_ambisonic(args.output, buf, trajectory=traj)


def crossroom_from_scenes(scene1, scene2, ir1, ir2, t_er1, t_er2, source, listener, corner, edge_u, edge_v,
                          rays, seed, radius, pitch=0.25, workers=1):
    """Late cross-room IR through a rectangular door.

    Early IRs to each door sample are traced in the room on each side (the
    listener side by reciprocity). Each measured tail is level matched with
    paths traced from the door center to the room's endpoint.
    """
    pts, area = irsynth.door_samples(corner, edge_u, edge_v, pitch)
    rate = ir1.rate
    bank = irsynth.CrossoverBank.for_bands(scene1.band_centers, rate)
    center = corner + 0.5 * (np.asarray(edge_u) + np.asarray(edge_v))
    tails, ers = [], []
    for scn, ir, t_er, end in ((scene1, ir1, t_er1, source), (scene2, ir2, t_er2, listener)):
        ref = tracer.trace_paths(scn, end, center, rays, t_er, seed=seed, receiver_radius=radius, workers=workers)
        tail, _ = irsynth.lr_tail(ir.to_signal(), t_er, ref, erdur.DEFAULT_WINDOW)
        tails.append(tail)
        side = []
        for p in pts:
            paths = tracer.trace_paths(scn, end, p, rays, t_er, seed=seed, receiver_radius=radius, workers=workers)
            if len(paths) == 0:
                side.append(Signal(np.zeros(1), rate))
            else:
                side.append(matopt.simulate_ir_from_paths(paths, rate, bank))
        ers.append(side)
    return irsynth.crossroom_lrir(tails[0], tails[1], ers[0], ers[1], area)


def cmd_crossroom(args):
    scene1, s1 = apply_materials(scene_mod.load_scene(args.scene1), read_json(args.materials1))
    scene2, s2 = apply_materials(scene_mod.load_scene(args.scene2), read_json(args.materials2))
    if s1 != 1.0 or s2 != 1.0:
        raise ValueError("cross-room synthesis needs unscaled (shared-frame) scenes")
    ir1, ir2 = load_measured_ir(args.ir1), load_measured_ir(args.ir2)
    h = crossroom_from_scenes(scene1, scene2, ir1, ir2, read_t_er(args.t_er1), read_t_er(args.t_er2),
                              args.source, args.listener, args.door_corner, args.door_u, args.door_v,
                              args.rays, args.seed, args.receiver_radius, args.pitch, args.threads)
    write_signal(args.output, h)


def cmd_pipeline(args):
    config = PipelineConfig(scene=args.scene, ir=args.ir, dry=args.dry, source=args.source,
                            listener=args.listener, outdir=args.outdir, trajectory=args.trajectory,
                            rays=args.rays, synth_rays=args.synth_rays, seed=args.seed, order=args.order,
                            fit_time=args.fit_time, receiver_radius=args.receiver_radius,
                            threads=args.threads, init=args.init,
                            normalization="sn3d" if args.sn3d else "w-sqrt-half")
    result = run_pipeline(config)
    print(json.dumps({"status": result.report["status"], "report": os.path.join(args.outdir, "report.json")}))
    return result.exit_code


def cmd_fixture(args):
    from .fixtures import write_fixture
    files = write_fixture(args.outdir)
    print(json.dumps(files, indent=2))


# ----------------------------------------------------------------------------
# argument parsing

def _add_trace_flags(p, rays=DEFAULT_RAYS):
    p.add_argument("--rays", type=int, default=rays, help="ray budget per trace (count)")
    p.add_argument("--seed", type=int, default=0, help="random seed (integer)")
    p.add_argument("--receiver-radius", type=float, default=tracer.DEFAULT_RECEIVER_RADIUS,
                   help="receiver sphere radius (m)")
    p.add_argument("--threads", type=int, default=1, help="worker threads (count)")


def build_parser():
    parser = argparse.ArgumentParser(prog="sceneaudio", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    sweep = sub.add_parser("sweep", help="exponential sine sweep tools")
    sweep_sub = sweep.add_subparsers(dest="sweep_command", required=True)
    p = sweep_sub.add_parser("gen", help="write an exponential sine sweep")
    p.add_argument("--f1", type=float, default=20.0, help="start frequency (Hz)")
    p.add_argument("--f2", type=float, default=20000.0, help="end frequency (Hz)")
    p.add_argument("--duration", type=float, default=48.0, help="sweep length (s)")
    p.add_argument("--rate", type=int, default=DEFAULT_RATE, help="sample rate (Hz)")
    p.add_argument("--format", choices=("float32", "int16"), default="float32", help="WAV sample format")
    p.add_argument("-o", "--output", required=True, help="output WAV path")
    p.set_defaults(func=cmd_sweep_gen)
    p = sweep_sub.add_parser("deconvolve", help="recover an IR from a recorded sweep")
    p.add_argument("--recording", required=True, help="recorded sweep WAV")
    p.add_argument("--sweep", required=True, help="played sweep WAV (sample-synchronized)")
    p.add_argument("--rate", type=int, default=DEFAULT_RATE, help="processing rate (Hz)")
    p.add_argument("-o", "--output", required=True, help="output IR WAV path")
    p.set_defaults(func=cmd_sweep_deconvolve)

    analyze = sub.add_parser("analyze", help="impulse-response analysis")
    analyze_sub = analyze.add_subparsers(dest="analyze_command", required=True)
    p = analyze_sub.add_parser("decay", help="fit per-band exponential decay")
    p.add_argument("--ir", required=True, help="measured IR WAV")
    p.add_argument("--floor-db", type=float, default=sweep_analysis.NOISE_FLOOR_DB,
                   help="noise-floor gate relative to band peak (dB)")
    p.add_argument("--smoothing-ms", type=float, default=10.0, help="energy smoothing window (ms)")
    p.add_argument("-o", "--output", required=True, help="decay JSON path")
    p.set_defaults(func=cmd_analyze_decay)

    p = sub.add_parser("trace", help="trace source-to-listener paths")
    p.add_argument("--scene", required=True, help="scene JSON")
    p.add_argument("--source", type=parse_point, required=True, help="source position x,y,z (m)")
    p.add_argument("--listener", type=parse_point, required=True, help="listener position x,y,z (m)")
    p.add_argument("--max-time", type=float, required=True, help="longest path kept (s)")
    p.add_argument("--scale", type=float, default=1.0, help="uniform scene scale factor (unitless)")
    _add_trace_flags(p)
    p.add_argument("-o", "--output", required=True, help="path set output (binary)")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("fit-materials", help="fit per-band reflectances")
    p.add_argument("--scene", required=True, help="scene JSON")
    p.add_argument("--paths", required=True, help="path set (binary)")
    p.add_argument("--decay", required=True, help="decay JSON")
    p.add_argument("--t0", type=float, default=None, help="measured first arrival (s); default from decay JSON")
    p.add_argument("--init", type=float, default=matopt.DEFAULT_INIT, help="initial reflectance (fraction)")
    p.add_argument("--method", choices=("lbfgsb", "projected"), default="lbfgsb", help="bounded optimizer")
    p.add_argument("--scale", type=float, default=1.0, help="scale the paths were traced at (unitless)")
    p.add_argument("--threads", type=int, default=1, help="worker threads (count)")
    p.add_argument("-o", "--output", required=True, help="materials JSON path")
    p.set_defaults(func=cmd_fit_materials)

    p = sub.add_parser("er-duration", help="early/late transition time")
    p.add_argument("--paths", required=True, help="path set (binary)")
    p.add_argument("--window-ms", type=float, default=erdur.DEFAULT_WINDOW * 1e3, help="window length (ms)")
    p.add_argument("--threshold", type=float, default=erdur.DEFAULT_THRESHOLD, help="KS threshold (unitless)")
    p.add_argument("--horizon", type=float, default=None, help="latest window end (s)")
    p.add_argument("-o", "--output", required=True, help="ER JSON path")
    p.set_defaults(func=cmd_er_duration)

    for name, helptext in (("synth-ir", "directional IR at one listener position"),
                           ("synth", "ambisonic rendering along a trajectory")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--scene", required=True, help="scene JSON")
        p.add_argument("--materials", required=True, help="materials JSON from fit-materials")
        p.add_argument("--ir", required=True, help="measured IR WAV")
        p.add_argument("--source", type=parse_point, required=True, help="source position x,y,z (m)")
        p.add_argument("--t-er", default=None, help="ER JSON; traced when omitted")
        p.add_argument("--measure-listener", type=parse_point, default=None,
                       help="listener position of the measured IR x,y,z (m)")
        _add_trace_flags(p, DEFAULT_SYNTH_RAYS)
        if name == "synth-ir":
            p.add_argument("--listener", type=parse_point, required=True, help="listener position x,y,z (m)")
            p.add_argument("-o", "--output", required=True, help="directional IR output (binary)")
            p.set_defaults(func=cmd_synth_ir)
        else:
            p.add_argument("--trajectory", required=True, help="trajectory JSON")
            p.add_argument("--dry", required=True, help="dry source WAV")
            p.add_argument("--order", type=int, default=1, help="ambisonic order (integer >= 1)")
            p.add_argument("--sn3d", action="store_true", help="write W with SN3D gain 1 instead of 1/sqrt(2)")
            p.add_argument("-o", "--output", required=True, help="output ambisonic WAV")
            p.set_defaults(func=cmd_synth)

    p = sub.add_parser("crossroom", help="late IR between two rooms joined by a door")
    for k in ("1", "2"):
        p.add_argument(f"--scene{k}", required=True, help=f"room {k} scene JSON")
        p.add_argument(f"--materials{k}", required=True, help=f"room {k} materials JSON")
        p.add_argument(f"--ir{k}", required=True, help=f"room {k} measured IR WAV")
        p.add_argument(f"--t-er{k}", required=True, help=f"room {k} ER JSON")
    p.add_argument("--source", type=parse_point, required=True, help="source in room 1 x,y,z (m)")
    p.add_argument("--listener", type=parse_point, required=True, help="listener in room 2 x,y,z (m)")
    p.add_argument("--door-corner", type=parse_point, required=True, help="door corner x,y,z (m)")
    p.add_argument("--door-u", type=parse_point, required=True, help="door edge vector x,y,z (m)")
    p.add_argument("--door-v", type=parse_point, required=True, help="door edge vector x,y,z (m)")
    p.add_argument("--pitch", type=float, default=0.25, help="door sampling pitch (m)")
    _add_trace_flags(p, DEFAULT_SYNTH_RAYS)
    p.add_argument("-o", "--output", required=True, help="output mono WAV")
    p.set_defaults(func=cmd_crossroom)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    p.add_argument("--scene", required=True, help="scene JSON")
    p.add_argument("--ir", required=True, help="measured IR WAV")
    p.add_argument("--dry", required=True, help="dry source WAV")
    p.add_argument("--source", type=parse_point, required=True, help="source position x,y,z (m)")
    p.add_argument("--listener", type=parse_point, required=True, help="measurement listener x,y,z (m)")
    p.add_argument("--trajectory", default=None, help="trajectory JSON; stationary listener when omitted")
    p.add_argument("--synth-rays", type=int, default=DEFAULT_SYNTH_RAYS, help="ray budget per position (count)")
    p.add_argument("--fit-time", type=float, default=DEFAULT_FIT_TIME, help="trace horizon for fitting (s)")
    p.add_argument("--order", type=int, default=1, help="ambisonic order (integer >= 1)")
    p.add_argument("--init", type=float, default=matopt.DEFAULT_INIT, help="initial reflectance (fraction)")
    p.add_argument("--sn3d", action="store_true", help="write W with SN3D gain 1 instead of 1/sqrt(2)")
    _add_trace_flags(p)
    p.add_argument("--outdir", required=True, help="output directory")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("fixture", help="write the bundled shoebox fixture")
    p.add_argument("--outdir", required=True, help="output directory")
    p.set_defaults(func=cmd_fixture)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except Exception as exc:
        code = exit_code_for(exc)
        print(f"sceneaudio {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
