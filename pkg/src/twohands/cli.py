"""Command-line interface: ``twohands generate | fit | eval | selftest``.

Each command reads a run configuration (see ``twohands.config`` for the
grammar), optionally from ``--config FILE``, with ``--set section.key=value``
overrides applied last. Failures print one line to stderr,

    twohands: error: code=<code> message=<text>

and exit nonzero (2 config, 3 input/output, 4 fitting, 1 anything else).
"""

import argparse
import csv
import json
import logging
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, apply_overrides, parse
from .correspond import (CorrespondenceMap, export_correspondence_png, match_correspondences,
                         read_correspondence, render_correspondence_oracle, vertex_colors,
                         write_correspondence)
from .depthio import read_depth, write_depth, write_depth_pgm
from .energy import BLOCKS, FrameData, inter_hand_overlap
from .handmodel import (FINGER_NAMES, HANDS, HandParams, build_template, load_template, pose_hands,
                        save_template)
from .metrics import DEFAULT_THRESHOLDS, evaluate, keypoint_errors, mean_vertex_error, sequence_keypoints
from .pipeline import closest_point_correspondence, observe
from .raster import rasterize
from .scenes import interpenetrating, motion_sequence, perturb
from .solver import FitError, fit_frame, track_sequence

log = logging.getLogger("twohands")

MANIFEST = "dataset.json"
TEMPLATE_FILE = "template.twht"

FIT_COLUMNS = {
    "frame": "frame index, starting at 0",
    "iterations": "Gauss-Newton iterations run on the frame",
    "stop_reason": "why the last round stopped: zero_gradient, no_decrease, step_tolerance, energy_tolerance or max_iterations",
    "converged": "1 if a convergence test fired before the iteration budget ran out",
    "energy_total": "final weighted energy (sum of the e_* columns)",
    **{f"e_{b}": f"final weighted {b} energy (0 when the term is disabled)" for b in BLOCKS},
    "n_visible": "vertices with a correspondence after gating",
    "n_points": "foreground depth points in the frame",
    "inter_overlap": "summed left/right proxy overlap of the fitted pose (m^3)",
}
PCK_COLUMNS = {
    "threshold_m": "3D keypoint error threshold (metres)",
    "pck": "fraction of keypoints with error below the threshold",
}
METRIC_COLUMNS = {
    "metric": "metric name (n_frames, pixel_error_2d_mean, pixel_error_2d_std, bone_std_mean_m, "
              "bone_std_max_m, mean_vertex_error_m, keypoint_error_mean_m)",
    "value": "metric value",
}
BONE_COLUMNS = {
    "hand": "left or right",
    "bone": "bone index 0-14 (three per finger, base to tip)",
    "finger": "finger name",
    "std_m": "standard deviation of the bone length over the sequence (metres)",
}
FRAME_COLUMNS = {
    "frame": "frame index",
    "energy_total": "final fitting energy from fit.csv",
    "mean_vertex_error_m": "mean distance between fitted and true vertices (metres)",
    "keypoint_error_mean_m": "mean 3D wrist/fingertip error (metres)",
    "pixel_error_2d": "mean keypoint reprojection error divided by the image diagonal",
}

EXIT_CODES = {"config": 2, "io": 3, "input": 3, "fit": 4}


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _columns_help(title, columns):
    width = max(map(len, columns))
    return f"{title}:\n" + "\n".join(f"  {k:<{width}}  {v}" for k, v in columns.items())


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _frame_stem(t):
    return f"frame_{t:04d}"


def _frame_seed(seed, t):
    return int(np.random.SeedSequence([seed, t]).generate_state(1)[0])


def _resolve_config(args, base=None):
    cfg = base or RunConfig()
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise CliError("io", f"cannot read config {args.config}: {exc.strerror}") from None
        cfg = parse(text, cfg)
    pairs = []
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v))
    return apply_overrides(cfg, pairs) if pairs else cfg


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows(rows)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _outdir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError("io", f"cannot write to {out}: {exc.strerror}") from None
    return out


def load_dataset(path):
    """(manifest, config, template, ground-truth params) for a generated dataset."""
    root = Path(path)
    if not (root / MANIFEST).is_file():
        raise CliError("input", f"{root}: no {MANIFEST}")
    manifest = json.loads((root / MANIFEST).read_text())
    cfg = parse(manifest["config"])
    template = load_template(root / TEMPLATE_FILE)
    truth = []
    for t in range(manifest["n_frames"]):
        stem = root / _frame_stem(t)
        for ext in (".depth", ".corr", "_gt.json"):
            if not Path(str(stem) + ext).is_file():
                raise CliError("input", f"missing frame file {stem}{ext}")
        truth.append(HandParams.from_dict(json.loads(Path(str(stem) + "_gt.json").read_text())))
    return manifest, cfg, template, truth


# --------------------------------------------------------------------------
# generate
# --------------------------------------------------------------------------

def generate(cfg, out):
    """Write template, per-frame depth/correspondence/ground truth and a manifest. Returns the manifest."""
    out = _outdir(out)
    template = build_template(cfg.model)
    save_template(template, out / TEMPLATE_FILE)
    seq = motion_sequence(template, cfg.scene.motion, cfg.scene.n_frames, cfg.seed)
    frames = []
    for t, p in enumerate(seq):
        stem = out / _frame_stem(t)
        depth, image = render_correspondence_oracle(template, p, cfg.camera,
                                                    cfg.oracle_noise(_frame_seed(cfg.seed, t)))
        write_depth(f"{stem}.depth", depth)
        write_correspondence(f"{stem}.corr", image)
        Path(f"{stem}_gt.json").write_text(json.dumps(p.to_dict()))
        write_depth_pgm(f"{stem}_depth.pgm", depth)
        export_correspondence_png(f"{stem}_corr", image)
        frames.append({"frame": t, "stem": stem.name, "n_foreground": depth.n_foreground,
                       "gt_overlap": inter_hand_overlap(pose_hands(template, p))})
    manifest = {"version": __version__, "motion": cfg.scene.motion, "n_frames": len(seq),
                "seed": cfg.seed, "config": cfg.serialize(), "frames": frames}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return manifest


# --------------------------------------------------------------------------
# fit
# --------------------------------------------------------------------------

def initial_params(cfg, gt0):
    mode = cfg.fit.init
    if mode == "gt":
        return gt0.copy()
    if mode == "interpenetrating":
        return interpenetrating(gt0, cfg.fit.interpenetration)
    rng = np.random.default_rng(cfg.seed)
    return perturb(gt0, rng, cfg.fit.perturb_translation, cfg.fit.perturb_articulation)


def _frame_observation(root, t, template, cfg, colors, estimate=None):
    stem = Path(root) / _frame_stem(t)
    depth = read_depth(f"{stem}.depth")
    image = read_correspondence(f"{stem}.corr")
    if depth.shape != (cfg.camera.height, cfg.camera.width) or image.channels.shape[:2] != depth.shape:
        raise CliError("input", f"{stem}: image size {depth.shape} does not match the camera "
                                f"({cfg.camera.height}, {cfg.camera.width})")
    mode = cfg.ablation.correspondence
    if mode == "oracle":
        return observe(depth, image, colors, cfg.camera, cfg.observation)
    data = observe(depth, image, colors, cfg.camera, cfg.observation,
                   correspondence=CorrespondenceMap.empty(2 * template.n_vertices))
    labels = None
    if mode == "closest_seg":
        labels = image.segmentation().ravel()[data.pixel_index]
    corr = closest_point_correspondence(template, estimate, data.points, data.pixel_index, labels)
    return FrameData(data.points, data.normals, corr, data.pixel_index)


def fit(cfg, dataset, out):
    """Track the dataset's sequence. Returns (reports, fitted params)."""
    manifest, base, template, truth = load_dataset(dataset)
    if cfg.model != base.model:
        raise CliError("input", "config/template mismatch: model section differs from the dataset's")
    out = _outdir(out)
    weights = cfg.effective_weights()
    colors = vertex_colors(template)
    init = initial_params(cfg, truth[0])
    n = manifest["n_frames"]
    n_points = {}

    def load(t, estimate=None):
        data = _frame_observation(dataset, t, template, cfg, colors, estimate)
        n_points[t] = len(data.points)
        return data

    if cfg.ablation.correspondence == "oracle":
        frames = [(lambda t=t: load(t)) for t in range(n)]
        reports = track_sequence(template, frames, init, weights, cfg.solver, cfg.fit.pipelined)
    else:
        # closest-point matches depend on the estimate, so frames are loaded one by one
        reports, prev, current = [], None, init
        for t in range(n):
            data = load(t, current).with_prev(prev)
            try:
                rep = fit_frame(template, current, data, weights, cfg.solver)
            except FitError as exc:
                raise FitError(f"frame {t}: {exc}") from exc
            reports.append(rep)
            prev = current = rep.final_params
    fitted = [r.final_params for r in reports]

    rows = []
    for t, rep in enumerate(reports):
        e = rep.per_term_energies
        posed = pose_hands(template, rep.final_params)
        rows.append([t, rep.iterations_run, rep.stop_reason, int(rep.converged),
                     f"{sum(e.values()):.9g}", *(f"{e[b]:.9g}" for b in BLOCKS),
                     rep.n_visible, n_points[t], f"{inter_hand_overlap(posed):.9g}"])
    _write_csv(out / "fit.csv", list(FIT_COLUMNS), rows)
    (out / "params.json").write_text(json.dumps([p.to_dict() for p in fitted]))
    (out / "traces.json").write_text(json.dumps([r.energy_trace for r in reports]))
    (out / "fit_config.txt").write_text(cfg.serialize())
    if cfg.fit.overlays:
        from .plotting import overlay_figure
        for t, p in enumerate(fitted):
            depth = read_depth(Path(dataset) / f"{_frame_stem(t)}.depth")
            sil = rasterize(pose_hands(template, p).vertex_positions, template.both_faces, cfg.camera).covered
            overlay_figure(depth.depth, sil, out / f"overlay_{t:04d}.png", f"frame {t}")
    return reports, fitted


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def evaluate_fit(dataset, fitdir, out=None, thresholds=DEFAULT_THRESHOLDS, figures=True):
    """Write pck.csv, metrics.csv, bone_std.csv, frames.csv (and figures). Returns ``Metrics``."""
    _, cfg, template, truth = load_dataset(dataset)
    fitdir = Path(fitdir)
    try:
        fitted = [HandParams.from_dict(d) for d in json.loads((fitdir / "params.json").read_text())]
        fit_rows = _read_csv(fitdir / "fit.csv")
    except FileNotFoundError as exc:
        raise CliError("input", f"{exc.filename}: not found (run 'twohands fit' first)") from None
    if len(fitted) != len(truth):
        raise CliError("input", f"frame count mismatch: {len(fitted)} fitted vs {len(truth)} ground truth")
    energies = [float(r["energy_total"]) for r in fit_rows]
    out = _outdir(out or fitdir)
    m = evaluate(template, fitted, truth, cfg.camera, thresholds, energies)

    kp, kg = sequence_keypoints(template, fitted), sequence_keypoints(template, truth)
    kerr = keypoint_errors(kp, kg)
    pix = np.linalg.norm(cfg.camera.project(kp.reshape(-1, 3)) - cfg.camera.project(kg.reshape(-1, 3)), axis=1)
    pix = pix.reshape(kp.shape[:2]).mean(axis=1) / cfg.camera.diagonal
    verr = [mean_vertex_error(template, a, b) for a, b in zip(fitted, truth)]

    _write_csv(out / "pck.csv", list(PCK_COLUMNS), [[f"{t:.4f}", f"{f:.6f}"] for t, f in m.pck_curve])
    std = m.bone_length_std
    summary = [
        ("n_frames", len(fitted)),
        ("pixel_error_2d_mean", m.pixel_error_2d[0]),
        ("pixel_error_2d_std", m.pixel_error_2d[1]),
        ("bone_std_mean_m", float(std.mean())),
        ("bone_std_max_m", float(std.max())),
        ("mean_vertex_error_m", float(np.mean(verr))),
        ("keypoint_error_mean_m", float(kerr.mean())),
    ]
    _write_csv(out / "metrics.csv", list(METRIC_COLUMNS), [[k, f"{v:.9g}"] for k, v in summary])
    _write_csv(out / "bone_std.csv", list(BONE_COLUMNS),
               [[hand, b, FINGER_NAMES[b // 3], f"{std[h, b]:.9g}"]
                for h, hand in enumerate(HANDS) for b in range(std.shape[1])])
    _write_csv(out / "frames.csv", list(FRAME_COLUMNS),
               [[t, f"{energies[t]:.9g}" if t < len(energies) else "", f"{verr[t]:.9g}",
                 f"{kerr[t].mean():.9g}", f"{pix[t]:.9g}"] for t in range(len(fitted))])
    if figures:
        from .plotting import bone_std_figure, energy_figure, pck_figure
        pck_figure(m.pck_curve, out / "pck.png")
        bone_std_figure(std, out / "bone_std.png")
        traces = fitdir / "traces.json"
        if traces.is_file():
            energy_figure(json.loads(traces.read_text()), out / "energy.png")
    return m


# --------------------------------------------------------------------------
# selftest
# --------------------------------------------------------------------------

def _check_template():
    build_template().check_invariants()


def _check_template_io():
    t = build_template()
    with tempfile.TemporaryDirectory() as d:
        save_template(t, Path(d) / "t.twht")
        u = load_template(Path(d) / "t.twht")
    assert np.array_equal(t.vertices, u.vertices) and np.array_equal(t.faces, u.faces)


def _check_jacobian():
    from .handmodel import pose_with_jacobian
    t = build_template()
    rng = np.random.default_rng(0)
    p = HandParams.for_template(t)
    x = p.to_vector() + rng.normal(0, 0.1, len(p.to_vector()))
    x[2 * t.n_shape + 2] = x[2 * t.n_shape + t.n_pose + 2] = 0.5
    p = HandParams.from_vector(x, t.n_shape)
    _, jac = pose_with_jacobian(t, p)
    J = jac.vertices.reshape(-1, len(x))
    h = 1e-6
    for c in rng.choice(len(x), 6, replace=False):
        xp, xm = x.copy(), x.copy()
        xp[c] += h
        xm[c] -= h
        fd = (pose_hands(t, HandParams.from_vector(xp, t.n_shape)).vertex_positions
              - pose_hands(t, HandParams.from_vector(xm, t.n_shape)).vertex_positions).ravel() / (2 * h)
        err = np.linalg.norm(J[:, c] - fd) / max(np.linalg.norm(fd), 1e-12)
        assert err < 1e-4, f"column {c}: relative error {err:.2e}"


def _check_collision():
    from .energy import collision_pair_integral
    v = collision_pair_integral(np.zeros(3), 1.0, np.zeros(3), 1.0)
    assert abs(v - np.pi ** 1.5) < 1e-9, v


def _check_files():
    cfg = RunConfig()
    t = build_template()
    p = motion_sequence(t, "static", 1)[0]
    depth, image = render_correspondence_oracle(t, p, cfg.camera, cfg.oracle_noise(1))
    with tempfile.TemporaryDirectory() as d:
        write_depth(Path(d) / "a.depth", depth)
        write_correspondence(Path(d) / "a.corr", image)
        d2, i2 = read_depth(Path(d) / "a.depth"), read_correspondence(Path(d) / "a.corr")
    assert np.array_equal(d2.depth, depth.depth.astype(np.float32))
    assert np.array_equal(i2.channels, image.channels.astype(np.float32))


def _check_matching():
    from .correspond import OracleNoise, visible_vertices
    cfg = RunConfig()
    t = build_template()
    p = motion_sequence(t, "static", 1)[0]
    colors = vertex_colors(t)
    _, image = render_correspondence_oracle(t, p, cfg.camera, OracleNoise(color_sigma=0.0))
    m = match_correspondences(image, colors, eta=1e-6)
    buf = rasterize(pose_hands(t, p).vertex_positions, t.both_faces, cfg.camera)
    vis, _ = visible_vertices(buf, pose_hands(t, p).vertex_positions, cfg.camera)
    frac = np.mean(m.assignment[vis] >= 0)
    assert frac >= 0.98, f"only {frac:.3f} of visible vertices matched"
    hidden = np.setdiff1d(np.arange(len(m.assignment)), vis)
    assert not np.any(m.assignment[hidden] >= 0), "occluded vertex matched"


def _check_config():
    cfg = parse("weights.w_coll = 10\nsolver.facing_cutoff = none\nscene.motion = static\n")
    assert parse(cfg.serialize()) == cfg


def _check_metrics():
    from .metrics import pck
    e = keypoint_errors(np.array([[0.0, 0, 0], [0.005, 0, 0]]), np.zeros((2, 3)))
    assert list(pck(e, [0.004, 0.006])) == [0.5, 1.0]


SELFTESTS = [
    ("template_invariants", _check_template),
    ("template_roundtrip", _check_template_io),
    ("skinning_jacobian", _check_jacobian),
    ("collision_closed_form", _check_collision),
    ("frame_file_roundtrip", _check_files),
    ("oracle_matching", _check_matching),
    ("config_roundtrip", _check_config),
    ("pck_fixture", _check_metrics),
]


def selftest(stream=sys.stdout):
    failed = 0
    for name, fn in SELFTESTS:
        try:
            fn()
            print(f"PASS {name}", file=stream)
        except Exception as exc:  # report every failure, keep going
            failed += 1
            print(f"FAIL {name}: {type(exc).__name__}: {exc}", file=stream)
    return failed


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser():
    fmt = argparse.RawDescriptionHelpFormatter
    ap = argparse.ArgumentParser(prog="twohands", description=__doc__.split("\n\n")[0], formatter_class=fmt)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config entry, e.g. --set weights.w_coll=0 (repeatable)")

    g = sub.add_parser("generate", help="render a synthetic sequence to disk", formatter_class=fmt,
                       description="Render a scripted two-hand motion: per frame a .depth file, a .corr "
                                   "correspondence image, ground truth (_gt.json), a 16-bit PGM of the "
                                   "depth in mm and PNGs of the correspondence channels.")
    common(g)
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--motion", help="shortcut for --set scene.motion=...")
    g.add_argument("--frames", type=int, help="shortcut for --set scene.n_frames=...")
    g.add_argument("--seed", type=int, help="shortcut for --set seed=...")

    f = sub.add_parser("fit", help="track a generated sequence", formatter_class=fmt,
                       description="Fit both hands frame by frame. Writes fit.csv, params.json, "
                                   "traces.json and optionally overlay_NNNN.png.",
                       epilog=_columns_help("fit.csv columns", FIT_COLUMNS))
    common(f)
    f.add_argument("--dataset", required=True, help="directory written by 'generate'")
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--init", choices=("perturbed", "gt", "interpenetrating"), help="first-frame initialisation")
    for b in BLOCKS:
        f.add_argument(f"--no-{b}", action="store_true", help=f"disable the {b} term")
    f.add_argument("--correspondence", choices=("oracle", "closest_seg", "closest_noseg"),
                   help="oracle colour matches, or nearest-point matches with / without segmentation")
    f.add_argument("--overlays", action="store_true", help="write depth + fitted silhouette PNGs")
    f.add_argument("--pipelined", action="store_true", help="load frame t+1 while fitting frame t")

    e = sub.add_parser("eval", help="score a fit against ground truth", formatter_class=fmt,
                       description="Compare fitted parameters with the dataset's ground truth. "
                                   "Writes CSV tables plus pck.png, bone_std.png and energy.png.",
                       epilog="\n\n".join([
                           _columns_help("pck.csv columns", PCK_COLUMNS),
                           _columns_help("metrics.csv columns", METRIC_COLUMNS),
                           _columns_help("bone_std.csv columns", BONE_COLUMNS),
                           _columns_help("frames.csv columns", FRAME_COLUMNS),
                       ]))
    e.add_argument("--dataset", required=True)
    e.add_argument("--fit", required=True, help="directory written by 'fit'")
    e.add_argument("--out", help="output directory (default: the fit directory)")
    e.add_argument("--no-figures", action="store_true")

    sub.add_parser("selftest", help="run the built-in invariant checks")
    return ap


def _shortcuts(args):
    extra = []
    if args.command == "generate":
        for name, key in (("motion", "scene.motion"), ("frames", "scene.n_frames"), ("seed", "seed")):
            if getattr(args, name) is not None:
                extra.append(f"{key}={getattr(args, name)!r}" if name == "motion" else f"{key}={getattr(args, name)}")
    if args.command == "fit":
        if args.init:
            extra.append(f"fit.init={args.init!r}")
        extra += [f"ablation.disable_{b}=true" for b in BLOCKS if getattr(args, f"no_{b}")]
        if args.correspondence:
            extra.append(f"ablation.correspondence={args.correspondence!r}")
        if args.overlays:
            extra.append("fit.overlays=true")
        if args.pipelined:
            extra.append("fit.pipelined=true")
    args.set = (args.set or []) + extra


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "selftest":
        return 1 if selftest() else 0
    if args.command == "eval":
        m = evaluate_fit(args.dataset, args.fit, args.out, figures=not args.no_figures)
        print(f"pck@20mm={m.pck(0.02):.3f} pixel_error_2d={m.pixel_error_2d[0]:.5f} "
              f"bone_std_mean={m.bone_length_std.mean() * 1000:.3f}mm")
        return 0
    _shortcuts(args)
    if args.command == "generate":
        cfg = _resolve_config(args)
        man = generate(cfg, args.out)
        print(f"wrote {man['n_frames']} frames of {man['motion']} to {args.out}")
        return 0
    _, base, _, _ = load_dataset(args.dataset)
    cfg = _resolve_config(args, base)
    reports, _ = fit(cfg, args.dataset, args.out)
    print(f"fitted {len(reports)} frames; mean iterations "
          f"{np.mean([r.iterations_run for r in reports]):.1f}; results in {args.out}")
    return 0


def main(argv=None):
    try:
        return run(argv)
    except ConfigError as exc:
        code, msg = "config", str(exc)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except FitError as exc:
        code, msg = "fit", str(exc)
    except OSError as exc:
        code, msg = "io", f"{exc.filename}: {exc.strerror}" if exc.filename else str(exc)
    except (ValueError, KeyError) as exc:
        code, msg = "input", f"{type(exc).__name__}: {exc}"
    except Exception as exc:
        log.debug("unexpected failure", exc_info=True)
        code, msg = "internal", f"{type(exc).__name__}: {exc}"
    print(f"twohands: error: code={code} message={' '.join(msg.split())}", file=sys.stderr)
    return EXIT_CODES.get(code, 1)


if __name__ == "__main__":
    sys.exit(main())
