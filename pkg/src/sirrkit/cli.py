"""Command-line entry point: ``sirrkit {synth,separate,eval,gradcheck,trace-plot,replay}``.

Exit codes: 0 ok, 2 usage or input error, 3 numerical divergence,
4 verification failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from sirrkit import __version__
from sirrkit.formation import SCHEMES, BlendParams, init_dictionaries, nonlinear_residual, synthesize_blend
from sirrkit.imageio import ImageReadError, read_config, read_image, thread_cap, write_image, write_pfm
from sirrkit.metrics import MetricReport, dumps, evaluate
from sirrkit.solver import NumericalDivergence, SolverConfig, solve_multiscale
from sirrkit.verify import corrupted_adjoint, run_gradcheck

log = logging.getLogger("sirrkit")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _ext(fmt: str) -> str:
    return "." + fmt


def _write_json(path: Path, obj) -> None:
    path.write_text(dumps(obj) + "\n", encoding="utf-8")


def _manifest(command, inputs, out_dir, started, **extra) -> dict:
    return {"command": command, "inputs": {k: str(v) for k, v in inputs.items()},
            "output_dir": str(out_dir), "version": __version__, **extra,
            "duration_seconds": time.perf_counter() - started}


def _read(path) -> np.ndarray:
    try:
        img = read_image(path)
    except (ImageReadError, OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if img.ndim != 3 or img.shape[2] != 3:
        raise UsageError(f"{path}: expected an RGB image")
    return img


# synth

def cmd_synth(t_path, r_path, out_dir, params: BlendParams, fmt: str = "png", bits: int = 8) -> int:
    started = time.perf_counter()
    t, r = _read(t_path), _read(r_path)
    if t.shape != r.shape:
        raise UsageError(f"shape mismatch: {t.shape} vs {r.shape}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_image(out / f"I{_ext(fmt)}", synthesize_blend(t, r, params), bits=bits)
    write_pfm(out / "N_unclamped.pfm", nonlinear_residual(t, r, params))
    _write_json(out / "manifest.json", _manifest(
        "synth", {"t": t_path, "r": r_path}, out, started,
        blend_params=dataclasses.asdict(params), format=fmt, bits=bits))
    return EXIT_OK


# separate

def load_solver_config(config_path=None, **overrides) -> SolverConfig:
    if config_path is not None:
        try:
            cfg = read_config(config_path, SolverConfig)
        except KeyError as exc:
            raise UsageError(f"unknown config key: {exc.args[0]}") from exc
        except (OSError, ValueError, TypeError) as exc:
            raise UsageError(f"bad config {config_path}: {exc}") from exc
    else:
        cfg = SolverConfig()
    overrides = {k: v for k, v in overrides.items() if v is not None}
    try:
        return cfg.replace(**overrides) if overrides else cfg
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_separate(i_path, out_dir, cfg: SolverConfig, dict_seed: int = 0,
                 scheme: str = "gradient_seeded", n: int = 16, m: int = 24, w: int = 5,
                 fmt: str = "png", bits: int = 8, config_path=None) -> int:
    started = time.perf_counter()
    img = _read(i_path)
    if min(img.shape[:2]) < 2 ** (cfg.scales - 1):
        raise UsageError(f"image {img.shape[1]}x{img.shape[0]} too small for {cfg.scales} scales")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dicts = init_dictionaries(n=n, m=m, w=w, seed=dict_seed, scheme=scheme)
    with open(out / "trace.jsonl", "w", encoding="utf-8") as trace:
        def record(rec):
            trace.write(dumps(rec) + "\n")
        result = solve_multiscale(img, dicts, cfg, callback=record)
    ext = _ext(fmt)
    write_image(out / f"T_hat{ext}", result.t_hat, bits=bits)
    write_image(out / f"R_hat{ext}", result.r_hat, bits=bits)
    write_image(out / f"N_hat{ext}", result.n_hat, bits=bits)
    write_pfm(out / "residual.pfm", result.residual)
    _write_json(out / "report.json", dataclasses.asdict(
        MetricReport(recon_l1=result.recon_l1, aux_l1=result.aux_l1)))
    _write_json(out / "manifest.json", _manifest(
        "separate", {"image": i_path}, out, started,
        config_path=str(config_path) if config_path else None,
        solver_config=dataclasses.asdict(cfg),
        dictionary={"seed": dict_seed, "scheme": scheme, "n": n, "m": m, "w": w},
        format=fmt, bits=bits))
    return EXIT_OK


# eval

def cmd_eval(t_hat, t_gt, out, r_hat=None, r_gt=None, i_path=None) -> int:
    th, tg = _read(t_hat), _read(t_gt)
    rh = _read(r_hat) if r_hat else None
    rg = _read(r_gt) if r_gt else None
    img = _read(i_path) if i_path else None
    shapes = {a.shape for a in (th, tg, rh, rg, img) if a is not None}
    if len(shapes) != 1:
        raise UsageError(f"image shapes differ: {sorted(shapes)}")
    rep = evaluate(th, tg, r_hat=rh, r_gt=rg, i=img)
    out = Path(out)
    if out.suffix.lower() != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "report.json"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    payload = dataclasses.asdict(rep)
    payload["ssim_mode"] = "per_channel_mean"
    payload["r_reference"] = "ground_truth" if rg is not None else ("clamp(I-T)" if rh is not None else None)
    _write_json(out, payload)
    print(json.dumps(payload))
    return EXIT_OK


# gradcheck

def cmd_gradcheck(seed: int, size: int, out, corrupt_flip: bool = False) -> int:
    if not 1 <= size <= 16:
        raise UsageError("--size must be between 1 and 16")
    if corrupt_flip:
        with corrupted_adjoint():
            rows = run_gradcheck(seed=seed, size=size)
    else:
        rows = run_gradcheck(seed=seed, size=size)
    table = [{"check": r.name, "relative_error": r.error, "tolerance": r.tolerance, "ok": r.ok}
             for r in rows]
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "gradcheck.json", table)
    width = max(len(r.name) for r in rows)
    for r in rows:
        print(f"{r.name:<{width}}  {r.error:.3e}  (tol {r.tolerance:.0e})  {'ok' if r.ok else 'FAIL'}")
    failed = [r for r in rows if not r.ok]
    if failed:
        f = failed[0]
        print(f"verification failed: {f.name} relative error {f.error:.3e}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# trace-plot

def trace_svg(records: list[dict], width: int = 640, height: int = 360) -> str:
    """Objective per stage on a log axis, one polyline per scale."""
    pad = 40
    values = np.array([max(r["objective"], 1e-300) for r in records])
    logs = np.log10(values)
    lo, hi = float(logs.min()), float(logs.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    n = len(records)

    def xy(k, v):
        x = pad + (width - 2 * pad) * (k / max(n - 1, 1))
        y = height - pad - (height - 2 * pad) * ((v - lo) / (hi - lo))
        return f"{x:.2f},{y:.2f}"

    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{pad}" y="{pad - 10}" font-size="12">log10 objective '
             f'[{lo:.3f}, {hi:.3f}]</text>']
    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    for j, scale in enumerate(sorted({r["scale"] for r in records})):
        pts = " ".join(xy(k, logs[k]) for k, r in enumerate(records) if r["scale"] == scale)
        lines.append(f'<polyline fill="none" stroke="{colours[j % len(colours)]}" '
                     f'stroke-width="1.5" points="{pts}"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def cmd_trace_plot(trace_path, out) -> int:
    try:
        with open(trace_path, encoding="utf-8") as fh:
            records = [json.loads(line) for line in fh if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read trace {trace_path}: {exc}") from exc
    if not records:
        raise UsageError(f"{trace_path} holds no trace records")
    out = Path(out)
    if out.suffix.lower() != ".svg":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "trace.svg"
    out.write_text(trace_svg(records), encoding="utf-8")
    return EXIT_OK


# replay

def cmd_replay(manifest_path, out=None) -> int:
    try:
        man = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read manifest {manifest_path}: {exc}") from exc
    out = out or man["output_dir"]
    if man["command"] == "separate":
        d = man["dictionary"]
        return cmd_separate(man["inputs"]["image"], out, SolverConfig(**man["solver_config"]),
                            dict_seed=d["seed"], scheme=d["scheme"], n=d["n"], m=d["m"], w=d["w"],
                            fmt=man["format"], bits=man["bits"], config_path=man.get("config_path"))
    if man["command"] == "synth":
        return cmd_synth(man["inputs"]["t"], man["inputs"]["r"], out,
                         BlendParams(**man["blend_params"]), fmt=man["format"], bits=man["bits"])
    raise UsageError(f"cannot replay command {man['command']!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sirrkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="blend a transmission and a reflection image")
    s.add_argument("t_path")
    s.add_argument("r_path")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0, help="draws gamma1/gamma2 when not given")
    s.add_argument("--gamma1", type=float)
    s.add_argument("--gamma2", type=float)
    s.add_argument("--format", choices=("png", "ppm", "pfm"), default="png")
    s.add_argument("--bits", type=int, choices=(8, 16), default=8)

    s = sub.add_parser("separate", help="separate one or more blended images")
    s.add_argument("images", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0, help="dictionary seed")
    s.add_argument("--scales", type=int)
    s.add_argument("--stages", type=int)
    s.add_argument("--scheme", choices=SCHEMES, default="gradient_seeded")
    s.add_argument("--n", type=int, default=16, help="features per layer")
    s.add_argument("--m", type=int, default=24, help="exclusion filters")
    s.add_argument("--w", type=int, default=5, help="kernel size")
    s.add_argument("--format", choices=("png", "ppm", "pfm"), default="png")
    s.add_argument("--bits", type=int, choices=(8, 16), default=8)

    s = sub.add_parser("eval", help="score a separation against ground truth")
    s.add_argument("--t-hat", required=True)
    s.add_argument("--t-gt", required=True)
    s.add_argument("--r-hat")
    s.add_argument("--r-gt")
    s.add_argument("--i", dest="i_path", help="blended input, used for the R reference")
    s.add_argument("--out", required=True)

    s = sub.add_parser("gradcheck", help="finite-difference and adjointness checks")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=8)
    s.add_argument("--out")
    s.add_argument("--corrupt-flip", action="store_true", help=argparse.SUPPRESS)

    s = sub.add_parser("trace-plot", help="render trace.jsonl as SVG")
    s.add_argument("trace")
    s.add_argument("--out", required=True)

    s = sub.add_parser("replay", help="rerun a command from its manifest.json")
    s.add_argument("manifest")
    s.add_argument("--out")
    return p


def _separate_many(args) -> int:
    cfg = load_solver_config(args.config, scales=args.scales, stages=args.stages)
    kw = dict(dict_seed=args.seed, scheme=args.scheme, n=args.n, m=args.m, w=args.w,
              fmt=args.format, bits=args.bits, config_path=args.config)
    if len(args.images) == 1:
        return cmd_separate(args.images[0], args.out, cfg, **kw)
    stems = [Path(p).stem for p in args.images]
    if len(set(stems)) != len(stems):
        raise UsageError("batch inputs must have distinct file names")
    workers = min(thread_cap(), len(args.images))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(cmd_separate, p, Path(args.out) / s, cfg, **kw)
                   for p, s in zip(args.images, stems)]
        codes = [f.result() for f in futures]
    return max(codes)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            if args.gamma1 is None and args.gamma2 is None:
                params = BlendParams.sample(args.seed)
            else:
                params = BlendParams(args.gamma1 if args.gamma1 is not None else 0.8,
                                     args.gamma2 if args.gamma2 is not None else 0.4, args.seed)
            return cmd_synth(args.t_path, args.r_path, args.out, params, args.format, args.bits)
        if args.command == "separate":
            return _separate_many(args)
        if args.command == "eval":
            return cmd_eval(args.t_hat, args.t_gt, args.out, r_hat=args.r_hat, r_gt=args.r_gt,
                            i_path=args.i_path)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed, args.size, args.out, args.corrupt_flip)
        if args.command == "trace-plot":
            return cmd_trace_plot(args.trace, args.out)
        if args.command == "replay":
            return cmd_replay(args.manifest, args.out)
    except UsageError as exc:
        print(f"sirrkit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"sirrkit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalDivergence as exc:
        print(f"sirrkit: diverged in block z_{exc.block}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
