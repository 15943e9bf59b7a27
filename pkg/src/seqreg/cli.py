"""Command-line entry point: ``seqreg <command> ...``.

Exit codes: 0 ok, 1 usage error, 2 data error (missing/malformed input),
3 numerical failure.  Every output file is written to a temporary name and
renamed into place, and all outputs are computed before the first write, so
a failing command leaves no partial results.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .evalstat import (SEVERITIES, apply_synthetic_misalignment, dice, format_report,
                       run_hierarchical_plan)
from .optimizer import OptimizerAbort
from .phantom import PhantomSpec, PhantomSpecError, generate_phantom
from .pipeline import RegistrationConfig, apply_to_maps, register
from .transform import Deformation, RigidParams, densify, folding_fraction, warp, warp_mask
from .volio import (SCHEMA_VERSION, FormatError, dumps_json, read_config,
                    read_deformation, read_metaimage, read_scores_csv, write_deformation,
                    write_json, write_metaimage)
from .volume import BinaryMask, Volume3D

log = logging.getLogger("seqreg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _stem(path) -> str:
    name = Path(path).name
    for suffix in (".mha", ".mhd"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return Path(name).stem


def _read(path, kind=None):
    if not Path(path).is_file():
        raise DataError(f"no such file: {path}")
    return read_metaimage(path, kind)


def _read_volume(path) -> Volume3D:
    return _read(path, "volume")


def _read_mask(path) -> BinaryMask:
    return _read(path, "mask")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# register

def _config_from_args(args):
    seed = 0
    if args.config:
        if not Path(args.config).is_file():
            raise DataError(f"no such file: {args.config}")
        cfg, seed = read_config(args.config)
    else:
        cfg = RegistrationConfig()
    overrides = {}
    if args.alpha is not None:
        overrides["alpha"] = args.alpha
    if args.rigid_iters is not None:
        overrides["rigid_iters"] = args.rigid_iters
    if args.deform_iters is not None:
        overrides["deform_iters"] = args.deform_iters
    if args.grid_size is not None:
        overrides["grid_size"] = tuple(args.grid_size)
    try:
        return replace(cfg, **overrides), seed
    except ValueError as e:
        raise UsageError(str(e)) from None


def _register_case(fixed_path, moving_path, mask_path, map_paths, out_dir, cfg, seed):
    """Run one registration and write its outputs; returns the emitted paths."""
    fixed = _read_volume(fixed_path)
    moving = _read_volume(moving_path)
    mask = _read_mask(mask_path)
    maps = [_read_volume(p) for p in map_paths]
    if mask.geometry != fixed.geometry:
        raise DataError(f"mask {mask_path} does not share the fixed image geometry")
    result = register(fixed, moving, mask, cfg)
    warped = apply_to_maps(result, [moving] + maps, fixed.geometry, cfg.oob_policy)
    metrics = {"schema_version": SCHEMA_VERSION, "seed": seed, "config": cfg.to_dict(),
               **result.metrics()}
    out = _out_dir(out_dir)
    emitted = [out / "deformation.json"]
    if result.deformation.grid is not None:
        emitted.append(out / "deformation.grid.mha")
    write_deformation(result.deformation, out / "deformation.json", out / "deformation.grid.mha")
    names = ["warped_moving"] + [f"warped_{_stem(p)}" for p in map_paths]
    for name, vol in zip(names, warped):
        write_metaimage(vol, out / f"{name}.mha")
        emitted.append(out / f"{name}.mha")
    write_json(metrics, out / "metrics.json")
    emitted.append(out / "metrics.json")
    return [str(p) for p in emitted], {k: metrics[k] for k in
                                       ("ngf_before", "ngf_after", "folding_percent_in_mask")}


def _batch_worker(case):
    try:
        paths, summary = _register_case(*case)
        return EXIT_OK, paths, summary, ""
    except Exception as e:  # report per case, keep the batch going
        return _exit_code_for(e), [], {}, f"{type(e).__name__}: {e}"


def _load_manifest(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    try:
        doc = json.loads(path.read_text())
        cases = doc["cases"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataError(f"{path}: malformed batch manifest ({e})") from None
    base = path.parent
    out = []
    for i, c in enumerate(cases):
        try:
            out.append((str(c.get("id", f"case{i:03d}")), base / c["fixed"], base / c["moving"],
                        base / c["mask"], [base / m for m in c.get("maps", [])]))
        except (KeyError, TypeError) as e:
            raise DataError(f"{path}: case {i} lacks {e}") from None
    ids = [c[0] for c in out]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate case ids")
    return out


def _jobs(args) -> int:
    env = os.environ.get("SEQREG_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"SEQREG_THREADS must be an integer, got {env!r}") from None
    else:
        n = args.jobs
    if n < 1:
        raise UsageError("job count must be >= 1")
    return n


def cmd_register(args):
    cfg, seed = _config_from_args(args)
    if args.batch:
        if args.fixed or args.moving or args.mask:
            raise UsageError("--batch excludes --fixed/--moving/--mask")
        cases = _load_manifest(args.batch)
        work = [(f, m, k, maps, Path(args.out_dir) / cid, cfg, seed)
                for cid, f, m, k, maps in cases]
        jobs = min(_jobs(args), max(len(work), 1))
        if jobs == 1:
            results = [_batch_worker(w) for w in work]
        else:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_batch_worker, work))
        summary = {"command": "register", "cases": {}}
        code = EXIT_OK
        outputs = []
        for (cid, *_), (rc, paths, metrics, err) in zip(cases, results):
            summary["cases"][cid] = {"exit_code": rc, "outputs": paths, **metrics}
            if err:
                summary["cases"][cid]["error"] = err
                print(f"seqreg register: case {cid}: {err}", file=sys.stderr)
            code = max(code, rc)
            outputs += paths
        return code, outputs, summary
    missing = [f"--{n}" for n in ("fixed", "moving", "mask") if not getattr(args, n)]
    if missing:
        raise UsageError(f"missing {', '.join(missing)} (or use --batch)")
    paths, metrics = _register_case(args.fixed, args.moving, args.mask, args.maps or [],
                                    args.out_dir, cfg, seed)
    return EXIT_OK, paths, {"command": "register", **metrics}


# --------------------------------------------------------------------------
# other commands

def cmd_warp(args):
    d = _load_deformation(args.deformation)
    ref = _read(args.ref).geometry
    vols = [_read_volume(p) for p in args.moving]
    warped = [warp(v, d, ref, args.oob_policy) for v in vols]
    out = _out_dir(args.out_dir)
    paths = []
    for p, w in zip(args.moving, warped):
        target = out / f"{_stem(p)}_warped.mha"
        write_metaimage(w, target)
        paths.append(str(target))
    return EXIT_OK, paths, {"command": "warp"}


def cmd_misalign(args):
    vols = [_read_volume(p) for p in args.inputs]
    shifted, spec = apply_synthetic_misalignment(vols, args.severity, args.seed)
    out = _out_dir(args.out_dir)
    paths = []
    for p, v in zip(args.inputs, shifted):
        target = out / f"{_stem(p)}.mha"
        write_metaimage(v, target)
        paths.append(str(target))
    write_json({"schema_version": SCHEMA_VERSION, **spec.to_dict()}, out / "misalignment.json")
    paths.append(str(out / "misalignment.json"))
    return EXIT_OK, paths, {"command": "misalign", **spec.to_dict()}


def _load_deformation(path):
    if path is None:
        return Deformation(RigidParams())
    if not Path(path).is_file():
        raise DataError(f"no such file: {path}")
    return read_deformation(path)


def cmd_metrics(args):
    d = _load_deformation(args.deformation)
    if len(args.fixed_mask or []) != len(args.moving_mask or []):
        raise UsageError("--fixed-mask and --moving-mask must be given the same number of times")
    result = {"schema_version": SCHEMA_VERSION, "dice": [], "folding_percent_in_mask": None}
    for fm, mm in zip(args.fixed_mask or [], args.moving_mask or []):
        fixed = _read_mask(fm)
        warped = warp_mask(_read_mask(mm), d, fixed.geometry)
        result["dice"].append({"fixed": str(fm), "moving": str(mm), "dice": dice(fixed, warped)})
    if args.gland_mask:
        gland = _read_mask(args.gland_mask)
        result["folding_percent_in_mask"] = folding_fraction(densify(d, gland.geometry), gland)
    if args.out:
        write_json(result, args.out)
        return EXIT_OK, [str(args.out)], {"command": "metrics", **result}
    return EXIT_OK, [], {"command": "metrics", **result}


def cmd_stats(args):
    if not Path(args.scores).is_file():
        raise DataError(f"no such file: {args.scores}")
    table = read_scores_csv(args.scores)
    outcome = run_hierarchical_plan(table, args.alpha)
    doc = {"schema_version": SCHEMA_VERSION, **outcome.to_dict()}
    paths = []
    if args.out:
        write_json(doc, args.out)
        paths.append(str(args.out))
    if not args.json:
        sys.stdout.write(format_report(outcome))
    return EXIT_OK, paths, {"command": "stats", **doc}


def cmd_phantom(args):
    try:
        spec = PhantomSpec(dims=tuple(args.dims), spacing=args.spacing, seed=args.seed,
                           deformation_amplitude=args.deformation_amplitude,
                           noise_sigma=args.noise_sigma, lesion_count=args.lesions)
        case = generate_phantom(spec)
    except PhantomSpecError as e:
        raise UsageError(str(e)) from None
    out = _out_dir(args.out_dir)
    items = [("t2_like", case.t2_like), ("adc_like", case.adc_like),
             ("gland_mask", case.gland_mask)]
    items += [(f"lesion_t2_{k}", m) for k, m in enumerate(case.lesion_masks_t2)]
    items += [(f"lesion_adc_{k}", m) for k, m in enumerate(case.lesion_masks_adc)]
    if case.ground_truth_deformation is not None:
        items.append(("ground_truth_displacement", case.ground_truth_deformation))
    files = {}
    for name, obj in items:
        write_metaimage(obj, out / f"{name}.mha")
        files[name] = f"{name}.mha"
    manifest = {"schema_version": SCHEMA_VERSION,
                "spec": {"dims": list(spec.dims), "spacing": spec.spacing, "seed": spec.seed,
                         "deformation_amplitude": spec.deformation_amplitude,
                         "noise_sigma": spec.noise_sigma, "lesion_count": spec.lesion_count},
                "lesion_centers_mm": np.asarray(case.lesion_centers).tolist(),
                "files": files}
    write_json(manifest, out / "manifest.json")
    paths = [str(out / f) for f in files.values()] + [str(out / "manifest.json")]
    return EXIT_OK, paths, {"command": "phantom", "files": files}


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seqreg", description="Two-stage NGF registration and ROC statistics.")
    p.add_argument("--version", action="version", version=f"seqreg {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--json", action="store_true", help="print a JSON summary on stdout")
        sp.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    r = sub.add_parser("register", help="rigid + deformable registration of moving onto fixed")
    r.add_argument("--fixed", help="fixed image (.mha)")
    r.add_argument("--moving", help="moving image (.mha)")
    r.add_argument("--mask", help="registration mask on the fixed grid (.mha)")
    r.add_argument("--maps", nargs="*", help="companion maps sharing the moving geometry")
    r.add_argument("--out-dir", required=True)
    r.add_argument("--config", help="registration config JSON")
    r.add_argument("--alpha", type=float, help="regularization weight")
    r.add_argument("--rigid-iters", type=int)
    r.add_argument("--deform-iters", type=int)
    r.add_argument("--grid-size", type=int, nargs=3, metavar=("NX", "NY", "NZ"))
    r.add_argument("--batch", help="JSON manifest {'cases': [{id, fixed, moving, mask, maps}]}")
    r.add_argument("--jobs", type=int, default=1,
                   help="parallel cases for --batch (env SEQREG_THREADS overrides)")
    common(r)
    r.set_defaults(func=cmd_register)

    w = sub.add_parser("warp", help="apply a saved deformation to volumes")
    w.add_argument("--deformation", required=True, help="deformation JSON")
    w.add_argument("--moving", nargs="+", required=True)
    w.add_argument("--ref", required=True, help="image defining the output grid")
    w.add_argument("--out-dir", required=True)
    w.add_argument("--oob-policy", choices=("zero", "clamp"), default="zero")
    common(w)
    w.set_defaults(func=cmd_warp)

    m = sub.add_parser("misalign", help="shift volumes by a seeded random translation")
    m.add_argument("--inputs", nargs="+", required=True)
    m.add_argument("--severity", choices=SEVERITIES, required=True)
    m.add_argument("--seed", type=int, required=True)
    m.add_argument("--out-dir", required=True)
    common(m)
    m.set_defaults(func=cmd_misalign)

    t = sub.add_parser("metrics", help="lesion Dice after warping and folding percentage")
    t.add_argument("--deformation", help="deformation JSON (identity when omitted)")
    t.add_argument("--fixed-mask", action="append", help="fixed-space mask (repeatable)")
    t.add_argument("--moving-mask", action="append", help="moving-space mask (repeatable)")
    t.add_argument("--gland-mask", help="mask for the folding percentage")
    t.add_argument("--out", help="write the metrics JSON here")
    common(t)
    t.set_defaults(func=cmd_metrics)

    s = sub.add_parser("stats", help="AUROC, DeLong tests and the gated Holm hierarchy")
    s.add_argument("--scores", required=True, help="scores CSV")
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--out", help="write the outcome JSON here")
    common(s)
    s.set_defaults(func=cmd_stats)

    h = sub.add_parser("phantom", help="generate a synthetic two-contrast case")
    h.add_argument("--out-dir", required=True)
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("--dims", type=int, nargs=3, default=[64, 64, 64])
    h.add_argument("--spacing", type=float, default=1.0)
    h.add_argument("--deformation-amplitude", type=float, default=0.0, help="mm")
    h.add_argument("--noise-sigma", type=float, default=0.02)
    h.add_argument("--lesions", type=int, default=2)
    common(h)
    h.set_defaults(func=cmd_phantom)
    return p


def _exit_code_for(e: BaseException) -> int:
    if isinstance(e, UsageError):
        return EXIT_USAGE
    if isinstance(e, (OptimizerAbort, FloatingPointError, np.linalg.LinAlgError, RuntimeError)):
        return EXIT_NUMERIC
    if isinstance(e, (DataError, FormatError, OSError, ValueError, KeyError, json.JSONDecodeError)):
        return EXIT_DATA
    raise e


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        code, paths, summary = args.func(args)
    except Exception as e:
        code = _exit_code_for(e)
        print(f"seqreg {args.command}: {e}", file=sys.stderr)
        if args.json:
            sys.stdout.write(dumps_json({"command": args.command, "exit_code": code,
                                         "error": str(e)}))
        return code
    if args.json:
        sys.stdout.write(dumps_json({**summary, "exit_code": code, "outputs": paths}))
    return code


if __name__ == "__main__":
    sys.exit(main())
