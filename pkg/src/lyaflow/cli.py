"""Command-line entry point.

Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure, 5 I/O error.
"""

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict

import numpy as np

from . import __doc__ as PACKAGE_DOC, __version__
from .volume import HU_MAX, HU_MIN, read_vol, write_vol

log = logging.getLogger("lyaflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5


# -- reporting helpers ----------------------------------------------------


def slice_to_pgm_bytes(sl):
    """Map HU [-100, 1100] linearly to 0..255 and encode as binary PGM."""
    scaled = (np.clip(sl, HU_MIN, HU_MAX) - HU_MIN) * (255.0 / (HU_MAX - HU_MIN))
    pix = np.rint(scaled).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    magic, dims, maxval, rest = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)


def pgm_to_hu(pix):
    return pix.astype(np.float64) * ((HU_MAX - HU_MIN) / 255.0) + HU_MIN


def dump_slices(vol, out_prefix):
    """Write the three central orthogonal slices as ``<prefix>_{ax0,ax1,ax2}.pgm``."""
    paths = []
    for axis in range(3):
        sl = np.take(vol, vol.shape[axis] // 2, axis=axis)
        path = f"{out_prefix}_ax{axis}.pgm"
        with open(path, "wb") as fh:
            fh.write(slice_to_pgm_bytes(sl))
        paths.append(path)
    return paths


def record_run(out_dir, command, args, config=None, seed=None, wall_s=None):
    """Append an entry to ``<out_dir>/run_manifest.json``."""
    path = os.path.join(out_dir, "run_manifest.json")
    entries = []
    if os.path.exists(path):
        with open(path) as fh:
            entries = json.load(fh)
    import scipy
    import torch

    entries.append(
        {
            "command": command,
            "argv": {k: v for k, v in vars(args).items() if k != "func"},
            "config": config,
            "seed": seed,
            "versions": {
                "lyaflow": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "torch": torch.__version__,
            },
            "wall_s": wall_s,
        }
    )
    with open(path, "w") as fh:
        json.dump(entries, fh, indent=1, default=str)


# -- subcommands ----------------------------------------------------------


def cmd_generate(args):
    from .phantom import build_corpus

    t0 = time.time()
    mix = tuple(float(x) for x in args.mix.split(","))
    m = build_corpus(args.n_base, mix, args.out, args.variants, args.seed, args.shape, args.deform_scale)
    record_run(args.out, "generate", args, seed=args.seed, wall_s=time.time() - t0)
    print(f"wrote {len(m.phantoms)} phantoms x {args.variants} variants to {args.out}")


def cmd_fit_teacher(args):
    from .losses import resection_weight
    from .registration import RegistrationConfig, fit_teacher

    d5, _ = read_vol(args.pair[0])
    y1, _ = read_vol(args.pair[1])
    W = resection_weight(d5, args.sigma, args.tau_hu).W if args.weighted else None
    cfg = RegistrationConfig(iters=args.iters, lambda_smooth=args.lambda_smooth, weight_map=W)
    svf, rep = fit_teacher(d5, y1, cfg)
    write_vol(args.out, svf, role="svf")
    report = {k: v for k, v in rep.as_dict().items() if k != "loss_history"}
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report, fh, indent=1)
    print(json.dumps(report))


def cmd_fit_teachers(args):
    from .ablation import fit_corpus_teachers
    from .phantom import Manifest

    m = Manifest.load(os.path.join(args.data, "manifest.json"))
    n = fit_corpus_teachers(args.data, args.out, m, args.variants, args.iters)
    print(f"fitted {n} teachers into {args.out}")


def _load_manifest(args):
    from .phantom import Manifest

    m = Manifest.load(os.path.join(args.data, "manifest.json"))
    if args.split_seed is not None:
        m = m.resplit(args.split_seed)
    return m


def cmd_train(args):
    from .ablation import load_split, load_teachers
    from .trainer import TrainConfig, make_net, train

    cfg = TrainConfig.from_file(args.config)
    manifest = _load_manifest(args)
    dataset, _ = load_split(args.data, manifest, args.variants if cfg.use_aug else 1)
    teachers = {}
    if cfg.uses_teacher:
        if not args.teachers:
            raise ValueError("--teachers is required when a teacher term is enabled")
        teachers = load_teachers(args.teachers, dataset, manifest)
    t0 = time.time()
    result = train(make_net(cfg), dataset, teachers, cfg, out_dir=args.out)
    record_run(args.out, "train", args, config=asdict(cfg), seed=cfg.seed, wall_s=time.time() - t0)
    print(f"best epoch {result.best_epoch}: val mid-slab bone MAE {result.best_metric:.3f} HU")


def cmd_infer(args):
    from .ode import infer
    from .student import load_checkpoint

    net = None if args.identity else load_checkpoint(args.ckpt)[0]
    predict = (lambda x: x.copy()) if net is None else (lambda x: infer(net, x, args.step, args.solver))
    if args.input:
        d5, header = read_vol(args.input)
        write_vol(args.out, predict(d5), spacing_mm=header["spacing_mm"])
        return
    manifest = _load_manifest(args)
    os.makedirs(args.out, exist_ok=True)
    for p in manifest.phantoms:
        if args.split != "all" and p["split"] != args.split:
            continue
        d5, header = read_vol(os.path.join(args.data, p["id"], f"{p['variants'][0]['id']}_d5.vol"))
        write_vol(os.path.join(args.out, f"{p['id']}_pred.vol"), predict(d5), spacing_mm=header["spacing_mm"])
    record_run(args.out, "infer", args)


def cmd_evaluate(args):
    from .metrics import METRIC_CONFIG, METRIC_FIELDS, evaluate_pair, summarize
    from .phantom import Manifest

    manifest = Manifest.load(args.manifest)
    rows = []
    for p in manifest.phantoms:
        pred_path = os.path.join(args.pred_dir, f"{p['id']}_pred.vol")
        if not os.path.exists(pred_path):
            continue
        pred, _ = read_vol(pred_path)
        truth, _ = read_vol(os.path.join(args.truth_dir, p["id"], f"{p['variants'][0]['id']}_y1.vol"))
        rows.append((p["id"], evaluate_pair(pred, truth)))
    if not rows:
        raise ValueError(f"no predictions found in {args.pred_dir}")
    mean, std = summarize([r for _, r in rows])
    with open(args.out, "w", newline="") as fh:
        for k, v in METRIC_CONFIG.items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh)
        w.writerow(("phantom",) + METRIC_FIELDS)
        for pid, row in rows:
            w.writerow((pid,) + tuple(f"{getattr(row, f):.4f}" for f in METRIC_FIELDS))
        w.writerow(("mean+-std",) + tuple(f"{mean[f]:.4f}+-{std[f]:.4f}" for f in METRIC_FIELDS))
    print(f"evaluated {len(rows)} phantoms: mid-slab bone MAE {mean['mid_mae_bone']:.2f} HU")


def cmd_ablate(args):
    from .ablation import GRID, AblationSettings, check_ordering, run_grid, summary_table
    from .trainer import TrainConfig

    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    configs = tuple(args.configs.split(",")) if args.configs else tuple(GRID)
    unknown = set(configs) - set(GRID)
    if unknown:
        raise ValueError(f"unknown configurations: {sorted(unknown)}")
    settings = AblationSettings(
        seeds=tuple(int(s) for s in args.seeds.split(",")),
        n_variants=args.variants,
        teacher_iters=args.teacher_iters,
        configs=configs,
    )
    t0 = time.time()
    report = run_grid(args.data, args.teachers, args.out, cfg, settings)
    lines = summary_table(report)
    with open(os.path.join(args.out, "ablation.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    for a, op, b, ma, mb, ok in check_ordering(report):
        if ma is not None:
            print(f"{'PASS' if ok else 'FAIL'} {a} ({ma:.2f}) {op} {b} ({mb:.2f})")
    record_run(args.out, "ablate", args, config=asdict(cfg), wall_s=time.time() - t0)


def cmd_dump_slices(args):
    vol, _ = read_vol(args.vol)
    for path in dump_slices(vol, args.out_prefix):
        print(path)


def cmd_selftest(args):
    from .selftest import run_selftest

    return EXIT_OK if run_selftest() else EXIT_NUMERIC


# -- parser ---------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="lyaflow", description=PACKAGE_DOC)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="build a synthetic phantom corpus")
    p.add_argument("--n-base", type=int, default=32)
    p.add_argument("--mix", default="0.6,0.2,0.2", help="union,partial,nonunion fractions")
    p.add_argument("--variants", type=int, default=41)
    p.add_argument("--shape", type=int, default=24)
    p.add_argument("--deform-scale", type=float, default=1.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit-teacher", help="fit a teacher SVF for one pair")
    p.add_argument("--pair", nargs=2, required=True, metavar=("D5", "Y1"))
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--iters", type=int, default=150)
    p.add_argument("--lambda-smooth", type=float, default=0.1)
    p.add_argument("--weighted", action="store_true", help="use the resection-aware bone weight")
    p.add_argument("--sigma", type=float, default=6.0)
    p.add_argument("--tau-hu", type=float, default=300.0)
    p.set_defaults(func=cmd_fit_teacher)

    p = sub.add_parser("fit-teachers", help="fit teachers for a whole corpus (cached)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", type=int, default=41)
    p.add_argument("--iters", type=int, default=60)
    p.set_defaults(func=cmd_fit_teachers)

    p = sub.add_parser("train", help="train a student")
    p.add_argument("--config", required=True, help="TOML or JSON with TrainConfig keys")
    p.add_argument("--data", required=True)
    p.add_argument("--teachers")
    p.add_argument("--out", required=True)
    p.add_argument("--variants", type=int, default=41)
    p.add_argument("--split-seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict Year-1 volumes")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--identity", action="store_true", help="predict Day-5 unchanged (baseline)")
    p.add_argument("--in", "--input", dest="input", help="single Day-5 .vol (otherwise --data)")
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--split-seed", type=int)
    p.add_argument("--solver", default="rk4", choices=("euler", "rk4"))
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="metrics of predictions against Year-1")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--truth-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the ablation grid and print the combined table")
    p.add_argument("--data", required=True)
    p.add_argument("--teachers", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="base TrainConfig (flags are overridden per row)")
    p.add_argument("--configs", help="comma-separated subset of the grid")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--variants", type=int, default=41)
    p.add_argument("--teacher-iters", type=int, default=60)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-slices", help="write central orthogonal slices as PGM")
    p.add_argument("--vol", required=True)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_dump_slices)

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    p.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        code = args.func(args)
    except ArithmeticError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, RuntimeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
