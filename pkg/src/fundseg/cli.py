"""Command-line entry point: ``fundseg <subcommand> ...``.

Subcommands and the files they read or write:

gen-data      cohort directory: images/, masks/, contours/, optional experts/,
              manifest.tsv and labels.tsv
fuse          expert contour files -> fused contour, mask, dispersion table
train-toy     cohort directory -> checkpoint, training log, holdout predictions
eval          prediction and ground-truth mask directories -> metrics table
grade         disc/cup masks + label file -> CDR table and grading report
skip-compare  trains T1/T2/T3 on one seed -> per-iteration loss curve table

Any library error exits with status 1 and a single ``fundseg: error:`` line.
"""

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import contours as ct
from . import grading, io, metrics, synth
from . import maskhead as mh
from . import training as tr
from .errors import FormatError, FundsegError

log = logging.getLogger("fundseg")

MANIFEST_HEADER = ("case_id", "seed", "true_cdr", "label", "image",
                   "disc_mask", "cup_mask", "disc_contour", "cup_contour")
LABEL_HEADER = ("case_id", "label")
METRICS_HEADER = ("name",) + metrics.METRIC_NAMES
CDR_HEADER = ("case_id", "disc_diameter", "cup_diameter", "cdr", "grade", "label", "cup_exceeds_disc")
GRADING_HEADER = ("sensitivity", "specificity", "accuracy", "tp", "fp", "tn", "fn")
DISPERSION_HEADER = ("angle_index", "theta", "radial_mad")


def _map(fn, items, workers):
    items = list(items)
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# gen-data

def _write_case(root, case, experts, amplitude):
    cid = case.case_id
    rel = {
        "image": f"images/{cid}.pgm",
        "disc_mask": f"masks/{cid}_disc.pgm",
        "cup_mask": f"masks/{cid}_cup.pgm",
        "disc_contour": f"contours/{cid}_disc.txt",
        "cup_contour": f"contours/{cid}_cup.txt",
    }
    io.write_image(root / rel["image"], case.image)
    io.write_mask(root / rel["disc_mask"], case.disc_mask)
    io.write_mask(root / rel["cup_mask"], case.cup_mask)
    io.write_contour(root / rel["disc_contour"], case.disc_contour)
    io.write_contour(root / rel["cup_contour"], case.cup_contour)
    for part, contour in (("disc", case.disc_contour), ("cup", case.cup_contour)):
        if not experts:
            break
        # the cup is small, so its perturbation shrinks with it
        amp = amplitude * (1.0 if part == "disc" else case.true_cdr)
        seed = synth.mix64(case.seed, 1 if part == "disc" else 2)
        for k, c in enumerate(synth.expert_annotations(contour, experts, seed, amp), 1):
            io.write_contour(root / f"experts/{cid}_{part}_expert{k}.txt", c)
    return (cid, case.seed, case.true_cdr, case.label, rel["image"], rel["disc_mask"],
            rel["cup_mask"], rel["disc_contour"], rel["cup_contour"])


def cmd_gen_data(args):
    root = Path(args.out)
    for sub in ("images", "masks", "contours") + (("experts",) if args.experts else ()):
        (root / sub).mkdir(parents=True, exist_ok=True)
    spec = synth.SynthSpec(size=args.size, noise_sigma=args.noise)
    spec.validate()
    cases = synth.gen_cohort(spec, args.n, args.seed)
    rows = _map(lambda c: _write_case(root, c, args.experts, args.amplitude), cases, args.workers)
    io.write_table(root / "manifest.tsv", MANIFEST_HEADER, rows)
    io.write_table(root / "labels.tsv", LABEL_HEADER, [(r[0], r[3]) for r in rows])
    print(f"wrote {len(rows)} cases to {root} (prevalence {synth.prevalence(cases):.3f})")
    return 0


_MANIFEST_TYPES = {"seed": int, "true_cdr": float, "label": int}


def load_cohort(root):
    """Read a gen-data directory back into SynthCase records."""
    root = Path(root)
    rows = io.read_table(root / "manifest.tsv", _MANIFEST_TYPES, MANIFEST_HEADER)
    if not rows:
        raise FormatError(f"{root / 'manifest.tsv'}: no cases listed")
    cases = []
    for r in rows:
        cases.append(synth.SynthCase(
            case_id=r["case_id"],
            image=io.read_image(root / r["image"]),
            disc_contour=io.read_contour(root / r["disc_contour"]),
            cup_contour=io.read_contour(root / r["cup_contour"]),
            disc_mask=io.read_mask(root / r["disc_mask"]),
            cup_mask=io.read_mask(root / r["cup_mask"]),
            true_cdr=r["true_cdr"], label=r["label"], seed=r["seed"]))
    return cases


# --------------------------------------------------------------------------
# fuse

def _fuse_group(name, files, out_dir, args):
    contours = [io.read_contour(f) for f in files]
    fused = ct.median_fuse(contours, args.n_angles)
    io.write_contour(out_dir / f"{name}_fused.txt", fused.contour)
    th = ct.angles(args.n_angles)
    io.write_table(out_dir / f"{name}_dispersion.tsv", DISPERSION_HEADER,
                   [(k, float(th[k]), float(d)) for k, d in enumerate(fused.dispersion)])
    if args.width and args.height:
        io.write_mask(out_dir / f"{name}_fused.pgm", ct.rasterize(fused.contour, args.width, args.height))
    return name, len(files), float(np.max(fused.dispersion))


def cmd_fuse(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.files:
        groups = {args.name: [Path(f) for f in args.files]}
    elif args.dir:
        groups = io.expert_files(args.dir)
        if not groups:
            raise FormatError(f"{args.dir}: no <name>_expertN.txt files found")
    else:
        raise FundsegError("fuse needs expert contour files or --dir")
    results = _map(lambda kv: _fuse_group(kv[0], kv[1], out_dir, args), groups.items(), args.workers)
    for name, n, disp in results:
        print(f"{name}: fused {n} experts, max dispersion {disp:.4f}")
    return 0


# --------------------------------------------------------------------------
# training

def _placed_cases(cases, max_dim):
    """Resize/pad every case onto a max_dim x max_dim grid; keep placements."""
    out, placements = [], []
    for c in cases:
        if c.image.shape == (max_dim, max_dim):
            out.append(c)
            placements.append(None)
            continue
        img, pl = tr.resize_pad(c.image, max_dim)
        masks = [np.where(tr.resize_pad(m.astype(float), max_dim)[0].data > 127, 255, 0).astype(np.uint8)
                 for m in (c.disc_mask, c.cup_mask)]
        out.append(synth.SynthCase(c.case_id, img.data, c.disc_contour, c.cup_contour,
                                   masks[0], masks[1], c.true_cdr, c.label, c.seed))
        placements.append(pl)
    return out, placements


def _train_config(args, skip):
    kw = {}
    if args.passes is not None:
        kw["passes"] = args.passes
    if args.lr is not None:
        kw["learning_rate"] = args.lr
    if args.batch_size is not None:
        kw["batch_size"] = args.batch_size
    cfg = tr.TrainConfig.toy(skip_type=skip, seed=args.seed, iterations=args.iterations,
                             strict_paper_loss=args.strict_paper_loss,
                             model=mh.MaskHeadConfig(input_size=args.max_dim, skip_type=skip), **kw)
    if args.long_schedule:
        cfg = tr.with_schedule(cfg, 0.7, 0.01, 10)
    return tr.with_schedule(cfg, args.alpha0, args.alpha_step, args.alpha_period)


def _cohort_for(args):
    if args.data:
        return load_cohort(args.data)
    return synth.gen_cohort(synth.SynthSpec(size=args.max_dim), args.n, args.seed)


def cmd_train_toy(args):
    cases = _cohort_for(args)
    placed, placements = _placed_cases(cases, args.max_dim)
    cfg = _train_config(args, args.skip)
    model, tlog, (_, _, hold) = tr.train(cfg, placed, log_every=args.log_every)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mh.save_checkpoint(model, out / "model.redh")
    io.write_table(out / "trainlog.tsv", tr.TrainLog.HEADER, tlog.rows())
    by_id = {c.case_id: pl for c, pl in zip(placed, placements)}
    pred_dir = out / "pred"
    pred_dir.mkdir(exist_ok=True)
    x, _ = tr.stack_cases(hold)
    probs = tr.predict(model, x, cfg.eval_batch)
    for case, p in zip(hold, probs):
        masks = mh.predict_mask(p, args.threshold)
        pl = by_id[case.case_id]
        for part, m in zip(("disc", "cup"), masks):
            io.write_mask(pred_dir / f"{case.case_id}_{part}.pgm", m if pl is None else tr.unplace_mask(m, pl))
    io.write_table(out / "holdout.tsv", ("case_id",), [(c.case_id,) for c in hold])
    last = tlog.records[-1]
    print(f"trained {cfg.model.skip_type.name}: {cfg.iterations} iterations, final val loss "
          f"{last.val_loss:.6g}, best iteration {tlog.best_iteration}")
    return 0


def cmd_skip_compare(args):
    cases, _ = _placed_cases(_cohort_for(args), args.max_dim)
    logs = {}
    for skip in mh.SkipType:
        _, tlog, _ = tr.train(_train_config(args, skip), cases, log_every=args.log_every)
        logs[skip] = tlog
    header = ("iteration", "alpha") + tuple(f"{s.name.lower()}_{k}" for s in mh.SkipType
                                              for k in ("train_loss", "val_loss"))
    rows = []
    for i, rec in enumerate(logs[mh.SkipType.T3].records):
        row = [rec.iteration, rec.alpha]
        for s in mh.SkipType:
            r = logs[s].records[i]
            row += [r.train_loss, r.val_loss]
        rows.append(tuple(row))
    io.write_table(args.out, header, rows)
    finals = {s: logs[s].records[-1].val_loss for s in mh.SkipType}
    for s, v in finals.items():
        print(f"{s.name}: final val loss {v:.6g}")
    print("T3 lowest" if finals[mh.SkipType.T3] <= min(finals.values()) else "T3 not lowest")
    return 0


# --------------------------------------------------------------------------
# eval / grade

def cmd_eval(args):
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    names = sorted(p.name for p in pred_dir.glob("*.pgm"))
    if not names:
        raise FormatError(f"{pred_dir}: no .pgm masks found")
    for n in names:
        if not (gt_dir / n).exists():
            raise FormatError(f"{gt_dir / n}: missing ground truth for prediction {n}")
    reports = _map(lambda n: metrics.evaluate(io.read_mask(pred_dir / n), io.read_mask(gt_dir / n)),
                   names, args.workers)
    rows = [(Path(n).stem,) + r.values() for n, r in zip(names, reports)]
    agg = metrics.aggregate(reports)
    rows.append(("mean",) + agg.values())
    io.write_table(args.out, METRICS_HEADER, rows)
    print("\t".join(METRICS_HEADER))
    print("\t".join(["mean"] + [f"{v:.4f}" for v in agg.values()]))
    return 0


def cmd_grade(args):
    masks = Path(args.masks)
    labels = io.read_table(args.labels, {"label": int}, LABEL_HEADER)
    records, pred, truth = [], [], []
    for row in labels:
        cid = row["case_id"]
        disc = io.read_mask(masks / f"{cid}_disc.pgm")
        cup = io.read_mask(masks / f"{cid}_cup.pgm")
        rec = grading.vertical_cdr(disc, cup, args.cdr_threshold)
        records.append((cid, rec.disc_diameter, rec.cup_diameter, rec.cdr, rec.grade.value,
                        row["label"], rec.cup_exceeds_disc))
        pred.append(rec.grade)
        truth.append(row["label"])
    rep = grading.grading_report(pred, truth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_table(out / "cdr.tsv", CDR_HEADER, records)
    values = (rep.sensitivity, rep.specificity, rep.accuracy, rep.tp, rep.fp, rep.tn, rep.fn)
    io.write_table(out / "grading.tsv", GRADING_HEADER, [values])
    print(f"Se {rep.sensitivity:.4f} Sp {rep.specificity:.4f} OCA {rep.accuracy:.4f} "
          f"(tp {rep.tp} fp {rep.fp} tn {rep.tn} fn {rep.fn})")
    return 0


# --------------------------------------------------------------------------

def _train_flags(p):
    p.add_argument("--data", help="gen-data directory (default: generate in memory)")
    p.add_argument("--n", type=int, default=tr.TOY_CASES, help="cases to generate without --data")
    p.add_argument("--iterations", type=int, default=tr.TOY_ITERATIONS)
    p.add_argument("--passes", type=int, help="batch passes per iteration")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha0", type=float, help="initial loss weight")
    p.add_argument("--alpha-step", type=float, help="decrement per period")
    p.add_argument("--alpha-period", type=int, help="iterations per decrement")
    p.add_argument("--long-schedule", action="store_true",
                   help="0.7 decremented by 0.01 every 10 iterations (450-iteration ramp)")
    p.add_argument("--strict-paper-loss", action="store_true",
                   help="add the IoU term itself rather than 1 - IoU")
    p.add_argument("--max-dim", type=int, default=64, help="model input size; inputs are resized and padded")
    p.add_argument("--log-every", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="fundseg", description="Optic disc/cup segmentation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=tr.TOY_CASES)
    p.add_argument("--seed", type=int, default=tr.TOY_SEED)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise", type=float, default=synth.SynthSpec.noise_sigma)
    p.add_argument("--experts", type=int, default=0, help="simulated expert contours per structure")
    p.add_argument("--amplitude", type=float, default=2.0, help="expert radial perturbation (px)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fuse", help="median-fuse expert contours")
    p.add_argument("files", nargs="*")
    p.add_argument("--dir", help="directory of <name>_expertN.txt files")
    p.add_argument("--name", default="contour", help="output base name for explicit files")
    p.add_argument("--out", required=True)
    p.add_argument("--n-angles", type=int, default=360)
    p.add_argument("--width", type=int, default=0)
    p.add_argument("--height", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("train-toy", help="train one mask head")
    _train_flags(p)
    p.add_argument("--seed", type=int, default=tr.TOY_SEED)
    p.add_argument("--skip", choices=("t1", "t2", "t3"), default="t3")
    p.add_argument("--threshold", type=int, default=127, help="binarization level for predictions")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("skip-compare", help="train T1/T2/T3 and tabulate loss curves")
    _train_flags(p)
    p.add_argument("--seed", type=int, default=tr.TOY_SEED)
    p.add_argument("--out", required=True, help="curve table path")
    p.set_defaults(func=cmd_skip_compare)

    p = sub.add_parser("eval", help="metrics of predicted vs ground-truth masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grade", help="vertical CDR grading")
    p.add_argument("--masks", required=True, help="directory of <id>_disc.pgm / <id>_cup.pgm")
    p.add_argument("--labels", required=True)
    p.add_argument("--cdr-threshold", type=float, default=grading.CDR_THRESHOLD)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grade)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or getattr(args, "log_every", 0) else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (FundsegError, OSError) as exc:
        print(f"fundseg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
