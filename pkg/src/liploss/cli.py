"""Command-line entry point: ``liploss <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime fault.
Every command writes only inside its ``--out`` directory.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from . import io
from . import metrics as mt
from . import phantom
from . import pipeline
from .errors import ConfigError, FormatError, LipLossError, ShapeError, TrainingFault, UsageError
from .network import UNetConfig
from .projector import make_angle_set, sinogram

log = logging.getLogger("liploss")

SAMPLE_ENTRIES = ("lambda_input", "mu_input", "mu_truth")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------------
# configs
# ----------------------------------------------------------------------

_SECTIONS = {
    "train": pipeline.TrainConfig,
    "net": UNetConfig,
    "norm": pipeline.NormalizationConfig,
}


def load_run_config(path: str | None, overrides=()) -> tuple[UNetConfig, pipeline.TrainConfig,
                                                              pipeline.NormalizationConfig]:
    items = []
    if path:
        items += io.parse_config_text(Path(path).read_text(), path)
    for i, text in enumerate(overrides, 1):
        items += [(i, k, v) for _, k, v in io.parse_config_text(text, f"--set #{i}")]
    types = {name: io.field_types(cls) for name, cls in _SECTIONS.items()}
    # UNetConfig's channel counts are fixed by the data contract
    for fixed in ("in_channels", "out_channels"):
        types["net"].pop(fixed)
    kwargs = io.apply_config(items, _SECTIONS, types, path or "--set")
    try:
        return (UNetConfig(**kwargs["net"]), pipeline.TrainConfig(**kwargs["train"]),
                pipeline.NormalizationConfig(**kwargs["norm"]))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def render_run_config(net: UNetConfig, train: pipeline.TrainConfig,
                      norm: pipeline.NormalizationConfig) -> str:
    lines = []
    for obj in (train, net, norm):
        for k, v in obj.__dict__.items():
            if k in ("in_channels", "out_channels"):
                continue
            lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def load_ranges(path: str | None) -> phantom.PhantomRanges:
    if not path:
        return phantom.PhantomRanges()
    items = io.parse_config_text(Path(path).read_text(), path)
    types = {"ranges": io.field_types(phantom.PhantomRanges)}
    kwargs = io.apply_config(items, {"ranges": phantom.PhantomRanges}, types, path)["ranges"]
    return phantom.PhantomRanges(**kwargs)


# ----------------------------------------------------------------------
# dataset files
# ----------------------------------------------------------------------

def write_sample(path: Path, pair: phantom.SamplePair) -> None:
    io.write_tensors(path, {
        "lambda_input": pair.lambda_input,
        "mu_input": pair.mu_input,
        "mu_truth": pair.mu_truth,
        "voxel_width": np.asarray(pair.voxel_width),
    })


def read_sample(path: Path, seed: int = 0) -> phantom.SamplePair:
    e = io.read_tensors(path)
    missing = [k for k in SAMPLE_ENTRIES + ("voxel_width",) if k not in e]
    if missing:
        raise FormatError(f"{path}: missing entries {missing}")
    return phantom.SamplePair(e["lambda_input"], e["mu_input"], e["mu_truth"], float(e["voxel_width"]), seed)


def load_dataset(directory) -> tuple[list[io.ManifestRecord], list[phantom.SamplePair]]:
    directory = Path(directory)
    records = io.read_manifest(directory / io.MANIFEST_NAME)
    if not records:
        raise FormatError(f"{directory}: manifest lists no samples")
    return records, [read_sample(directory / r.path, r.seed) for r in records]


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise ConfigError("--n must be at least 1")
    ranges = load_ranges(args.spec_ranges)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(args.n):
        seed = phantom.sample_seed(args.seed, i)
        pair = phantom.make_sample(ranges, seed)
        name = f"sample_{i:05d}.lipt"
        write_sample(out / name, pair)
        records.append(io.ManifestRecord(f"{i:05d}", name, seed))
    io.write_manifest(out / io.MANIFEST_NAME, records)
    print(f"wrote {args.n} samples to {out}")
    return 0


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.arm:
        overrides.append(f"arm = {args.arm}")
    net, train, norm = load_run_config(args.config, overrides)
    _, pairs = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(render_run_config(net, train, norm))
    result = pipeline.train(pairs, net, train, norm, out_dir=out)
    print(f"trained arm {train.arm}: {len(result.rows)} steps, final total loss "
          f"{result.rows[-1]['total']:.6g}; checkpoint {out / 'checkpoint.lipt'}")
    return 0


def _dump_pgms(out: Path, ident: str, truth, pred) -> None:
    if truth.ndim != 2:
        mid = truth.shape[0] // 2
        truth, pred = truth[mid], pred[mid]
    io.write_pgm(out / f"{ident}_mu_truth.pgm", truth)
    io.write_pgm(out / f"{ident}_mu_pred.pgm", pred)
    io.write_pgm(out / f"{ident}_mu_diff.pgm", pred - truth)


def cmd_eval(args) -> int:
    records, pairs = load_dataset(args.data)
    angles = make_angle_set(args.angles)
    if args.pred_source == "model":
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --pred-source is truth or mu-input")
        params, _ = pipeline.load_checkpoint(args.checkpoint)
        model = pipeline.model_from_params(params)
        norm = pipeline.NormalizationConfig(args.sigma, args.mu_scale)
        preds = [pipeline.infer_stitched(model, p, args.patch, args.stride, norm) for p in pairs]
    elif args.pred_source == "truth":
        preds = [p.mu_truth for p in pairs]
    else:
        preds = [p.mu_input for p in pairs]
    truths = [p.mu_truth for p in pairs]
    report = mt.evaluate_report(preds, truths, angles, pairs[0].voxel_width, ids=[r.id for r in records])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv())
    if args.pgm:
        for r, t, p in zip(records, truths, preds):
            _dump_pgms(out, r.id, t, p)
    print(f"mean: " + ", ".join(f"{m} {mt.format_value(report.mean[m])}" for m in mt.METRIC_NAMES))
    return 0


def sinogram_csv(angles, sino: np.ndarray) -> str:
    lines = ["angle," + ",".join(f"bin{j}" for j in range(sino.shape[-1]))]
    for a, row in zip(angles, sino):
        lines.append(mt.format_value(a) + "," + ",".join(mt.format_value(v) for v in row))
    return "\n".join(lines) + "\n"


def read_sinogram_csv(text: str) -> tuple[list[float], np.ndarray]:
    rows = list(csv.reader(text.splitlines()))[1:]
    return [float(r[0]) for r in rows], np.array([[float(v) for v in r[1:]] for r in rows])


def cmd_project(args) -> int:
    entries = io.read_tensors(args.image)
    if args.entry:
        if args.entry not in entries:
            raise FormatError(f"{args.image}: no entry {args.entry!r}")
        image = entries[args.entry]
    elif "mu_truth" in entries:
        image = entries["mu_truth"]
    else:
        image = next(a for a in entries.values() if a.ndim >= 2)
    if image.ndim != 2:
        raise ShapeError(f"project expects a 2D image, got shape {image.shape}")
    width = args.voxel_width
    if width is None:
        width = float(entries["voxel_width"]) if "voxel_width" in entries else 1.0
    angles = make_angle_set(args.angles)
    sino = sinogram(image, angles, width)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sinogram.csv").write_text(sinogram_csv(angles, sino))
    io.write_pgm(out / "sinogram.pgm", sino)
    print(f"wrote {len(angles)} projections of {sino.shape[-1]} bins to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = []
    for s in range(args.seed, args.seed + args.seeds):
        results += gc.run_suite(s, args.size, corrupt=args.corrupt)
    worst = max(r.max_error for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} max_rel_error={r.max_error:.3e}")
    failed = [r.name for r in results if not r.passed]
    print(f"max relative error {worst:.3e} over {len(results)} checks (tolerance {gc.RTOL:g})")
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return 2
    return 0


def cmd_experiment(args) -> int:
    net, train, norm = load_run_config(args.config, args.set or [])
    ranges = load_ranges(args.spec_ranges)
    train_set = [phantom.make_sample(ranges, phantom.sample_seed(args.data_seed, i)) for i in range(args.n_train)]
    test_set = [phantom.make_sample(ranges, phantom.sample_seed(args.data_seed + 1, i)) for i in range(args.n_test)]
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(render_run_config(net, train, norm) + (
        f"# data_seed = {args.data_seed}\n# n_train = {args.n_train}\n# n_test = {args.n_test}\n"
        f"# seeds = {args.seeds}\n"))
    results = []
    lines = ["seed,arm," + ",".join(mt.METRIC_NAMES)]
    for s in seeds:
        res = pipeline.run_arms(train_set, test_set, net, train, s, args.angles, norm)
        results.append(res)
        for arm in pipeline.ARMS:
            rep = res[arm].report
            (out / f"metrics_seed{s}_{arm}.csv").write_text(rep.to_csv())
            (out / f"loss_seed{s}_{arm}.csv").write_text(res[arm].train.loss_csv())
            lines.append(f"{s},{arm}," + ",".join(mt.format_value(rep.mean[m]) for m in mt.METRIC_NAMES))
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    summary = pipeline.summarize(results)
    print(f"median LINMAE reduction {summary['median_linmae_reduction']:.2%}; "
          f"NMAE change (pooled) {summary['pooled_nmae_increase']:+.2%}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="liploss", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate synthetic phantom pairs")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--spec-ranges", help="key = value file overriding PhantomRanges fields")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one arm")
    t.add_argument("--data", required=True)
    t.add_argument("--arm", choices=pipeline.ARMS)
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics of a checkpoint on a dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--angles", type=int, default=4)
    e.add_argument("--out", required=True)
    e.add_argument("--pred-source", choices=("model", "truth", "mu-input"), default="model",
                   help="'truth' evaluates the reference against itself")
    e.add_argument("--patch", type=int)
    e.add_argument("--stride", type=int)
    e.add_argument("--sigma", type=float, default=5.0)
    e.add_argument("--mu-scale", type=float, default=0.15)
    e.add_argument("--pgm", action="store_true", help="dump truth/prediction/difference images")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("project", help="sinogram of an image container")
    pr.add_argument("--image", required=True)
    pr.add_argument("--entry")
    pr.add_argument("--angles", type=int, default=4)
    pr.add_argument("--voxel-width", type=float)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_project)

    c = sub.add_parser("gradcheck", help="finite-difference verification suite")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    c.add_argument("--size", type=int, default=5)
    c.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("experiment", help="IM vs IM+LIP arms over several seeds")
    x.add_argument("--config")
    x.add_argument("--set", action="append", metavar="KEY=VALUE")
    x.add_argument("--spec-ranges")
    x.add_argument("--n-train", type=int, default=200)
    x.add_argument("--n-test", type=int, default=50)
    x.add_argument("--data-seed", type=int, default=1000)
    x.add_argument("--seeds", default="0,1,2")
    x.add_argument("--angles", type=int, default=4)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"liploss: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, LipLossError, TrainingFault) as exc:
        print(f"liploss: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
