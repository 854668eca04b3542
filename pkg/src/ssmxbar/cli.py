"""Command-line entry point.

Every command writes into ``--out-dir`` (default: the config's output_dir),
refuses to overwrite existing files and leaves a ``manifest-<command>.json``
with the config hash, seeds and artifact checksums.

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime/numeric error.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import harness as hx
from .audio import DatasetManifest, build_dataset, dataset_to_bytes, load_dataset
from .crossbar import DeviceModel, IDEAL_PERIPHERY, deploy_model, load_programs
from .errors import ConfigError, SsmXbarError
from .train import predict_quantized, train

log = logging.getLogger("ssmxbar")


def _global_options(parser, suppress=False):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="YAML or JSON experiment config")
    parser.add_argument("--seed", type=int, default=d, help="override every seed in the config")
    parser.add_argument("--out-dir", default=d, help="output directory (default: config output_dir)")
    parser.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1,
                        help="parallel crossbar evaluations")
    parser.add_argument("--ci-profile", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="reduced instantiation counts for quick runs")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssmxbar", description=__doc__.splitlines()[0])
    _global_options(parser)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common])

    p = add("ingest", "decode WAV files listed in a manifest into a dataset cache")
    p.add_argument("--manifest", required=True, help="CSV with columns path,label,split")

    p = add("synth", "generate the synthetic two-class dataset cache")
    p.add_argument("--n-per-class", "--n", type=int, default=None)

    p = add("train", "quantization-aware training of one model")
    p.add_argument("--data", help="dataset cache (.npz); default: config data section")
    p.add_argument("--bits", type=int, default=None, help="kernel bit width (default: config)")
    p.add_argument("--f-scale", default=None, help="A range: number or 'dynamic'")
    p.add_argument("--name", default="model", help="checkpoint file stem")

    p = add("sweep-quant", "bit width x dynamic range sweep")
    p.add_argument("--data")
    p.add_argument("--bits", default=None, help="comma-separated bit widths (default: config sweep)")
    p.add_argument("--fscales", default=None, help="comma-separated ranges, numbers or 'dynamic'")

    p = add("map", "map a checkpoint to crossbar conductance programs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="calibration data (default: config data section)")

    p = add("deploy", "evaluate crossbar deployments of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--sigma", type=float, default=None, help="write noise in uS (default: config)")
    p.add_argument("--ideal", action="store_true", help="noise-free devices and periphery")
    p.add_argument("--seeds", type=int, default=None, help="number of device instantiations (default: config)")

    p = add("noise-sweep", "accuracy distribution over write noise levels")
    p.add_argument("--checkpoint", action="append", default=[], metavar="BITS=PATH",
                   help="trained checkpoint per bit width (repeatable)")
    p.add_argument("--data")

    p = add("pipeline", "ingest/synth, train, map, ideal and noisy deployment")
    p.add_argument("--data")

    p = add("export-heatmap", "conductance grid CSV plus block overlay JSON")
    p.add_argument("--program", required=True)
    p.add_argument("--kernel", type=int, default=0)
    return parser


def _config(args) -> hx.ExperimentConfig:
    cfg = hx.load_config(args.config) if args.config else hx.default_config()
    return cfg.with_overrides(seed=args.seed, output_dir=args.out_dir)


def _data(cfg, path):
    return load_dataset(path) if path else hx.load_data(cfg)


def _checkpoint_map(items):
    out = {}
    for item in items:
        bits, sep, path = item.partition("=")
        if not sep or not bits.strip().isdigit():
            raise ConfigError(f"--checkpoint expects BITS=PATH, got {item!r}")
        out[int(bits)] = path
    return out


def cmd_ingest(cfg, args, out):
    ds = build_dataset(DatasetManifest.read_csv(args.manifest))
    out.write_bytes("dataset.npz", dataset_to_bytes(ds))
    out.write_json("dataset_counts.json", ds.class_counts())


def cmd_synth(cfg, args, out):
    if args.n_per_class is not None:
        d = cfg.to_dict()
        d["data"] = {**d["data"], "source": "synthetic", "n_per_class": args.n_per_class}
        cfg = hx.ExperimentConfig.from_dict(d)
    ds = hx.load_data(cfg)
    out.write_bytes("dataset.npz", dataset_to_bytes(ds))
    out.write_json("dataset_counts.json", ds.class_counts())


def cmd_train(cfg, args, out):
    ds = _data(cfg, args.data)
    bits = cfg.quant["kernel_bits"] if args.bits is None else args.bits
    quant = cfg.quant_map(kernel_bits=bits, a_fscale=args.f_scale)
    out.check_free(f"{args.name}.json", f"{args.name}_report.json")
    p, report = train(ds, cfg.train_config(ds.x_train.shape[1], quant))
    out.write_text(f"{args.name}.json", hx.checkpoint_json(p, quant))
    out.write_text(f"{args.name}_report.json", report.to_json() + "\n")
    log.info("test accuracy %.4f (best epoch %d)", report.final_test_accuracy, report.best_epoch)


def _csv_list(text, conv):
    try:
        return [conv(v.strip()) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"bad list {text!r}: {e}") from None


def _fscale(v):
    return v if v == "dynamic" else float(v)


def cmd_sweep_quant(cfg, args, out):
    if args.bits is not None or args.fscales is not None:
        d = cfg.to_dict()
        if args.bits is not None:
            d["sweep"]["bits"] = _csv_list(args.bits, int)
        if args.fscales is not None:
            d["sweep"]["f_scales"] = _csv_list(args.fscales, _fscale)
        cfg = hx.ExperimentConfig.from_dict(d)
    out.check_free("sweep_quant.csv")
    table = hx.run_quant_sweep(cfg, _data(cfg, args.data))
    out.write_text("sweep_quant.csv", table.to_csv())


def cmd_map(cfg, args, out):
    p, quant = hx.load_checkpoint_file(args.checkpoint)
    ds = _data(cfg, args.data) if (args.data or cfg.periphery["calibrate"]) else None
    programs, ranges = hx._deployment_inputs(cfg, p, quant, ds)
    out.write_text("program.json", hx.programs_json(programs, {"ranges": ranges.tolist()}))


def cmd_deploy(cfg, args, out):
    p, quant = hx.load_checkpoint_file(args.checkpoint)
    ds = _data(cfg, args.data)
    out.check_free("deploy.csv")
    table = hx.ResultTable(cfg.experiment_id)
    sw = float(np.mean(predict_quantized(p, quant, ds.x_test) == ds.y_test))
    table.append("software_accuracy", sw)
    if args.ideal:
        programs, ranges = hx._deployment_inputs(cfg, p, quant, ds)
        m = deploy_model(p, DeviceModel(), IDEAL_PERIPHERY, 0, quant, programs=programs, ranges=ranges)
        table.append("ideal_accuracy", m.accuracy(ds.x_test, ds.y_test))
    else:
        sigma = float(cfg.device["sigma"] if args.sigma is None else args.sigma)
        bits = quant["A"].bits if "A" in quant and quant["A"].enabled else None
        n = cfg.instantiations(args.ci_profile) if args.seeds is None else args.seeds
        if n < 1:
            raise ConfigError("--seeds must be >= 1")
        accs = hx.evaluate_instances(cfg, p, quant, ds, sigma, n, bits, args.threads)
        for i, a in enumerate(accs):
            table.append("accuracy", a, bits=bits, sigma=sigma, seed=i)
    out.write_text("deploy.csv", table.to_csv())


def cmd_noise_sweep(cfg, args, out):
    out.check_free("noise_raw.csv", "noise_summary.csv")
    checkpoints = _checkpoint_map(args.checkpoint) if args.checkpoint else None
    dataset = load_dataset(args.data) if args.data else None
    table, summary = hx.run_noise_sweep(cfg, checkpoints, dataset, args.ci_profile, args.threads)
    out.write_text("noise_raw.csv", table.to_csv())
    out.write_text("noise_summary.csv", hx.summary_csv(summary))


def cmd_pipeline(cfg, args, out):
    dataset = load_dataset(args.data) if args.data else None
    summary = hx.run_full_pipeline(cfg, out, dataset, args.ci_profile, args.threads)
    log.info("software %.4f, ideal crossbar %.4f, noisy median %.4f", summary["software_accuracy"],
             summary["ideal_accuracy"], summary["noisy_accuracy"]["median"])


def cmd_export_heatmap(cfg, args, out):
    programs, _ = load_programs(args.program)
    if not 0 <= args.kernel < len(programs):
        raise ConfigError(f"--kernel must be in [0, {len(programs)})")
    hx.export_heatmap(programs[args.kernel], out, f"heatmap_kernel{args.kernel}")


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train": cmd_train,
    "sweep-quant": cmd_sweep_quant,
    "map": cmd_map,
    "deploy": cmd_deploy,
    "noise-sweep": cmd_noise_sweep,
    "pipeline": cmd_pipeline,
    "export-heatmap": cmd_export_heatmap,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = _config(args)
        out = hx.RunDir(cfg.output_dir)
        started = hx._now()
        COMMANDS[args.command](cfg, args, out)
        if args.command != "pipeline":
            out.write_manifest(args.command, cfg, started, {"argv": list(sys.argv[1:] if argv is None else argv)})
    except SsmXbarError as exc:
        print(f"ssmxbar {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"ssmxbar {args.command}: numeric error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
