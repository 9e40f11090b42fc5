"""Command-line entry point: ``pointgac <subcommand> ...``.

Exit codes: 0 on success, 1 for bad input (flags, config, files), 2 when a
stage fails at runtime.
"""
import argparse
import contextlib
import logging
import sys

from . import __version__
from . import codebook as cb
from . import training
from .config import ConfigError, RunConfig, load_config
from .diffcore import checkpoint
from .diffcore.checkpoint import CheckpointError
from .fileio import CloudParseError, load_cloud, save_cloud, save_patches
from .geometry import FEATURE_VERSION, segment_cloud
from .transport import PartitionConfig, partition_pipeline

EXIT_OK, EXIT_INVALID, EXIT_FAULT = 0, 1, 2

log = logging.getLogger("pointgac")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; our contract reserves 2 for runtime faults
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _hw(text):
    h, sep, w = text.lower().partition("x")
    if not sep:
        raise argparse.ArgumentTypeError("expected HxW, e.g. 16x32")
    try:
        h, w = int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError("expected HxW, e.g. 16x32") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("H and W must be positive")
    return h, w


def _ratio(text):
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError("mask ratio must lie strictly between 0 and 1")
    return value


def _config_from_args(args):
    cfg = load_config(args.config)
    overrides = {}
    for flag, key in (("grouping", "transport__grouping"), ("mask_ratio", "training__mask_ratio"),
                      ("maintenance", "codebook__maintenance"), ("epochs", "training__epochs"),
                      ("seed", "training__seed"), ("max_steps", "training__max_steps"),
                      ("data_dir", "data__data_dir")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return cfg.replace(**overrides).validate() if overrides else cfg


# -- subcommands -------------------------------------------------------------------


def cmd_segment(args):
    cloud = load_cloud(args.input)
    labeled, seg = segment_cloud(cloud, args.k, args.mu)
    save_cloud(args.output, labeled)
    print(f"{len(cloud)} points, {seg.num_segments} segments, energy {seg.energy:.6g}")


def cmd_partition(args):
    cloud = load_cloud(args.input)
    pcfg = PartitionConfig(grouping=args.grouping, k=args.k, mu=args.mu, patch_size=args.patch_size)
    patches = partition_pipeline(cloud, args.groups, pcfg)
    save_patches(args.output, patches)
    sizes = patches.sizes()
    print(f"{patches.num_patches} patches ({args.grouping}), sizes {sizes.min()}..{sizes.max()}")


def cmd_pretrain(args):
    cfg = _config_from_args(args)

    def progress(info):
        if info["step"] % 20 == 0:
            log.info("step %d loss %.4f", info["step"], info["loss"])

    result = training.pretrain_loop(cfg, out_dir=args.out, progress=progress)
    last = result.metrics[-1]
    print(f"trained {last['step']} steps, final loss {last['loss']:.4f}, "
          f"window dead fraction {result.maintenance[-1]['window_dead_fraction']:.3f}")
    print(f"checkpoint written to {args.out}")


def cmd_probe(args):
    cfg = _config_from_args(args)
    state, _ = training.load_state(args.checkpoint, cfg)
    ds = training.build_dataset(training._data_args(cfg), root=cfg.data.data_dir or None)
    params = state.teacher if args.teacher else state.student
    acc = training.linear_probe(params, ds, cfg)
    print(f"probe accuracy {acc:.4f}")


def cmd_heatmap(args):
    blocks, _, _ = checkpoint.load(args.checkpoint)
    if "codebook.C" not in blocks:
        raise CheckpointError("checkpoint holds no codebook")
    book = cb.Codebook.from_blocks(blocks)
    H, W = args.hw
    if H * W != book.size:
        raise ConfigError(f"--hw {H}x{W} does not cover a codebook of {book.size} codes")
    pgm, csv = cb.utilization_export(book, H, W, args.out)
    print(f"wrote {pgm} and {csv}")


def cmd_gradcheck(args):
    cfg = _config_from_args(args)
    report = training.pipeline_gradcheck(cfg, max_entries=args.max_entries, tolerance=args.tolerance)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_FAULT


# -- parser --------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="pointgac", description="Geometry-aware clustering pretraining for point clouds.")
    parser.add_argument("--version", action="version",
                        version=f"pointgac {__version__} (checkpoint format {checkpoint.FORMAT_VERSION}, "
                                f"feature version {FEATURE_VERSION})")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP threads; 1 gives byte-reproducible outputs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    defaults = RunConfig()

    p = sub.add_parser("segment", help="label a cloud with geometric segments")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--mu", type=float, default=defaults.geometry.mu)
    p.add_argument("--k", type=int, default=defaults.geometry.k)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("partition", help="split a cloud into patches")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--groups", type=int, default=defaults.transport.num_patches)
    p.add_argument("--grouping", choices=("gap", "knn"), default="gap")
    p.add_argument("--mu", type=float, default=defaults.geometry.mu)
    p.add_argument("--k", type=int, default=defaults.geometry.k)
    p.add_argument("--patch-size", type=int, default=defaults.transport.patch_size)
    p.set_defaults(func=cmd_partition)

    def run_options(p):
        p.add_argument("--config", default=None, help="INI-style config file")
        p.add_argument("--grouping", choices=("gap", "knn"))
        p.add_argument("--mask-ratio", type=_ratio)
        p.add_argument("--maintenance", choices=("meaningful", "random", "off"))
        p.add_argument("--epochs", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--data-dir")

    p = sub.add_parser("pretrain", help="run teacher-student pretraining")
    run_options(p)
    p.add_argument("--out", required=True)
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="nearest-centroid probe on frozen encoder features")
    run_options(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--teacher", action="store_true", help="probe the teacher encoder instead")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("heatmap", help="export codebook utilization as PGM + CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--hw", type=_hw, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full student loss")
    run_options(p)
    p.add_argument("--max-entries", type=int, default=None,
                   help="probe at most this many coordinates per parameter block")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("pointgac: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        with _thread_limit(args.threads):
            code = args.func(args)
    except (ConfigError, CloudParseError, CheckpointError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"pointgac: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except training.TrainingFault as exc:
        print(f"pointgac: fault: {exc} (state dumped to {exc.dump_path})", file=sys.stderr)
        return EXIT_FAULT
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime fault
        log.debug("fault", exc_info=True)
        print(f"pointgac: fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAULT
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
