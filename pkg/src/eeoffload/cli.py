"""Command-line entry point: ``eeoffload <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data, training
from .distortion import Kind
from .errors import EEOffloadError

log = logging.getLogger("eeoffload")


def _dataset_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", default="shapes-v1", help="builtin name or class-folder root")
    p.add_argument("--seed", type=int, default=7, help="dataset split / generator seed")
    p.add_argument("--classes", type=int, default=3, help="shapes-v1 class count")
    p.add_argument("--per-class", type=int, default=600, help="shapes-v1 images per class")


def _hyper_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-epochs", type=int, default=30)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--train-seed", type=int, default=0)
    p.add_argument("--log", type=Path, help="write line-delimited training records here")


def _splits(args) -> data.DatasetSplits:
    return data.load_dataset(args.dataset, seed=args.seed, classes=args.classes, per_class=args.per_class)


def _hyper(args) -> training.TrainHyper:
    return training.TrainHyper(max_epochs=args.max_epochs, patience_epochs=args.patience, seed=args.train_seed)


class _RecordLog:
    def __init__(self, path: Path | None):
        self.fh = open(path, "a") if path else None

    def __call__(self, rec: dict) -> None:
        line = json.dumps(rec)
        if self.fh:
            self.fh.write(line + "\n")
            self.fh.flush()
        else:
            print(line)

    def close(self):
        if self.fh:
            self.fh.close()


def cmd_train(args) -> int:
    from .model import EarlyExitModel

    splits = _splits(args)
    model = EarlyExitModel.build(len(splits.train.class_names), input_shape=(3, args.input_size, args.input_size),
                                 width=args.width, class_names=splits.train.class_names)
    rec = _RecordLog(args.log)
    try:
        report = training.train_pristine(model, splits, _hyper(args), on_record=rec)
    finally:
        rec.close()
    model.save(args.out)
    print(f"saved {args.out} (best epoch {report.best_epoch}, val loss {report.best_val_loss:.4f})")
    return 0


def cmd_finetune(args) -> int:
    from .model import EarlyExitModel

    model = EarlyExitModel.load(args.input)
    rec = _RecordLog(args.log)
    try:
        report = training.finetune_expert(model, Kind(args.kind), _splits(args), _hyper(args), on_record=rec)
    finally:
        rec.close()
    model.save(args.out or args.input)
    print(f"saved {args.out or args.input} ({args.kind} branches, best epoch {report.best_epoch})")
    return 0


def cmd_calibrate(args) -> int:
    from .model import EarlyExitModel

    model = EarlyExitModel.load(args.input)
    splits = _splits(args)
    sets = training.calibration_sets(splits, [k for k in model.kinds if k is not Kind.PRISTINE], args.calib_seed)
    sets[Kind.PRISTINE] = splits.validation
    temps = training.calibrate_all(model, sets)
    model.save(args.out or args.input)
    for (e, k), t in sorted(temps.items(), key=lambda kv: (kv[0][1].code, kv[0][0])):
        print(f"exit {e} {k.value}: T={t:.4f}")
    return 0


def cmd_train_dc(args) -> int:
    from . import classifier as dc

    splits = _splits(args)
    images, codes, _ = dc.distortion_labelled(splits.train, args.dc_seed, limit=args.limit)
    vimages, vcodes, _ = dc.distortion_labelled(splits.validation, args.dc_seed + 1)
    clf = dc.train_classifier(images, codes, vimages, vcodes,
                              dc.ClassifierHyper(max_epochs=args.max_epochs, seed=args.dc_seed))
    clf.save(args.out)
    print(f"saved {args.out}")
    return 0


def cmd_eval_dc(args) -> int:
    from . import classifier as dc

    clf = dc.DistortionClassifier.load(args.classifier)
    splits = _splits(args)
    images, codes, _ = dc.distortion_labelled(splits.test, args.dc_seed)
    matrix = dc.confusion_matrix(codes, clf.predict_codes(images))
    text = dc.confusion_csv(matrix)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def _profile(args):
    from .runtime import netem

    extra = netem.load_profiles(args.profiles_file) if args.profiles_file else {}
    if args.profile == "custom":
        if args.throughput_bps is None or args.rtt_ms is None:
            raise SystemExit("--profile custom needs --throughput-bps and --rtt-ms")
        return netem.NetworkProfile("custom", args.throughput_bps, args.rtt_ms)
    return netem.get_profile(args.profile, extra)


def cmd_serve_cloud(args) -> int:
    from .model import EarlyExitModel
    from .runtime.services import CloudService
    from .runtime.transport import HttpCloudServer, TcpCloudServer

    model = EarlyExitModel.load(args.model).finalize()
    cloud = CloudService(model, virtual=not args.wall_clock)
    server = (HttpCloudServer if args.http else TcpCloudServer)(cloud, args.listen)
    print(f"cloud serving model {model.model_id} on {server.address} ({'http' if args.http else 'tcp'})", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def cmd_serve_edge(args) -> int:
    from .classifier import DistortionClassifier
    from .model import EarlyExitModel
    from .runtime.netem import VirtualClock, WallClock
    from .runtime.services import EdgeService, Mode
    from .runtime.transport import HttpEdgeServer, HttpTransport, TcpTransport

    model = EarlyExitModel.load(args.model).finalize()
    mode = Mode(args.mode)
    clf = DistortionClassifier.load(args.classifier) if mode is Mode.EXPERT else None
    transport = HttpTransport(args.cloud) if args.http else TcpTransport(args.cloud)
    clock = WallClock() if args.wall_clock else VirtualClock()
    edge = EdgeService(model, transport, _profile(args), args.p_tar, mode, clf, clock=clock,
                       jitter_ms=args.jitter_ms, seed=args.jitter_seed)
    server = HttpEdgeServer(edge, args.listen)
    print(f"edge serving on http://{server.address}/v1/infer -> cloud {args.cloud}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def cmd_sweep(args) -> int:
    from .harness.config import load_config
    from .harness.sweep import run_sweep

    cfg = load_config(args.config)
    if args.out:
        cfg.output = str(args.out)
    out = run_sweep(cfg, progress=print)
    print(f"wrote {out.csv_path}, {out.trace_path} and {len(out.figures)} figures")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eeoffload", description="Early-exit edge/cloud offloading with expert branches")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train backbone and pristine branches")
    _dataset_args(p)
    _hyper_args(p)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--input-size", type=int, default=32)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("finetune", help="fit expert branches over the frozen backbone")
    _dataset_args(p)
    _hyper_args(p)
    p.add_argument("--kind", required=True, choices=["blur", "noise"])
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("calibrate", help="fit per-branch temperatures on validation data")
    _dataset_args(p)
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--calib-seed", type=int, default=3)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("train-dc", help="train the distortion classifier")
    _dataset_args(p)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--limit", type=int, default=2400, help="source training images (each used once per kind)")
    p.add_argument("--max-epochs", type=int, default=12)
    p.add_argument("--dc-seed", type=int, default=1)
    p.set_defaults(fn=cmd_train_dc)

    p = sub.add_parser("eval-dc", help="confusion matrix of the distortion classifier on the test split")
    _dataset_args(p)
    p.add_argument("--classifier", required=True, type=Path)
    p.add_argument("--out", type=Path, help="also write the CSV here")
    p.add_argument("--dc-seed", type=int, default=5)
    p.set_defaults(fn=cmd_eval_dc)

    p = sub.add_parser("serve-cloud", help="serve the tail of the model")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--listen", default="127.0.0.1:8600")
    p.add_argument("--http", action="store_true", help="HTTP POST /v1/infer-tail instead of raw TCP")
    p.add_argument("--wall-clock", action="store_true", help="report measured instead of modelled compute time")
    p.set_defaults(fn=cmd_serve_cloud)

    p = sub.add_parser("serve-edge", help="serve the device half over HTTP at /v1/infer")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--classifier", type=Path)
    p.add_argument("--cloud", required=True, help="host:port of serve-cloud")
    p.add_argument("--http", action="store_true", help="talk HTTP to the cloud")
    p.add_argument("--listen", default="127.0.0.1:8601")
    p.add_argument("--profile", default="sa-east-1")
    p.add_argument("--profiles-file", type=Path)
    p.add_argument("--throughput-bps", type=float)
    p.add_argument("--rtt-ms", type=float)
    p.add_argument("--p-tar", type=float, default=0.8)
    p.add_argument("--mode", default="expert", choices=["expert", "pristine-baseline", "forced-blur", "forced-noise"])
    p.add_argument("--wall-clock", action="store_true", help="sleep for real instead of a virtual clock")
    p.add_argument("--jitter-ms", type=float, default=0.0)
    p.add_argument("--jitter-seed", type=int, default=0)
    p.set_defaults(fn=cmd_serve_edge)

    p = sub.add_parser("sweep", help="run an experiment grid from a key=value config")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(fn=cmd_sweep)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except (EEOffloadError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
