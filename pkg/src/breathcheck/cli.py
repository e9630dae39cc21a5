"""``breathcheck`` command line.

Exit codes: 0 success, 1 domain rejection (verification failed, weights
mismatch), 2 usage or I/O error.  Machine output goes to stdout,
diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from functools import partial
from pathlib import Path

from . import __version__, bench, cfg as cfgmod, dataset, head, images, weights as weightsmod
from .errors import BreathcheckError

log = logging.getLogger("breathcheck")

EXIT_OK, EXIT_REJECT, EXIT_USAGE = 0, 1, 2
STUB_PORT_ENV = "BREATHCHECK_STUB_PORT"


class UsageError(Exception):
    pass


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _threshold(text: str) -> float:
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"threshold must be in (0, 1), got {value}")
    return value


def _emit(doc, output: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


def _load_model(args):
    from .model import Model

    cfg_path = _existing(args.cfg, "config")
    weights_path = _existing(args.weights, "weights") if args.weights else None
    names_path = _existing(args.names, "names file") if args.names else None
    return Model.load(cfg_path, weights_path, names_path, size=getattr(args, "size", None),
                      threads=getattr(args, "threads", 1) or 1)


def _image_paths(inputs) -> list[Path]:
    paths = []
    for raw in inputs:
        p = _existing(raw, "input")
        if p.is_dir():
            paths.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in dataset.IMAGE_SUFFIXES))
        else:
            paths.append(p)
    if not paths:
        raise UsageError("no JPEG/PNG inputs found")
    return paths


# ----------------------------------------------------------------- detect


def cmd_detect(args) -> int:
    if not args.weights:
        log.warning("no --weights given; using random weights, detections are meaningless")
    model = _load_model(args)
    report = []
    for path in _image_paths(args.images):
        rgb = images.decode_image(path)
        dets = model.detect(rgb, args.conf, args.iou)
        report.append({"image": str(path), "detections": [d.to_dict() for d in dets]})
        if args.annotate:
            out_dir = Path(args.annotate)
            out_dir.mkdir(parents=True, exist_ok=True)
            images.draw_detections(rgb, dets).save(out_dir / (path.stem + ".annotated.png"))
    _emit({"v": 1, "images": report}, args.output)
    return EXIT_OK


# ------------------------------------------------------------------ bench


def _parse_model_arg(spec: str):
    cfg_path, _, weights_path = spec.partition(":")
    return cfg_path, weights_path or None


def cmd_bench(args) -> int:
    from .model import Model

    threads = [int(t) for t in str(args.threads).split(",")]
    image = images.decode_image(_existing(args.image, "image")) if args.image else None
    report = bench.BenchReport(host=args.host)
    for spec in args.models:
        cfg_path, weights_path = _parse_model_arg(spec)
        label = Path(cfg_path).stem
        for t in threads:
            model = Model.load(_existing(cfg_path, "config"),
                               _existing(weights_path, "weights") if weights_path else None,
                               size=args.size, threads=t)
            bc = bench.BenchConfig(threads=t, size=args.size, warmup=args.warmup, iters=args.iters,
                                   source="image" if image is not None else "synthetic")
            cell = bench.bench_model(model, bc, label=label, image=image)
            model.workspace.close()
            report.cells.append(cell)
            print(f"{label} [{bc.name}]: median {cell.median_ms:.1f} ms, mean {cell.mean_ms:.1f} ms, "
                  f"p95 {cell.p95_ms:.1f} ms over {cell.iters} iters", file=sys.stderr)
    if args.host:
        print(f"host: {args.host}")
    print(bench.render_table(report))
    models = report.models
    if len(models) >= 2:
        for config in report.configs:
            ratio = bench.speedup(report.cell(models[0], config), report.cell(models[-1], config))
            print(f"speedup {models[0]}/{models[-1]} [{config}]: {ratio:.2f}x")
    if args.csv:
        Path(args.csv).write_text(bench.to_csv(report))
    return EXIT_OK


# ---------------------------------------------------------------- inspect


def cmd_inspect(args) -> int:
    cfg = cfgmod.load_config(_existing(args.cfg, "config"))
    shapes = cfgmod.compute_output_shapes(cfg)
    print(f"{'idx':>4}  {'kind':<14} output")
    for i, (layer, shape) in enumerate(zip(cfg.layers, shapes)):
        print(f"{i:>4}  {layer.kind:<14} {shape[0]} x {shape[1]} x {shape[2]}")
    params = cfgmod.count_parameters(cfg)
    expected = weightsmod.expected_size(cfg)
    print(f"parameters: {params}")
    print(f"expected weights bytes: {expected} ({expected / 1e6:.1f} MB)")
    if not args.weights:
        return EXIT_OK
    data = _existing(args.weights, "weights").read_bytes()
    header = weightsmod.WeightsHeader.unpack(data)
    expected = weightsmod.expected_size(cfg, header)
    print(f"actual weights bytes: {len(data)}")
    if len(data) != expected:
        print(f"verdict: MISMATCH ({len(data) - expected:+d} bytes)")
        return EXIT_REJECT
    weightsmod.read_weights(data, cfg)
    print("verdict: match")
    return EXIT_OK


def cmd_rewrite(args) -> int:
    cfg = cfgmod.load_config(_existing(args.cfg, "config"))
    if args.classes is not None:
        cfg = cfgmod.rewrite_for_classes(cfg, args.classes)
    if args.freeze is not None:
        first = args.freeze if args.freeze >= 0 else len(cfg.layers) + args.freeze
        cfg = cfgmod.apply_freeze(cfg, first)
    text = cfgmod.serialize_config(cfg)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- dataset


def cmd_convert(args) -> int:
    voc_dir = _existing(args.voc_dir, "VOC directory")
    xml_files = sorted(voc_dir.glob("*.xml"))
    if not xml_files:
        raise UsageError(f"no .xml annotations in {voc_dir}")
    names_path = _existing(args.names, "names file")
    names = head.load_names(names_path)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    image_list = []
    for xml in xml_files:
        ann = dataset.parse_voc(xml.read_bytes())
        labels = dataset.voc_to_yolo(ann, names, str(names_path))
        (out / (xml.stem + ".txt")).write_text(dataset.format_labels(labels))
        image_list.append(str(dataset.find_image_for(xml, ann)))
    (out / "images.txt").write_text("".join(p + "\n" for p in image_list))
    print(f"converted {len(xml_files)} annotations into {out}", file=sys.stderr)
    return EXIT_OK


def cmd_split(args) -> int:
    items = [line.strip() for line in _existing(args.list, "image list").read_text().splitlines() if line.strip()]
    names = head.load_names(_existing(args.names, "names file"))
    train, test = dataset.split_dataset(items, args.fraction, args.seed)
    written = dataset.write_manifests(train, test, names, args.out_dir)
    print(f"{len(train)} train / {len(test)} test; wrote {len(written)} files", file=sys.stderr)
    return EXIT_OK


# ----------------------------------------------------------------- verify


def _policy(args):
    from .verify import Capability, DevicePolicy

    cap = Capability.HAS_LOCAL_BIOMETRIC if args.capability == "biometric" else Capability.NO_LOCAL_BIOMETRIC
    return DevicePolicy(cap, args.n, args.floor, args.budget, args.k)


def _frame_source(args, paths):
    from .verify import Frame

    step = 1000.0 / args.fps
    if args.detections:
        raw = json.loads(_existing(args.detections, "detections file").read_text())
        per_frame = raw["frames"] if isinstance(raw, dict) else raw
        if len(per_frame) != len(paths):
            raise UsageError(f"{len(per_frame)} detection lists for {len(paths)} frames")
        for i, (path, dets) in enumerate(zip(paths, per_frame)):
            yield Frame(images.jpeg_bytes(path), round(i * step)), [head.Detection.from_dict(d) for d in dets]
        return
    model = _load_model(args)
    for i, path in enumerate(paths):
        data = images.jpeg_bytes(path)
        dets = model.detect(images.decode_image(data), args.conf, args.iou)
        yield Frame(data, round(i * step)), dets


def cmd_verify(args) -> int:
    from .verify import BiometricStub, StubServer, run_verification, submit_remote

    if not args.detections and not args.cfg:
        raise UsageError("verify needs --cfg (and --weights/--names) or --detections")
    paths = _image_paths(args.frames)
    policy = _policy(args)
    biometric = BiometricStub(args.biometric_stub) if args.biometric_stub else None
    server = None
    endpoint = args.endpoint
    if args.stub:
        server = StubServer(args.stub, args.stub_token).start()
        endpoint = server.endpoint
    try:
        submit = partial(submit_remote, retries=args.retries, backoff=args.backoff)
        session = run_verification(_frame_source(args, paths), policy, biometric=biometric,
                                   endpoint=endpoint, session_id=args.session_id, submit=submit)
    finally:
        if server is not None:
            server.stop()
    doc = {
        "v": 1,
        "session_id": session.session_id,
        "state": session.state.value,
        "reason": session.reason,
        "frames_seen": session.frames_seen,
        "path": [s.value for s in session.history],
    }
    _emit(doc, args.output)
    return EXIT_OK if session.state.value == "Accepted" else EXIT_REJECT


def cmd_serve_stub(args) -> int:
    from .verify import StubServer

    port = args.port if args.port is not None else int(os.environ.get(STUB_PORT_ENV, "0"))
    server = StubServer(args.mode, args.token, args.host, port)
    print(f"listening on {server.endpoint}", file=sys.stderr, flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="breathcheck", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def model_args(sp, required=True):
        sp.add_argument("--cfg", required=required, help="Darknet .cfg")
        sp.add_argument("--weights", help="Darknet .weights (random weights when omitted)")
        sp.add_argument("--names", help=".names file")
        sp.add_argument("--size", type=int, help="override network input size")
        sp.add_argument("--conf", type=_threshold, default=head.CONF_THRESHOLD)
        sp.add_argument("--iou", type=_threshold, default=head.IOU_THRESHOLD)
        sp.add_argument("--threads", type=int, default=1)

    sp = sub.add_parser("detect", help="run detection on images")
    sp.add_argument("images", nargs="+")
    model_args(sp)
    sp.add_argument("--output", "-o")
    sp.add_argument("--annotate", metavar="DIR", help="write annotated copies here")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("bench", help="time forward passes")
    sp.add_argument("models", nargs="+", metavar="CFG[:WEIGHTS]")
    sp.add_argument("--warmup", type=int, default=5)
    sp.add_argument("--iters", type=int, default=30)
    sp.add_argument("--threads", default="1", help="thread count or comma list to sweep")
    sp.add_argument("--size", type=int, default=416)
    sp.add_argument("--image", help="benchmark on this letterboxed image instead of noise")
    sp.add_argument("--host", default="", help="free-text host descriptor")
    sp.add_argument("--csv")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("inspect", help="layer table, parameter count, weights size check")
    sp.add_argument("cfg")
    sp.add_argument("--weights")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("rewrite", help="retarget class count and/or freeze layers")
    sp.add_argument("cfg")
    sp.add_argument("--classes", type=int)
    sp.add_argument("--freeze", type=int, metavar="FIRST_TRAINABLE",
                    help="first trainable layer; negative counts from the end")
    sp.add_argument("--output", "-o")
    sp.set_defaults(func=cmd_rewrite)

    sp = sub.add_parser("convert", help="VOC XML directory to YOLO label files")
    sp.add_argument("--voc-dir", required=True)
    sp.add_argument("--names", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_convert)

    sp = sub.add_parser("split", help="seeded train/test split and Darknet manifests")
    sp.add_argument("--list", required=True, help="file with one image path per line")
    sp.add_argument("--names", required=True)
    sp.add_argument("--fraction", type=float, default=0.8)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("verify", help="run the co-presence verification procedure over frames")
    sp.add_argument("frames", nargs="+", help="frame images or a directory of them, in capture order")
    model_args(sp, required=False)
    sp.add_argument("--detections", help="JSON list of per-frame detection lists (skips the model)")
    sp.add_argument("--capability", choices=("biometric", "no-biometric"), default="no-biometric")
    sp.add_argument("--n", type=int, default=3, help="consecutive co-present frames required")
    sp.add_argument("--floor", type=_threshold, default=0.5)
    sp.add_argument("--budget", type=int, default=30)
    sp.add_argument("--k", type=int, default=5, help="frames to submit remotely")
    sp.add_argument("--fps", type=float, default=30.0)
    sp.add_argument("--endpoint", help="remote verifier host:port")
    sp.add_argument("--stub", choices=("accept-all", "reject-all", "match-token"),
                    help="start an in-process stub verifier")
    sp.add_argument("--stub-token")
    sp.add_argument("--session-id")
    sp.add_argument("--biometric-stub", choices=("match", "no-match", "unavailable"))
    sp.add_argument("--retries", type=int, default=3)
    sp.add_argument("--backoff", type=float, default=0.2)
    sp.add_argument("--output", "-o")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("serve-stub", help="run the stub remote verifier")
    sp.add_argument("--mode", choices=("accept-all", "reject-all", "match-token"), default="accept-all")
    sp.add_argument("--token")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, help=f"default: ${STUB_PORT_ENV} or an ephemeral port")
    sp.set_defaults(func=cmd_serve_stub)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BreathcheckError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
