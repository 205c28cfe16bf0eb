"""Command-line entry point: train | eval | serve | infer."""

from __future__ import annotations

import argparse
import json
import socket
import sys
from pathlib import Path

from .prompts import TaskIdentifier


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medvlm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the fine-tuning loop from a config file")
    p_train.add_argument("--config", required=True, help="JSON training config")
    p_train.add_argument("--resume", default=None, help="checkpoint directory to resume from")

    p_eval = sub.add_parser("eval", help="score prediction files against references")
    p_eval.add_argument("--task", required=True, choices=["report", "vqa", "detection"])
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--ref", required=True)
    p_eval.add_argument("--out", default=None, help="write the summary JSON document here")

    p_serve = sub.add_parser("serve", help="start the HTTP inference service")
    p_serve.add_argument("--config", default=None, help="JSON file with checkpoint/host/port/request_cap")
    p_serve.add_argument("--checkpoint", default=None)
    p_serve.add_argument("--host", default=None)
    p_serve.add_argument("--port", type=int, default=None, help="0 binds an ephemeral port")
    p_serve.add_argument("--request-cap", type=int, default=None)

    p_infer = sub.add_parser("infer", help="run one request from files and print the response")
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--image", required=True)
    p_infer.add_argument("--task", required=True)
    p_infer.add_argument("--instruction", required=True)
    p_infer.add_argument("--max-new-tokens", type=int, default=64)
    p_infer.add_argument("--temperature", type=float, default=None)
    p_infer.add_argument("--seed", type=int, default=None)
    return parser


def _cmd_train(args: argparse.Namespace) -> int:
    from .data import load_manifest, to_training_sample
    from .model import BundleConfig, ModelBundle
    from .training import TrainConfig, Trainer

    cfg_doc = json.loads(Path(args.config).read_text())
    streams = {}
    kind_to_task = {
        "report": TaskIdentifier.CAPTION,
        "vqa": TaskIdentifier.VQA,
        "detection": TaskIdentifier.DETECTION,
    }
    for kind, manifest in cfg_doc.get("data", {}).items():
        records = load_manifest(manifest, kind)
        streams[kind_to_task[kind]] = [to_training_sample(r) for r in records]

    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, streams)
    else:
        bundle = ModelBundle(BundleConfig.from_dict(cfg_doc["bundle"]))
        trainer = Trainer(bundle, TrainConfig(**cfg_doc.get("train", {})), streams)

    steps = int(cfg_doc.get("steps", trainer.total_steps))
    out_dir = Path(cfg_doc.get("out_dir", "checkpoints/run"))
    log_path = Path(cfg_doc["log_path"]) if cfg_doc.get("log_path") else None
    reports = trainer.run(steps, log_path=log_path)
    for report in reports[-5:]:
        print(f"step {report.step}: loss {report.loss:.4f} lr {report.lr:.2e}")
    trainer.save(out_dir)
    print(f"checkpoint written to {out_dir}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    from .metrics import format_table, run_file_eval

    summaries = run_file_eval(args.task, args.pred, args.ref)
    print(format_table(summaries))
    if args.out:
        Path(args.out).write_text(
            json.dumps([s.to_doc() for s in summaries], indent=2) + "\n"
        )
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    cfg = json.loads(Path(args.config).read_text()) if args.config else {}
    checkpoint = args.checkpoint or cfg.get("checkpoint")
    if not checkpoint:
        print("error: no checkpoint given (flag or config file)", file=sys.stderr)
        return 1
    host = args.host or cfg.get("host", "127.0.0.1")
    port = args.port if args.port is not None else int(cfg.get("port", 8000))
    request_cap = args.request_cap if args.request_cap is not None else int(cfg.get("request_cap", 8))

    app = create_app(checkpoint_path=checkpoint, request_cap=request_cap)
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))
    print(f"listening on {sock.getsockname()[0]}:{sock.getsockname()[1]}", flush=True)
    server = uvicorn.Server(uvicorn.Config(app, log_level="info"))
    server.run(sockets=[sock])
    return 0


def _cmd_infer(args: argparse.Namespace) -> int:
    from .service import BadRequest, GenerateRequest, run_generate_request
    from .training import load_checkpoint

    import base64

    bundle = load_checkpoint(args.checkpoint).bundle
    req = GenerateRequest(
        image=base64.b64encode(Path(args.image).read_bytes()).decode(),
        task=args.task,
        instruction=args.instruction,
        max_new_tokens=args.max_new_tokens,
        temperature=args.temperature,
        seed=args.seed,
    )
    try:
        response = run_generate_request(bundle, req)
    except BadRequest as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(response, indent=2))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "train": _cmd_train,
        "eval": _cmd_eval,
        "serve": _cmd_serve,
        "infer": _cmd_infer,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
