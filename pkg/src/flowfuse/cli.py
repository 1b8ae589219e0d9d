"""Command-line front end.

Thin client over :mod:`flowfuse.pipeline`: each subcommand assembles a
request model from defaults, an optional flat key-value config file, and
command-line flags (flag wins), echoes the fully resolved configuration,
and dispatches either in-process (default) or to a running service via
``--server URL``. The echoed block is itself a valid config file, so any
run can be reproduced from its own output.

Exit codes: 0 success, 1 failed check or diverged run, 2 usage/config
error, 3 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from pydantic import ValidationError

from . import __version__, pipeline
from .errors import ConfigError, DataError, FlowFuseError
from .service.schemas import (
    EvaluateRequest,
    FuseRequest,
    GradcheckRequest,
    InferRequest,
    PhantomsRequest,
    RoundtripRequest,
    TrainRequest,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3

COMMANDS = {
    "train": (TrainRequest, pipeline.run_train, "/train",
              "train a model on a manifest dataset or a phantom task"),
    "infer": (InferRequest, pipeline.run_infer, "/infer",
              "synthesize (forward) or recover (inverse) images of a split"),
    "fuse": (FuseRequest, pipeline.run_fuse, "/fuse",
             "fuse multi-source records through a fusion checkpoint"),
    "evaluate": (EvaluateRequest, pipeline.run_evaluate, "/evaluate",
                 "score predictions against references (metrics.csv)"),
    "roundtrip-check": (RoundtripRequest, pipeline.run_roundtrip_check, "/roundtrip-check",
                        "verify inverse(forward(x)) = x for a checkpoint"),
    "gradcheck": (GradcheckRequest, pipeline.run_gradcheck, "/gradcheck",
                  "compare analytic gradients against finite differences"),
    "make-phantoms": (PhantomsRequest, pipeline.run_make_phantoms, "/phantoms",
                      "generate a synthetic multi-modal dataset + manifest"),
}


def _add_model_flags(parser: argparse.ArgumentParser, model_cls) -> None:
    for name, field_info in model_cls.model_fields.items():
        alias = field_info.alias or name
        parser.add_argument(f"--{alias.replace('_', '-')}", dest=alias,
                            default=None, metavar="V")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowfuse",
        description="invertible multi-modal image synthesis and fusion")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for command, (model_cls, _, _, help_text) in COMMANDS.items():
        p = sub.add_parser(command, help=help_text)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--server", help="base URL of a running flowfuse service")
        _add_model_flags(p, model_cls)
    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def parse_config_file(path: str) -> dict:
    """Flat ``key = value`` lines; blank lines and #-comments are skipped."""
    file = Path(path)
    if not file.is_file():
        raise DataError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(file.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _build_request(model_cls, args: argparse.Namespace):
    merged = {}
    if args.config:
        merged.update(parse_config_file(args.config))
    for name, field_info in model_cls.model_fields.items():
        alias = field_info.alias or name
        value = getattr(args, alias, None)
        if value is not None:
            merged[alias] = value
    try:
        return model_cls(**merged)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}"
            for err in exc.errors())
        raise ConfigError(problems) from None


def _dispatch_remote(server: str, path: str, request) -> dict:
    import httpx

    url = server.rstrip("/") + path
    reply = httpx.post(url, json=request.model_dump(by_alias=True, mode="json"),
                       timeout=None)
    if reply.status_code == 422:
        raise ConfigError(f"server rejected the request: {reply.text}")
    if reply.status_code >= 400:
        try:
            body = reply.json()
        except ValueError:
            raise FlowFuseError(f"server error {reply.status_code}: {reply.text}")
        kind = body.get("kind", "internal")
        message = body.get("message", reply.text)
        if kind == "config":
            raise ConfigError(message)
        if kind == "data":
            raise DataError(message)
        raise FlowFuseError(message)
    return reply.json()


def _print_result(command: str, payload: dict) -> int:
    if command == "roundtrip-check":
        print(f"float32 max-abs round-trip error: {payload['max_abs_float32']:.3e} "
              f"(tolerance {payload['tol32']:g})")
        print(f"float64 max-abs round-trip error: {payload['max_abs_float64']:.3e} "
              f"(tolerance {payload['tol64']:g})")
        print("roundtrip-check:", "PASS" if payload["passed"] else "FAIL")
        return EXIT_OK if payload["passed"] else EXIT_CHECK_FAILED
    if command == "gradcheck":
        print(f"max relative gradient error: {payload['max_rel_error']:.3e} "
              f"(tolerance {payload['tol']:g})"
              + (f", worst at {payload['worst_param']}" if payload.get("worst_param") else ""))
        print("gradcheck:", "PASS" if payload["passed"] else "FAIL")
        return EXIT_OK if payload["passed"] else EXIT_CHECK_FAILED
    if command == "evaluate":
        for name, agg in payload["aggregates"].items():
            print(f"{name}: {agg['mean']:.4f} ± {agg['std']:.4f}")
        print(f"wrote {payload['csv']} ({payload['rows']} rows)")
        return EXIT_OK
    for key, value in payload.items():
        if isinstance(value, list) and len(value) > 4:
            value = f"[{len(value)} files]"
        print(f"{key}: {value}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "serve":
        import uvicorn

        from .service import create_app

        uvicorn.run(create_app(), host=args.host, port=args.port)
        return EXIT_OK

    model_cls, run, path, _ = COMMANDS[args.command]
    try:
        request = _build_request(model_cls, args)
        sys.stdout.write(pipeline.echo_config(args.command, request))
        if args.server:
            payload = _dispatch_remote(args.server, path, request)
        else:
            payload = json.loads(run(request).model_dump_json(by_alias=True))
        return _print_result(args.command, payload)
    except ConfigError as exc:
        print(f"error (config): {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error (data): {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error (io): {exc}", file=sys.stderr)
        return EXIT_IO
    except FlowFuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
