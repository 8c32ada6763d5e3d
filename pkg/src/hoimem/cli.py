"""Thin command-line client for the service.

Every subcommand builds one HTTP request.  Without ``--server`` the app runs
in-process (same wire format, no daemon needed); with it, requests go to a
remote instance.  Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file overriding run-config defaults")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hoimem", description=__doc__)
    parser.add_argument("--server", help="base URL of a running service (default: in-process)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic world")
    p.add_argument("--profile", help="easy | longtail | shifted | toy")
    p.add_argument("--spec", help="world-spec JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("prompts", help="print the per-verb prompt strings")
    p.add_argument("--taxonomy", required=True, help="taxonomy or annotation JSON file")

    p = sub.add_parser("build-memory", help="cache balanced ground-truth features")
    p.add_argument("--annotations", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shots", type=int)
    p.add_argument("--gammas", help="three comma-separated branch weights")
    p.add_argument("--heldout", help="comma-separated class ids excluded from memory")
    p.add_argument("--heldout-frac", type=float, help="fraction of classes held out (seeded)")
    _add_config_flags(p)

    p = sub.add_parser("infer", help="score candidate pairs into triplets")
    p.add_argument("--annotations", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--memory", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="fine-tuned checkpoint (switches to the encoder path)")
    p.add_argument("--images", help="image-grid store for the encoder path")
    p.add_argument("--lambda", dest="lam", type=float, help="suppression exponent override")
    p.add_argument("--gammas")
    _add_config_flags(p)

    p = sub.add_parser("finetune", help="train adapters and memory keys")
    p.add_argument("--annotations", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--memory", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--images")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--annotations", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True, help="report path prefix (.json/.csv)")
    _add_config_flags(p)

    p = sub.add_parser("sweep", help="vary one axis and emit a CSV of mAPs")
    p.add_argument("--axis", required=True, choices=["shots", "gammas", "lambda"])
    p.add_argument("--values", required=True,
                   help="comma-separated values; gammas triples split by ';'")
    p.add_argument("--out", required=True)
    p.add_argument("--profile")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--annotations")
    p.add_argument("--test-annotations")
    p.add_argument("--features")
    _add_config_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training loss")
    p.add_argument("--profile", default="toy", choices=["toy"])
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--max-images", type=int, default=1)
    _add_config_flags(p)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8703)

    return parser


def _parse_gammas(text: str | None):
    if text is None:
        return None
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise SystemExit(_fail(f"--gammas needs three comma-separated values, got {text!r}", 1))
    return parts


def _parse_values(axis: str, text: str):
    if axis == "gammas":
        return [[float(x) for x in chunk.split(",")] for chunk in text.split(";")]
    if axis == "shots":
        return [int(x) for x in text.split(",")]
    return [float(x) for x in text.split(",")]


def _fail(message: str, code: int) -> int:
    print(f"hoimem: {message}", file=sys.stderr)
    return code


def _common_payload(args) -> dict:
    payload = {}
    for key in ("config", "seed", "threads"):
        value = getattr(args, key, None)
        if value is not None:
            payload[key] = value
    return payload


def _build_request(args) -> tuple[str, dict]:
    cmd = args.command
    if cmd == "synth":
        return "/synth", {"out_dir": args.out, "profile": args.profile,
                          "spec": args.spec, "seed": args.seed}
    if cmd == "prompts":
        return "/prompts", {"taxonomy": args.taxonomy}
    if cmd == "build-memory":
        payload = _common_payload(args)
        payload.update({"annotations": args.annotations, "features": args.features,
                        "out": args.out, "shots": args.shots,
                        "gammas": _parse_gammas(args.gammas),
                        "heldout_frac": args.heldout_frac})
        if args.heldout:
            payload["heldout"] = [int(h) for h in args.heldout.split(",")]
        return "/memory/build", payload
    if cmd == "infer":
        payload = _common_payload(args)
        payload.update({"annotations": args.annotations, "features": args.features,
                        "memory": args.memory, "out": args.out,
                        "checkpoint": args.checkpoint, "images": args.images,
                        "lambda": args.lam, "gammas": _parse_gammas(args.gammas)})
        return "/infer", payload
    if cmd == "finetune":
        payload = _common_payload(args)
        payload.update({"annotations": args.annotations, "features": args.features,
                        "memory": args.memory, "out": args.out, "images": args.images})
        return "/finetune", payload
    if cmd == "eval":
        payload = _common_payload(args)
        payload.update({"annotations": args.annotations, "predictions": args.predictions,
                        "out": args.out})
        return "/evaluate", payload
    if cmd == "sweep":
        payload = _common_payload(args)
        payload.update({"axis": args.axis, "values": _parse_values(args.axis, args.values),
                        "out": args.out, "profile": args.profile, "seeds": args.seeds,
                        "annotations": args.annotations,
                        "test_annotations": args.test_annotations,
                        "features": args.features})
        return "/sweep", payload
    if cmd == "gradcheck":
        payload = _common_payload(args)
        payload.update({"eps": args.eps, "max_images": args.max_images})
        return "/gradcheck", payload
    raise SystemExit(_fail(f"unknown command {cmd}", 1))


def _print_summary(command: str, body: dict) -> None:
    if command == "prompts":
        for line in body["prompts"]:
            print(line)
        return
    for key, value in body.items():
        if isinstance(value, (dict, list)):
            value = json.dumps(value)
        print(f"{key}: {value}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "serve":
        import uvicorn

        from hoimem.service import create_app
        uvicorn.run(create_app(), host=args.host, port=args.port)
        return 0

    path, payload = _build_request(args)
    payload = {k: v for k, v in payload.items() if v is not None}

    if args.server:
        import httpx
        client = httpx.Client(base_url=args.server, timeout=None)
    else:
        import warnings
        with warnings.catch_warnings():
            # the bundled in-process client is an implementation detail;
            # its import-time deprecation chatter is not for CLI users
            warnings.simplefilter("ignore")
            from fastapi.testclient import TestClient

            from hoimem.service import create_app
            client = TestClient(create_app(), raise_server_exceptions=False)

    with client:
        response = client.post(path, json=payload)
    if response.status_code == 200:
        body = response.json()
        _print_summary(args.command, body)
        if args.command == "gradcheck" and not body.get("passed", False):
            return _fail("gradient check exceeded the 1e-4 tolerance", 2)
        return 0
    try:
        detail = response.json().get("detail", response.text)
    except json.JSONDecodeError:
        detail = response.text
    if response.status_code == 422:
        return _fail(str(detail), 1)
    return _fail(str(detail), 2)


if __name__ == "__main__":
    sys.exit(main())
