"""Command-line entry point: a thin client over the service API.

Batch subcommands build a request from the INI config and submit it either
to a remote service (--url) or to an in-process application instance over
the same HTTP surface, so both paths exercise identical validation and
serialization. `serve` and `replay` start the long-running service.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import configio
from .configio import ConfigError


def _client(url: str | None):
    if url:
        import httpx

        return httpx.Client(base_url=url, timeout=None)
    import warnings

    with warnings.catch_warnings():
        # starlette >= 1.3 prefers its httpx2 backend for TestClient; the httpx
        # one still works and is what this environment ships
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    from .service import create_app

    return TestClient(create_app())


def _post(args, path: str, payload: dict) -> dict:
    with _client(args.url) as client:
        response = client.post(path, json=payload)
    if response.status_code != 200:
        try:
            detail = response.json().get("detail", response.text)
        except Exception:
            detail = response.text
        raise SystemExit(f"error: {detail}")
    return response.json()


def cmd_init_config(args) -> None:
    configio.write_default_config(args.out)
    print(f"wrote {args.out}")


def cmd_synth(args) -> None:
    parser = configio.load_ini(args.config)
    req = configio.synth_request_dict(parser, args.seed, args.out)
    body = _post(args, "/synth", req)
    print(f"wrote {body['out_path']}: {body['demos']} demos, {body['windows']} windows")
    print(f"sha256 {body['sha256']}")
    for directive, counts in sorted(body["label_histogram"].items()):
        line = "  ".join(f"y={level}: {n}" for level, n in sorted(counts.items()))
        print(f"  {directive:<10} {line}")


def cmd_train(args) -> None:
    parser = configio.load_ini(args.config)
    req = configio.train_request_dict(
        parser,
        dataset_path=args.dataset,
        out_path=args.out,
        seed=args.seed,
        baseline=args.baseline,
        preset=args.preset,
        history_path=args.history,
    )
    body = _post(args, "/train", req)
    final = body["final"]
    print(
        f"trained {body['epochs']} epochs in {body['wall_seconds']:.1f}s -> {body['out_path']}"
    )
    print(
        f"final train loss: total={final['total']:.4f} rec={final['rec']:.4f} "
        f"kl={final['kl']:.4f} modi={final['modi']:.4f}"
    )
    if body.get("predictor_error") is not None:
        print(f"held-out weak-label error: {body['predictor_error']:.4f}")
    print(f"config fingerprint {body['fingerprint']}")
    if body.get("history_path"):
        print(f"history -> {body['history_path']}")


def cmd_eval(args) -> None:
    parser = configio.load_ini(args.config)
    req = configio.eval_request_dict(parser, args.ckpt, args.seed, args.out_dir)
    if args.all_dims:
        req["all_dims"] = True
    body = _post(args, "/eval", req)
    print(f"TSR {body['tsr']['text']}")
    print(f"{'directive':<10} {'dim':>3} {'MDE':>7}  {'generated (c, d)':<20} {'reference (a, b)':<20} flipped")
    for r in body["reports"]:
        print(
            f"{r['directive']:<10} {r['latent_dim']:>3} {r['mde']:>7.3f}  "
            f"({r['generated']['slope']:+.3f}, {r['generated']['intercept']:+.3f})   "
            f"({r['reference']['slope']:+.3f}, {r['reference']['intercept']:+.3f})   "
            f"{r['x_flipped']}"
        )
    for path in body["files"]:
        print(f"wrote {path}")


def cmd_ablate(args) -> None:
    parser = configio.load_ini(args.config)
    req = configio.ablate_request_dict(parser, args.ckpt, args.seed, args.out)
    body = _post(args, "/ablate", req)
    print(f"{'scheme':<22} {'TSR':<15} mean jerk")
    for row in body["rows"]:
        print(f"{row['scheme']:<22} {row['tsr']:<15} {row['mean_jerk']:.3e}")
    if body.get("out_path"):
        print(f"wrote {body['out_path']}")


def cmd_serve(args) -> None:
    import uvicorn

    from .service import LiveOptions, create_app

    engine = {}
    if args.config:
        engine = configio.engine_dict(configio.load_ini(args.config))
    options = LiveOptions(
        checkpoint_path=args.ckpt,
        task=args.task,
        ticks=int(engine.get("ticks", 1500)),
        command_update_stride=int(engine.get("command_update_stride", 20)),
        scheme=engine.get("scheme", "inverse_log"),
        exponential_m=float(engine.get("exponential_m", 0.05)),
        speed=args.speed if args.speed is not None else float(engine.get("speed", 1.0)),
        follower_noise=float(engine.get("follower_noise", 0.0)),
        seed=args.seed or 0,
    )
    app = create_app(live=options)
    print(f"serving {args.ckpt} on ws://{args.host}:{args.port}/ws (speed x{options.speed:g})")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")


def cmd_replay(args) -> None:
    import uvicorn

    from .service import ReplayOptions, create_app

    app = create_app(replay=ReplayOptions(log_path=args.log, speed=args.speed if args.speed is not None else 1.0))
    print(f"replaying {args.log} on ws://{args.host}:{args.port}/ws")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modmotion",
        description="Online-steerable motion generation: synthesize data, train, evaluate, serve.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    init = sub.add_parser("init-config", help="write a commented default config file")
    init.add_argument("--out", default="modmotion.ini")
    init.set_defaults(func=cmd_init_config)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="INI config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--url", default=None, help="remote service URL (default: run in-process)")

    synth = sub.add_parser("synth", help="synthesize a labeled demonstration dataset")
    common(synth)
    synth.add_argument("--out", required=True, help="output dataset file (.mmds)")
    synth.set_defaults(func=cmd_synth)

    train = sub.add_parser("train", help="train the sequence CVAE on a dataset")
    common(train)
    train.add_argument("--dataset", required=True)
    train.add_argument("--out", required=True, help="output checkpoint file (.mmck)")
    train.add_argument("--history", default=None, help="training-history CSV path")
    train.add_argument("--baseline", action="store_true", help="disable weak-label supervision (gamma=0)")
    train.add_argument("--preset", default=None, help="smoke-wiping | paper-wiping | paper-wiping-baseline")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="run the directive-conformity protocol on a checkpoint")
    common(ev)
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--out-dir", default=None)
    ev.add_argument("--all-dims", action="store_true", help="sweep every latent dim (baseline-style)")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="weight-scheme ablation with a mid-run latent switch")
    common(ab)
    ab.add_argument("--ckpt", required=True)
    ab.add_argument("--out", default=None, help="JSON output path")
    ab.set_defaults(func=cmd_ablate)

    serve = sub.add_parser("serve", help="serve the live directive loop over WebSocket")
    serve.add_argument("--ckpt", required=True)
    serve.add_argument("--config", default=None, help="INI file providing the [engine] section")
    serve.add_argument("--task", default="wiping")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8800)
    serve.add_argument("--speed", type=float, default=None, help="pacing factor; 0 = fastest")
    serve.add_argument("--seed", type=int, default=0)
    serve.set_defaults(func=cmd_serve)

    replay = sub.add_parser("replay", help="re-serve a recorded event log for UI development")
    replay.add_argument("--log", required=True)
    replay.add_argument("--host", default="127.0.0.1")
    replay.add_argument("--port", type=int, default=8800)
    replay.add_argument("--speed", type=float, default=None)
    replay.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> None:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as err:
        raise SystemExit(f"error: {err}")


if __name__ == "__main__":
    main()
