"""``vcverifier`` command line: service, key and component tooling, benchmarks."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.serialization import Encoding, NoEncryption, PrivateFormat

from . import bench
from .appraisal import AppraisalError, migrate_policy
from .ear import public_key_bytes
from .identity import sign_component
from .service import ServiceConfig, Verifier, create_app, load_signing_key


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return value == "on"


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    config = ServiceConfig.load(args.config, listen=args.listen, cache_dir=args.cache_dir)
    verifier = Verifier.from_config(config)
    host, _, port = config.listen.rpartition(":")
    logging.getLogger(__name__).info("verifier key %s", verifier.public_key.hex())
    uvicorn.run(create_app(verifier, admin_token=config.admin_token), host=host or "127.0.0.1", port=int(port),
                log_level=args.log_level)
    return 0


def cmd_keygen(args: argparse.Namespace) -> int:
    key = Ed25519PrivateKey.generate()
    seed = key.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption())
    out = Path(args.out)
    out.write_text(seed.hex() + "\n")
    out.chmod(0o600)
    print(public_key_bytes(key).hex())
    return 0


def cmd_sign_component(args: argparse.Namespace) -> int:
    expiry = args.expiry if args.expiry is not None else int(time.time()) + args.days * 86400
    signed = sign_component(Path(args.component).read_bytes(), load_signing_key(args.key), expiry)
    Path(args.out or args.component).write_bytes(signed)
    print(f"signed, expires {expiry}")
    return 0


def cmd_migrate_policy(args: argparse.Namespace) -> int:
    doc = json.loads(Path(args.legacy).read_text())
    rules = doc["rules"] if isinstance(doc, dict) else doc
    pin = {}
    for item in args.pin:
        kind, _, key = item.partition("=")
        if kind not in ("hash", "signer") or not key:
            print(f"bad --pin {item!r}; use hash=<reference key> or signer=<reference key>", file=sys.stderr)
            return 2
        pin[kind] = key
    try:
        policy = migrate_policy(rules, pin, args.policy_id)
    except AppraisalError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    text = json.dumps(policy.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_fixtures(args: argparse.Namespace) -> int:
    from .mocktee.scenario import write_fixture_dir

    write_fixture_dir(args.directory)
    print(f"fixtures written to {args.directory}")
    return 0


def cmd_bench_latency(args: argparse.Namespace) -> int:
    fixtures = bench.BenchFixtures(delay_ms=args.delay_ms).start()
    reports = []
    try:
        if args.url:
            client = bench.BenchClient(args.url, args.admin_token)
            local = None
        else:
            local = bench.LocalService().__enter__()
            client = bench.BenchClient(local.url, local.admin_token)
        try:
            fixtures.provision(client)
            for platform in args.platform:
                for mode in args.mode:
                    rep = bench.run_latency(
                        client, fixtures, platform=platform, mode=mode, runs=args.runs,
                        staple_collateral=args.staple_collateral, component_source=args.component_source,
                        concurrency=args.concurrency,
                    )
                    reports.append(rep)
                    print(bench.format_latency(rep))
        finally:
            client.close()
            if local is not None:
                local.__exit__(None, None, None)
    except bench.ServiceUnreachable as exc:
        print(f"ServiceUnreachable: {exc}", file=sys.stderr)
        return 3
    except bench.BenchError as exc:
        print(f"benchmark failed: {exc}", file=sys.stderr)
        return 1
    finally:
        fixtures.stop()
    if args.out:
        bench.save_reports(reports, args.out)
    return 0


def cmd_bench_size(args: argparse.Namespace) -> int:
    from .mocktee.scenario import Scenario

    rows = bench.run_size(Scenario(), staple_collateral=args.staple_collateral, staple_component=args.staple_component)
    print(bench.format_size_table(rows))
    return 0


def cmd_bench_report(args: argparse.Namespace) -> int:
    reports = bench.load_reports(args.input)
    if args.format == "text":
        text = "\n\n".join(bench.format_latency(r) for r in reports)
    elif args.format == "plot-data":
        text = json.dumps(bench.plot_data(reports), indent=2)
    else:
        if not args.out:
            print("--format csv needs --out", file=sys.stderr)
            return 2
        n = bench.write_csv(reports, args.out)
        print(f"{n} rows written to {args.out}")
        return 0
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vcverifier", description="Verifier for attestation evidence appraised by "
                                     "sandboxed verification components.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the HTTP verifier")
    p.add_argument("--config", help="JSON service configuration")
    p.add_argument("--listen", help="host:port, overrides the config")
    p.add_argument("--cache-dir", help="component cache directory, overrides the config")
    p.add_argument("--log-level", default="info")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("keygen", help="write a new Ed25519 seed (hex) and print its public key")
    p.add_argument("out")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("sign-component", help="attach a signature section to a component")
    p.add_argument("component")
    p.add_argument("--key", required=True, help="hex Ed25519 seed file")
    p.add_argument("--out", help="output path (default: overwrite input)")
    expiry = p.add_mutually_exclusive_group()
    expiry.add_argument("--expiry", type=int, help="expiry as unix seconds")
    expiry.add_argument("--days", type=int, default=365, help="expiry relative to now (default 365)")
    p.set_defaults(func=cmd_sign_component)

    p = sub.add_parser("migrate-policy", help="convert a flat-claim policy and pin the component")
    p.add_argument("legacy", help="JSON list of rules, or an object with a 'rules' list")
    p.add_argument("--policy-id", required=True)
    p.add_argument("--pin", action="append", default=[], help="hash=<reference key> or signer=<reference key>")
    p.add_argument("--out")
    p.set_defaults(func=cmd_migrate_policy)

    p = sub.add_parser("fixtures", help="write MockTEE keys, components, policies and sample requests")
    p.add_argument("directory")
    p.set_defaults(func=cmd_fixtures)

    p = sub.add_parser("bench", help="latency and size benchmarks")
    bsub = p.add_subparsers(dest="bench_command", required=True)

    b = bsub.add_parser("latency", help="measure end-to-end request latency")
    b.add_argument("--platform", choices=("A", "B"), action="append", help="repeatable (default: both)")
    b.add_argument("--mode", choices=("cold", "warm"), action="append", help="repeatable (default: both)")
    b.add_argument("--staple-collateral", type=_on_off, default=True, metavar="on|off")
    b.add_argument("--component-source", choices=("staple", "registry"), default="staple")
    b.add_argument("--runs", type=int, default=50)
    b.add_argument("--concurrency", type=int, default=1, help="requests in flight per wave (default 1)")
    b.add_argument("--delay-ms", type=float, default=20.0, help="injected registry/collateral server delay")
    b.add_argument("--url", help="benchmark a running verifier instead of an in-process one")
    b.add_argument("--admin-token", help="admin token of the running verifier")
    b.add_argument("--out", help="save raw results as JSON for 'bench report'")
    b.set_defaults(func=cmd_bench_latency)

    b = bsub.add_parser("size", help="compare request sizes")
    b.add_argument("--staple-collateral", type=_on_off, default=True, metavar="on|off")
    b.add_argument("--staple-component", type=_on_off, default=False, metavar="on|off")
    b.set_defaults(func=cmd_bench_size)

    b = bsub.add_parser("report", help="render saved latency results")
    b.add_argument("input")
    b.add_argument("--format", choices=("text", "csv", "plot-data"), default="text")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    logging.getLogger("httpx").setLevel(logging.WARNING)
    if getattr(args, "platform", None) is None and args.func is cmd_bench_latency:
        args.platform = ["A", "B"]
    if getattr(args, "mode", None) is None and args.func is cmd_bench_latency:
        args.mode = ["cold", "warm"]
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
