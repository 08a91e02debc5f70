import os
import sys
import json
import dotenv
import logging
import argparse

from pathlib import Path

import requests

from fissionserve.utils_bench import (
    SATURATING_LOAD,
    format_summary,
    load_scenario,
    plan_for,
    bench_config,
    run_experiment,
    run_remote,
    run_suite,
    write_cdf,
    write_csv,
    write_traces,
)
from fissionserve.utils_clock import ClockMode
from fissionserve.utils_config import REPO_ROOT, ClusterConfig, configure_logging
from fissionserve.utils_errors import FissionError, error_from_dict
from fissionserve.utils_gateway import up
from fissionserve.utils_planner import DeploymentPlan, PoolSpec, plan_app
from fissionserve.utils_profiles import GB, ModelCatalog, load_profiles
from fissionserve.utils_tasks import AppManifest, validate_manifest
from fissionserve.utils_workload import WorkloadMix, generate_workload


# Ports, log level and config path can come from a .env file
dotenv.load_dotenv(".env")

logger = logging.getLogger("FissionServe")

HTTP_TIMEOUT = 600
EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


# ---------------------------------------------------------------------------
# HTTP client
# ---------------------------------------------------------------------------


def _url(args):
    if args.url:
        return args.url.rstrip("/")
    return os.environ.get("FISSION_URL") or ClusterConfig.load(args.config).gateway_url


def _call(method, url, **kwargs):
    response = requests.request(method, url, timeout=HTTP_TIMEOUT, **kwargs)
    if response.status_code >= 400:
        try:
            body = response.json()
        except ValueError:
            body = {"error": "internal_error", "message": response.text}
        raise error_from_dict(body)
    return response


def _print_json(obj):
    print(json.dumps(obj, indent=2))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_up(args):
    config = ClusterConfig.load(args.config)
    cluster = up(config)
    logger.info("[*] Cluster up at %s, POST /shutdown or Ctrl-C to stop", cluster.url)
    try:
        cluster.wait()
    finally:
        cluster.down()
    return EXIT_OK


def cmd_down(args):
    _call("POST", f"{_url(args)}/shutdown")
    logger.info("[*] Shutdown requested")
    return EXIT_OK


def cmd_state(args):
    _print_json(_call("GET", f"{_url(args)}/state").json())
    return EXIT_OK


def cmd_register(args):
    body = json.loads(Path(args.manifest).read_text())
    if args.plan:
        body = {"manifest": body, "plan": json.loads(Path(args.plan).read_text())}
    reply = _call("POST", f"{_url(args)}/apps", json=body).json()
    logger.info("[*] Registered %s", reply["app_id"])
    _print_json(reply)
    return EXIT_OK


def cmd_deregister(args):
    params = {"force": "true"} if args.force else None
    _call("DELETE", f"{_url(args)}/apps/{args.app_id}", params=params)
    logger.info("[*] Deregistered %s", args.app_id)
    return EXIT_OK


def cmd_invoke(args):
    body = json.loads(Path(args.request).read_text())
    response = _call("POST", f"{_url(args)}/apps/{args.app_id}/invoke", json=body, stream=True)
    failed = None
    for line in response.iter_lines():
        if not line:
            continue
        chunk = json.loads(line)
        print(json.dumps(chunk), flush=True)
        if "error" in chunk:
            failed = chunk
    if failed is not None:
        raise error_from_dict(failed)
    return EXIT_OK


def _default_profile_files(args):
    if args.profiles:
        return args.profiles
    return ClusterConfig.load(args.config).profiles


def cmd_plan(args):
    profile_files = _default_profile_files(args)
    stem = Path(profile_files[0]).stem
    app_path = args.app or str(REPO_ROOT / "apps" / f"{stem}.json")
    mix_path = args.mix or str(REPO_ROOT / "mixes" / f"{stem}.json")
    config = ClusterConfig.load(args.config)
    profiles = load_profiles(profile_files)
    catalog = ModelCatalog.load(config.catalog)
    manifest = AppManifest.from_json(Path(app_path).read_text())
    mix = WorkloadMix.load(mix_path)
    nodes = args.nodes or max(1, -(-args.gpus // 8))
    pool = PoolSpec.uniform(args.gpus, nodes=nodes, capacity_bytes=int(args.gpu_gb * GB))
    validated = validate_manifest(manifest, existing_app_ids=set())
    result = plan_app(
        validated,
        catalog,
        profiles,
        mix,
        pool,
        fuse_pairs=not args.separate_talker,
        exact=args.oracle,
        fill_spare=args.fill_spare,
    )
    if args.out:
        result.save(args.out)
    if args.json:
        print(result.to_json())
    else:
        print(result.table())
    return EXIT_OK


def cmd_bench(args):
    clock = ClockMode.REALTIME if args.clock == "realtime" else ClockMode.VIRTUAL
    if args.suite:
        scenarios = [args.scenario] if args.scenario else None
        gpu_counts = (args.gpus,) if args.gpus else (8, 16)
        reports = run_suite(scenarios, gpu_counts=gpu_counts, seeds=tuple(range(args.seeds)), duration=args.duration)
        print(format_summary(reports))
        if args.out:
            Path(args.out).write_text(json.dumps([r.to_dict() for r in reports], indent=2))
        if args.csv:
            write_csv(reports, args.csv)
        return EXIT_OK

    manifest, mix = load_scenario(args.scenario or "qwen25-omni")
    if args.mix:
        mix = WorkloadMix.load(args.mix)
    gpus = args.gpus or 8
    config = bench_config(gpus, clock)
    profiles = load_profiles(config.profiles)
    catalog = ModelCatalog.load(config.catalog)
    deployment = DeploymentPlan.load(args.plan) if args.plan else None
    rate = args.rate
    if rate is None:
        reference = deployment or plan_for(manifest, mix, config, profiles, catalog)
        rate = SATURATING_LOAD * reference.objective_value
        logger.info("[*] Offered rate %.3f req/s (%.1fx objective)", rate, SATURATING_LOAD)
    schedule = generate_workload(mix, rate, args.duration, seed=args.seed)

    if args.target:
        report, traces = run_remote(args.target.rstrip("/"), manifest.app_id, schedule, args.duration)
    else:
        report, traces = run_experiment(
            manifest,
            mix,
            schedule,
            args.duration,
            gpus=gpus,
            monolith=args.monolith,
            plan=deployment,
            clock=clock,
            seed=args.seed,
            scenario=args.scenario or "qwen25-omni",
            profiles=profiles,
            catalog=catalog,
            config=config,
        )
    print(report.summary())
    if args.out:
        report.save(args.out)
    if args.trace:
        write_traces(traces, args.trace)
    if args.csv:
        write_csv([report], args.csv)
        if traces:
            write_cdf(traces, str(Path(args.csv).with_suffix(".cdf")))
    return EXIT_OK


COMMANDS = {
    "up": cmd_up,
    "down": cmd_down,
    "state": cmd_state,
    "register": cmd_register,
    "deregister": cmd_deregister,
    "invoke": cmd_invoke,
    "plan": cmd_plan,
    "bench": cmd_bench,
}


def build_parser():
    parser = argparse.ArgumentParser(
        description="Serve multimodal models split into independently scaled components."
    )
    parser.add_argument("--config", help="Cluster config JSON (default: $FISSION_CONFIG or ./cluster.json)")
    parser.add_argument("--url", help="Gateway URL (default: $FISSION_URL or the config's gateway)")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR (default: $FISSION_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("up", help="Start the control plane and gateway in the foreground")
    sub.add_parser("down", help="Ask a running gateway to shut down")
    sub.add_parser("state", help="Print the pool and task manager snapshot")

    p = sub.add_parser("register", help="Register an app manifest")
    p.add_argument("manifest")
    p.add_argument("--plan", help="Deployment plan JSON to place the app with")

    p = sub.add_parser("deregister", help="Remove an app")
    p.add_argument("app_id")
    p.add_argument("--force", action="store_true", help="Deregister even with requests in flight")

    p = sub.add_parser("invoke", help="Send one request and stream the response")
    p.add_argument("app_id")
    p.add_argument("request")

    p = sub.add_parser("plan", help="Compute a deployment plan offline")
    p.add_argument("--app", help="App manifest (default: apps/<profile stem>.json)")
    p.add_argument("--profiles", nargs="+", help="Component profile files")
    p.add_argument("--mix", help="Workload mix (default: mixes/<profile stem>.json)")
    p.add_argument("--gpus", type=int, default=8)
    p.add_argument("--nodes", type=int, help="Nodes the GPUs are split across (default: 8 GPUs per node)")
    p.add_argument("--gpu-gb", type=float, default=80.0, help="Memory per GPU in GB")
    p.add_argument("--oracle", action="store_true", help="Use the exhaustive search")
    p.add_argument("--separate-talker", action="store_true", help="Plan talker and generator separately")
    p.add_argument(
        "--fill-spare", action="store_true", help="Hand GPUs the best plan leaves free to the lowest-ratio components"
    )
    p.add_argument("--json", action="store_true", help="Print the plan as JSON")
    p.add_argument("--out", help="Write the plan JSON here")

    p = sub.add_parser("bench", help="Run a benchmark experiment")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--plan", help="Deployment plan JSON to benchmark")
    group.add_argument("--monolith", action="store_true", help="Run the app unfissioned")
    p.add_argument("--scenario", help="qwen25-omni or qwen3-omni (default: qwen25-omni)")
    p.add_argument("--mix", help="Workload mix overriding the scenario's")
    p.add_argument("--rate", type=float, help="Offered req/s (default: 1.5x the planner objective)")
    p.add_argument("--duration", type=float, default=60.0, help="Seconds of simulated arrivals")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=3, help="Seeds per suite cell")
    p.add_argument("--gpus", type=int)
    p.add_argument("--clock", choices=["virtual", "realtime"], default="virtual")
    p.add_argument("--out", help="Report JSON path")
    p.add_argument("--csv", help="Gnuplot-friendly table path")
    p.add_argument("--trace", help="JSONL trace log path")
    p.add_argument("--suite", action="store_true", help="Run the full monolith vs fission suite")
    p.add_argument("--target", help="Drive a running gateway at this URL instead")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except FissionError as err:
        logger.error("[!] %s: %s", err.code, err.message)
        return EXIT_USER if err.user_error else EXIT_INTERNAL
    except requests.ConnectionError as err:
        logger.error("[!] Cannot reach the gateway: %s", err)
        return EXIT_USER
    except (OSError, json.JSONDecodeError) as err:
        logger.error("[!] %s", err)
        return EXIT_USER
    except Exception:
        logger.exception("[!] Internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
