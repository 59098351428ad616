"""Command-line entry point: gen-data, train-cae, train-sampler, plan, bench, render.

Exit codes: 0 success, 1 no path found, 2 usage error, 3 data/model IO error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from neuroplan import __version__
from neuroplan.errors import ConfigurationError, ContractError, FormatError

log = logging.getLogger("neuroplan")

EXIT_OK, EXIT_NO_PATH, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected numbers, got {text!r}") from exc


def _n_limit(text: str):
    if text.upper() == "AUTO":
        return None
    try:
        value = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError("--n-limit takes AUTO or an integer") from exc
    if value < 0:
        raise argparse.ArgumentTypeError("--n-limit must be non-negative")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neuroplan", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"neuroplan {__version__}")
    p.add_argument("--config", help="JSON file of flag defaults for the subcommand "
                   "(flags on the command line take precedence)")
    p.add_argument("--log-level", default="INFO",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate workspaces, clouds, expert paths and test pairs")
    g.add_argument("--scenario", default="s2D", choices=["s2D", "c2D", "c3D", "rigid"])
    g.add_argument("--out", required=True, help="dataset directory to create")
    g.add_argument("--seed", type=int, default=0, help="master seed")
    g.add_argument("--train-workspaces", type=int, default=10)
    g.add_argument("--paths-per-workspace", type=int, default=200)
    g.add_argument("--seen-pairs", type=int, default=5, help="test pairs per training workspace")
    g.add_argument("--unseen-workspaces", type=int, default=2)
    g.add_argument("--unseen-pairs", type=int, default=100, help="test pairs per unseen workspace")
    g.add_argument("--budget", type=int, default=30_000, help="RRT* iterations per expert path")
    g.add_argument("--step-size", type=float, default=0.5)
    g.add_argument("--goal-radius", type=float, default=1.0)
    g.add_argument("--spacing", type=float, default=0.5,
                   help="waypoint spacing of stored paths (0 keeps pruned vertices only)")
    g.add_argument("--no-prune", action="store_true", help="keep raw RRT* waypoints")
    g.add_argument("--blocks", type=int, default=None, help="obstacle count override")
    g.add_argument("--cae-clouds", type=int, default=0,
                   help="extra workspace clouds written to DIR/cae_clouds for CAE training")
    g.add_argument("--full-scale", action="store_true",
                   help="100 x 4000 training paths, 10 unseen workspaces x 2000 pairs")

    c = sub.add_parser("train-cae", help="train the point-cloud encoder")
    c.add_argument("--dim", type=int, default=2, choices=[2, 3])
    c.add_argument("--clouds", required=True,
                   help="directory of .f32bin clouds (a dataset root uses its cae_clouds/)")
    c.add_argument("--lambda", dest="lam", type=float, default=1e-3, help="contractive weight")
    c.add_argument("--lr", type=float, default=1e-3, help="Adagrad learning rate")
    c.add_argument("--epochs", type=int, default=500)
    c.add_argument("--batch-size", type=int, default=128)
    c.add_argument("--patience", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True, help="model file to write")
    c.add_argument("--curve", help="loss curve CSV (default: OUT.loss.csv)")

    s = sub.add_parser("train-sampler", help="train the next-state sampler on expert paths")
    s.add_argument("--robot", default="point2", choices=["point2", "point3", "rigid2"])
    s.add_argument("--dataset", required=True)
    s.add_argument("--cae", help="encoder model; omit to train without an obstacle latent")
    s.add_argument("--lr", type=float, default=1e-3, help="Adagrad learning rate")
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--batch-size", type=int, default=256)
    s.add_argument("--patience", type=int, default=20)
    s.add_argument("--warmup", type=int, default=5, help="epochs over which dropout ramps to p")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--curve", help="loss curve CSV (default: OUT.loss.csv)")

    pl = sub.add_parser("plan", help="solve one start/goal query")
    pl.add_argument("--algo", default="rrtstar",
                    choices=["rrtstar", "informed", "deepsmp", "deepsmp-bi"])
    pl.add_argument("--workspace", required=True, help="workspace JSON")
    pl.add_argument("--robot", choices=["point2", "point3", "rigid2"],
                    help="default: point robot matching the workspace dimension")
    pl.add_argument("--start", type=_floats, required=True, help="e.g. '-15,-15'")
    pl.add_argument("--goal", type=_floats, required=True)
    pl.add_argument("--cae", help="encoder model (deepsmp)")
    pl.add_argument("--sampler", help="sampler model (deepsmp)")
    pl.add_argument("--cloud", help="point cloud file; default: regenerated from the workspace")
    pl.add_argument("--n", type=int, default=10_000, help="iteration budget")
    pl.add_argument("--n-limit", type=_n_limit, default=None,
                    help="neural-phase iterations, AUTO (from --dataset) or an integer")
    pl.add_argument("--dataset", help="training dataset used to derive --n-limit AUTO")
    pl.add_argument("--step-size", type=float, default=0.5)
    pl.add_argument("--goal-radius", type=float, default=1.0)
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--out", help="result JSON")
    pl.add_argument("--svg", help="render the result to this SVG file")

    b = sub.add_parser("bench", help="paired benchmark over a dataset's test pairs")
    b.add_argument("--spec", required=True, help="trial spec JSON")
    b.add_argument("--out", required=True, help="table CSV")
    b.add_argument("--report", help="markdown report")
    b.add_argument("--records", help="per-trial JSON lines")
    b.add_argument("--no-timing", action="store_true",
                   help="blank the wall-time columns (byte-stable outputs)")

    r = sub.add_parser("render", help="draw a workspace and optional path as SVG")
    r.add_argument("--workspace", required=True)
    r.add_argument("--path", help="plan result JSON or a JSON list of configurations")
    r.add_argument("--out", required=True)
    return p


_COORD_FLAGS = ("--start", "--goal")


def _join_coords(argv: list[str]) -> list[str]:
    """Glue coordinate lists like '-10,-10' to their flag so argparse does not read an option."""
    out = []
    i = 0
    while i < len(argv):
        if argv[i] in _COORD_FLAGS and i + 1 < len(argv):
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv``; a --config JSON object supplies defaults for the chosen subcommand."""
    argv = _join_coords(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if known.config and command:
        try:
            cfg = json.loads(Path(known.config).read_text())
        except OSError as exc:
            raise FileNotFoundError(f"config file {known.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {known.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError(f"config file {known.config} must hold a JSON object")
        sub = parser._subparsers._group_actions[0].choices[command]
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = sorted(set(cfg) - {a.dest for a in sub._actions})
        if unknown:
            raise UsageError(f"config file {known.config}: unknown keys {unknown}")
        for action in sub._actions:
            if action.dest in cfg:
                action.required = False
        sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def _resolved(args: argparse.Namespace) -> str:
    return json.dumps({k: v for k, v in vars(args).items()}, sort_keys=True, default=str)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from neuroplan.datagen import DatasetManifest, build_dataset

    kw = dict(scenario=args.scenario, master_seed=args.seed, expert_budget=args.budget,
              step_size=args.step_size, goal_radius=args.goal_radius, prune=not args.no_prune,
              waypoint_spacing=args.spacing or None, n_blocks=args.blocks,
              cae_clouds=args.cae_clouds)
    if args.full_scale:
        man = DatasetManifest.full_scale(**kw)
    else:
        man = DatasetManifest(train_workspaces=args.train_workspaces,
                              paths_per_workspace=args.paths_per_workspace,
                              seen_test_pairs=args.seen_pairs,
                              unseen_workspaces=args.unseen_workspaces,
                              unseen_pairs=args.unseen_pairs, **kw)
    build_dataset(man, args.out)
    print(args.out)
    return EXIT_OK


def _write_curve(path: Path, curve) -> None:
    lines = ["epoch,loss"] + [f"{i},{v:.9g}" for i, v in enumerate(curve)]
    path.write_text("\n".join(lines) + "\n")


def _cloud_files(root: Path) -> list[Path]:
    if not root.is_dir():
        raise FileNotFoundError(f"cloud directory {root} not found")
    files = sorted(root.glob("*.f32bin"))
    if not files:
        for sub in ("cae_clouds", "clouds"):
            files = sorted((root / sub).glob("*.f32bin"))
            if files:
                break
    if not files:
        raise FileNotFoundError(f"no .f32bin clouds under {root}")
    return files


def cmd_train_cae(args) -> int:
    from neuroplan.cae import CaeSpec, save_cae, train_cae
    from neuroplan.geometry import load_cloud

    files = _cloud_files(Path(args.clouds))
    clouds = np.array([load_cloud(f) for f in files])
    if clouds.shape[-1] != args.dim:
        raise UsageError(f"clouds are {clouds.shape[-1]}-D but --dim is {args.dim}")
    spec = CaeSpec(dim=args.dim, lam=args.lam, cloud_size=clouds.shape[1])
    enc, dec, curve = train_cae(spec, clouds, epochs=args.epochs, batch_size=args.batch_size,
                                seed=args.seed, lr=args.lr, patience=args.patience)
    save_cae(args.out, enc, dec)
    _write_curve(Path(args.curve or f"{args.out}.loss.csv"), curve)
    log.info("CAE written to %s (final loss %.6g)", args.out, curve[-1])
    return EXIT_OK


def cmd_train_sampler(args) -> int:
    from neuroplan.cae import encode, load_cae
    from neuroplan.datagen import load_dataset
    from neuroplan.sampler import SamplerSpec, make_training_pairs, save_sampler, train_sampler

    ds = load_dataset(args.dataset)
    if ds.robot.kind != args.robot:
        raise UsageError(f"dataset robot is {ds.robot.kind}, not {args.robot}")
    latents, latent_size = {}, 0
    if args.cae:
        enc, _ = load_cae(args.cae)
        latent_size = enc.out_size
        latents = {s: encode(enc, ds.clouds[s]) for s in ds.manifest.train_seeds}
    pairs = make_training_pairs(ds.training_paths(), latents)
    spec = SamplerSpec(config_dim=ds.robot.config_dim, latent_size=latent_size)
    m, curve = train_sampler(spec, pairs, epochs=args.epochs, batch_size=args.batch_size,
                             seed=args.seed, lr=args.lr, patience=args.patience,
                             dropout_warmup=args.warmup)
    save_sampler(args.out, m)
    _write_curve(Path(args.curve or f"{args.out}.loss.csv"), curve)
    log.info("sampler written to %s (final loss %.6g)", args.out, curve[-1])
    return EXIT_OK


def cmd_plan(args) -> int:
    from neuroplan.bench import render_path_svg
    from neuroplan.geometry import RobotModel, Workspace, load_cloud, sample_point_cloud
    from neuroplan.smp import PlannerParams, Problem, plan_rrt_star

    ws = Workspace.load(args.workspace)
    rm = RobotModel(args.robot or ("point2" if ws.dim == 2 else "point3"))
    if rm.workspace_dim != ws.dim:
        raise UsageError(f"robot {rm.kind} does not fit a {ws.dim}-D workspace")
    for name in ("start", "goal"):
        if len(getattr(args, name)) != rm.config_dim:
            raise UsageError(f"--{name} needs {rm.config_dim} values for {rm.kind}")
    problem = Problem(np.array(args.start), np.array(args.goal), ws, rm)
    params = PlannerParams(step_size=args.step_size, goal_radius=args.goal_radius,
                           max_iterations=args.n, seed=args.seed)
    if args.algo in ("rrtstar", "informed"):
        res = plan_rrt_star(problem, params, args.algo)
    else:
        res = _plan_deep(args, problem, params, load_cloud, sample_point_cloud)
    if res.error:
        raise UsageError(res.error)
    payload = res.to_json()
    payload["algo"] = args.algo
    text = json.dumps(payload, sort_keys=True, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.svg:
        render_path_svg(ws, res.path, args.svg, start=problem.x_init, goal=problem.x_goal)
    if not res.found:
        log.warning("no path found within %d iterations", args.n)
        return EXIT_NO_PATH
    log.info("%s: cost %.6g after %d iterations", args.algo, res.cost, res.iterations)
    return EXIT_OK


def _plan_deep(args, problem, params, load_cloud, sample_point_cloud):
    from neuroplan.cae import load_cae
    from neuroplan.datagen import load_dataset
    from neuroplan.deepsmp import (
        DeepSmpConfig, deepsmp_plan, deepsmp_plan_bidirectional, default_n_limit,
    )
    from neuroplan.sampler import load_sampler

    if not args.sampler:
        raise UsageError(f"--algo {args.algo} needs --sampler")
    sampler = load_sampler(args.sampler)
    encoder = None
    if int(sampler.meta.get("latent_size", 0)):
        if not args.cae:
            raise UsageError("this sampler was trained with an obstacle latent; pass --cae")
        encoder, _ = load_cae(args.cae)
    n_limit = args.n_limit
    if n_limit is None:
        if not args.dataset:
            raise UsageError("--n-limit AUTO needs --dataset")
        ds = load_dataset(args.dataset, validate=False)
        n_limit = default_n_limit([p for _, p in ds.training_paths()], args.n)
    ws = problem.ws
    cloud = load_cloud(args.cloud) if args.cloud else sample_point_cloud(ws, seed=ws.seed or 0)
    cfg = DeepSmpConfig(encoder, sampler, params, n_limit)
    fn = deepsmp_plan_bidirectional if args.algo == "deepsmp-bi" else deepsmp_plan
    return fn(problem, cfg, cloud, seed=args.seed)


def cmd_bench(args) -> int:
    from neuroplan.bench import TrialSpec, render_report, run_benchmark

    spec = TrialSpec.load(args.spec)
    table = run_benchmark(spec)
    Path(args.out).write_text(table.to_csv(timing=not args.no_timing))
    if args.report:
        Path(args.report).write_text(render_report(table, spec, timing=not args.no_timing))
    if args.records:
        with open(args.records, "w") as fh:
            for rec in table.records:
                row = dict(vars(rec))
                if args.no_timing:
                    row.pop("wall_s")
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    log.info("bench table written to %s", args.out)
    return EXIT_OK


def cmd_render(args) -> int:
    from neuroplan.bench import render_path_svg
    from neuroplan.geometry import Workspace

    ws = Workspace.load(args.workspace)
    path = None
    if args.path:
        try:
            data = json.loads(Path(args.path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{args.path}: {exc}") from exc
        path = data.get("path") if isinstance(data, dict) else data
        path = None if path is None else np.asarray(path, dtype=np.float64)
    render_path_svg(ws, path, args.out)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train-cae": cmd_train_cae, "train-sampler": cmd_train_sampler,
    "plan": cmd_plan, "bench": cmd_bench, "render": cmd_render,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"neuroplan: {exc}", file=sys.stderr)
        return EXIT_IO
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)
    log.info("config %s", _resolved(args))
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"neuroplan {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractError as exc:
        print(f"neuroplan {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, ConfigurationError) as exc:
        print(f"neuroplan {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
