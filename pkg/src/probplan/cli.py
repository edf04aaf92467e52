"""Command-line entry point: collect, build-vocab, train, eval-open, eval-closed, replay-export.

Every command reads a versioned JSON config (``--config``); flags override
config fields. Relative artifact paths resolve against the output directory,
which ``PROBPLAN_OUTPUT_DIR`` overrides.

Exit codes: 0 success, 2 validation error, 3 runtime divergence.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import STEER_NOISE, collect_demonstrations, load_dataset, save_dataset
from .exceptions import (
    ConfigError,
    FormatError,
    NonFiniteError,
    ProbPlanError,
    SimulationDivergedError,
    ValidationError,
)
from .nn import checkpoint_from_bytes, checkpoint_to_bytes
from .planner import PlannerPolicy, ProbabilisticPlanner
from .scene import TOKEN_GROUPS, bundled_scenario_names, load_bundled_scenario, load_scenario
from .sim.episode import ExpertDriver, read_replay, simulate_episode, write_replay
from .sim.metrics import open_loop_metrics, resolve_penalties
from .sim.world import Perturbation
from .vocabulary import atomic_write_bytes, build_vocabulary, coverage, load_vocabulary, save_vocabulary

CONFIG_VERSION = 1
OUTPUT_ENV = "PROBPLAN_OUTPUT_DIR"
EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGED = 0, 2, 3

DEFAULT_CONFIG = {
    "version": CONFIG_VERSION,
    "seed": None,
    "paths": {
        "scenarios": None,
        "dataset": "demos.jsonl",
        "eval_dataset": None,
        "vocab": "vocab.bin",
        "checkpoint": "model.ckpt",
        "output_dir": "probplan_out",
    },
    "collect": {"seeds": [0, 1, 2], "steer_noise": STEER_NOISE, "perturb": True},
    "vocabulary": {"N": 256, "T": 6, "dt_wp": 0.5, "L": 8},
    "model": {"d": 32, "heads": 4, "depth": 2, "ffn": 64},
    "train": {
        "tau": 0.5,
        "lambda_conflict": 5.0,
        "use_dist_loss": True,
        "lr": 3e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "batch_size": 32,
        "steps": 3000,
        "conflict_margin": 0.0,
        "ablate": [],
        "seeds": None,
    },
    "eval": {"policy": "argmax", "K": 8, "penalties": {}, "seeds": [0], "frame_seeds": None, "ablate": []},
}

_NUMBER = (int, float)


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config field {path!r}")
        default = base[key]
        if isinstance(default, dict) and key != "penalties":
            if not isinstance(value, dict):
                raise ConfigError(f"config field {path!r} must be an object")
            out[key] = _merge(default, value, path + ".")
            continue
        if value is not None and default is not None:
            if isinstance(default, bool) and not isinstance(value, bool):
                raise ConfigError(f"config field {path!r} must be a boolean")
            if isinstance(default, _NUMBER) and not isinstance(default, bool):
                if isinstance(value, bool) or not isinstance(value, _NUMBER):
                    raise ConfigError(f"config field {path!r} must be a number")
                if isinstance(default, int) and not isinstance(value, int):
                    raise ConfigError(f"config field {path!r} must be an integer")
            if isinstance(default, (list, str, dict)) and not isinstance(value, type(default)):
                raise ConfigError(f"config field {path!r} must be a {type(default).__name__}")
        out[key] = value
    return out


def _set_path(cfg: dict, dotted: str, value) -> None:
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted!r}")
    node[parts[-1]] = value


def load_config(path=None, overrides: dict | None = None, env=None) -> dict:
    """Defaults, then the config file, then the output-dir env var, then flag overrides."""
    env = os.environ if env is None else env
    user: dict = {}
    if path is not None:
        try:
            raw = Path(path).read_bytes()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
        try:
            user = json.loads(raw)
        except json.JSONDecodeError as err:
            raise FormatError(f"config is not valid JSON: {err.msg}", offset=err.pos) from None
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        if user.get("version") != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {user.get('version')!r}, expected {CONFIG_VERSION}")
    for dotted, value in (overrides or {}).items():
        _set_path(user, dotted, value)
    cfg = _merge(DEFAULT_CONFIG, user)
    if env.get(OUTPUT_ENV) and "paths.output_dir" not in (overrides or {}):
        cfg["paths"]["output_dir"] = env[OUTPUT_ENV]
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg["seed"] is None:
        raise ConfigError("seed is mandatory (set it in the config or pass --seed)")
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError("seed must be an integer")
    v = cfg["vocabulary"]
    if v["N"] < 1 or v["T"] < 1 or v["L"] < 1 or v["dt_wp"] <= 0:
        raise ConfigError("vocabulary N, T, L must be positive and dt_wp > 0")
    m = cfg["model"]
    if min(m.values()) < 1 or m["d"] % m["heads"]:
        raise ConfigError("model sizes must be positive and d divisible by heads")
    groups = set(cfg["train"]["ablate"]) | set(cfg["eval"]["ablate"])
    if groups - set(TOKEN_GROUPS):
        raise ConfigError(f"unknown ablation groups {sorted(groups - set(TOKEN_GROUPS))}; choose from {list(TOKEN_GROUPS)}")
    if cfg["eval"]["policy"] not in ("argmax", "topk", "expert"):
        raise ConfigError("eval.policy must be argmax, topk or expert")
    if cfg["eval"]["K"] < 1:
        raise ConfigError("eval.K must be at least 1")
    resolve_penalties(cfg["eval"]["penalties"])
    if not cfg["collect"]["seeds"]:
        raise ConfigError("collect.seeds must not be empty")


def output_dir(cfg: dict) -> Path:
    return Path(cfg["paths"]["output_dir"])


def artifact(cfg: dict, key: str) -> Path:
    p = Path(cfg["paths"][key])
    return p if p.is_absolute() else output_dir(cfg) / p


def load_scenarios(cfg: dict) -> list:
    root = cfg["paths"]["scenarios"]
    if root is None:
        return [load_bundled_scenario(n) for n in bundled_scenario_names()]
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"scenario directory {root} does not exist")
    files = sorted(p for p in root.glob("*.json") if p.name != "schema.json")
    if not files:
        raise ValidationError(f"no scenarios found in {root}")
    return [load_scenario(p) for p in files]


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ValidationError(f"{what} not found: {path}")
    return path


def _write_json(path: Path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _planner_from_files(cfg: dict, ablate) -> ProbabilisticPlanner:
    vocab = load_vocabulary(_require(artifact(cfg, "vocab"), "vocabulary file"), expected_T=cfg["vocabulary"]["T"])
    ckpt = _require(artifact(cfg, "checkpoint"), "checkpoint")
    store, mcfg = checkpoint_from_bytes(ckpt.read_bytes())
    return ProbabilisticPlanner.from_checkpoint(store, mcfg, vocab, ablate=tuple(ablate), top_k=cfg["eval"]["K"])


# --------------------------------------------------------------------------- commands


def cmd_collect(cfg: dict, out=sys.stdout) -> Path:
    scenarios = load_scenarios(cfg)
    v = cfg["vocabulary"]
    c = cfg["collect"]
    pert = Perturbation() if c["perturb"] else Perturbation(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    ds = collect_demonstrations(scenarios, c["seeds"], v["T"], v["dt_wp"], pert, steer_noise=c["steer_noise"])
    path = artifact(cfg, "dataset")
    save_dataset(ds, path)
    print(f"collected {len(ds)} frames ({ds.dropped} dropped) from {len(scenarios)} scenarios -> {path}", file=out)
    return path


def cmd_build_vocab(cfg: dict, out=sys.stdout) -> Path:
    v = cfg["vocabulary"]
    ds = load_dataset(_require(artifact(cfg, "dataset"), "dataset"), expected_T=v["T"])
    demos = ds.trajectories
    vocab = build_vocabulary(demos, v["N"], dt_wp=v["dt_wp"], n_bands=v["L"])
    path = artifact(cfg, "vocab")
    save_vocabulary(vocab, path)
    cov = coverage(vocab.actions, demos)
    print(f"vocabulary N={vocab.N} T={vocab.T} stop_action={vocab.has_stop_action} coverage={cov:.4f} m -> {path}", file=out)
    return path


def cmd_train(cfg: dict, resume: bool = False, out=sys.stdout) -> Path:
    v, m, t = cfg["vocabulary"], cfg["model"], cfg["train"]
    ds = load_dataset(_require(artifact(cfg, "dataset"), "dataset"), expected_T=v["T"])
    if t["seeds"] is not None:
        ds = ds.select(seeds=t["seeds"])
    if len(ds) == 0:
        raise ValidationError("no training frames after seed selection")
    vocab = load_vocabulary(_require(artifact(cfg, "vocab"), "vocabulary file"), expected_T=v["T"])
    ckpt_path = artifact(cfg, "checkpoint")
    report = output_dir(cfg) / "loss_report.jsonl"
    params = dict(
        tau=t["tau"],
        lambda_conflict=t["lambda_conflict"],
        use_dist_loss=t["use_dist_loss"],
        lr=t["lr"],
        beta1=t["beta1"],
        beta2=t["beta2"],
        eps=t["eps"],
        batch_size=t["batch_size"],
        steps=t["steps"],
        seed=cfg["seed"],
        ablate=tuple(t["ablate"]),
        conflict_margin=t["conflict_margin"],
    )
    if resume:
        store, mcfg = checkpoint_from_bytes(_require(ckpt_path, "checkpoint to resume").read_bytes())
        planner = ProbabilisticPlanner.from_checkpoint(store, mcfg, vocab, warm_start=True, **params)
    else:
        planner = ProbabilisticPlanner(vocabulary=vocab, warm_start=False, **m, **params)
        planner.train_config()  # validates before the report is truncated
        output_dir(cfg).mkdir(parents=True, exist_ok=True)
        report.write_bytes(b"")
    planner.set_params(loss_report=str(report))
    start = planner.params_.step if resume else 0
    planner.fit(ds.snapshots, ds.trajectories)
    atomic_write_bytes(ckpt_path, checkpoint_to_bytes(planner.params_, planner.config_))
    hist = planner.loss_history_
    first, last = hist[0]["loss_total"], hist[-1]["loss_total"]
    print(f"trained steps {start}->{planner.n_steps_} loss {first:.4f}->{last:.4f} -> {ckpt_path}", file=out)
    return ckpt_path


def cmd_eval_open(cfg: dict, out=sys.stdout) -> Path:
    e = cfg["eval"]
    key = "eval_dataset" if cfg["paths"]["eval_dataset"] else "dataset"
    ds = load_dataset(_require(artifact(cfg, key), "evaluation dataset"), expected_T=cfg["vocabulary"]["T"])
    if e["frame_seeds"] is not None:
        ds = ds.select(seeds=e["frame_seeds"])
    if len(ds) == 0:
        raise ValidationError("no evaluation frames")
    planner = _planner_from_files(cfg, e["ablate"])
    metrics = open_loop_metrics(planner, ds.frames, dt_wp=cfg["vocabulary"]["dt_wp"])
    report = {
        "mode": "open",
        "n_frames": len(ds),
        "ablate": sorted(e["ablate"]),
        "l2": metrics["l2"],
        "collision": metrics["collision"],
    }
    path = output_dir(cfg) / "eval_open.json"
    _write_json(path, report)
    l2 = " ".join(f"{k}={v:.3f}" for k, v in metrics["l2"].items())
    col = " ".join(f"{k}={v:.1f}%" for k, v in metrics["collision"].items())
    print(f"open-loop L2 {l2} | collision {col} -> {path}", file=out)
    return path


def cmd_eval_closed(cfg: dict, out=sys.stdout) -> Path:
    e = cfg["eval"]
    scenarios = load_scenarios(cfg)
    planner = None if e["policy"] == "expert" else _planner_from_files(cfg, e["ablate"])
    v = cfg["vocabulary"]
    replay_dir = output_dir(cfg) / "replays"
    episodes = []
    for spec in scenarios:
        for seed in e["seeds"]:
            if planner is None:
                policy = ExpertDriver(spec.expert_variants[0])
            else:
                policy = PlannerPolicy(planner, mode=e["policy"], k=e["K"])
            res = simulate_episode(spec, policy, seed=seed, penalties=e["penalties"], horizon=v["T"], dt_wp=v["dt_wp"])
            write_replay(res, replay_dir / f"{spec.name}_{seed}.jsonl")
            episodes.append(res.summary())
            print(
                f"{spec.name} seed={seed} RC={res.route_completion:.1f} IS={res.infraction_score:.3f} DS={res.driving_score:.1f}",
                file=out,
            )
    mean = {k: float(np.mean([ep[k] for ep in episodes])) for k in ("route_completion", "infraction_score", "driving_score")}
    report = {"mode": "closed", "policy": e["policy"], "ablate": sorted(e["ablate"]), "episodes": episodes, "mean": mean}
    path = output_dir(cfg) / "eval_closed.json"
    _write_json(path, report)
    print(f"mean RC={mean['route_completion']:.1f} IS={mean['infraction_score']:.3f} DS={mean['driving_score']:.1f} -> {path}", file=out)
    return path


_CSV_FIELDS = ["t", "x", "y", "heading", "speed", "steer", "throttle", "brake", "argmax_index", "events"]


def replay_csv(records: list[dict]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_CSV_FIELDS)
    for r in records:
        x, y, h = r["ego_pose"]
        steer, throttle, brake = r["control"]
        w.writerow([r["t"], x, y, h, r["speed"], steer, throttle, brake, r["argmax_index"], ";".join(r["events"])])
    return buf.getvalue().encode()


def replay_svg(records: list[dict], spec=None, width: int = 900) -> bytes:
    """Top-down view: map lines, agent tracks (grey), ego track (blue), events (red)."""
    pts = [r["ego_pose"][:2] for r in records]
    for r in records:
        pts.extend(a[1:3] for a in r["agents"])
    if spec is not None:
        for pl in spec.map:
            pts.extend(np.asarray(pl.points).tolist())
    xy = np.asarray(pts, dtype=float).reshape(-1, 2)
    lo, hi = xy.min(axis=0) - 5.0, xy.max(axis=0) + 5.0
    scale = width / max(hi[0] - lo[0], 1e-6)
    height = max(int((hi[1] - lo[1]) * scale), 50)

    def tx(p) -> str:
        return f"{(p[0] - lo[0]) * scale:.2f},{(hi[1] - p[1]) * scale:.2f}"

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">', '<rect width="100%" height="100%" fill="white"/>']
    if spec is not None:
        for pl in spec.map:
            color = "black" if pl.kind == "road_boundary" else "#bbbbbb"
            parts.append(f'<polyline fill="none" stroke="{color}" points="{" ".join(tx(p) for p in pl.points)}"/>')
    tracks: dict[str, list] = {}
    for r in records:
        for a in r["agents"]:
            tracks.setdefault(a[0], []).append(a[1:3])
    for aid, tr in sorted(tracks.items()):
        parts.append(f'<polyline fill="none" stroke="grey" stroke-dasharray="4 2" points="{" ".join(tx(p) for p in tr)}"><title>{aid}</title></polyline>')
    parts.append(f'<polyline fill="none" stroke="blue" stroke-width="2" points="{" ".join(tx(p) for p in pts[: len(records)])}"/>')
    for r in records:
        if r["events"]:
            cx, cy = tx(r["ego_pose"][:2]).split(",")
            parts.append(f'<circle cx="{cx}" cy="{cy}" r="5" fill="red"><title>{" ".join(r["events"])} t={r["t"]}</title></circle>')
    parts.append("</svg>")
    return ("\n".join(parts) + "\n").encode()


def cmd_replay_export(cfg: dict, replays: list, scenario: str | None = None, out=sys.stdout) -> list[Path]:
    if not replays:
        raise ValidationError("no replay files given")
    paths = [_require(Path(p), "replay file") for p in replays]
    spec = None
    if scenario is not None:
        spec = load_scenario(scenario) if scenario.endswith(".json") else load_bundled_scenario(scenario)
    written = []
    export_dir = output_dir(cfg) / "export"
    for p in paths:
        try:
            records = read_replay(p)
        except (json.JSONDecodeError, UnicodeDecodeError) as err:
            raise FormatError(f"replay {p} is not line-delimited JSON: {err}") from None
        if not records:
            raise FormatError(f"replay {p} is empty", offset=0)
        stem = p.name[: -len(p.suffix)] if p.suffix else p.name
        svg, csv_path = export_dir / f"{stem}.svg", export_dir / f"{stem}.csv"
        atomic_write_bytes(svg, replay_svg(records, spec))
        atomic_write_bytes(csv_path, replay_csv(records))
        written += [svg, csv_path]
        print(f"{p} -> {svg}, {csv_path}", file=out)
    return written


# --------------------------------------------------------------------------- argument parsing


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _groups(text: str) -> list[str]:
    return [g for g in text.split(",") if g]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="probplan", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir")
    common.add_argument("--scenarios", help="directory of scenario JSON files (default: bundled suite)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field, e.g. train.steps=500")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("collect", parents=[common], help="run the expert and write a demonstration dataset")
    p = sub.add_parser("build-vocab", parents=[common], help="build the planning vocabulary")
    p.add_argument("-N", type=int, dest="n_actions")
    p = sub.add_parser("train", parents=[common], help="train the planner")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint")
    p.add_argument("--no-dist-loss", action="store_true")
    p.add_argument("--no-conflict-loss", action="store_true")
    p.add_argument("--ablate", type=_groups, help=f"comma list of token groups to zero: {','.join(TOKEN_GROUPS)}")
    for name in ("eval-open", "eval-closed"):
        p = sub.add_parser(name, parents=[common], help=f"{name.split('-')[1]}-loop evaluation")
        p.add_argument("--ablate", type=_groups)
        if name == "eval-closed":
            p.add_argument("--policy", choices=["argmax", "topk", "expert"])
            p.add_argument("-K", type=int, dest="top_k")
    p = sub.add_parser("replay-export", parents=[common], help="export replay files as SVG and CSV")
    p.add_argument("replays", nargs="+")
    p.add_argument("--scenario", help="bundled scenario name or JSON path, to draw the map")
    return parser


def _overrides(args) -> dict:
    o = _parse_set(args.set)
    for attr, key in (
        ("seed", "seed"),
        ("output_dir", "paths.output_dir"),
        ("scenarios", "paths.scenarios"),
        ("n_actions", "vocabulary.N"),
        ("steps", "train.steps"),
        ("policy", "eval.policy"),
        ("top_k", "eval.K"),
    ):
        value = getattr(args, attr, None)
        if value is not None:
            o[key] = value
    if getattr(args, "no_dist_loss", False):
        o["train.use_dist_loss"] = False
    if getattr(args, "no_conflict_loss", False):
        o["train.lambda_conflict"] = 0.0
    if getattr(args, "ablate", None) is not None:
        o["train.ablate" if args.command == "train" else "eval.ablate"] = args.ablate
    return o


def run(argv=None, out=sys.stdout, env=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = _overrides(args)
        cfg = load_config(args.config, overrides, env)
        if args.command == "collect":
            cmd_collect(cfg, out)
        elif args.command == "build-vocab":
            cmd_build_vocab(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, resume=args.resume, out=out)
        elif args.command == "eval-open":
            cmd_eval_open(cfg, out)
        elif args.command == "eval-closed":
            cmd_eval_closed(cfg, out)
        elif args.command == "replay-export":
            cmd_replay_export(cfg, args.replays, args.scenario, out)
    except (SimulationDivergedError, NonFiniteError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except ProbPlanError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
