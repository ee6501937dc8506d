"""Command-line entry point.

Subcommands: gen-data, train, eval, ablate, sweep, grad-check, project,
trace.  Exit codes: 0 success, 1 usage error, 2 runtime failure.  Every
run logs its resolved configuration.  A plain-text config file
(key=value, '#' comments) can seed any flag; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, fields

import numpy as np

from .baselines import DmnModel, NtmModel, init_dmn, init_ntm
from .data import (SynthWorld, TAMPER_MODES, generate_dataset, read_header,
                   read_records, split, write_records)
from .evaluation import (ABLATION_VARIANTS, MetricsReport, evaluate_model,
                         pca_project2d, reports_to_csv, reports_to_json,
                         run_ablation, score_episodes, variant_flags)
from .model import HmnModel, init_hmn, trace_record
from .training import (Adam, TrainConfig, full_grad_check, init_discriminator,
                       load_checkpoint, restore_params, save_checkpoint,
                       train_epoch)

log = logging.getLogger("hiermem")

MODEL_KINDS = ("hmn", "ntm", "dmn")

# paper-scale defaults; the desk preset is what tests and quick runs use
DESK = dict(memory_len=16, patches=16, feat_dim=16, hidden=24)


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Resolved settings for one command invocation."""

    seed: int = 42
    memory_len: int = 200
    patches: int = 196
    feat_dim: int = 256
    hidden: int = 300
    delta: int = 15
    stride: int = 20
    learning_rate: float = 2e-3
    batch_size: int = 1
    steps: int = 2000
    lambda_mse: float = 1.0
    lambda_cls: float = 1.0
    d_steps: int = 1
    variant: str = "full"
    model: str = "hmn"
    episodes: int = 60
    frames: int = 24
    noise_width: float = 0.05
    tamper: str = "temporal-break"
    fake_frac: float = 0.5
    train_frac: float = 0.7
    val_frac: float = 0.15
    jobs: int = 1

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            steps=self.steps, seed=self.seed, lambda_mse=self.lambda_mse,
            lambda_cls=self.lambda_cls, d_steps=self.d_steps,
            memory_len=self.memory_len, num_patches=self.patches,
            feature_dim=self.feat_dim, hidden=self.hidden, delta=self.delta)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def load_config_file(path) -> dict:
    """key=value lines; '#' starts a comment; unknown keys are rejected."""
    values: dict = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, _, value = line.partition("=")
            key = key.strip().replace("-", "_")
            value = value.strip()
            if key not in _FIELD_TYPES:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            default = getattr(RunConfig(), key)
            if isinstance(default, bool):
                values[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                values[key] = int(value)
            elif isinstance(default, float):
                values[key] = float(value)
            else:
                values[key] = value
            continue
    return values


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file applied before flags")
    p.add_argument("--preset", choices=["desk"], help="desk preset: small dims for fast runs")
    p.add_argument("--seed", type=int, help="seed for all randomness")
    p.add_argument("--memory-len", type=int, help="memory slots (default 200)")
    p.add_argument("--patches", type=int, help="patches per frame (default 196)")
    p.add_argument("--feat-dim", type=int, help="features per patch (default 256)")
    p.add_argument("--hidden", type=int, help="recurrent hidden width (default 300)")
    p.add_argument("--delta", type=int, help="future offset in frames (default 15)")
    p.add_argument("--stride", type=int, help="frame sampling stride (default 20)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, help="generator update steps")
    p.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lambda-mse", type=float)
    p.add_argument("--lambda-cls", type=float)
    p.add_argument("--d-steps", type=int, help="discriminator updates per generator update")
    p.add_argument("--variant", choices=ABLATION_VARIANTS)
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--train-frac", type=float)
    p.add_argument("--val-frac", type=float)


def _add_gen_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--episodes", type=int)
    p.add_argument("--frames", type=int, help="frames per episode")
    p.add_argument("--noise-width", type=float)
    p.add_argument("--tamper", choices=TAMPER_MODES)
    p.add_argument("--fake-frac", type=float)
    p.add_argument("--jobs", type=int, help="parallel generation workers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiermem",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic episodes into an FGR1 file")
    _add_common(p)
    _add_gen_flags(p)
    p.add_argument("--out", required=True, help="output FGR1 path")

    p = sub.add_parser("train", help="train a model on an FGR1 file")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--data", required=True, help="FGR1 episodes")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv", help="write the per-step loss trace here")

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out episodes")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--part", choices=["train", "val", "test", "all"], default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--json-out", help="write the report as JSON here")

    p = sub.add_parser("ablate", help="train and evaluate ablation variants")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--variants", default="full,no-beta,no-alpha,no-gamma,no-gan,no-eta",
                   help="comma-separated variant names")
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--json-out")
    p.add_argument("--jobs", type=int)

    p = sub.add_parser("sweep", help="grid over a hyperparameter, training each point")
    _add_common(p)
    _add_train_flags(p)
    _add_gen_flags(p)
    p.add_argument("--param", required=True,
                   choices=["memory-len", "patches", "delta", "episodes"],
                   help="which knob to sweep (episodes = dataset size)")
    p.add_argument("--values", required=True, help="comma-separated integer values")
    p.add_argument("--out", required=True, help="CSV results path")

    p = sub.add_parser("grad-check", help="central-difference check of every parameter")
    _add_common(p)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-5)

    p = sub.add_parser("project", help="2-d projection of read vectors to CSV")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("trace", help="export per-frame attention traces as JSON lines")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-episodes", type=int, default=1)

    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        for key, value in load_config_file(args.config).items():
            setattr(cfg, key, value)
    if getattr(args, "preset", None) == "desk":
        cfg.memory_len = DESK["memory_len"]
        cfg.patches = DESK["patches"]
        cfg.feat_dim = DESK["feat_dim"]
        cfg.hidden = DESK["hidden"]
        cfg.delta = 3
        cfg.stride = 1
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            setattr(cfg, f.name, value)
    return cfg


def log_config(cfg: RunConfig, command: str) -> None:
    resolved = " ".join(f"{k}={v}" for k, v in sorted(cfg.as_dict().items()))
    log.info("%s config: %s", command, resolved)


def build_model(kind: str, cfg: RunConfig, rng: np.random.Generator):
    mcfg = cfg.train_config().model_config()
    if kind == "hmn":
        return HmnModel(init_hmn(rng, mcfg))
    if kind == "ntm":
        return NtmModel(init_ntm(rng, mcfg))
    if kind == "dmn":
        return DmnModel(init_dmn(rng, mcfg))
    raise UsageError(f"unknown model kind {kind!r}")


def _split_parts(episodes, cfg: RunConfig):
    test_frac = max(0.0, 1.0 - cfg.train_frac - cfg.val_frac)
    return split(episodes, (cfg.train_frac, cfg.val_frac, test_frac), cfg.seed)


def _generate(cfg: RunConfig) -> list:
    world = SynthWorld(num_patches=cfg.patches, feature_dim=cfg.feat_dim,
                       noise_width=cfg.noise_width, tamper_mode=cfg.tamper)
    if cfg.jobs > 1:
        from multiprocessing import Pool

        seeds = np.random.SeedSequence(cfg.seed).generate_state(cfg.episodes)
        n_fake = int(round(cfg.episodes * cfg.fake_frac))
        flags = [i % 2 == 1 for i in range(cfg.episodes)]
        if sum(flags) != n_fake:
            flags = [i < n_fake for i in range(cfg.episodes)]
        jobs = [(world, cfg.frames, cfg.delta, int(seeds[i]), flags[i], cfg.stride, i)
                for i in range(cfg.episodes)]
        with Pool(cfg.jobs) as pool:
            eps = pool.starmap(_synth_one, jobs)
        return eps
    return generate_dataset(world, cfg.episodes, cfg.frames, cfg.delta, cfg.seed,
                            stride=cfg.stride, fake_fraction=cfg.fake_frac)


def _synth_one(world, frames, delta, seed, fake, stride, episode_id):
    from .data import synth_episode

    return synth_episode(world, frames, delta, seed, fake=fake, stride=stride,
                         episode_id=episode_id)


def _train_model(cfg: RunConfig, episodes) -> tuple:
    """Train cfg.model / cfg.variant for cfg.steps; returns (model, trace)."""
    tc = cfg.train_config()
    flags = variant_flags(cfg.variant)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    model = build_model(cfg.model, cfg, rng)
    use_gan = flags.use_gan and flags.use_eta
    disc = init_discriminator(rng, tc.model_config()) if use_gan else None
    g_opt = Adam(model.named_tensors(), tc.learning_rate)
    d_opt = Adam(disc.named_tensors(), tc.learning_rate) if disc is not None else None
    from .training import LossTrace

    trace = LossTrace()
    done = 0
    while done < tc.steps:
        part = train_epoch(model, disc, episodes, tc, rng, flags=flags,
                           max_steps=tc.steps - done, g_opt=g_opt, d_opt=d_opt,
                           start_step=done)
        if not part.rows:
            break
        trace.rows.extend(part.rows)
        done += len(part.rows)
    return model, disc, trace


def _checkpoint_payload(cfg: RunConfig) -> dict:
    payload = cfg.as_dict()
    payload["format"] = "hiermem-checkpoint"
    return payload


def _load_model(cfg_args: RunConfig, path):
    stored_cfg, tensors = load_checkpoint(path)
    cfg = RunConfig()
    for key, value in stored_cfg.items():
        if key in _FIELD_TYPES:
            setattr(cfg, key, value)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    model = build_model(cfg.model, cfg, rng)
    restore_params(model.named_tensors(), tensors)
    return model, cfg


# -- subcommand bodies -------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    log_config(cfg, "gen-data")
    episodes = _generate(cfg)
    count = write_records(args.out, episodes, delta=cfg.delta)
    log.info("wrote %d episodes to %s", count, args.out)
    print(f"wrote {count} episodes ({sum(len(e) for e in episodes)} frames) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    log_config(cfg, "train")
    episodes = read_records(args.data)
    if not episodes:
        raise RuntimeError(f"{args.data} holds no episodes")
    train_eps, _, _ = _split_parts(episodes, cfg)
    model, disc, trace = _train_model(cfg, train_eps)
    named = model.named_tensors()
    if disc is not None:
        named = named + disc.named_tensors()
    save_checkpoint(args.out, _checkpoint_payload(cfg), named)
    if args.loss_csv:
        trace.to_csv(args.loss_csv)
    print(f"trained {cfg.model}/{cfg.variant} for {len(trace.rows)} steps; "
          f"checkpoint at {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg_args = resolve_config(args)
    log_config(cfg_args, "eval")
    model, cfg = _load_model(cfg_args, args.checkpoint)
    episodes = read_records(args.data)
    parts = dict(zip(("train", "val", "test"), _split_parts(episodes, cfg)))
    parts["all"] = episodes
    chosen = parts[args.part]
    if not chosen:
        raise RuntimeError(f"split part {args.part!r} is empty")
    flags = variant_flags(cfg.variant)
    report = evaluate_model(model, chosen, variant=cfg.variant,
                            threshold=args.threshold, flags=flags.attention)
    print(MetricsReport.CSV_HEADER)
    print(report.csv_row())
    if args.json_out:
        reports_to_json([report], args.json_out)
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    log_config(cfg, "ablate")
    names = [v.strip() for v in args.variants.split(",") if v.strip()]
    for name in names:
        variant_flags(name)  # validate before any training starts
    episodes = read_records(args.data)
    ratios = (cfg.train_frac, cfg.val_frac,
              max(0.0, 1.0 - cfg.train_frac - cfg.val_frac))
    tc = cfg.train_config()
    if cfg.jobs > 1:
        from multiprocessing import Pool

        with Pool(cfg.jobs) as pool:
            reports = pool.starmap(run_ablation,
                                   [(name, tc, episodes, ratios) for name in names])
    else:
        reports = [run_ablation(name, tc, episodes, ratios) for name in names]
    reports_to_csv(reports, args.out)
    if args.json_out:
        reports_to_json(reports, args.json_out)
    print(MetricsReport.CSV_HEADER)
    for r in reports:
        print(r.csv_row())
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    log_config(cfg, "sweep")
    values = [int(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values must list at least one integer")
    param = args.param.replace("-", "_")
    field_name = {"memory_len": "memory_len", "patches": "patches",
                  "delta": "delta", "episodes": "episodes"}[param]
    rows = []
    for value in values:
        point = RunConfig(**cfg.as_dict())
        setattr(point, field_name, value)
        if field_name == "delta" and point.frames <= point.delta:
            point.frames = point.delta + point.frames
        episodes = _generate(point)
        train_eps, _, test_eps = _split_parts(episodes, point)
        model, _, _ = _train_model(point, train_eps)
        flags = variant_flags(point.variant)
        report = evaluate_model(model, test_eps, variant=f"{args.param}={value}",
                                flags=flags.attention)
        rows.append(report)
        log.info("sweep %s=%d: %s", args.param, value, report.as_dict())
    reports_to_csv(rows, args.out)
    print(MetricsReport.CSV_HEADER)
    for r in rows:
        print(r.csv_row())
    return 0


def cmd_grad_check(args) -> int:
    cfg = resolve_config(args)
    log_config(cfg, "grad-check")
    err = full_grad_check(cfg.train_config(), eps=args.eps)
    print(f"max relative gradient error: {err:.3e} "
          f"({'OK' if err < args.tolerance else 'FAIL'} at tolerance {args.tolerance:g})")
    if err >= args.tolerance:
        raise RuntimeError(f"gradient check failed: {err:.3e} >= {args.tolerance:g}")
    return 0


def cmd_project(args) -> int:
    cfg_args = resolve_config(args)
    log_config(cfg_args, "project")
    model, cfg = _load_model(cfg_args, args.checkpoint)
    episodes = read_records(args.data)
    flags = variant_flags(cfg.variant)
    scores, _, reads = score_episodes(model, episodes, flags=flags.attention)
    points = pca_project2d(reads)
    with open(args.out, "w") as fh:
        fh.write("id,label,x,y\n")
        for (eid, label), (x, y) in zip(zip(scores.episode_ids, scores.labels), points):
            fh.write(f"{eid},{label},{x:.8g},{y:.8g}\n")
    print(f"wrote {len(points)} projected read vectors to {args.out}")
    return 0


def cmd_trace(args) -> int:
    cfg_args = resolve_config(args)
    log_config(cfg_args, "trace")
    model, cfg = _load_model(cfg_args, args.checkpoint)
    episodes = read_records(args.data)[: args.max_episodes]
    if not episodes:
        raise RuntimeError("no episodes to trace")
    flags = variant_flags(cfg.variant)
    count = 0
    with open(args.out, "w") as fh:
        for ep in episodes:
            state = model.new_state()
            for t, grid in enumerate(ep.frames):
                out, state = model.step(state, grid, noise=None, flags=flags.attention)
                rec = trace_record(t, out)
                rec["episode"] = int(ep.episode_id)
                fh.write(json.dumps(rec) + "\n")
                count += 1
    print(f"wrote {count} attention trace records to {args.out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "grad-check": cmd_grad_check,
    "project": cmd_project,
    "trace": cmd_trace,
}


def run(argv) -> int:
    """Parse and dispatch; 0 success, 1 usage error, 2 runtime failure."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    level = logging.DEBUG if getattr(args, "verbose", False) else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=False)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
