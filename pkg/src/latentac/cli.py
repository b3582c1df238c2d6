"""Command-line entry point.

Subcommands: ``train``, ``eval``, ``improve``, ``scaling-fit``, ``flops``
and ``gen-data``. All reports are written as JSON under ``--out``; exit
code 0 on success, 1 on runtime failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import workflows
from .bins import ValueBins
from .data import EpisodeStore, read_store, write_store
from .envs import FIXTURES, make_behavior_dataset, make_fixture, tune_epsilon_behavior
from .evaluation import TabularModelPolicy, evaluate, self_improve
from .flops import count_flops
from .losses import LossWeights
from .presets import (FULL_MODALITY_SPEC, MODEL_SCALES, OBJECTIVE_PRESETS,
                      get_preset)
from .scaling import envelope, fit_power_laws, iso_return_grid, load_profiles_dir
from .training import OptimConfig, load_checkpoint, load_config, save_checkpoint


def _write_json(path: str, payload) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _bins_from_extra(extra: dict) -> ValueBins:
    b = extra["bins"]
    return ValueBins(b["q_min"], b["q_max"], b["count"])


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    env = cfg.get("env", "chain")
    fixture = make_fixture(env)
    preset = get_preset(args.preset)
    steps = args.steps if args.steps is not None else int(cfg.get("steps", 2000))
    episodes = int(cfg.get("episodes", 2000))
    optim = OptimConfig(
        lr_init=float(cfg.get("lr_init", 1e-4)),
        lr_peak=float(cfg.get("lr_peak", 3e-3)),
        lr_end=float(cfg.get("lr_end", 3e-4)),
        warmup_steps=int(cfg.get("warmup_steps", 100)),
        decay_steps=int(cfg.get("decay_steps", max(steps, 101))),
        batch_size=int(cfg.get("batch_size", 32)),
        traj_len=int(cfg.get("traj_len", 3)))
    weight_overrides = {}
    for key in ("eta", "alpha", "beta"):
        if key in cfg:
            weight_overrides[key] = float(cfg[key])
    if "n_samples" in cfg:
        weight_overrides["n_samples"] = int(cfg["n_samples"])
    if "target_period" in cfg:
        weight_overrides["target_period"] = int(cfg["target_period"])

    os.makedirs(args.out, exist_ok=True)
    metrics_path = os.path.join(args.out, "metrics.jsonl")
    if os.path.exists(metrics_path):
        os.remove(metrics_path)
    result = workflows.run_training(
        fixture, preset, episodes=episodes, steps=steps, seed=args.seed,
        optim=optim, weight_overrides=weight_overrides, metrics_path=metrics_path)

    write_store(os.path.join(args.out, "store"), result.store.episodes)
    extra = {"env": env, "preset": preset.name,
             "weights": dataclasses.asdict(result.weights),
             "bins": {"q_min": fixture.value_bins.q_min,
                      "q_max": fixture.value_bins.q_max,
                      "count": fixture.value_bins.count},
             "optim": dataclasses.asdict(result.optim)}
    save_checkpoint(os.path.join(args.out, "checkpoint.ckpt"), result.state,
                    result.moments, extra=extra)
    trials = int(cfg.get("eval_trials", 400))
    report = workflows.evaluate_state(result.state, fixture, trials,
                                      seed=args.seed + 1,
                                      greedy=bool(int(cfg.get("greedy_eval", 0))))
    _write_json(os.path.join(args.out, "report.json"), report.to_dict())
    _write_json(os.path.join(args.out, "config.json"),
                {"env": env, "preset": preset.name, "steps": steps,
                 "episodes": episodes, "seed": args.seed,
                 "weights": dataclasses.asdict(result.weights),
                 "optim": dataclasses.asdict(result.optim)})
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    env = args.env or ckpt.extra.get("env")
    if not env:
        raise RuntimeError("no environment recorded in checkpoint; pass --env")
    fixture = make_fixture(env)
    policy = TabularModelPolicy(ckpt.state.model, fixture.mdp.n_states)
    report = evaluate(policy, fixture.mdp, args.trials, args.seed,
                      greedy=args.greedy)
    if args.out:
        _write_json(os.path.join(args.out, "eval.json"), report.to_dict())
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_improve(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    env = args.env or ckpt.extra.get("env")
    if not env:
        raise RuntimeError("no environment recorded in checkpoint; pass --env")
    fixture = make_fixture(env)
    store_prefix = args.store or os.path.join(os.path.dirname(args.checkpoint), "store")
    store = EpisodeStore(read_store(store_prefix))
    saved = ckpt.extra.get("weights", {})
    weights = LossWeights(alpha=args.alpha, beta=args.beta,
                          eta=saved.get("eta", fixture.eta),
                          n_samples=saved.get("n_samples", 10),
                          target_period=saved.get("target_period", 100),
                          gamma=fixture.mdp.gamma)
    saved_optim = ckpt.extra.get("optim")
    optim = OptimConfig(**saved_optim) if saved_optim else OptimConfig(batch_size=32, traj_len=3)
    reports = self_improve(ckpt.state, fixture, store, weights, optim,
                           rounds=args.rounds,
                           episodes_per_round=args.episodes_per_round,
                           finetune_steps=args.finetune_steps, seed=args.seed,
                           eval_trials=args.trials)
    payload = {"rounds": [r.to_dict() for r in reports]}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "improve.json"), payload)
        save_checkpoint(os.path.join(args.out, "checkpoint.ckpt"), ckpt.state,
                        ckpt.moments, extra=ckpt.extra)
        write_store(os.path.join(args.out, "store"), store.episodes)
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_scaling_fit(args) -> int:
    lo, _, hi = args.flop_range.partition(":")
    flop_range = (float(lo), float(hi))
    profiles = load_profiles_dir(args.profiles)
    env_points = envelope(profiles, flop_range, args.points)
    fit = fit_power_laws([(p.flops, p.model_params, p.tokens or p.steps)
                          for p in env_points])
    payload = {
        "profiles": [{"name": p.name, "a": p.a, "k": p.k, "n0": p.n0, "b": p.b,
                      "params": p.model_params, "flops_per_step": p.flops_per_step,
                      "degenerate": p.degenerate} for p in profiles],
        "power_laws": fit.to_dict(),
    }
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "fits.json"), payload)
        with open(os.path.join(args.out, "envelope.csv"), "w", encoding="utf-8") as f:
            f.write("flops,best_return,model,params,tokens,steps\n")
            for p in env_points:
                f.write(f"{p.flops!r},{p.best_return!r},{p.model_name},"
                        f"{p.model_params!r},{p.tokens!r},{p.steps!r}\n")
        if args.levels:
            levels = [float(x) for x in args.levels.split(",")]
            params = sorted(p.model_params for p in profiles)
            grid = iso_return_grid(profiles, (params[0], params[-1]),
                                   flop_range, levels)
            with open(os.path.join(args.out, "contours.csv"), "w", encoding="utf-8") as f:
                f.write("level,params,flops\n")
                for level, pts in grid.contours.items():
                    for prm, flp in pts:
                        f.write(f"{level!r},{prm!r},{flp!r}\n")
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_flops(args) -> int:
    if args.scale == "custom":
        if args.latent_dim is None or args.blocks is None or args.widening is None:
            raise RuntimeError("custom scale requires --latent-dim, --blocks, --widening")
        from .backbone import ArchConfig
        arch = ArchConfig(n_latents=32, latent_dim=args.latent_dim,
                          n_blocks=args.blocks, widening=args.widening,
                          n_action_bins=101, n_value_bins=101, n_heads=8)
    else:
        arch = MODEL_SCALES[args.scale].arch()
    model = count_flops(FULL_MODALITY_SPEC, arch, batch=args.batch,
                        target_period=args.target_period)
    payload = {"scale": args.scale, "batch": args.batch,
               "target_period": args.target_period,
               "components": {"enc_p": model.enc_p, "enc_v": model.enc_v,
                              "enc_l": model.enc_l, "enc_a": model.enc_a,
                              "xattn_in": model.xattn_in,
                              "sattn_proc": model.sattn_proc,
                              "xattn_pi": model.xattn_pi,
                              "xattn_q": model.xattn_q},
               **model.summary()}
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_gen_data(args) -> int:
    if args.env == "decisive":
        fixture = FIXTURES["decisive"](behavior_success=args.success_rate)
        behavior = fixture.behavior
    else:
        fixture = make_fixture(args.env)
        behavior, _ = tune_epsilon_behavior(fixture.mdp, args.success_rate)
    rng = np.random.default_rng(args.seed)
    episodes = make_behavior_dataset(fixture.mdp, behavior, args.episodes, rng,
                                     task_id=fixture.task_id,
                                     group_id=fixture.group_id)
    write_store(args.out, episodes)
    rate = float(np.mean([e.success for e in episodes])) if episodes else 0.0
    print(json.dumps({"episodes": len(episodes), "empirical_success": rate,
                      "target": args.success_rate, "out": args.out},
                     sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentac",
        description="Offline actor-critic training, evaluation, "
                    "self-improvement, scaling fits and FLOP accounting.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a desk fixture")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--preset", required=True, choices=sorted(OBJECTIVE_PRESETS),
                   help="objective preset")
    p.add_argument("--seed", type=int, default=0, help="training seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, help="override configured step count")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint path")
    p.add_argument("--env", help="fixture name (defaults to checkpoint's)")
    p.add_argument("--trials", type=int, default=400, help="number of trials")
    p.add_argument("--seed", type=int, default=0, help="evaluation seed")
    p.add_argument("--greedy", action="store_true", help="greedy action selection")
    p.add_argument("--out", help="directory for eval.json")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("improve", help="self-improvement rounds from a checkpoint")
    p.add_argument("--checkpoint", required=True, help="starting checkpoint")
    p.add_argument("--rounds", type=int, required=True, help="improvement rounds")
    p.add_argument("--episodes-per-round", type=int, required=True,
                   help="episodes appended per round")
    p.add_argument("--finetune-steps", type=int, required=True,
                   help="training steps per round")
    p.add_argument("--env", help="fixture name (defaults to checkpoint's)")
    p.add_argument("--store", help="store prefix (defaults next to checkpoint)")
    p.add_argument("--trials", type=int, default=None, help="evaluation trials per round")
    p.add_argument("--alpha", type=float, default=0.0, help="finetune BC/RL trade-off")
    p.add_argument("--beta", type=float, default=38.0, help="finetune TD loss scale")
    p.add_argument("--seed", type=int, default=0, help="seed")
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=cmd_improve)

    p = sub.add_parser("scaling-fit", help="fit return profiles and power laws")
    p.add_argument("--profiles", required=True,
                   help="directory of <model>.csv files plus manifest.json")
    p.add_argument("--flop-range", default="1e18:1e21", help="lo:hi compute range")
    p.add_argument("--points", type=int, default=100, help="envelope grid points")
    p.add_argument("--levels", help="comma-separated iso-return levels")
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=cmd_scaling_fit)

    p = sub.add_parser("flops", help="FLOP accounting for a model scale")
    p.add_argument("--scale", required=True,
                   choices=sorted(MODEL_SCALES) + ["custom"], help="model scale")
    p.add_argument("--batch", type=int, default=512, help="batch size B")
    p.add_argument("--target-period", type=int, default=100,
                   help="target refresh period f")
    p.add_argument("--latent-dim", type=int, help="custom: latent width")
    p.add_argument("--blocks", type=int, help="custom: self-attention blocks")
    p.add_argument("--widening", type=int, help="custom: MLP widening factor")
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("gen-data", help="generate a synthetic behavior dataset")
    p.add_argument("--env", required=True, choices=sorted(FIXTURES), help="fixture")
    p.add_argument("--success-rate", type=float, required=True,
                   help="target behavior success rate")
    p.add_argument("--episodes", type=int, required=True, help="episode count")
    p.add_argument("--out", required=True, help="store path prefix")
    p.add_argument("--seed", type=int, default=0, help="generation seed")
    p.set_defaults(fn=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None) and not os.path.exists(args.config):
        parser.error(f"config file not found: {args.config}")
    if getattr(args, "checkpoint", None) and not os.path.exists(args.checkpoint):
        parser.error(f"checkpoint not found: {args.checkpoint}")
    if getattr(args, "profiles", None) and not os.path.isdir(args.profiles):
        parser.error(f"profile directory not found: {args.profiles}")
    try:
        return args.fn(args)
    except Exception as exc:  # runtime failure contract: one line, exit 1
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
