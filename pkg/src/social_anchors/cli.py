"""Command-line entry point.

Subcommands: ``generate`` (social-force scenes), ``simulate-dcm``
(rule-following agents plus a choice log), ``train`` (full model, or
``--dcm-only`` rule-weight estimation), ``evaluate`` (metrics table
against a constant-velocity baseline), ``explain`` (interpretability
maps for one step) and ``gradcheck`` (finite-difference audit of the
backward pass).

Exit codes: 0 success, 2 validation/config/data errors, 3 numeric
failures.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import data as data_mod
from .config import ConfigError, config_echo, load_config
from .data import DataFormatError, read_choice_log, read_scenes, write_manifest, write_scenes
from .dcm import BetaWeights, explain
from .evaluation import AnchorModelPredictor, ConstantVelocityPredictor, evaluate, metrics_table
from .geometry import MissingFrameError
from .neural import ModelParams, forward_step, load_checkpoint, save_checkpoint
from .report import report_svg, report_text
from .training import (
    NumericError,
    fit_mnl,
    gradient_check,
    mnl_information,
    pack_scene,
    train,
    zero_nn_components,
)

GRADCHECK_TOL = 1e-4
BETA_NAMES = ("dir", "occ", "col", "acc", "dec")


def _load_goals(data_path) -> dict[int, dict[int, np.ndarray]]:
    manifest_path = str(data_path) + ".manifest.json"
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(
            f"goal-conditioned run needs goals in {manifest_path}"
        ) from None
    goals = manifest.get("goals")
    if goals is None:
        raise ConfigError(f"{manifest_path} has no 'goals' entry")
    return {
        int(sid): {int(pid): np.asarray(g, dtype=np.float64) for pid, g in peds.items()}
        for sid, peds in goals.items()
    }


def _primary_goals(scenes, goals) -> dict[int, np.ndarray]:
    return {s.scene_id: goals[s.scene_id][s.primary_id] for s in scenes}


def _print_beta(beta: np.ndarray, std_err: np.ndarray) -> None:
    print("rule weight estimates:")
    for name, b, se in zip(BETA_NAMES, beta, std_err):
        print(f"  beta_{name:<4} {b:+.4f}  (std err {se:.4f})")


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    sim = cfg.sim
    if args.scenes is not None:
        sim = data_mod.SimConfig(**{**_as_kwargs(sim), "n_scenes": args.scenes})
    if args.seed is not None:
        sim = data_mod.SimConfig(**{**_as_kwargs(sim), "seed": args.seed})
    scenes, goals = data_mod.generate_social_force(
        sim, cfg.horizons.t_obs, cfg.horizons.t_pred, cfg.horizons.dt
    )
    write_scenes(scenes, args.out)
    write_manifest(
        str(args.out) + ".manifest.json",
        {
            "kind": "social_force",
            "n_scenes": len(scenes),
            "config": config_echo(cfg),
            "goals": {
                str(sid): {str(pid): [round(float(g[0]), 6), round(float(g[1]), 6)] for pid, g in peds.items()}
                for sid, peds in goals.items()
            },
        },
    )
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def _as_kwargs(dc) -> dict:
    return {f: getattr(dc, f) for f in dc.__dataclass_fields__}


def cmd_simulate_dcm(args) -> int:
    cfg = load_config(args.config)
    sim = cfg.dcm_sim
    overrides = {}
    if args.scenes is not None:
        overrides["n_scenes"] = args.scenes
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        sim = data_mod.DcmSimConfig(**{**_as_kwargs(sim), **overrides})
    beta = BetaWeights(dir=args.beta_dir, occ=args.beta_occ, col=args.beta_col,
                       acc=args.beta_acc, dec=args.beta_dec)
    scenes, log = data_mod.simulate_dcm_agents(
        beta, sim, cfg.anchors, cfg.dcm, cfg.horizons.t_obs, cfg.horizons.t_pred, cfg.horizons.dt
    )
    write_scenes(scenes, args.out)
    choices_path = str(args.out) + ".choices.ndjson"
    data_mod.write_choice_log(log, choices_path)
    write_manifest(
        str(args.out) + ".manifest.json",
        {
            "kind": "dcm_sim",
            "n_scenes": len(scenes),
            "n_choices": len(log),
            "beta": {name: getattr(beta, attr) for name, attr in
                     zip(BETA_NAMES, ("dir", "occ", "col", "acc", "dec"))},
            "config": config_echo(cfg),
        },
    )
    print(f"wrote {len(scenes)} scenes to {args.out} ({len(log)} choices logged)")
    return 0


def _is_choice_log(path) -> bool:
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                return '"choice"' in line.split(":", 1)[0]
    return False


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    k = cfg.anchors.n_anchors

    if args.dcm_only and _is_choice_log(args.data):
        log = read_choice_log(args.data)
        fit = fit_mnl(log.features, log.chosen)
        _print_beta(fit.beta, fit.std_err)
        print(f"log-likelihood {fit.log_likelihood:.2f} over {fit.n_obs} choices "
              f"({fit.n_iter} Newton iterations)")
        params = ModelParams.init(cfg.model, k, cfg.seed)
        zero_nn_components(params)
        params.tensors["beta"].data = fit.beta.copy()
        save_checkpoint(args.out, params, config_echo(cfg))
        print(f"wrote checkpoint {args.out}")
        return 0

    scenes = read_scenes(args.data, cfg.horizons.t_obs, cfg.horizons.dt)
    goals = None
    if cfg.model.goal_conditioned:
        goals = _primary_goals(scenes, _load_goals(args.data))
    train_cfg = cfg.train
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    train_cfg.dcm_only = args.dcm_only
    params = ModelParams.init(cfg.model, k, cfg.seed)
    log = train(scenes, params, train_cfg, cfg.anchors, cfg.dcm, goals)
    if args.dcm_only:
        beta = params.tensors["beta"].data
        packs = [pack_scene(s, cfg.anchors, cfg.dcm, cfg.model) for s in scenes]
        feats = np.concatenate([p.features[p.loss_rows] for p in packs])
        labels = np.concatenate([p.khat[p.loss_rows] for p in packs])
        info = mnl_information(feats, labels, beta)
        std_err = np.sqrt(np.maximum(np.diag(np.linalg.inv(info + 1e-10 * np.eye(5))), 0.0))
        _print_beta(beta, std_err)
    save_checkpoint(args.out, params, config_echo(cfg))
    if args.log is not None:
        log.to_csv(args.log)
    final = log.records[-1] if log.records else None
    if final is not None:
        print(f"epoch {final.epoch}: loss {final.mean_loss:.4f}, accuracy {final.accuracy:.3f}")
    print(f"wrote checkpoint {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    params, echo = load_checkpoint(args.checkpoint)
    cfg = load_config(args.config) if args.config else load_config(document=echo)
    scenes = read_scenes(args.data, cfg.horizons.t_obs, cfg.horizons.dt)
    goals = _load_goals(args.data) if cfg.model.goal_conditioned else None
    predictor = AnchorModelPredictor(
        params, cfg.anchors, cfg.dcm, neighbour_replay=cfg.eval.neighbour_replay, goals=goals
    )
    threads = args.threads if args.threads is not None else cfg.threads
    report = evaluate(
        predictor, scenes, cfg.eval.top_k, cfg.eval.collision_threshold,
        cfg.eval.collision_substeps, threads,
    )
    baseline = evaluate(
        ConstantVelocityPredictor(), scenes, cfg.eval.top_k, cfg.eval.collision_threshold,
        cfg.eval.collision_substeps, threads,
    )
    print(metrics_table([("SAnchor", report), ("Constant velocity", baseline)]), end="")
    if args.csv is not None:
        report.to_csv(args.csv)
        baseline.to_csv(str(args.csv) + ".cv.csv")
    return 0


def cmd_explain(args) -> int:
    params, echo = load_checkpoint(args.checkpoint)
    cfg = load_config(args.config) if args.config else load_config(document=echo)
    scenes = read_scenes(args.data, cfg.horizons.t_obs, cfg.horizons.dt)
    by_id = {s.scene_id: s for s in scenes}
    if args.scene_id not in by_id:
        raise DataFormatError(f"unknown scene id {args.scene_id}")
    scene = by_id[args.scene_id]
    t = args.t if args.t is not None else scene.last_observed_frame
    if not scene.start_frame + 1 <= t <= scene.last_frame - 1:
        raise DataFormatError(
            f"frame {t} outside usable range [{scene.start_frame + 1}, {scene.last_frame - 1}]"
        )
    goals = None
    if cfg.model.goal_conditioned:
        goals = {
            pid: g for pid, g in _load_goals(args.data)[scene.scene_id].items()
        }
    hidden: dict = {}
    outputs = {}
    for frame in range(scene.start_frame + 1, t + 1):
        outputs, hidden = forward_step(
            scene, frame, hidden, params, cfg.anchors, cfg.dcm, goals=goals
        )
    step = outputs[scene.primary_id]
    rep = explain(
        step.state, step.anchor_set, params.beta_weights, cfg.dcm,
        step.motion_logits, step.interaction_logits,
    )
    prefix = args.out if args.out is not None else f"explain_scene{scene.scene_id}_t{t}"
    with open(prefix + ".txt", "w") as fh:
        fh.write(report_text(rep))
    with open(prefix + ".svg", "w") as fh:
        fh.write(report_svg(rep))
    top = int(np.argmax(rep.probabilities))
    print(f"scene {scene.scene_id} frame {t}: most probable anchor {top} "
          f"(p={rep.probabilities[top]:.3f}); wrote {prefix}.txt and {prefix}.svg")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    sim = data_mod.SimConfig(
        n_scenes=2, min_peds=3, max_peds=4, arena_radius=2.5,
        desired_speed=cfg.sim.desired_speed, seed=seed,
    )
    scenes, goals = data_mod.generate_social_force(
        sim, cfg.horizons.t_obs, cfg.horizons.t_pred, cfg.horizons.dt
    )
    params = ModelParams.init(cfg.model, cfg.anchors.n_anchors, seed)
    packs = [
        pack_scene(
            s, cfg.anchors, cfg.dcm, cfg.model,
            goals[s.scene_id][s.primary_id] if cfg.model.goal_conditioned else None,
        )
        for s in scenes
    ]
    report = gradient_check(params, packs, seed=seed, n_slices=args.slices)
    worst = max(report.values())
    for group, err in report.items():
        flag = "ok" if err < GRADCHECK_TOL else "FAIL"
        print(f"  {group:<10} max rel err {err:.3e}  {flag}")
    print(f"overall max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:.0e})")
    if worst >= GRADCHECK_TOL:
        raise NumericError(f"gradient check failed: {worst:.3e} >= {GRADCHECK_TOL:.0e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="social-anchors",
        description="Anchor-based interpretable pedestrian trajectory forecasting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate social-force scenes")
    p.add_argument("out", help="output ndjson path")
    p.add_argument("--config", default=None)
    p.add_argument("--scenes", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("simulate-dcm", help="simulate rule-following agents with a choice log")
    p.add_argument("out", help="output ndjson path (choices go to <out>.choices.ndjson)")
    p.add_argument("--config", default=None)
    p.add_argument("--scenes", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--beta-dir", type=float, default=0.0)
    p.add_argument("--beta-occ", type=float, default=0.0)
    p.add_argument("--beta-col", type=float, default=0.0)
    p.add_argument("--beta-acc", type=float, default=0.0)
    p.add_argument("--beta-dec", type=float, default=0.0)
    p.set_defaults(func=cmd_simulate_dcm)

    p = sub.add_parser("train", help="train the model (or --dcm-only rule weights)")
    p.add_argument("data", help="scene dataset, or a choice log with --dcm-only")
    p.add_argument("out", help="output checkpoint path")
    p.add_argument("--config", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--log", default=None, help="write per-epoch CSV here")
    p.add_argument("--dcm-only", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics table vs the constant-velocity baseline")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--config", default=None, help="override the checkpoint's config")
    p.add_argument("--csv", default=None, help="write per-scene metrics CSV here")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="interpretability maps for one scene step")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--scene-id", type=int, required=True)
    p.add_argument("--t", type=int, default=None, help="frame (default: last observed)")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None, help="output prefix for .txt/.svg")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("gradcheck", help="finite-difference audit of the gradients")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--slices", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, DataFormatError, MissingFrameError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
