"""``moe-upcycle`` command line.

Exit codes: 0 success, 1 a check failed (verify, diverged training), 2 usage,
config or input-file error. Every artifact a command writes carries a
``provenance`` record: argv, seed, package version, kernel backend and the
SHA-256 of each input file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .checkpoint import file_digest, init_dense_random, load_checkpoint, save_checkpoint, tensor_shapes
from .config import COMPENSATIONS, ROUTER_ORDERS, load_model_config, load_yaml
from .diagnostics import expert_cosine_similarity, flops_per_token, load_stats, verify_equivalence
from .errors import (
    ArgumentError,
    CheckpointIOError,
    ConfigError,
    CorruptionError,
    DimensionError,
    FormatError,
    TrainingDivergedError,
)
from .model import toynet_forward
from .numerics import Rng, backend_name
from .schedule import load_presets, schedule_from_dict, schedule_preset
from .trainer import SyntheticTask, TrainState, train
from .upcycle import ROUTER_INITS, plan_from_dict, upcycle

log = logging.getLogger("moe_upcycle")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
USAGE_ERRORS = (ConfigError, ArgumentError, DimensionError, FormatError, CorruptionError, CheckpointIOError, OSError)


def provenance(argv: list[str], seed: int | None, inputs: dict[str, str | Path]) -> dict:
    return {
        "argv": list(argv),
        "seed": seed,
        "version": __version__,
        "backend": backend_name(),
        "inputs": {role: {"path": str(p), "sha256": file_digest(p)} for role, p in inputs.items()},
    }


def _write_report(path: str | None, report: dict) -> None:
    if path:
        Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


# --- subcommands ---------------------------------------------------------------------


def cmd_init_dense(args, argv) -> int:
    cfg = load_model_config(args.config)
    if cfg.moe is not None:
        raise ConfigError("init-dense needs a dense model config (drop the moe section)")
    ckpt = init_dense_random(cfg, args.seed, std=args.std)
    ckpt.metadata["provenance"] = provenance(argv, args.seed, {"config": args.config})
    digest = save_checkpoint(ckpt, args.out)
    shapes = tensor_shapes(cfg)
    mlp_layers = sorted({n.split(".")[1] for n in shapes if ".mlp." in n})
    print(f"dense checkpoint {args.out}")
    print(f"layers {cfg.num_layers}  hidden {cfg.hidden_size}  ffn {cfg.ffn_hidden}  vocab {cfg.vocab_size}  {cfg.activation}")
    for name, shape in shapes.items():
        print(f"  {name:40s} {'x'.join(map(str, shape))}")
    print(f"{len(shapes)} tensors, {ckpt.num_params()} parameters, {len(mlp_layers)} MLP layers")
    print(f"sha256 {digest}")
    return EXIT_OK


_PLAN_FLAGS = {
    "expansion": "E",
    "granularity": "G",
    "topk": "T",
    "shared_experts": "shared",
    "router_order": "router_order",
    "router_init": "router_init",
    "compensation": "compensation",
    "output_scale": "output_scale",
    "permute_ffn": "permute",
    "reinit_fraction": "reinit_frac",
    "seed": "seed",
    "aux_coeff": "aux_coeff",
    "z_coeff": "z_coeff",
}


def _plan_from_args(args):
    plan = {}
    if args.plan:
        data = load_yaml(args.plan)
        plan.update(data.get("upcycle", data))
    for field, attr in _PLAN_FLAGS.items():
        value = getattr(args, attr)
        if value is not None:
            plan[field] = value
    if "expansion" not in plan:
        raise ConfigError("the expansion factor is required (-E or the plan file)")
    return plan_from_dict(plan)


def cmd_upcycle(args, argv) -> int:
    dense = load_checkpoint(args.dense)
    plan = _plan_from_args(args)
    moe = upcycle(dense, plan)
    inputs = {"dense": args.dense}
    if args.plan:
        inputs["plan"] = args.plan
    moe.metadata["provenance"] = provenance(argv, plan.seed, inputs)
    digest = save_checkpoint(moe, args.out)
    print(f"upcycled {moe.config.moe.label()} -> {args.out}")
    print(f"router {plan.router_order} init {plan.router_init}, compensation {plan.compensation}")
    print(f"scale factor {plan.scale_factor}")
    print(f"source sha256 {moe.metadata['upcycle']['source_digest']}")
    print(f"sha256 {digest}")
    return EXIT_OK


def _fraction_hint(ratio: float) -> str:
    return f" (~1/{1 / ratio:.0f})" if 0 < ratio < 0.5 else ""


def cmd_verify(args, argv) -> int:
    dense, moe = load_checkpoint(args.dense), load_checkpoint(args.moe)
    rep = verify_equivalence(dense, moe, tokens=args.tokens, seed=args.seed, tolerance=args.tol)
    for layer in rep.per_layer:
        print(
            f"layer {layer['layer']}: max rel diff {layer['max_rel_diff']:.3e}  "
            f"max abs diff {layer['max_abs_diff']:.3e}  output ratio {layer['mean_output_ratio']:.4f}"
        )
    print(f"logits max rel diff {rep.logits_max_rel_diff:.3e}")
    print(f"mean output ratio {rep.mean_output_ratio:.4f}{_fraction_hint(rep.mean_output_ratio)}")
    print(f"max rel diff {rep.max_rel_diff:.3e} (tolerance {rep.tolerance:g})")
    print("PASS" if rep.passed else "FAIL")
    report = rep.to_dict()
    report["provenance"] = provenance(argv, args.seed, {"dense": args.dense, "moe": args.moe})
    _write_report(args.report_out, report)
    return EXIT_OK if rep.passed else EXIT_FAILED


def cmd_diag(args, argv) -> int:
    moe = load_checkpoint(args.moe)
    inputs = {"moe": args.moe}
    report: dict = {"config": moe.config.to_dict(), "flops": flops_per_token(moe.config).to_dict()}
    if moe.config.moe is not None:
        ids = Rng(args.seed).child("diag/tokens").integers(0, moe.config.vocab_size, args.tokens)
        _, cache = toynet_forward(moe, ids)
        report["load"] = []
        for i, outcome in enumerate(cache.outcomes):
            stats = load_stats(outcome)
            report["load"].append(stats.to_dict())
            shares = " ".join(f"{f:.3f}" for f in stats.fractions)
            print(f"layer {i} load: {shares}")
            print(f"layer {i} entropy {stats.entropy:.4f}  min share {stats.min_share:.3f}  dead {int(stats.dead.sum())}")
    if args.dense:
        sim = expert_cosine_similarity(moe, load_checkpoint(args.dense))
        inputs["dense"] = args.dense
        report["cosine"] = sim
        for i, c in enumerate(sim["per_layer"]):
            print(f"layer {i} cosine to source {c:.6f}")
        print(f"mean cosine {sim['overall']:.6f}")
    fl = report["flops"]
    print(f"mlp flops/token/layer {fl['moe_routed'] + fl['shared']} (dense {fl['dense_mlp']}), router {fl['router']}")
    report["provenance"] = provenance(argv, args.seed, inputs)
    _write_report(args.report_out, report)
    return EXIT_OK


def cmd_flops(args, argv) -> int:
    cfg = load_model_config(args.config)
    fl = flops_per_token(cfg)
    label = cfg.moe.label() if cfg.moe else "dense"
    print(f"{label}: per token per layer")
    print(f"  dense mlp  {fl.dense_mlp}")
    print(f"  routed     {fl.moe_routed}")
    print(f"  shared     {fl.shared}")
    print(f"  router     {fl.router}")
    iso = " (iso-FLOP)" if abs(fl.ratio - 1.0) < 1e-12 else ""
    print(f"ratio {fl.ratio:.2f}{iso}")
    print(f"ratio with router {fl.ratio_with_router:.4f}")
    report = fl.to_dict()
    report["provenance"] = provenance(argv, None, {"config": args.config})
    _write_report(args.report_out, report)
    return EXIT_OK


def _schedule(spec: str, total_steps: int):
    if spec in load_presets()["schedules"]:
        return schedule_preset(spec, total_steps)
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"{spec!r} is neither a schedule preset nor a file")
    data = load_yaml(path)
    return schedule_from_dict(data.get("schedule", data), total_steps)


def cmd_train(args, argv) -> int:
    ckpt = load_checkpoint(args.ckpt)
    inputs = {"ckpt": args.ckpt}
    resume = "train_state" in ckpt.metadata
    if resume:
        state = TrainState.load(args.ckpt)
        if args.schedule is not None:
            raise ConfigError("the checkpoint carries its own schedule; drop --schedule to resume")
        if state.step + args.steps > state.schedule.total_steps:
            raise ConfigError(
                f"resuming at step {state.step} for {args.steps} steps overruns the schedule "
                f"({state.schedule.total_steps} steps)"
            )
    else:
        if args.task_config is None or args.schedule is None:
            raise ConfigError("--task-config and --schedule are required for a fresh run")
        task_cfg = dict(load_yaml(args.task_config))
        task_cfg = dict(task_cfg.get("task", task_cfg))
        batch = int(task_cfg.pop("batch_tokens", args.batch_tokens or 256))
        frozen = tuple(task_cfg.pop("frozen", ()) or ())
        task = SyntheticTask.from_dict(task_cfg)
        if task.vocab_size != ckpt.config.vocab_size:
            raise ConfigError(f"task vocabulary {task.vocab_size} differs from the model's {ckpt.config.vocab_size}")
        total = args.total_steps or args.steps
        state = TrainState(ckpt, _schedule(args.schedule, total), task, batch, frozen=frozen)
        inputs["task_config"] = args.task_config
        if Path(args.schedule).exists():
            inputs["schedule"] = args.schedule
    if args.batch_tokens is not None:
        state.batch_tokens = args.batch_tokens
    if args.aux_coeff is not None:
        state.aux_coeff = args.aux_coeff
    if args.z_coeff is not None:
        state.z_coeff = args.z_coeff
    if args.freeze is not None:
        state.frozen = tuple(f for f in args.freeze.split(",") if f)

    prov = provenance(argv, state.task.seed, inputs)
    state.ckpt.metadata["provenance"] = prov
    out = Path(args.out) if args.out else Path(args.ckpt).with_suffix(".trained.ckpt")
    status = EXIT_OK
    with open(args.metrics_out, "w") as metrics:
        metrics.write(json.dumps({"provenance": prov}) + "\n")
        try:
            train(state, args.steps, metrics)
        except TrainingDivergedError as exc:
            print(f"training diverged: {exc}", file=sys.stderr)
            status = EXIT_FAILED
    digest = state.save(out)
    print(f"trained {state.step} steps ({'resumed' if resume else 'fresh'}), checkpoint {out}")
    print(f"metrics {args.metrics_out}")
    print(f"sha256 {digest}")
    return status


# --- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moe-upcycle", description="Dense-to-MoE upcycling toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init-dense", help="write a randomly initialised dense checkpoint")
    s.add_argument("--config", required=True, help="model YAML")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--std", type=float, default=0.02, help="init standard deviation")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init_dense)

    s = sub.add_parser("upcycle", help="convert a dense checkpoint into an MoE checkpoint")
    s.add_argument("--dense", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--plan", help="YAML plan file; flags override its values")
    s.add_argument("-E", "--expansion", dest="E", type=int)
    s.add_argument("-G", "--granularity", dest="G", type=int)
    s.add_argument("-T", "--topk", dest="T", type=int)
    s.add_argument("--shared", type=int, help="number of shared experts")
    s.add_argument("--router-order", choices=ROUTER_ORDERS)
    s.add_argument("--router-init", choices=ROUTER_INITS)
    s.add_argument("--compensation", choices=COMPENSATIONS)
    s.add_argument("--output-scale", type=float, help="constant for output_scale compensation")
    s.add_argument("--permute", action="store_true", default=None, help="permute each expert's FFN axis")
    s.add_argument("--reinit-frac", type=float)
    s.add_argument("--aux-coeff", type=float)
    s.add_argument("--z-coeff", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_upcycle)

    s = sub.add_parser("verify", help="check an MoE checkpoint against its dense source")
    s.add_argument("--dense", required=True)
    s.add_argument("--moe", required=True)
    s.add_argument("--tokens", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--report-out")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("diag", help="expert load, cosine similarity and FLOPs of a checkpoint")
    s.add_argument("--moe", required=True)
    s.add_argument("--dense")
    s.add_argument("--tokens", type=int, default=1024)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report-out")
    s.set_defaults(func=cmd_diag)

    s = sub.add_parser("flops", help="per-token MLP FLOPs of a model config")
    s.add_argument("--config", required=True)
    s.add_argument("--report-out")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("train", help="train on the synthetic task; resumes checkpoints written by train")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task-config", help="task YAML (vocab_size, clusters, seed, ... batch_tokens, frozen)")
    s.add_argument("--schedule", help="preset name or schedule YAML")
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--total-steps", type=int, help="schedule length if longer than --steps")
    s.add_argument("--batch-tokens", type=int)
    s.add_argument("--aux-coeff", type=float)
    s.add_argument("--z-coeff", type=float)
    s.add_argument("--freeze", help="comma-separated tensor prefixes to keep fixed, e.g. emb,head")
    s.add_argument("--metrics-out", required=True)
    s.add_argument("--out", help="output checkpoint (default <ckpt>.trained.ckpt)")
    s.set_defaults(func=cmd_train)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args, argv)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
