"""Command-line surface.

Subcommands: gen-data, train, eval, rollout, routing-stats, grad-check,
inspect-ckpt. Report-producing commands write delimited output and a
rendered figure side by side.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_mod
from . import model as model_mod
from . import pdedata, training
from .errors import ConfigError, DataError, NestmoeError, NumericError
from .seeding import stream_rng


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None


def cmd_gen_data(args) -> int:
    raw = _load_json(args.spec)
    n_traj = int(raw.pop("n_traj", 1))
    seed = int(raw.pop("seed", 0))
    raw["family"] = args.family
    spec = pdedata.PdeInstanceSpec.from_dict(raw)
    rng = stream_rng(seed, "datagen")
    trajs = [
        pdedata.generate(spec, int(rng.integers(2**31))) for _ in range(n_traj)
    ]
    pdedata.write_dataset(trajs, args.out, spec=spec, seed=seed)
    print(f"wrote {n_traj} {args.family} trajectories to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = training.RunConfig.from_dict(_load_json(args.config))
    out_dir = Path(args.out)
    result = training.train(cfg, out_dir=out_dir)
    from . import reports

    if result.history:
        reports.save_training_curves(result.history, out_dir / "training_curves.png")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {out_dir / 'metrics.csv'}")
    return 0


def _load_eval_inputs(args):
    params, _, mcfg, _ = ckpt_mod.load_checkpoint(args.ckpt)
    sources = [training.DataSource(p) for p in args.data]
    datasets = training.load_datasets(sources, mcfg)
    return params, mcfg, datasets


def cmd_eval(args) -> int:
    params, mcfg, datasets = _load_eval_inputs(args)
    result = training.evaluate(params, mcfg, datasets, rollout_steps=args.rollout)
    from . import reports

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports.write_eval_csv(result, out_dir / "eval.csv")
    reports.save_rollout_plot(result, out_dir / "eval.png")
    print(f"one-step L2RE {result.one_step:.5f} (persistence {result.persistence:.5f}) "
          f"over {result.n_windows} windows")
    for i, (m, p) in enumerate(zip(result.rollout, result.rollout_persistence), 1):
        print(f"rollout step {i}: model {m:.5f} persistence {p:.5f}")
    if args.report_routing:
        if len(result.family_fractions) >= 2:
            report = training.routing_report(result.family_fractions)
            reports.write_routing_csv(report, out_dir / "routing.csv")
            reports.save_routing_figure(report, out_dir / "routing.png")
            print(f"routing report: {out_dir / 'routing.csv'}")
        else:
            print("routing report skipped: needs at least two dataset families")
    return 0


def cmd_rollout(args) -> int:
    params, mcfg, datasets = _load_eval_inputs(args)
    ds = datasets[0]
    frames = ds.frames[: args.max_traj, : mcfg.history]
    preds = model_mod.rollout(frames, params, mcfg, args.steps)

    out_dir = Path(args.dump)
    out_dir.mkdir(parents=True, exist_ok=True)
    dumped = [
        pdedata.Trajectory(preds[i], ds.family) for i in range(preds.shape[0])
    ]
    pdedata.write_dataset(dumped, out_dir / "rollout.pded")

    from . import reports

    n_avail = ds.frames.shape[1] - mcfg.history
    show = min(args.steps, n_avail)
    if show > 0:
        truth = ds.frames[0, mcfg.history : mcfg.history + show]
        reports.save_frame_montage(truth, preds[0, :show], out_dir / "rollout.png")
    print(f"wrote {preds.shape[0]} rollouts of {args.steps} steps to {out_dir}")
    return 0


def cmd_routing_stats(args) -> int:
    params, mcfg, datasets = _load_eval_inputs(args)
    result = training.evaluate(params, mcfg, datasets, rollout_steps=0)
    report = training.routing_report(result.family_fractions)
    from . import reports

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports.write_routing_csv(report, out_dir / "routing.csv")
    reports.save_routing_figure(report, out_dir / "routing.png")
    for fam in report.families:
        row = " ".join(f"{v:6.2f}" for v in report.percentages[fam])
        print(f"{fam:12s} {row}")
    for (f1, f2), d in sorted(report.tv.items()):
        print(f"TV({f1}, {f2}) = {d:.4f}")
    return 0


def cmd_grad_check(args) -> int:
    if args.op:
        reports_ = [ad.grad_check(args.op, tol=args.tol)]
    else:
        reports_ = [ad.grad_check(name, tol=args.tol if args.tol else None)
                    for name in sorted(ad.GRAD_CASES)]
    failed = 0
    for r in reports_:
        status = "PASS" if r.passed else "FAIL"
        line = f"{status} {r.op:22s} max_rel_err {r.max_rel_err:.3e} (tol {r.tol:g})"
        if r.detail:
            line += f"  {r.detail}"
        print(line)
        failed += 0 if r.passed else 1
    if failed:
        raise NumericError(f"{failed} gradient check(s) failed")
    return 0


def cmd_inspect_ckpt(args) -> int:
    header = ckpt_mod.read_header(args.path)
    payload = header.pop("_payload")
    print(json.dumps(header["config"], indent=2))
    print(f"seed_state: {header.get('seed_state')}")
    opt = header.get("optim")
    print(f"optimizer: {opt if opt is None else {'t': opt['t'], **opt['hyper']}}")
    total = 0
    for entry in header["manifest"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        total += n
        print(f"  {entry['name']:55s} {str(tuple(entry['shape'])):18s} offset {entry['offset']}")
    print(f"{len(header['manifest'])} tensors, {total} values, payload {len(payload)} bytes")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nestmoe",
        description="Nested mixture-of-experts neural operator: data generation, "
        "training, evaluation, rollout, and routing analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic PDE trajectories")
    p.add_argument("--family", required=True, choices=pdedata.FAMILIES)
    p.add_argument("--spec", required=True, help="JSON file with PdeInstanceSpec fields plus n_traj/seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a run-config JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory (metrics, checkpoint, figures)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on datasets")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, nargs="+")
    p.add_argument("--rollout", type=int, default=0, help="rollout length S")
    p.add_argument("--report-routing", action="store_true")
    p.add_argument("--out", default="eval_out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rollout", help="autoregressive prediction dump")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, nargs="+")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--dump", required=True)
    p.add_argument("--max-traj", type=int, default=8)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("routing-stats", help="expert-selection distribution per dataset family")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, nargs="+")
    p.add_argument("--out", default="routing_out")
    p.set_defaults(func=cmd_routing_stats)

    p = sub.add_parser("grad-check", help="verify adjoints against finite differences")
    p.add_argument("--op", default=None)
    p.add_argument("--tol", type=float, default=None)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("inspect-ckpt", help="print checkpoint header and manifest")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect_ckpt)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NestmoeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 2)
    except BrokenPipeError:
        return 0  # output piped into a closed reader (e.g. head)


if __name__ == "__main__":
    sys.exit(main())
