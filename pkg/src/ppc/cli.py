"""Command-line entry point: ``ppc <subcommand> [flags]``.

Settings come from an optional ``--config`` file, then ``--set key=value``
overrides, then the dedicated flags; later sources win.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import subprocess
import sys
from pathlib import Path
from typing import Sequence

import torch

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_config_text
from .errors import ConfigError, PPCError
from .evalkit import evaluate, write_report
from .iterate import ITERATIVE, SINGLE_PASS, export_trace, generate_batch
from .model import DualStreamDiT, init_pose_stream
from .train import model_grad_check, randomize_, train_phase
from .world import decompose_stages, gen_scene, gen_scenes, read_dataset, render_pose, render_rgb, write_dataset


def version_string() -> str:
    """Package version, plus ``git describe`` output when run from a checkout."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def parse_people(raw: str) -> tuple[int, int]:
    """``"2"`` or ``"2..3"`` to an inclusive range."""
    lo, _, hi = raw.partition("..")
    try:
        a, b = int(lo), int(hi or lo)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad people range {raw!r}") from None
    if a < 1 or b < a:
        raise argparse.ArgumentTypeError(f"bad people range {raw!r}")
    return a, b


def _resolve(args: argparse.Namespace, flag_values: dict) -> RunConfig:
    values = load_config(args.config) if args.config else {}
    if args.set:
        values.update(parse_config_text("\n".join(args.set)))
    values.update({k: v for k, v in flag_values.items() if v is not None})
    return RunConfig.from_values(values)


def write_manifest(out: Path, args: argparse.Namespace, cfg: RunConfig) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    lines = [
        f"command = {args.command}",
        f"argv = {' '.join(sys.argv[1:])}",
        f"config_path = {args.config or '-'}",
        f"seed = {args.seed}",
        f"version = {version_string()}",
        f"out = {out.resolve()}",
        "",
        "# resolved config",
        cfg.echo(),
    ]
    path = out / "manifest.txt"
    path.write_text("\n".join(lines), encoding="utf-8")
    return path


def _world_from_specs(cfg: RunConfig, specs) -> RunConfig:
    if not specs:
        raise ConfigError("dataset is empty")
    world = dataclasses.replace(cfg.world, canvas=specs[0].canvas, patch=specs[0].patch)
    return dataclasses.replace(cfg, world=world)


# --------------------------------------------------------------------------- commands
def cmd_gen_data(args, cfg: RunConfig, out: Path) -> int:
    lo, hi = args.people
    world = dataclasses.replace(cfg.world, max_people=max(cfg.world.max_people, hi))
    specs = gen_scenes(args.seed, args.scenes, world, people=(lo, hi))
    path = out / args.name
    write_dataset(path, specs)
    print(f"wrote {len(specs)} scenes to {path}")
    return 0


def cmd_pretrain(args, cfg: RunConfig, out: Path) -> int:
    specs = read_dataset(args.data)
    cfg = _world_from_specs(cfg, specs)
    model = DualStreamDiT(cfg.model, cfg.world, seed=args.seed)
    tcfg = dataclasses.replace(cfg.train, phase="pretrain")
    _, logs = train_phase(tcfg, specs, model, log_path=out / "metrics.csv", ckpt_dir=out)
    save_checkpoint(model, out / "phase1.ppc")
    print(f"phase-1 done: {len(logs)} steps, final loss {logs[-1].loss_total:.4f}" if logs
          else "phase-1 done: 0 steps")
    return 0


def cmd_finetune(args, cfg: RunConfig, out: Path) -> int:
    specs = read_dataset(args.data)
    base = load_checkpoint(args.ckpt)
    if base.has_pose_stream:
        raise ConfigError(f"{args.ckpt} is already a phase-2 checkpoint")
    model = init_pose_stream(base, cfg.model.lora_rank, seed=args.seed)
    tcfg = dataclasses.replace(cfg.train, phase="finetune")
    _, logs = train_phase(tcfg, specs, model, log_path=out / "metrics.csv", ckpt_dir=out)
    save_checkpoint(model, out / "phase2.ppc")
    print(f"phase-2 done: {len(logs)} steps" + (f", final loss {logs[-1].loss_total:.4f}" if logs else ""))
    return 0


def _sample_specs(args, model: DualStreamDiT):
    if args.spec_file:
        return read_dataset(args.spec_file)
    world = dataclasses.replace(model.world, num_people=args.people,
                                max_people=max(model.world.max_people, args.people))
    return [gen_scene(args.seed, world)]


def cmd_sample(args, cfg: RunConfig, out: Path) -> int:
    model = load_checkpoint(args.ckpt)
    specs = _sample_specs(args, model)
    mode = SINGLE_PASS if args.single_pass else ITERATIVE
    traces = generate_batch(model, specs, cfg.sample, mode=mode, text_tau=not args.no_text_tau)
    for spec, trace in zip(specs, traces):
        export_trace(trace, out / f"scene_{spec.seed}")
    print(f"wrote {len(traces)} traces under {out}")
    return 0


def cmd_eval(args, cfg: RunConfig, out: Path) -> int:
    specs = read_dataset(args.data)
    if args.ground_truth:
        samples = [[(render_rgb(s), render_pose(s.skeletons, s.canvas, cfg.world.pose_channels))]
                   * args.samples for s in specs]
        patch = specs[0].patch if specs else cfg.world.patch
        world = cfg.world
    else:
        if not args.ckpt:
            raise ConfigError("eval needs --ckpt or --ground-truth")
        model = load_checkpoint(args.ckpt)
        world = model.world
        patch = world.patch
        mode = SINGLE_PASS if args.single_pass else ITERATIVE
        samples = [[] for _ in specs]
        for k in range(args.samples):
            scfg = dataclasses.replace(cfg.sample, seed=cfg.sample.seed + k)
            for i, tr in enumerate(generate_batch(model, specs, scfg, mode=mode,
                                                  text_tau=not args.no_text_tau)):
                samples[i].append(tr)
    report = evaluate(specs, samples, patch=patch, palette_size=world.palette_size,
                      num_actions=world.num_actions)
    write_report(report, out)
    print(report.summary(), end="")
    return 0


def cmd_grad_check(args, cfg: RunConfig, out: Path) -> int:
    if args.ckpt:
        model = load_checkpoint(args.ckpt)
    else:
        mcfg = dataclasses.replace(cfg.model, dim=args.dim, heads=1, head_dim=args.dim,
                                   rope_split=_split_for(args.dim), depth=args.depth)
        model = DualStreamDiT(mcfg, cfg.world, seed=args.seed)
        if args.phase2:
            model = init_pose_stream(model, seed=args.seed)
    randomize_(model, seed=args.seed)
    world = model.world.with_people(2 if model.has_pose_stream else 1)
    stages = [decompose_stages(s, model.world.pose_channels)[-1]
              for s in gen_scenes(args.seed, args.batch, world)]
    report = model_grad_check(model, stages, args.tolerance, samples=args.samples, seed=args.seed)
    lines = report.lines()
    (out / "grad_check.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    worst = max(report.max_rel_err.values(), default=0.0)
    print(f"{len(report.max_rel_err)} tensors checked, max rel err {worst:.3e}, "
          f"{'PASS' if report.passed else 'FAIL'}")
    if not report.passed:
        print(f"error: gradient check failed on {', '.join(report.failures[:5])}", file=sys.stderr)
        return 1
    return 0


def _split_for(head_dim: int) -> tuple[int, int, int]:
    """Even three-way split of ``head_dim`` with the first part smallest."""
    q = head_dim // 2
    a = (q // 4) * 2 or 2
    rest = q - a // 2
    b = rest // 2 * 2
    return (a, b, head_dim - a - b)


def cmd_inspect(args, cfg: RunConfig, out: Path) -> int:
    model = load_checkpoint(args.ckpt)
    rows = ["name\tshape\tdtype\tnumel\tfrozen"]
    for name, p in model.named_parameters():
        rows.append(f"{name}\t{'x'.join(map(str, p.shape))}\t{str(p.dtype).replace('torch.', '')}"
                    f"\t{p.numel()}\t{int(not p.requires_grad)}")
    total = sum(p.numel() for p in model.parameters())
    train = sum(p.numel() for p in model.parameters() if p.requires_grad)
    rows.append(f"# total {total} trainable {train} pose_stream {int(model.has_pose_stream)}")
    text = "\n".join(rows) + "\n"
    (out / "params.tsv").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "sample": cmd_sample, "eval": cmd_eval, "grad-check": cmd_grad_check, "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    parser = argparse.ArgumentParser(prog="ppc", description=__doc__.splitlines()[0],
                                     allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"ppc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, help_: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[common], help=help_, allow_abbrev=False)

    p = add("gen-data", "write a synthetic scene dataset")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--people", type=parse_people, default=(1, 1), help="N or LO..HI")
    p.add_argument("--name", default="dataset.txt", help="file name inside --out")

    for name, help_ in (("pretrain", "phase-1 training"), ("finetune", "phase-2 pose-stream fine-tune")):
        p = add(name, help_)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--steps", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        if name == "finetune":
            p.add_argument("--ckpt", type=Path, required=True, help="phase-1 checkpoint")

    for name, help_ in (("sample", "generate scenes and export traces"),
                        ("eval", "score generations with the oracle")):
        p = add(name, help_)
        p.add_argument("--ckpt", type=Path, required=(name == "sample"))
        p.add_argument("--steps", type=int, help="sampling steps")
        p.add_argument("--guidance", type=float)
        p.add_argument("--single-pass", action="store_true", help="all people in one stage")
        p.add_argument("--no-text-tau", action="store_true", help="text tokens get tau = 0")
        if name == "sample":
            p.add_argument("--spec-file", type=Path, help="dataset file with the scenes to draw")
            p.add_argument("--people", type=int, default=2, help="people when drawing from --seed")
        else:
            p.add_argument("--data", type=Path, required=True, help="spec set")
            p.add_argument("--samples", type=int, default=5, help="generations per spec")
            p.add_argument("--ground-truth", action="store_true",
                           help="score ground-truth renders instead of a checkpoint")

    p = add("grad-check", "finite-difference gradient check")
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--samples", type=int, default=3, help="entries checked per tensor")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--phase2", action="store_true", help="check a phase-2 (LoRA) model")

    p = add("inspect", "print the parameter table of a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True)
    return parser


def _flag_values(args: argparse.Namespace) -> dict:
    vals = {}
    for flag, key in (("steps", "steps"), ("lr", "lr"), ("batch_size", "batch_size")):
        if args.command in ("pretrain", "finetune") and getattr(args, flag, None) is not None:
            vals[key] = getattr(args, flag)
    if args.command in ("sample", "eval"):
        vals["sample_steps"] = args.steps
        vals["guidance"] = args.guidance
        vals["sample_seed"] = args.seed
    if args.command in ("pretrain", "finetune"):
        vals["seed"] = args.seed
    return vals


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = os.environ.get("PPC_THREADS")
    try:
        if threads:
            torch.set_num_threads(max(1, int(threads)))
        cfg = _resolve(args, _flag_values(args))
        torch.manual_seed(args.seed)
        write_manifest(args.out, args, cfg)
        return COMMANDS[args.command](args, cfg, args.out)
    except (PPCError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
