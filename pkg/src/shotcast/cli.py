"""Command-line entry point: ``shotcast <subcommand> [--config run.json] [--seed N] [--out DIR]``.

Interactive rollout protocol (``rollout --interactive``): one JSON object per
stdin line, one JSON reply per stdout line.

    {"cmd": "generate", "chunks": 3}
    {"cmd": "append_shot", "boundary": 24, "prompt_seed": 7, "cue": 0.0}
    {"cmd": "snapshot", "path": "state.snap"}
    {"cmd": "status"}

Replies are ``{"ok": true, ...}`` or ``{"ok": false, "error": "..."}``. A
``generate`` reply lists the new chunk indices and the ``.bin`` file written
for each under ``--out/chunks``; the whole stream is written to ``--out``
when stdin closes.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import container
from .harness.config import ConfigError, RunConfig

log = logging.getLogger("shotcast")

VARIANT_NAMES = ("no-memory", "sink", "camr")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seeds")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="shotcast", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-tf", parents=[common], help="teacher-forcing training")
    s.add_argument("--iters", type=int, help="override train.iters")

    s = sub.add_parser("distill", parents=[common], help="ODE initialization then DMD (+GAN)")
    s.add_argument("--teacher", type=Path, required=True, help="teacher checkpoint")
    s.add_argument("--init-iters", type=int)
    s.add_argument("--dmd-iters", type=int)

    s = sub.add_parser("rollout", parents=[common], help="streaming generation")
    s.add_argument("--checkpoint", type=Path, help="model checkpoint (random init if omitted)")
    s.add_argument("--schedule", type=Path, help="shot schedule JSON {L, boundaries, prompt_seeds}")
    s.add_argument("--chunks", type=int, default=12)
    s.add_argument("--steps", type=int, help="Euler steps per chunk")
    s.add_argument("--policy", choices=("none", "sink", "camr"))
    s.add_argument("--resume", type=Path, help="continue from a session snapshot")
    s.add_argument("--interactive", action="store_true", help="read NDJSON commands from stdin")

    s = sub.add_parser("verify", parents=[common], help="run the invariant suite")
    s.add_argument("--full", action="store_true", help="full-size checks instead of the quick pass")
    s.add_argument("--show-mask", nargs=2, type=int, metavar=("N", "L"),
                   help="print the packed teacher-forcing mask for N chunks of L frames and exit")

    s = sub.add_parser("bench", parents=[common], help="memory-ablation comparison")
    s.add_argument("--variants", default=",".join(VARIANT_NAMES))

    s = sub.add_parser("gen-data", parents=[common], help="write synthetic scenarios")
    s.add_argument("--count", type=int, default=4)
    return p


def _load_config(args, parser) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
    except (OSError, ConfigError) as exc:
        parser.error(f"invalid config: {exc}")
    if args.seed is not None:
        cfg.seeds = (args.seed,)
    return cfg


def _emit(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc) + "\n")
    sys.stdout.flush()


# -- subcommands ----------------------------------------------------------------

def cmd_train_tf(args, cfg: RunConfig) -> int:
    from .harness.bench import train_model
    from .harness.plotting import plot_curves
    from .harness.training import jsonl_logger

    if args.iters:
        cfg.train = dataclasses.replace(cfg.train, iters=args.iters)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "train.jsonl").unlink(missing_ok=True)
    records = []
    logger = jsonl_logger(args.out / "train.jsonl")

    def on_log(rec):
        records.append(rec)
        logger(rec)

    seed = cfg.seeds[0]
    model, losses = train_model(cfg, seed, on_log)
    container.save_checkpoint(model, args.out / "model.ckpt", {"run": cfg.to_dict(), "seed": seed})
    plot_curves(records, ["L_tune"], args.out / "train_loss.png", "teacher forcing")
    _emit({"checkpoint": str(args.out / "model.ckpt"), "iters": len(losses),
           "final_loss": float(np.mean(losses[-100:]))})
    return 0


def cmd_distill(args, cfg: RunConfig) -> int:
    from .distill import DistillState, distill
    from .harness.plotting import plot_curves
    from .harness.scenario import gen_scenario
    from .harness.training import jsonl_logger

    teacher, _ = container.load_checkpoint(args.teacher)
    seed = cfg.seeds[0]
    dcfg = cfg.distill_config(seed)
    if args.init_iters is not None:
        dcfg = dataclasses.replace(dcfg, init_iters=args.init_iters)
    if args.dmd_iters is not None:
        dcfg = dataclasses.replace(dcfg, dmd_iters=args.dmd_iters)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "distill.jsonl").unlink(missing_ok=True)
    state = DistillState.from_teacher(teacher, dcfg)
    rng = np.random.default_rng(seed)
    history = distill(state, lambda it: gen_scenario(cfg.scenario, rng), jsonl_logger(args.out / "distill.jsonl"))
    container.save_checkpoint(state.student, args.out / "student.ckpt",
                              {"run": cfg.to_dict(), "seed": seed, "steps": dcfg.steps})
    plot_curves(history, ["L_init", "L_DMD", "L_fake", "L_D"], args.out / "distill_losses.png", "distillation")
    last = history[-1] if history else {}
    _emit({"checkpoint": str(args.out / "student.ckpt"), "teacher_unchanged": True,
           **{k: last[k] for k in ("L_init", "L_DMD", "L_G", "L_D") if k in last}})
    return 0


def _rollout_session(args, cfg: RunConfig):
    from .model import VelocityTransformer
    from .rollout import RolloutSession
    from .stream import ShotSchedule, prompt_embedding

    if args.checkpoint:
        model, _ = container.load_checkpoint(args.checkpoint)
    else:
        log.warning("no checkpoint given; generating with an untrained model")
        model = VelocityTransformer(dataclasses.replace(cfg.model, seed=cfg.seeds[0]))
    model.eval()
    if args.resume:
        return RolloutSession.resume(container.read(args.resume), model)
    scfg = cfg.session(policy=args.policy, steps=args.steps, seed=cfg.seeds[0])
    if args.schedule:
        schedule = ShotSchedule.from_json(args.schedule.read_text(), model.config.prompt_dim)
    else:
        schedule = ShotSchedule.single(cfg.L, prompt_embedding(cfg.seeds[0], model.config.prompt_dim),
                                       cfg.seeds[0])
    return RolloutSession(model, scfg, schedule)


def _write_rollout(sess, chunks, out: Path) -> dict:
    from .harness.latent_io import save_latents
    from .harness.metrics import chunk_jumps
    from .harness.plotting import plot_rollout

    out.mkdir(parents=True, exist_ok=True)
    doc = {"chunks": len(chunks), "max_position": sess.max_position, "span": sess.config.span,
           "denoise_passes": sess.denoise_passes, "history_passes": sess.history_passes}
    if not chunks:
        return doc
    frames = torch.cat([c.frames for c in chunks])
    save_latents(out / "rollout", frames, first_chunk=chunks[0].chunk_index, L=sess.config.L)
    (out / "schedule.json").write_text(json.dumps(sess.schedule.to_json()) if sess.schedule.prompt_seeds
                                       else "{}")
    with open(out / "attended.tsv", "w") as fh:
        fh.write("chunk\tattended_frames\n")
        for i, a in enumerate(sess.attended, 1):
            fh.write(f"{i}\t{a}\n")
    if len(chunks) > 1:
        jumps, is_cut = chunk_jumps(frames, _shifted_schedule(sess.schedule, chunks[0].first_frame))
        plot_rollout(jumps, is_cut, out / "rollout.png", sess.attended[-len(chunks):])
    doc["latents"] = str(out / "rollout.bin")
    return doc


def _shifted_schedule(schedule, offset: int):
    from .stream import ShotSchedule

    bounds = [b - offset for b in schedule.boundaries if b > offset]
    prompts = schedule.prompts[len(schedule.boundaries) - len(bounds):] if bounds else schedule.prompts[-1:]
    return ShotSchedule(schedule.L, tuple(bounds), prompts)


def cmd_rollout(args, cfg: RunConfig) -> int:
    from .harness.latent_io import save_latents
    from .rollout import SessionError
    from .stream import prompt_embedding

    sess = _rollout_session(args, cfg)
    chunks = []
    if not args.interactive:
        try:
            for _ in range(args.chunks):
                chunks.append(sess.generate_chunk())
        except SessionError as exc:
            log.error("%s", exc)
            if exc.last_good:
                container.write(args.out / "last_good.snap", exc.last_good)
            _emit(_write_rollout(sess, chunks, args.out))
            return 1
        _emit(_write_rollout(sess, chunks, args.out))
        return 0

    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
            cmd = msg.get("cmd")
            if cmd == "generate":
                n = int(msg.get("chunks", 1))
                made = [sess.generate_chunk() for _ in range(n)]
                chunks.extend(made)
                paths = [str(save_latents(args.out / "chunks" / f"chunk_{c.chunk_index:05d}", c.frames,
                                          chunk_index=c.chunk_index, shot=sess.schedule.shot_of_chunk(c.chunk_index)))
                         for c in made]
                _emit({"ok": True, "cmd": cmd, "generated": [c.chunk_index for c in made], "paths": paths,
                       "cursor": sess.cursor, "max_position": sess.max_position})
            elif cmd == "append_shot":
                seed = int(msg["prompt_seed"])
                cue = float(msg.get("cue", 0.0))
                sess.append_shot(prompt_embedding(seed, sess.model.config.prompt_dim, cue), int(msg["boundary"]),
                                 seed, cue)
                _emit({"ok": True, "cmd": cmd, "shots": sess.schedule.num_shots,
                       "boundaries": list(sess.schedule.boundaries)})
            elif cmd == "snapshot":
                container.write(msg["path"], sess.snapshot())
                _emit({"ok": True, "cmd": cmd, "path": msg["path"], "cursor": sess.cursor})
            elif cmd == "status":
                _emit({"ok": True, "cmd": cmd, "cursor": sess.cursor, "shots": sess.schedule.num_shots,
                       "cached_frames": sess.cached_frames, "history_passes": sess.history_passes})
            else:
                _emit({"ok": False, "error": f"unknown cmd {cmd!r}"})
        except SessionError as exc:
            _emit({"ok": False, "error": str(exc)})
        except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
            _emit({"ok": False, "error": f"{type(exc).__name__}: {exc}"})
    _write_rollout(sess, chunks, args.out)
    return 0


def cmd_verify(args, cfg: RunConfig) -> int:
    from .harness.checks import run_checks
    from .masks import build_tf_mask

    if args.show_mask:
        n, L = args.show_mask
        try:
            print(build_tf_mask(n, L).to_ascii())
        except ValueError as exc:
            print(f"shotcast verify: error: {exc}", file=sys.stderr)
            return 2
        return 0
    results = run_checks(quick=not args.full)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} invariants passed")
    return 1 if failed else 0


def cmd_bench(args, cfg: RunConfig) -> int:
    from .harness.bench import run_bench, write_outputs

    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANT_NAMES]
    if bad:
        print(f"shotcast bench: error: unknown variants {bad}; choose from {list(VARIANT_NAMES)}", file=sys.stderr)
        return 2
    res = run_bench(cfg, variants)
    paths = write_outputs(res, args.out)
    print(res.table())
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return 0


def cmd_gen_data(args, cfg: RunConfig) -> int:
    from .harness.latent_io import save_latents
    from .harness.scenario import gen_scenario

    args.out.mkdir(parents=True, exist_ok=True)
    index = []
    for j in range(args.count):
        seed = cfg.seeds[0] * 100_000 + j
        sc = gen_scenario(cfg.scenario, seed)
        name = f"scenario_{j:03d}"
        save_latents(args.out / name, sc.frames, seed=seed, schedule=sc.schedule.to_json(),
                     entities=[{"top": r.top, "left": r.left, "frames": r.frames, "shots": r.shots,
                                "patch": r.patch.tolist()} for r in sc.records])
        index.append({"name": name, "seed": seed, "frames": sc.frames.shape[0]})
    (args.out / "index.json").write_text(json.dumps(index, indent=1))
    _emit({"written": len(index), "dir": str(args.out)})
    return 0


COMMANDS = {"train-tf": cmd_train_tf, "distill": cmd_distill, "rollout": cmd_rollout,
            "verify": cmd_verify, "bench": cmd_bench, "gen-data": cmd_gen_data}


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    cfg = _load_config(args, parser)
    try:
        return COMMANDS[args.command](args, cfg)
    except container.ContainerError as exc:
        print(f"shotcast {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
