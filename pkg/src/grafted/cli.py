"""Command-line entry point: dataset mining, training, editing, evaluation.

Every subcommand is a batch job: inputs come from flags (optionally layered
over a key=value config file: flags win), outputs are files under --out plus
a run log on stderr.  Exit codes: 0 success, 2 usage/config error, 3 IO or
runtime failure.  GRAFTED_LOG={error,info,debug} controls verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import CorruptFile, GraftedError, VersionMismatch
from .molgraph import check_validity, parse_smiles, write_smiles

log = logging.getLogger("grafted")


def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("GRAFTED_LOG", "info").lower(), logging.INFO
    )
    logging.basicConfig(level=level, format="%(levelname).1s %(name)s: %(message)s", stream=sys.stderr)


def _parse_task(text: str):
    from .oracles import PropertySpec, direction, property_kind

    specs = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split(":")
        if len(parts) not in (2, 3):
            raise ValueError(f"task item {item!r} must look like prop:direction[:min_delta]")
        kind = property_kind(parts[0])
        dir_ = direction(parts[1])
        delta = float(parts[2]) if len(parts) == 3 else None
        specs.append(PropertySpec(kind, dir_, delta))
    if not specs:
        raise ValueError("empty task specification")
    return specs


def _load_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        if not _:
            raise ValueError(f"config line {raw!r} is not key=value")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _echo_config(args: argparse.Namespace) -> None:
    items = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    log.info("grafted %s | effective config: %s", __version__, items)


def _apply_workers(workers: int) -> None:
    # Single-threaded tensor ops keep runs bit-reproducible; more workers
    # trade that for speed via intra-op parallelism.
    torch.set_num_threads(max(1, workers))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_dataset_gen(args: argparse.Namespace) -> int:
    from .dataset import MiningLimits, build_pairs, write_samples

    task = _parse_task(args.task)
    if not 0.0 <= args.min_sim <= 1.0:
        raise ValueError(f"--min-sim {args.min_sim} outside [0, 1]")
    corpus = Path(args.corpus).read_text(encoding="utf-8").splitlines()
    limits = MiningLimits(
        max_edits=args.max_edits,
        max_heavy_atoms=args.max_atoms,
        max_pairs=args.max_pairs,
        max_pairs_per_seed=args.max_pairs_per_seed,
    )
    samples = build_pairs(
        corpus, task, min_similarity=args.min_sim, limits=limits, rng=np.random.default_rng(args.seed)
    )
    write_samples(args.out, samples)
    print(f"dataset-gen: wrote {len(samples)} pairs to {args.out}")
    return 0


def _cmd_pretrain(args: argparse.Namespace) -> int:
    from .dataset import read_samples
    from .editnet import ModelConfig
    from .tokenizer import build_vocab
    from .trainer import (
        Checkpoint,
        PretrainConfig,
        load_checkpoint,
        new_model,
        run_pretraining,
        save_checkpoint,
        size_table_from_samples,
    )

    samples = read_samples(args.data)
    if not samples:
        raise ValueError(f"no samples in {args.data}")
    optimizer = None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model = ckpt.to_model()
        optimizer = ckpt.optimizer
        log.info("resuming from %s at step %d", args.resume, optimizer.step if optimizer else 0)
    else:
        vocab = build_vocab(samples)
        max_atoms = max(max(len(s.source_graph()), len(s.target_graph())) for s in samples)
        max_text = max(len(s.instruction.split()) + 4 for s in samples)
        config = ModelConfig(
            layers=args.layers,
            heads=args.heads,
            hidden=args.hidden,
            ffn=args.ffn,
            text_vocab=vocab.text_size,
            atom_vocab=vocab.atom_size,
            max_len=max_text + 2 * (max_atoms + 2) + 8,
        )
        model = new_model(config, vocab, args.seed, size_table_from_samples(samples))
    pre_cfg = PretrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        lr=args.lr,
        warmup_steps=args.warmup,
        seed=args.seed,
        diffusion_steps=args.diffusion_steps,
    )
    curve_path = Path(args.out).with_suffix(".loss.tsv")

    def on_step(step: int, loss: float, diag: dict) -> None:
        log.info("pretrain step %d loss %.4f (%s)", step, loss, {k: round(v, 4) for k, v in diag.items()})

    model, optimizer, curve = run_pretraining(model, samples, pre_cfg, optimizer, on_step)
    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write("step\tloss\n")
        for step, loss in curve:
            fh.write(f"{step}\t{loss:.6f}\n")
    save_checkpoint(
        args.out,
        Checkpoint(
            config=model.config,
            vocab=model.vocab,
            params=model.params,
            optimizer=optimizer,
            size_table=model.size_table,
            step=optimizer.step,
        ),
    )
    print(f"pretrain: {len(curve)} steps, final loss {curve[-1][1]:.4f}, checkpoint {args.out}")
    return 0


def _build_prompts(samples, task, tau, limit=None):
    from .oracles import RewardSpec
    from .rlft import Prompt

    spec = RewardSpec(tuple(task), tau=tau)
    prompts = []
    for sample in samples[: limit if limit else len(samples)]:
        prompts.append(Prompt(instruction=sample.instruction, src=sample.source_graph(), reward_spec=spec))
    return prompts


def _cmd_finetune(args: argparse.Namespace) -> int:
    from .dataset import read_samples
    from .rlft import FinetuneConfig, Strategy, finetune_run
    from .trainer import Checkpoint, load_checkpoint, save_checkpoint

    task = _parse_task(args.task)
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.to_model()
    config = FinetuneConfig(
        beta_kl=args.beta_kl,
        group_size=args.group,
        stride=args.stride,
        lr=args.lr,
        updates=args.updates,
        seed=args.seed,
        diffusion_steps=args.diffusion_steps,
        top_k=args.topk,
        prompts_per_update=args.prompts_per_update,
    )
    samples = read_samples(args.data)
    if not samples:
        raise ValueError(f"no samples in {args.data}")
    prompts = _build_prompts(samples, task, args.tau, args.max_prompts)
    strategy = Strategy(args.strategy)
    metrics_path = args.metrics or str(Path(args.out).with_suffix(".metrics.tsv"))

    def on_update(rec) -> None:
        log.info(
            "update %d reward %.3f validity %.3f kl %.4f |g| %.3f",
            rec.step, rec.reward, rec.validity, rec.kl, rec.grad_norm,
        )

    model, records = finetune_run(model, prompts, config, strategy, metrics_path, on_update)
    save_checkpoint(
        args.out,
        Checkpoint(
            config=model.config,
            vocab=model.vocab,
            params=model.params,
            size_table=model.size_table,
            step=ckpt.step + len(records),
        ),
    )
    mean_tail = float(np.mean([r.reward for r in records[-20:]])) if records else 0.0
    print(
        f"finetune[{strategy.value}]: {len(records)} updates, tail reward {mean_tail:.3f}, "
        f"checkpoint {args.out}, metrics {metrics_path}"
    )
    return 0


def _cmd_edit(args: argparse.Namespace) -> int:
    from .diffusion import SamplerConfig, Schedule, sample
    from .oracles import compute_property, property_kind, similarity
    from .trainer import load_checkpoint

    model = load_checkpoint(args.ckpt).to_model()
    try:
        src = parse_smiles(args.smiles)
    except GraftedError as exc:
        raise ValueError(f"invalid --smiles: {exc}") from exc
    report = check_validity(src)
    if not report.valid:
        raise ValueError(f"--smiles fails validity: {report.violations[0].message}")
    m = None if args.m == "auto" else int(args.m)
    stride = args.diffusion_steps // args.steps
    if stride * args.steps != args.diffusion_steps:
        raise ValueError("--steps must divide the diffusion step count")
    config = SamplerConfig(steps=args.steps, stride=stride, top_k=args.topk, seed=args.seed)
    edited = sample(model, args.instruction, src, m, config, Schedule(args.diffusion_steps))
    val = check_validity(edited)
    if not val.valid:
        print("edited molecule: INVALID")
        for violation in val.violations[:4]:
            print(f"  violation: {violation.message}")
        return 0
    smiles = write_smiles(edited)
    print(f"edited molecule: {smiles}")
    print(f"similarity: {similarity(src, edited):.4f}")
    for name in ("mw", "logp", "hbd", "hba", "rotbonds", "rings", "qed_proxy", "sa_proxy"):
        kind = property_kind(name)
        delta = compute_property(kind, edited) - compute_property(kind, src)
        print(f"delta {name}: {delta:+.4f}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    from .dataset import read_samples
    from .diffusion import SamplerConfig, Schedule, sample_batch
    from .evalharness import evaluate, format_report, write_report
    from .trainer import load_checkpoint

    task = _parse_task(args.task)
    taus = [float(t) for t in args.taus.split(",") if t.strip()]
    if not taus:
        raise ValueError("--taus must list at least one threshold")
    samples = read_samples(args.testset)
    if not samples:
        raise ValueError(f"empty test set {args.testset}")
    if args.limit:
        samples = samples[: args.limit]
    model = load_checkpoint(args.ckpt).to_model()
    prompts = _build_prompts(samples, task, args.tau)
    stride = args.diffusion_steps // args.steps
    config = SamplerConfig(steps=args.steps, stride=stride, top_k=args.topk, seed=args.seed)
    schedule = Schedule(args.diffusion_steps)
    outputs = []
    graphs, _ = sample_batch(
        model,
        [p.instruction for p in prompts],
        [p.src for p in prompts],
        [p.m for p in prompts],
        config,
        schedule,
        seed=args.seed,
    )
    for prompt, graph in zip(prompts, graphs):
        if check_validity(graph).valid:
            outputs.append((prompt, write_smiles(graph)))
        else:
            outputs.append((prompt, None))
    references = [s.target_graph() for s in samples]
    report = evaluate(outputs, references, taus)
    write_report(args.out, [(args.task, report)])
    print(format_report(args.task, report))
    print(f"eval: report written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser assembly
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grafted",
        description="Instruction-driven molecular editing: mine pairs, pretrain, fine-tune, edit, evaluate.",
    )
    parser.add_argument("--config", default=None, help="key=value config file; flags override it")
    parser.add_argument("--workers", type=int, default=1, help="tensor-op threads (1 keeps runs bit-reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset-gen", help="mine edit pairs from a SMILES corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--task", required=True, help="e.g. hba:increase:2[,mw:decrease:10]")
    p.add_argument("--min-sim", type=float, default=0.65)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--max-edits", type=int, default=3)
    p.add_argument("--max-atoms", type=int, default=20)
    p.add_argument("--max-pairs", type=int, default=None)
    p.add_argument("--max-pairs-per-seed", type=int, default=60)
    p.set_defaults(func=_cmd_dataset_gen)

    p = sub.add_parser("pretrain", help="train the editing network by masked reconstruction")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--warmup", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--ffn", type=int, default=512)
    p.add_argument("--diffusion-steps", type=int, default=2000)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="RL fine-tuning against property oracles")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="JSONL pairs supplying prompt sources")
    p.add_argument("--task", required=True)
    p.add_argument("--beta-kl", type=float, default=0.01)
    p.add_argument("--group", type=int, default=8)
    p.add_argument("--stride", type=int, default=50)
    p.add_argument("--updates", type=int, default=200)
    p.add_argument("--strategy", choices=["full_kl", "stepwise", "final_only"], default="full_kl")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--tau", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--topk", type=int, default=15)
    p.add_argument("--prompts-per-update", type=int, default=2)
    p.add_argument("--max-prompts", type=int, default=None)
    p.add_argument("--diffusion-steps", type=int, default=2000)
    p.add_argument("--metrics", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("edit", help="edit one molecule with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--smiles", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--m", default="auto")
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--topk", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--diffusion-steps", type=int, default=2000)
    p.set_defaults(func=_cmd_edit)

    p = sub.add_parser("eval", help="metric suite over a held-out test set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--testset", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--taus", default="0.15,0.65")
    p.add_argument("--tau", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--topk", type=int, default=15)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--diffusion-steps", type=int, default=2000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)

    # Config-file layering: file values become defaults, flags override.
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            file_values = _load_config_file(known.config)
        except (OSError, ValueError) as exc:
            log.error("config file: %s", exc)
            return 2
        for action in parser._subparsers._group_actions[0].choices.values():  # type: ignore[union-attr]
            defaults = {}
            for key, value in file_values.items():
                for act in action._actions:
                    if act.dest == key:
                        defaults[key] = value if act.type is None else act.type(value)
            action.set_defaults(**defaults)

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    _echo_config(args)
    _apply_workers(args.workers)
    try:
        return args.func(args)
    except (OSError, CorruptFile, VersionMismatch) as exc:
        log.error("io error: %s", exc)
        return 3
    except (ValueError, GraftedError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
