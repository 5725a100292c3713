"""Command-line interface: data generation, staged training, evaluation,
single-scene captioning, and checkpoint introspection.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime/divergence.
Every failure prints one machine-parsable line starting with "error:".
"""

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import TrainConfig, ConfigError, parse_config_text, config_to_text
from .evalkit import (evaluate_proposals, metric_report_lines, read_predictions,
                      write_predictions)
from .scenegen import (CLASS_NAMES, DatasetFormatError, PlacementError,
                       build_vocab, generate_scene, load_dataset, save_dataset,
                       scene_caption_corpus)
from .trainer import (Checkpoint, CheckpointError, DivergenceError, StageError,
                      build_model, load_checkpoint, load_params, run_stage)

__all__ = ["main"]


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def worker_count():
    """Worker cap from SIA_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("SIA_THREADS", "1")))
    except ValueError:
        return 1


def _atomic_write_text(path, text):
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


# -- commands --------------------------------------------------------------------

def cmd_gen_data(args):
    if args.objects_min < 2 or args.objects_max > len(CLASS_NAMES) \
            or args.objects_min > args.objects_max:
        raise UsageError(
            f"--objects-min/--objects-max must satisfy 2 <= min <= max <= {len(CLASS_NAMES)}")
    if args.points < 512:
        raise UsageError("--points must be >= 512")
    if args.scenes < 1:
        raise UsageError("--scenes must be >= 1")
    master = np.random.default_rng(args.seed)
    scenes = []
    for i in range(args.scenes):
        n_obj = int(master.integers(args.objects_min, args.objects_max + 1))
        scene_seed = (args.seed * 1_000_003 + i) % (2 ** 31)
        scenes.append(generate_scene(scene_seed, n_obj, args.points))
    try:
        save_dataset(args.out, scenes)
    except OSError as e:
        raise DatasetFormatError(f"cannot write {args.out}: {e}") from e
    vocab = build_vocab(scene_caption_corpus(scenes))
    n_inst = sum(len(s.instances) for s in scenes)
    n_caps = sum(len(i.captions) for s in scenes for i in s.instances)
    print(f"scenes={len(scenes)} instances={n_inst} captions={n_caps} vocab={len(vocab)}")
    print(f"wrote {args.out} and {args.out}.manifest.tsv")
    return 0


def _load_train_inputs(args, stage):
    text = ""
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
        for line in text.splitlines():
            body = line.split("#", 1)[0].strip()
            if body.startswith("stage") and "=" in body:
                declared = body.split("=", 1)[1].strip()
                if declared != stage:
                    raise UsageError(
                        f"config declares stage={declared} but the command trains {stage}")
    cfg = parse_config_text(text).replace(stage=stage)
    scenes = load_dataset(args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    return cfg, scenes, resume


def _run_training(args, stage):
    cfg, scenes, resume = _load_train_inputs(args, stage)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train.log")
    with open(log_path, "a", encoding="utf-8") as log_fh:
        def log_fn(rec):
            log_fh.write(" ".join(f"{k}={v}" for k, v in rec.items()) + "\n")
            log_fh.flush()
        ckpt = run_stage(cfg, scenes, resume=resume, out_dir=args.out, log_fn=log_fn)
    print(f"stage={stage} epochs={ckpt.epoch} steps={ckpt.step} "
          f"checkpoint={os.path.join(args.out, 'checkpoint.bin')}")
    if ckpt.best:
        print(f"best {ckpt.best['metric']}={ckpt.best['value']:.4f} "
              f"at epoch {ckpt.best['epoch']}")
    return 0


def _model_from_checkpoint(ckpt: Checkpoint):
    model = build_model(ckpt.config, ckpt.vocab)
    load_params(model, ckpt.params)
    model.eval()
    return model


def cmd_eval(args):
    thresholds = []
    for part in args.iou.split(","):
        part = part.strip()
        if part:
            v = float(part)
            if not 0 < v <= 1:
                raise UsageError(f"--iou threshold {v} outside (0, 1]")
            thresholds.append(v)
    if not thresholds:
        raise UsageError("--iou needs at least one threshold")
    scenes = load_dataset(args.data)
    if args.predictions:
        flat = read_predictions(args.predictions)
        known = {sc.scene_id for sc in scenes}
        for p in flat:
            if p.scene_id not in known:
                raise DatasetFormatError(
                    f"prediction scene {p.scene_id!r} not present in the dataset")
        proposals = {sc.scene_id: [] for sc in scenes}
        for p in flat:
            proposals[p.scene_id].append(p)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint (or --predictions)")
        ckpt = load_checkpoint(args.checkpoint)
        _check_vocab_covers(ckpt, scenes)
        model = _model_from_checkpoint(ckpt)
        workers = worker_count()
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(model.proposals_for, scenes))
        else:
            results = [model.proposals_for(sc) for sc in scenes]
        proposals = {sc.scene_id: props for sc, props in zip(scenes, results)}
        if args.out:
            write_predictions(args.out + ".predictions.tsv",
                              [p for props in results for p in props])
    report = evaluate_proposals(proposals, scenes, thresholds=tuple(thresholds))
    lines = metric_report_lines(report, thresholds)
    human = [f"instances evaluated: {report.n_instances}", "[metrics]"] + lines
    text = "\n".join(human) + "\n"
    print(text, end="")
    if args.out:
        _atomic_write_text(args.out, text)
        print(f"wrote {args.out}")
    return 0


def _check_vocab_covers(ckpt, scenes):
    vocab = ckpt.vocab
    for sc in scenes:
        for inst in sc.instances:
            for cap in inst.captions:
                for tok in cap:
                    if tok not in vocab.index:
                        raise CheckpointError(
                            f"dataset token {tok!r} missing from checkpoint vocabulary")


def cmd_caption(args):
    ckpt = load_checkpoint(args.checkpoint)
    scenes = load_dataset(args.scene_file)
    model = _model_from_checkpoint(ckpt)
    vocab = ckpt.vocab
    blocks = []
    for sc in scenes:
        objs = model.predict(sc)
        blocks.append(f"scene {sc.scene_id}: {len(objs)} objects")
        for n, o in enumerate(objs):
            b = o.box
            geom = " ".join(f"{v:.3f}" for v in (*b.center, *b.size))
            blocks.append(f"object {n} class={CLASS_NAMES[o.class_id]} "
                          f"conf={o.confidence:.3f} box={geom}")
            blocks.append(f"  instance | {' '.join(vocab.decode(o.instance_tokens))}")
            blocks.append(f"  context  | {' '.join(vocab.decode(o.context_tokens))}")
            blocks.append(f"  final    | {' '.join(vocab.decode(o.final_tokens))}")
    text = "\n".join(blocks) + "\n"
    print(text, end="")
    if args.out:
        _atomic_write_text(args.out, text)
    return 0


def cmd_inspect(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = _model_from_checkpoint(ckpt)
    print("[config]")
    print(config_to_text(ckpt.config), end="")
    print("[parameters]")
    counts = model.module_param_counts()
    for name, count in counts.items():
        print(f"{name}={count}")
    print(f"total={sum(counts.values())}")
    print("[wiring]")
    cfg = ckpt.config
    print(f"instance_only={'true' if cfg.instance_only else 'false'}")
    print(f"no_global={'true' if cfg.no_global else 'false'}")
    print(f"global_inputs={cfg.global_inputs}")
    print(f"aggregator={cfg.aggregator}")
    if not cfg.instance_only:
        print(f"context_prefix_length={model.caption_prefix_length('context')}")
    print(f"epoch={ckpt.epoch} step={ckpt.step} best={ckpt.best or '{}'}")
    return 0


# -- argument wiring ---------------------------------------------------------------

def _build_parser():
    p = _Parser(prog="sia3d", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--objects-min", type=int, default=3)
    g.add_argument("--objects-max", type=int, default=7)
    g.add_argument("--points", type=int, default=2048)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    for stage, name in (("pretrain", "pretrain"), ("mle", "train-mle"), ("scst", "train-scst")):
        t = sub.add_parser(name, help=f"run the {stage} training stage")
        t.add_argument("--config", default=None)
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--resume", default=None)
        t.set_defaults(fn=lambda a, s=stage: _run_training(a, s))

    e = sub.add_parser("eval", help="evaluate a checkpoint or a prediction file")
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--data", required=True)
    e.add_argument("--iou", default="0.25,0.5")
    e.add_argument("--out", default=None)
    e.add_argument("--predictions", default=None)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("caption", help="caption the objects of stored scenes")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--scene-file", required=True)
    c.add_argument("--out", default=None)
    c.set_defaults(fn=cmd_caption)

    i = sub.add_parser("inspect", help="print checkpoint configuration and parameter counts")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, StageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DatasetFormatError, CheckpointError, PlacementError, FileNotFoundError,
            PermissionError, IsADirectoryError, NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DivergenceError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
