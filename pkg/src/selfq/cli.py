"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric abort
(non-finite loss or gradient), 4 gradient check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import gradcheck
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import (DataError, corpus_stats, load_conversations, read_records, render_dataset,
                   write_records)
from .images import load_image
from .language import SequenceLengthError, Vocab
from .model import VisionLanguageModel
from .sampler import ANSWER, CAPTION_PROMPT, SELFQ, GenRequest, RequestError, generate
from .trainer import FINETUNE, PRETRAIN, Example, NumericAbort, Trainer

log = logging.getLogger("selfq")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 1, 2, 3, 4


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.with_seed(args.seed)
    log.info("resolved config: %s", json.dumps(cfg.to_json(), sort_keys=True))
    return cfg


# -- data ---------------------------------------------------------------------


def cmd_data_prepare(args) -> int:
    cfg = _config(args)
    model_cfg = cfg.model
    convs = load_conversations(cfg.path(cfg.data.conversations))
    vocab = Vocab()
    L_v = model_cfg.vision.n_tokens
    max_len = cfg.data.max_len or model_cfg.lm.max_seq_len
    for stage, key in ((FINETUNE, "records"), (PRETRAIN, "pretrain_records")):
        seqs = render_dataset(convs, cfg.policy(), vocab, stage, max_len, L_v)
        out = cfg.path(getattr(cfg.data, key))
        out.parent.mkdir(parents=True, exist_ok=True)
        write_records(out, seqs)
        log.info("wrote %d %s records to %s", len(seqs), stage, out)
    print(json.dumps(corpus_stats(render_dataset(convs, cfg.policy(), vocab, FINETUNE, max_len, L_v)).to_json()))
    return 0


def cmd_data_stats(args) -> int:
    cfg = _config(args)
    path = Path(args.records) if args.records else cfg.path(cfg.data.records)
    seqs = read_records(path, Vocab())
    print(json.dumps(corpus_stats(seqs).to_json(), indent=2))
    return 0


# -- training -----------------------------------------------------------------


def _examples(cfg: RunConfig, stage: str) -> list[Example]:
    convs = {c.id: c for c in load_conversations(cfg.path(cfg.data.conversations))}
    key = cfg.data.pretrain_records if stage == PRETRAIN else cfg.data.records
    seqs = read_records(cfg.path(key), Vocab())
    out = []
    for s in seqs:
        if s.conv_id not in convs:
            raise DataError(f"record {s.conv_id!r} has no conversation entry")
        px = load_image(convs[s.conv_id].image, cfg.path(cfg.data.image_dir), cfg.model.vision.channels)
        out.append(Example(s, px))
    return out


def _train(args, stage: str) -> int:
    cfg = _config(args)
    plan = cfg.plan(stage)
    ckpt_dir = cfg.path(cfg.io.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    out_path = ckpt_dir / f"{stage}.ckpt"
    dataset = _examples(cfg, stage)
    init = Path(args.init) if args.init else None
    if args.resume and out_path.exists():
        ck = load_checkpoint(out_path)
        if ck.stage != stage:
            raise ConfigError(f"{out_path} holds a {ck.stage} state, cannot resume {stage}")
        model, trainer = ck.model, ck.trainer(plan)
        log.info("resuming %s at step %d", stage, trainer.step_count)
    else:
        if init is None and stage == FINETUNE and (ckpt_dir / "pretrain.ckpt").exists():
            init = ckpt_dir / "pretrain.ckpt"
        model = load_checkpoint(init).model if init else VisionLanguageModel(cfg.model)
        if init:
            log.info("initialized from %s", init)
        if stage == FINETUNE and not model.adapter_sets:
            model.attach_adapters(cfg.seed)
        trainer = Trainer(model, plan)
    metrics = cfg.path(cfg.io.metrics)
    metrics.parent.mkdir(parents=True, exist_ok=True)
    reports = trainer.train(dataset, metrics,
                            on_step=lambda r: log.info("step %d loss %.5f (q %.5f, a %.5f)",
                                                       r.step, r.loss_total, r.loss_q, r.loss_a))
    save_checkpoint(out_path, model, trainer)
    last = reports[-1].loss_total if reports else float("nan")
    print(json.dumps({"stage": stage, "steps": trainer.step_count, "final_loss": last,
                      "checkpoint": str(out_path)}))
    return 0


def cmd_pretrain(args) -> int:
    return _train(args, PRETRAIN)


def cmd_finetune(args) -> int:
    return _train(args, FINETUNE)


# -- generation -----------------------------------------------------------------


def _generate(args, mode: str) -> int:
    model = load_checkpoint(args.ckpt).model
    log.info("resolved config: %s", json.dumps({"model": model.config.to_json(), "mode": mode,
                                                "max_new_tokens": args.max_new_tokens}, sort_keys=True))
    px = load_image(args.image, None, model.config.vision.channels)
    prompt = None
    if mode == ANSWER:
        prompt = args.question if args.question is not None else CAPTION_PROMPT
    gen = generate(model, GenRequest(px, mode, prompt, args.max_new_tokens))
    # raw byte ids may not form valid UTF-8 on an untrained model
    print(gen.text.encode("utf-8", "surrogateescape").decode("utf-8", "replace"))
    return 0


def cmd_generate(args) -> int:
    return _generate(args, ANSWER)


def cmd_selfq(args) -> int:
    return _generate(args, SELFQ)


def cmd_gradcheck(args) -> int:
    seed = args.seed or 0
    log.info("resolved config: %s", json.dumps({"seed": seed, "tolerance": gradcheck.TOLERANCE}))
    return 0 if gradcheck.main(seed) else EXIT_GRADCHECK


# -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="selfq", description="self-questioning vision-language training")
    sub = p.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="conversation preparation")
    dsub = data.add_subparsers(dest="data_command", required=True)
    dsub.add_parser("prepare", parents=[common], help="render record files").set_defaults(func=cmd_data_prepare)
    st = dsub.add_parser("stats", parents=[common], help="corpus statistics of a record file")
    st.add_argument("--records")
    st.set_defaults(func=cmd_data_stats)

    for name, fn in ((PRETRAIN, cmd_pretrain), (FINETUNE, cmd_finetune)):
        sp = sub.add_parser(name, parents=[common], help=f"run the {name} stage")
        sp.add_argument("--init", help="checkpoint to start from")
        sp.add_argument("--resume", action="store_true", help="continue this stage's checkpoint if present")
        sp.set_defaults(func=fn)

    for name, fn in (("generate", cmd_generate), ("selfq", cmd_selfq)):
        sp = sub.add_parser(name, parents=[common], help=f"{name} from an image")
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--image", required=True)
        sp.add_argument("--max-new-tokens", type=int, default=64)
        if name == "generate":
            sp.add_argument("--question", help="defaults to the captioning instruction")
        sp.set_defaults(func=fn)

    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op").set_defaults(
        func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s", force=True)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SequenceLengthError, CheckpointError, RequestError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
