"""Command-line interface.

One binary covers the whole pipeline: dataset generation, the two training
stages, retrieval/captioning evaluation with table+figure reports, index
building, one-off retrieval and captioning, and the HTTP service.

Exit codes: 0 success, 2 configuration error (bad flags or config values,
named in the message), 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from capret.backbones import ConfigError


@dataclass
class RunConfig:
    """Model dimensions, training schedule, and paths, overridable from a
    JSON config file and then from command-line flags."""

    # vision encoder
    vision_embed_dim: int = 64  # m
    vision_patch_size: int = 32
    vision_layers: int = 2
    vision_heads: int = 4
    # causal decoder (embed and hidden widths are tied)
    decoder_embed_dim: int = 128  # D
    decoder_hidden_dim: int = 128  # H
    decoder_layers: int = 2
    decoder_heads: int = 4
    context_len: int = 64
    # shared retrieval space (q; must stay below the decoder width.
    # 256 is the reference-scale value, 32 the desk default)
    retrieval_dim: int = 32
    # bridge training
    batch_size: int = 16
    base_lr: float = 3e-4
    warmup_steps: int = 100
    lambda_caption: float = 1.0
    lambda_retrieval: float = 1.0
    max_steps: int = 2000
    seed: int = 7
    eval_every: int = 500
    log_every: int = 100
    finetune_lr: float = 1e-4
    # encoder fine-tuning stage
    stage1_steps: int = 600
    stage1_lr: float = 1e-3
    # decoder language-model warmup
    decoder_warmup_steps: int = 400
    decoder_warmup_lr: float = 1e-3
    # paths / service
    manifest: str | None = None
    checkpoint_dir: str = "runs/checkpoint"
    index_path: str | None = None
    out_dir: str = "runs"
    host: str = "127.0.0.1"
    port: int = 8000

    def validate(self) -> "RunConfig":
        if self.retrieval_dim >= self.decoder_embed_dim:
            raise ConfigError(
                f"retrieval_dim ({self.retrieval_dim}) must be smaller than decoder_embed_dim ({self.decoder_embed_dim})"
            )
        if self.decoder_embed_dim != self.decoder_hidden_dim:
            raise ConfigError(
                f"decoder_embed_dim ({self.decoder_embed_dim}) and decoder_hidden_dim ({self.decoder_hidden_dim}) must match"
            )
        for name in ("batch_size", "max_steps", "context_len", "port"):
            if getattr(self, name) < 0 or (name in ("batch_size", "context_len") and getattr(self, name) < 1):
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def load_run_config(config_path: str | None, overrides: dict) -> RunConfig:
    """defaults <- JSON config file <- non-None CLI overrides."""
    values = asdict(RunConfig())
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        for key, val in loaded.items():
            if key not in values:
                raise ConfigError(f"unknown config field {key!r}")
            values[key] = val
    for key, val in overrides.items():
        if val is not None:
            values[key] = val
    try:
        cfg = RunConfig(**values)
    except TypeError as e:
        raise ConfigError(f"bad config: {e}") from e
    return cfg.validate()


def _train_config(cfg: RunConfig, **replacements):
    from capret.training import TrainConfig

    kwargs = dict(
        batch_size=cfg.batch_size,
        base_lr=cfg.base_lr,
        warmup_steps=cfg.warmup_steps,
        lambda_caption=cfg.lambda_caption,
        lambda_retrieval=cfg.lambda_retrieval,
        max_steps=cfg.max_steps,
        seed=cfg.seed,
        eval_every=cfg.eval_every,
        log_every=cfg.log_every,
        finetune_lr=cfg.finetune_lr,
    )
    kwargs.update(replacements)
    try:
        return TrainConfig(**kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _load_manifest(cfg: RunConfig):
    from capret.data.manifest import load_manifest

    if not cfg.manifest:
        raise ConfigError("manifest: no dataset manifest given (flag --manifest or config field 'manifest')")
    return load_manifest(cfg.manifest)


def _init_model(cfg: RunConfig, vocab_size: int):
    from capret.backbones import DecoderConfig, VisionEncoderConfig, init_backbones
    from capret.bridge import init_bridge

    vision_cfg = VisionEncoderConfig(
        patch_size=cfg.vision_patch_size,
        embed_dim=cfg.vision_embed_dim,
        n_layers=cfg.vision_layers,
        n_heads=cfg.vision_heads,
    )
    decoder_cfg = DecoderConfig(
        vocab_size=vocab_size,
        embed_dim=cfg.decoder_embed_dim,
        hidden_dim=cfg.decoder_hidden_dim,
        n_layers=cfg.decoder_layers,
        n_heads=cfg.decoder_heads,
        context_len=cfg.context_len,
    )
    backbones = init_backbones(vision_cfg, decoder_cfg, seed=cfg.seed)
    bridge = init_bridge(backbones, retrieval_dim=cfg.retrieval_dim, seed=cfg.seed)
    return backbones, bridge


def _load_checkpoint_or_fail(path: str | None):
    from capret.training import load_checkpoint

    if not path:
        raise ConfigError("checkpoint_dir: no checkpoint given (flag --checkpoint or config field 'checkpoint_dir')")
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# subcommand bodies


def cmd_synthgen(cfg: RunConfig, args) -> int:
    from capret.data.synthetic import generate_synthetic_dataset

    manifest = generate_synthetic_dataset(args.num_images, cfg.seed, args.out)
    print(f"wrote {manifest.n_images} images / {manifest.n_captions} captions to {args.out}")
    for split in ("train", "val", "test"):
        print(f"  {split}\t{len(manifest.split_records(split))}")
    return 0


def cmd_train_clip(cfg: RunConfig, args) -> int:
    from capret.data.vocab import build_vocabulary
    from capret.report import plot_stage1_curves, write_table
    from capret.training import finetune_vision_encoder, save_checkpoint

    manifest = _load_manifest(cfg)
    vocab = build_vocabulary(manifest)
    backbones, bridge = _init_model(cfg, vocab.size)
    s1_cfg = _train_config(cfg, max_steps=cfg.stage1_steps, base_lr=cfg.stage1_lr, warmup_steps=min(cfg.warmup_steps, 20))
    tau, log = finetune_vision_encoder(backbones, manifest, s1_cfg, vocab)
    out = Path(cfg.checkpoint_dir)
    save_checkpoint(backbones, bridge, None, out, vocab=vocab, cfg=s1_cfg, extra_meta={"stage1_tau": tau})
    if log:
        print(write_table(log, out / "stage1_metrics.tsv"), end="")
        plot_stage1_curves(log, out / "stage1_curves.png")
    print(f"encoder fine-tuning done: temperature={tau:.4f}; checkpoint at {out}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    from capret.data.vocab import build_vocabulary
    from capret.report import plot_training_curves, write_table
    from capret.training import (
        finetune_vision_encoder,
        pretrain_decoder_lm,
        train_bridge,
    )

    manifest = _load_manifest(cfg)
    vocab = build_vocabulary(manifest)
    if args.init_from:
        loaded = _load_checkpoint_or_fail(args.init_from)
        if list(loaded.vocab.id_to_token) != list(vocab.id_to_token):
            raise ConfigError("init_from: checkpoint vocabulary does not match the manifest's")
        backbones, bridge = loaded.backbones, loaded.bridge
    else:
        backbones, bridge = _init_model(cfg, vocab.size)

    if cfg.stage1_steps > 0:
        s1_cfg = _train_config(cfg, max_steps=cfg.stage1_steps, base_lr=cfg.stage1_lr, warmup_steps=min(cfg.warmup_steps, 20))
        tau, _ = finetune_vision_encoder(backbones, manifest, s1_cfg, vocab)
        print(f"encoder fine-tuning done: temperature={tau:.4f}")
    if cfg.decoder_warmup_steps > 0:
        lm_cfg = _train_config(
            cfg, max_steps=cfg.decoder_warmup_steps, base_lr=cfg.decoder_warmup_lr, warmup_steps=min(cfg.warmup_steps, 20)
        )
        lm_log = pretrain_decoder_lm(backbones, manifest, lm_cfg, vocab)
        print(f"decoder warmup done: final lm loss {lm_log[-1]['loss_lm']:.4f}" if lm_log else "decoder warmup done")

    out = Path(cfg.checkpoint_dir)
    bridge, log = train_bridge(backbones, bridge, manifest, _train_config(cfg), vocab=vocab, out_dir=out)
    if log:
        write_table(log, out / "metrics.tsv")
        plot_training_curves(log, out / "training_curves.png")
        val_rows = [r for r in log if "val_mean_recall" in r]
        if val_rows:
            print(f"final val: {json.dumps(val_rows[-1])}")
    print(f"bridge training done: checkpoints at {out / 'best'} and {out / 'final'}")
    return 0


def cmd_eval_retrieval(cfg: RunConfig, args) -> int:
    from capret.report import plot_recall_bars, write_table
    from capret.retrieval import evaluate_split_retrieval

    loaded = _load_checkpoint_or_fail(cfg.checkpoint_dir)
    manifest = _load_manifest(cfg)
    metrics = evaluate_split_retrieval(loaded.backbones, loaded.bridge, manifest, args.split, loaded.vocab)
    row = {"split": args.split, **metrics}
    out_dir = Path(cfg.out_dir)
    text = write_table([row], out_dir / f"retrieval_{args.split}.tsv")
    plot_recall_bars(metrics, out_dir / f"retrieval_{args.split}.png", title=f"text-to-image recall ({args.split})")
    print(text, end="")
    return 0


def cmd_eval_caption(cfg: RunConfig, args) -> int:
    from capret.evaluation import GenerationConfig, evaluate_corpus
    from capret.report import plot_caption_scores, write_table

    loaded = _load_checkpoint_or_fail(cfg.checkpoint_dir)
    manifest = _load_manifest(cfg)
    gen_cfg = GenerationConfig(mode=args.mode, beam_width=args.beam_width, max_new_tokens=args.max_new_tokens)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    score, _ = evaluate_corpus(
        loaded.backbones,
        loaded.bridge,
        manifest,
        args.split,
        loaded.vocab,
        gen_cfg,
        log_path=out_dir / f"captions_{args.split}.jsonl",
    )
    row = {"split": args.split, **score.as_dict()}
    text = write_table([row], out_dir / f"caption_{args.split}.tsv")
    plot_caption_scores(score.as_dict(), out_dir / f"caption_{args.split}.png", title=f"caption metrics ({args.split})")
    print(text, end="")
    return 0


def cmd_index(cfg: RunConfig, args) -> int:
    from capret.retrieval import build_index, save_index

    loaded = _load_checkpoint_or_fail(cfg.checkpoint_dir)
    manifest = _load_manifest(cfg)
    index = build_index(loaded.backbones, loaded.bridge, manifest, args.split)
    out = args.out or cfg.index_path
    if not out:
        raise ConfigError("index_path: no output path given (flag --out or config field 'index_path')")
    save_index(index, out)
    print(f"indexed {index.size} images from split {args.split!r} to {out}" + (f" ({index.skipped} skipped)" if index.skipped else ""))
    return 0


def cmd_retrieve(cfg: RunConfig, args) -> int:
    from capret.retrieval import embed_query, load_index, search

    index_path = args.index or cfg.index_path
    if not index_path or not Path(index_path).exists():
        raise FileNotFoundError(f"index not found: {index_path or '(no path given)'} — run the index subcommand first")
    loaded = _load_checkpoint_or_fail(cfg.checkpoint_dir)
    index = load_index(index_path)
    q = embed_query(loaded.backbones, loaded.bridge, loaded.vocab, args.query)
    result = search(index, q, args.k)
    print("rank\tscore\tid\turi")
    uri_by_id = dict(zip(index.ids, index.uris))
    for rank, (image_id, score) in enumerate(result.ranking, start=1):
        print(f"{rank}\t{score:.6f}\t{image_id}\t{uri_by_id[image_id]}")
    if result.truncated_to_corpus:
        print(f"(k={args.k} exceeded the corpus; returned all {index.size} images)", file=sys.stderr)
    return 0


def cmd_caption(cfg: RunConfig, args) -> int:
    from capret.data.images import load_and_preprocess_image
    from capret.evaluation import GenerationConfig, generate_caption

    loaded = _load_checkpoint_or_fail(cfg.checkpoint_dir)
    image = load_and_preprocess_image(args.image)
    gen_cfg = GenerationConfig(mode=args.mode, beam_width=args.beam_width, max_new_tokens=args.max_new_tokens)
    gen = generate_caption(loaded.backbones, loaded.bridge, image, loaded.vocab, gen_cfg)
    print(gen.text)
    if gen.truncated:
        print("(stopped at the token budget before an end token)", file=sys.stderr)
    return 0


def cmd_serve(cfg: RunConfig, args) -> int:
    import uvicorn

    from capret.service import create_app

    checkpoint_dir = os.environ.get("CAPRET_CHECKPOINT_DIR") or cfg.checkpoint_dir
    app = create_app(checkpoint_dir, args.index or cfg.index_path)
    uvicorn.run(app, host=cfg.host, port=cfg.port, log_level="warning")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _add_config_flags(p: argparse.ArgumentParser, *names: str) -> None:
    p.add_argument("--config", help="JSON file with RunConfig fields")
    mapping = {
        "manifest": (["--manifest"], str, "dataset manifest path"),
        "checkpoint_dir": (["--checkpoint"], str, "checkpoint directory"),
        "out_dir": (["--out-dir"], str, "directory for tables/figures"),
        "seed": (["--seed"], int, "global seed"),
        "batch_size": (["--batch-size"], int, "training batch size (pairs)"),
        "base_lr": (["--lr"], float, "base learning rate"),
        "max_steps": (["--steps"], int, "bridge training steps"),
        "warmup_steps": (["--warmup-steps"], int, "lr warmup steps"),
        "eval_every": (["--eval-every"], int, "validation interval in steps"),
        "stage1_steps": (["--stage1-steps"], int, "encoder fine-tuning steps (0 disables)"),
        "decoder_warmup_steps": (["--decoder-warmup-steps"], int, "decoder LM warmup steps (0 disables)"),
        "retrieval_dim": (["--retrieval-dim"], int, "shared retrieval width q"),
        "index_path": (["--index"], str, "retrieval index directory"),
        "host": (["--host"], str, "bind host"),
        "port": (["--port"], int, "bind port"),
        "lambda_caption": (["--lambda-caption"], float, "captioning loss weight"),
        "lambda_retrieval": (["--lambda-retrieval"], float, "retrieval loss weight"),
    }
    for name in names:
        flags, typ, help_text = mapping[name]
        p.add_argument(*flags, dest=name, type=typ, default=None, help=help_text)


def _gen_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=["greedy", "beam"], default="greedy", help="decoding strategy")
    p.add_argument("--beam-width", type=int, default=1, help="beam width (beam mode)")
    p.add_argument("--max-new-tokens", type=int, default=20, help="generation budget")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capret", description="caption + retrieval toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthgen", help="generate a synthetic scene dataset")
    p.add_argument("-n", "--num-images", type=int, required=True)
    p.add_argument("-o", "--out", required=True)
    _add_config_flags(p, "seed")
    p.set_defaults(func=cmd_synthgen)

    p = sub.add_parser("train-clip", help="stage 1: contrastive encoder fine-tuning")
    _add_config_flags(p, "manifest", "checkpoint_dir", "seed", "batch_size", "stage1_steps", "eval_every")
    p.set_defaults(func=cmd_train_clip)

    p = sub.add_parser("train", help="stage 2: bridge training (optionally preceded by stage 1 and decoder warmup)")
    _add_config_flags(
        p,
        "manifest",
        "checkpoint_dir",
        "seed",
        "batch_size",
        "base_lr",
        "max_steps",
        "warmup_steps",
        "eval_every",
        "stage1_steps",
        "decoder_warmup_steps",
        "retrieval_dim",
        "lambda_caption",
        "lambda_retrieval",
    )
    p.add_argument("--init-from", default=None, help="start from an existing checkpoint instead of fresh init")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-retrieval", help="R@{1,5,10} + mean recall table and figure")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    _add_config_flags(p, "manifest", "checkpoint_dir", "out_dir")
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("eval-caption", help="BLEU/ROUGE-L/CIDEr-D table, figure, and per-image log")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    _gen_flags(p)
    _add_config_flags(p, "manifest", "checkpoint_dir", "out_dir")
    p.set_defaults(func=cmd_eval_caption)

    p = sub.add_parser("index", help="build and persist a retrieval index for a split")
    p.add_argument("--split", default="train", choices=["train", "val", "test"])
    p.add_argument("-o", "--out", default=None, help="index output directory")
    _add_config_flags(p, "manifest", "checkpoint_dir")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", help="rank indexed images for a text query")
    p.add_argument("-q", "--query", required=True)
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--index", default=None, help="index directory")
    _add_config_flags(p, "checkpoint_dir")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("caption", help="caption one image file")
    p.add_argument("-i", "--image", required=True)
    _gen_flags(p)
    _add_config_flags(p, "checkpoint_dir")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("serve", help="HTTP service for search and captioning")
    p.add_argument("--index", default=None, help="index directory")
    _add_config_flags(p, "checkpoint_dir", "host", "port")
    p.set_defaults(func=cmd_serve)

    return parser


_CONFIG_KEYS = set(_FIELD_TYPES)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {k: v for k, v in vars(args).items() if k in _CONFIG_KEYS}
        cfg = load_run_config(getattr(args, "config", None), overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        return args.func(cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
