"""Two-stage training.

Stage 1 (:func:`finetune_vision_encoder`) contrastively fine-tunes the
vision/text encoder pair on caption-image pairs; it is the only code path
that updates the vision or text encoder.

Stage 2 (:func:`train_bridge`) trains only the five bridge tensors with the
joint objective: a captioning cross-entropy over interleaved two-pair
sequences, plus symmetric text/image contrastive terms over the individual
pairs of the batch.  The frozen backbones' digests are invariant throughout.

:func:`pretrain_decoder_lm` optionally warms the decoder up as a plain
language model over the caption corpus before it is frozen, standing in for
the large pretrained decoder the architecture assumes.

The optimizer is a self-contained Adam so that its moments serialize
bit-exactly into checkpoint containers; resuming from a checkpoint replays
the identical loss curve.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from capret.backbones import (
    BackboneBundle,
    DecoderConfig,
    VisionEncoderConfig,
    encode_image,
    freeze,
    init_backbones,
)
from capret.bridge import (
    BridgeParameters,
    project_image_for_retrieval,
    project_ret_for_retrieval,
    project_visual_prefix,
)
from capret.checkpoint import CheckpointError, read_container, write_container
from capret.data.images import load_and_preprocess_image
from capret.data.manifest import DatasetManifest, ImageCaptionRecord
from capret.data.vocab import Vocabulary, build_vocabulary, tokenize
from capret.metrics import corpus_bleu
from capret.objectives import captioning_cross_entropy, combined_loss, info_nce

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDivergedError(RuntimeError):
    """Raised when a loss term stops being finite; names the component."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    base_lr: float = 3e-4
    warmup_steps: int = 100
    lambda_caption: float = 1.0
    lambda_retrieval: float = 1.0
    max_steps: int = 2000
    seed: int = 0
    eval_every: int = 200
    log_every: int = 25
    # continued lower-rate training of an already-trained bridge
    finetune_lr: float = 1e-4

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.batch_size < 2 and self.lambda_retrieval > 0:
            raise ValueError("batch_size 1 is only valid for captioning-only runs (lambda_retrieval=0)")
        if self.base_lr < 0 or self.finetune_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if self.warmup_steps < 0:
            raise ValueError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.lambda_caption < 0 or self.lambda_retrieval < 0:
            raise ValueError("loss weights must be >= 0")
        if self.max_steps < 0:
            raise ValueError(f"max_steps must be >= 0, got {self.max_steps}")


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 over ``warmup_steps``, constant afterwards."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if cfg.warmup_steps <= 0 or step >= cfg.warmup_steps:
        return cfg.base_lr
    return cfg.base_lr * step / cfg.warmup_steps


class AdamOptimizer:
    """Adam over a fixed named set of tensors.

    Moments live in plain tensors keyed by parameter name so checkpoints can
    copy them raw; restoring them plus the step counter resumes bit-exactly.
    """

    def __init__(self, params: dict[str, torch.Tensor]):
        self.params = dict(params)
        self.t = 0
        self.m = {k: torch.zeros_like(p, requires_grad=False) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p, requires_grad=False) for k, p in self.params.items()}

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1**self.t
        bc2 = 1.0 - ADAM_BETA2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            self.m[name].mul_(ADAM_BETA1).add_(g, alpha=1.0 - ADAM_BETA1)
            self.v[name].mul_(ADAM_BETA2).addcmul_(g, g, value=1.0 - ADAM_BETA2)
            denom = (self.v[name] / bc2).sqrt_().add_(ADAM_EPS)
            p.sub_(lr * (self.m[name] / bc1) / denom)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainState:
    step: int
    adam: AdamOptimizer
    rng: np.random.Generator
    best_metric: float = -math.inf
    best_step: int = -1


# ---------------------------------------------------------------------------
# Batch assembly


@dataclass(frozen=True)
class InterleavedExample:
    """One training sequence of one or two (visual prefix, caption) segments.

    ``input_ids`` holds the image-placeholder id at each prefix slot;
    ``prefix_positions`` maps those slots to pair indices within the batch,
    and ``ret_positions`` marks each segment's trailing retrieval token.
    """

    input_ids: tuple[int, ...]
    prefix_positions: tuple[tuple[int, int], ...]  # (sequence position, pair index)
    ret_positions: tuple[int, ...]


@dataclass(frozen=True)
class InterleavedBatch:
    examples: tuple[InterleavedExample, ...]
    pair_token_ids: tuple[tuple[int, ...], ...]  # retrieval-side sequences, one per pair
    image_vectors: torch.Tensor  # [N, m] frozen vision embeddings
    pad_id: int
    img_id: int
    bos_id: int

    @property
    def n_pairs(self) -> int:
        return len(self.pair_token_ids)


def _fit_caption_ids(ids: list[int], budget: int) -> list[int]:
    """Truncate trailing word ids so the [BOS, words…, EOS, RET] framing
    survives a tight context budget."""
    if len(ids) <= budget:
        return ids
    if budget < 4:
        raise ValueError(f"context budget {budget} cannot hold a caption")
    return ids[: budget - 2] + ids[-2:]


def build_interleaved_batch(
    records: list[ImageCaptionRecord],
    vocab: Vocabulary,
    image_vectors: np.ndarray,
    rng: np.random.Generator,
    context_len: int = 64,
    allow_single: bool = False,
) -> InterleavedBatch:
    """Assemble one training batch from pre-sampled records.

    One caption is drawn uniformly per record; pairs are formed by a random
    permutation without replacement (an odd batch leaves one single-segment
    example).  Every pair also contributes an individual retrieval-side
    sequence ending in the retrieval token.
    """
    n = len(records)
    if n < 2 and not allow_single:
        raise ValueError(f"need at least 2 records to interleave, got {n}")
    if n < 1:
        raise ValueError("empty batch")
    image_vectors = np.asarray(image_vectors, dtype=np.float32)
    if image_vectors.shape[0] != n:
        raise ValueError(f"image_vectors rows ({image_vectors.shape[0]}) must match records ({n})")

    pair_ids = []
    for rec in records:
        cap = rec.captions[int(rng.integers(len(rec.captions)))]
        pair_ids.append(tokenize(cap, vocab, append_ret=True))

    order = [int(i) for i in rng.permutation(n)]
    groups = [order[i : i + 2] for i in range(0, n, 2)]

    examples = []
    for group in groups:
        seq: list[int] = []
        prefix_positions = []
        ret_positions = []
        budget = context_len // len(group) - 1  # one slot per segment goes to the prefix
        for pair_idx in group:
            ids = _fit_caption_ids(list(pair_ids[pair_idx]), budget)
            prefix_positions.append((len(seq), pair_idx))
            seq.append(vocab.img_id)
            seq.extend(ids)
            ret_positions.append(len(seq) - 1)
        examples.append(
            InterleavedExample(
                input_ids=tuple(seq),
                prefix_positions=tuple(prefix_positions),
                ret_positions=tuple(ret_positions),
            )
        )

    return InterleavedBatch(
        examples=tuple(examples),
        pair_token_ids=tuple(tuple(ids) for ids in pair_ids),
        image_vectors=torch.from_numpy(image_vectors),
        pad_id=vocab.pad_id,
        img_id=vocab.img_id,
        bos_id=vocab.bos_id,
    )


def _pad_matrix(rows: list[list[int]], pad: int) -> torch.Tensor:
    width = max(len(r) for r in rows)
    out = torch.full((len(rows), width), pad, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.tensor(r, dtype=torch.long)
    return out


def batch_losses(
    backbones: BackboneBundle,
    bridge: BridgeParameters,
    batch: InterleavedBatch,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Differentiable (caption, t2i, i2t) loss terms for one batch."""
    dec = backbones.decoder
    dtype = bridge.prefix_proj.dtype
    v = batch.image_vectors.to(dtype)

    # captioning over interleaved sequences
    cap_ids = _pad_matrix([list(ex.input_ids) for ex in batch.examples], batch.pad_id)
    emb = dec.embed_tokens(cap_ids, bridge.ret_embedding)
    prefix = project_visual_prefix(bridge, v)  # [N, D]
    b_idx, t_idx, p_idx = [], [], []
    for b, ex in enumerate(batch.examples):
        for pos, pair in ex.prefix_positions:
            b_idx.append(b)
            t_idx.append(pos)
            p_idx.append(pair)
    emb = emb.index_put((torch.tensor(b_idx), torch.tensor(t_idx)), prefix[torch.tensor(p_idx)])
    logits, _ = dec.forward_embeddings(emb)
    targets = cap_ids[:, 1:]
    excluded = (targets == batch.pad_id) | (targets == batch.img_id) | (targets == batch.bos_id)
    cap_loss = captioning_cross_entropy(logits[:, :-1], targets, ~excluded)

    # retrieval over the individual pairs
    ret_ids = _pad_matrix([list(ids) for ids in batch.pair_token_ids], batch.pad_id)
    ret_pos = torch.tensor([len(ids) - 1 for ids in batch.pair_token_ids], dtype=torch.long)
    remb = dec.embed_tokens(ret_ids, bridge.ret_embedding)
    _, hidden = dec.forward_embeddings(remb)
    h_ret = hidden[torch.arange(hidden.shape[0]), ret_pos]
    t_rows = project_ret_for_retrieval(bridge, h_ret)
    v_rows = project_image_for_retrieval(bridge, v)
    t2i = info_nce(t_rows, v_rows, bridge.temperature, "t2i")
    i2t = info_nce(t_rows, v_rows, bridge.temperature, "i2t")
    return cap_loss, t2i, i2t


def _check_finite(breakdown) -> None:
    bad = [k for k, x in breakdown.as_dict().items() if not math.isfinite(x)]
    if bad:
        raise TrainingDivergedError(
            "non-finite loss component(s): "
            + ", ".join(f"{k}={breakdown.as_dict()[k]}" for k in bad)
        )


def train_step(
    backbones: BackboneBundle,
    bridge: BridgeParameters,
    batch: InterleavedBatch,
    state: TrainState,
    cfg: TrainConfig,
):
    """One optimization step on the bridge; returns (LossBreakdown, state)."""
    state.adam.zero_grad()
    cap, t2i, i2t = batch_losses(backbones, bridge, batch)
    total, breakdown = combined_loss(cap, t2i, i2t, cfg.lambda_caption, cfg.lambda_retrieval)
    _check_finite(breakdown)
    total.backward()
    state.adam.step(lr_schedule(state.step, cfg))
    state.step += 1
    return breakdown, state


# ---------------------------------------------------------------------------
# Dataset-side caches


def cache_image_vectors(backbones: BackboneBundle, manifest: DatasetManifest, records) -> np.ndarray:
    """Frozen vision embeddings for a record list, encoded one image at a
    time so results do not depend on batch composition."""
    rows = [encode_image(backbones, load_and_preprocess_image(manifest.image_path(r))) for r in records]
    return np.stack(rows).astype(np.float32)


def _resolve_vocab(vocab: Vocabulary | None, manifest: DatasetManifest, decoder_cfg: DecoderConfig) -> Vocabulary:
    vocab = vocab if vocab is not None else build_vocabulary(manifest)
    if vocab.size != decoder_cfg.vocab_size:
        raise ValueError(
            f"vocabulary size {vocab.size} does not match decoder vocab_size {decoder_cfg.vocab_size}"
        )
    return vocab


# ---------------------------------------------------------------------------
# Stage 1: contrastive fine-tuning of the encoder pair


def _encoder_embeddings(backbones, images: torch.Tensor, ids: torch.Tensor, eos_pos: torch.Tensor):
    img = backbones.vision(images)
    hidden = backbones.text(ids)
    txt = hidden[torch.arange(hidden.shape[0]), eos_pos]
    return img, txt


def _stage1_recall_at_1(backbones, manifest, records, vocab) -> float:
    """Text-to-image R@1 in raw encoder space over the given records."""
    from capret.retrieval import RetrievalIndex, recall_at_k, search, unit_rows

    with torch.no_grad():
        img = np.stack(
            [encode_image(backbones, load_and_preprocess_image(manifest.image_path(r))) for r in records]
        )
    index = RetrievalIndex(
        ids=tuple(r.image_uri for r in records),
        uris=tuple(str(manifest.image_path(r)) for r in records),
        vectors=unit_rows(img),
    )
    results, gt = [], {}
    for rec in records:
        for j, cap in enumerate(rec.captions):
            ids = tokenize(cap, vocab, append_ret=False)
            with torch.no_grad():
                hidden = backbones.text(torch.tensor([ids], dtype=torch.long))
            q = hidden[0, len(ids) - 1].numpy()
            res = search(index, q, 1)
            qid = f"{rec.image_uri}#cap{j}"
            results.append(type(res)(qid, res.ranking, res.truncated_to_corpus))
            gt[qid] = rec.image_uri
    return recall_at_k(results, gt, ks=(1,))["R@1"]


def finetune_vision_encoder(
    backbones: BackboneBundle,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    vocab: Vocabulary | None = None,
) -> tuple[float, list[dict]]:
    """Contrastively fine-tune the vision/text encoders on the train split.

    Updates the encoders in place (they are re-frozen afterwards) and returns
    the learned temperature plus a metrics log with val-split R@1 entries.
    """
    vocab = _resolve_vocab(vocab, manifest, backbones.decoder_cfg)
    train_records = manifest.split_records("train")
    val_records = manifest.split_records("val")
    if len(train_records) < 2:
        raise ValueError("stage-1 fine-tuning needs at least 2 training images")

    images = {
        r.image_uri: load_and_preprocess_image(manifest.image_path(r)) for r in train_records
    }
    log_tau = torch.tensor(math.log(0.07), requires_grad=True)
    params = {f"vision.{n}": p for n, p in backbones.vision.named_parameters()}
    params.update({f"text.{n}": p for n, p in backbones.text.named_parameters()})
    params["log_temperature"] = log_tau
    for p in params.values():
        p.requires_grad_(True)
    adam = AdamOptimizer(params)
    rng = np.random.default_rng(cfg.seed)
    log: list[dict] = []

    try:
        for step in range(cfg.max_steps):
            idx = rng.choice(len(train_records), size=min(cfg.batch_size, len(train_records)), replace=False)
            batch_records = [train_records[int(i)] for i in idx]
            caps = [r.captions[int(rng.integers(len(r.captions)))] for r in batch_records]
            ids_rows = [tokenize(c, vocab, append_ret=False) for c in caps]
            ids = _pad_matrix(ids_rows, vocab.pad_id)
            eos_pos = torch.tensor([len(r) - 1 for r in ids_rows], dtype=torch.long)
            imgs = torch.from_numpy(np.stack([images[r.image_uri] for r in batch_records]))

            adam.zero_grad()
            img_emb, txt_emb = _encoder_embeddings(backbones, imgs, ids, eos_pos)
            tau = log_tau.exp()
            t2i = info_nce(txt_emb, img_emb, tau, "t2i")
            i2t = info_nce(txt_emb, img_emb, tau, "i2t")
            total, breakdown = combined_loss(torch.zeros(()), t2i, i2t, 0.0, 1.0)
            _check_finite(breakdown)
            total.backward()
            adam.step(lr_schedule(step, cfg))

            done = step + 1
            if done % cfg.log_every == 0 or done == cfg.max_steps:
                row = {"step": done, "loss_t2i": breakdown.t2i, "loss_i2t": breakdown.i2t}
                if val_records and (done % cfg.eval_every == 0 or done == cfg.max_steps):
                    row["val_R@1"] = _stage1_recall_at_1(backbones, manifest, val_records, vocab)
                log.append(row)
    finally:
        freeze(backbones.vision)
        freeze(backbones.text)
        log_tau.requires_grad_(False)
    return float(log_tau.exp()), log


# ---------------------------------------------------------------------------
# Optional decoder language-model warmup


def pretrain_decoder_lm(
    backbones: BackboneBundle,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    vocab: Vocabulary | None = None,
) -> list[dict]:
    """Warm the decoder up on caption text, then re-freeze it.

    The surrounding system assumes a decoder that already speaks the caption
    language *and* knows how to read a continuous vector in a prefix slot —
    capabilities a large pretrained model brings along.  This text-only
    warmup provides both: training sequences mirror the interleaved layout
    ([prefix, BOS, words…, EOS, RET] × 2), with each prefix slot holding the
    mean embedding of that caption's own word tokens.  The decoder therefore
    learns to condition generation on whatever vector sits in the prefix
    slot, which is exactly the mechanism bridge training steers through.
    After the warmup the decoder is frozen and its digests stay constant.
    """
    vocab = _resolve_vocab(vocab, manifest, backbones.decoder_cfg)
    captions = [c for r in manifest.split_records("train") for c in r.captions]
    if not captions:
        raise ValueError("no training captions")
    params = {f"decoder.{n}": p for n, p in backbones.decoder.named_parameters()}
    for p in params.values():
        p.requires_grad_(True)
    adam = AdamOptimizer(params)
    rng = np.random.default_rng(cfg.seed)
    dec = backbones.decoder
    log: list[dict] = []
    try:
        for step in range(cfg.max_steps):
            idx = rng.choice(len(captions), size=min(cfg.batch_size, len(captions)), replace=False)
            token_rows = [tokenize(captions[int(i)], vocab, append_ret=True) for i in idx]
            # two segments per sequence, [IMG-slot] + caption ids each
            seq_rows, slots = [], []
            for s in range(0, len(token_rows), 2):
                group = token_rows[s : s + 2]
                seq: list[int] = []
                budget = dec.cfg.context_len // len(group) - 1
                for ids in group:
                    ids = _fit_caption_ids(ids, budget)
                    slots.append((len(seq_rows), len(seq), ids))
                    seq.append(vocab.img_id)
                    seq.extend(ids)
                seq_rows.append(seq)
            ids = _pad_matrix(seq_rows, vocab.pad_id)

            adam.zero_grad()
            emb = dec.embed_tokens(ids)
            # fill each prefix slot with the caption's mean word embedding
            b_idx, t_idx, topics = [], [], []
            for b, t, cap_ids in slots:
                words = [i for i in cap_ids if i not in (vocab.bos_id, vocab.eos_id, vocab.ret_id)]
                src = torch.tensor(words if words else [vocab.bos_id], dtype=torch.long)
                topics.append(dec.token_embed(src).mean(dim=0))
                b_idx.append(b)
                t_idx.append(t)
            emb = emb.index_put((torch.tensor(b_idx), torch.tensor(t_idx)), torch.stack(topics))
            logits, _ = dec.forward_embeddings(emb)
            targets = ids[:, 1:]
            mask = (targets != vocab.pad_id) & (targets != vocab.bos_id) & (targets != vocab.img_id)
            loss = captioning_cross_entropy(logits[:, :-1], targets, mask)
            if not math.isfinite(float(loss.detach())):
                raise TrainingDivergedError(f"non-finite language-model loss at step {step}")
            loss.backward()
            adam.step(lr_schedule(step, cfg))
            if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.max_steps:
                log.append({"step": step + 1, "loss_lm": float(loss.detach())})
    finally:
        freeze(backbones.decoder)
    return log


# ---------------------------------------------------------------------------
# Stage 2: bridge training


def _val_metrics(backbones, bridge, manifest, vocab) -> dict[str, float]:
    from capret.evaluation import GenerationConfig, generate_caption
    from capret.retrieval import evaluate_split_retrieval

    out = evaluate_split_retrieval(backbones, bridge, manifest, "val", vocab)
    val_records = manifest.split_records("val")
    hyps, refs = [], []
    gen_cfg = GenerationConfig()
    for rec in val_records:
        image = load_and_preprocess_image(manifest.image_path(rec))
        hyps.append(generate_caption(backbones, bridge, image, vocab, gen_cfg).text)
        refs.append(list(rec.captions))
    out["bleu1"] = corpus_bleu(hyps, refs, max_n=1)[0]
    return out


def train_bridge(
    backbones: BackboneBundle,
    bridge: BridgeParameters,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    vocab: Vocabulary | None = None,
    out_dir: str | Path | None = None,
    state: TrainState | None = None,
) -> tuple[BridgeParameters, list[dict]]:
    """Train the bridge tensors to ``cfg.max_steps``, logging losses and
    periodic val metrics; saves best (by val mean recall) and final
    checkpoints under ``out_dir`` when given.  Passing a restored ``state``
    resumes the interrupted run's exact loss curve.
    """
    vocab = _resolve_vocab(vocab, manifest, backbones.decoder_cfg)
    backbones.assert_frozen()
    train_records = manifest.split_records("train")
    if not train_records:
        raise ValueError("train split is empty")
    has_val = bool(manifest.split_records("val"))

    vectors = cache_image_vectors(backbones, manifest, train_records)
    if state is None:
        state = TrainState(step=0, adam=AdamOptimizer(bridge.named_tensors()), rng=np.random.default_rng(cfg.seed))
    bridge.requires_grad_(True)
    log: list[dict] = []
    out_dir = Path(out_dir) if out_dir is not None else None

    def _maybe_eval(force: bool = False):
        if not has_val:
            return
        if force or (cfg.eval_every > 0 and state.step % cfg.eval_every == 0):
            with torch.no_grad():
                vm = _val_metrics(backbones, bridge, manifest, vocab)
            row = {"step": state.step, **{f"val_{k}": v for k, v in vm.items()}}
            log.append(row)
            if vm["mean_recall"] > state.best_metric:
                state.best_metric = vm["mean_recall"]
                state.best_step = state.step
                if out_dir is not None:
                    save_checkpoint(backbones, bridge, state, out_dir / "best", vocab=vocab, cfg=cfg)

    while state.step < cfg.max_steps:
        size = min(cfg.batch_size, len(train_records))
        idx = state.rng.choice(len(train_records), size=size, replace=False)
        batch = build_interleaved_batch(
            [train_records[int(i)] for i in idx],
            vocab,
            vectors[idx],
            state.rng,
            context_len=backbones.decoder_cfg.context_len,
            allow_single=cfg.lambda_retrieval == 0,
        )
        breakdown, state = train_step(backbones, bridge, batch, state, cfg)
        if state.step % cfg.log_every == 0 or state.step == cfg.max_steps:
            log.append({"step": state.step, **breakdown.as_dict()})
        _maybe_eval(force=state.step == cfg.max_steps)

    bridge.requires_grad_(False)
    if out_dir is not None and cfg.max_steps > 0:
        save_checkpoint(backbones, bridge, state, out_dir / "final", vocab=vocab, cfg=cfg)
    return bridge, log


# ---------------------------------------------------------------------------
# Gradient verification


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float]
    n_scalars: int


def gradient_check(
    backbones: BackboneBundle,
    bridge: BridgeParameters,
    batch: InterleavedBatch,
    cfg: TrainConfig | None = None,
    epsilon: float = 1e-5,
) -> GradCheckReport:
    """Compare autograd gradients of the combined loss against central finite
    differences, all in float64, over every trainable scalar."""
    cfg = cfg or TrainConfig(batch_size=max(2, batch.n_pairs))
    bb64 = backbones.to_double()
    br64 = bridge.to_double()
    batch64 = InterleavedBatch(
        examples=batch.examples,
        pair_token_ids=batch.pair_token_ids,
        image_vectors=batch.image_vectors.double(),
        pad_id=batch.pad_id,
        img_id=batch.img_id,
        bos_id=batch.bos_id,
    )

    def loss_value() -> float:
        with torch.no_grad():
            cap, t2i, i2t = batch_losses(bb64, br64, batch64)
        return float(cfg.lambda_caption * cap + cfg.lambda_retrieval * (t2i + i2t))

    br64.zero_grad()
    cap, t2i, i2t = batch_losses(bb64, br64, batch64)
    total = cfg.lambda_caption * cap + cfg.lambda_retrieval * (t2i + i2t)
    total.backward()

    per_tensor: dict[str, float] = {}
    n_scalars = 0
    for name, p in br64.named_tensors().items():
        grad = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        flat = p.data.view(-1)
        worst = 0.0
        for i in range(flat.numel()):
            n_scalars += 1
            keep = float(flat[i])
            flat[i] = keep + epsilon
            plus = loss_value()
            flat[i] = keep - epsilon
            minus = loss_value()
            flat[i] = keep
            numeric = (plus - minus) / (2.0 * epsilon)
            analytic = float(grad.view(-1)[i])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, rel)
        per_tensor[name] = worst
    return GradCheckReport(max_rel_error=max(per_tensor.values()), per_tensor=per_tensor, n_scalars=n_scalars)


# ---------------------------------------------------------------------------
# Checkpointing


@dataclass
class LoadedCheckpoint:
    backbones: BackboneBundle
    bridge: BridgeParameters
    state: TrainState | None
    vocab: Vocabulary
    meta: dict


def save_checkpoint(
    backbones: BackboneBundle,
    bridge: BridgeParameters,
    state: TrainState | None,
    path: str | Path,
    *,
    vocab: Vocabulary,
    cfg: TrainConfig | None = None,
    extra_meta: dict | None = None,
) -> None:
    """Serialize backbones, bridge, optimizer moments, and RNG state into a
    tensor container; everything restores bit-exactly."""
    tensors: dict[str, np.ndarray] = {}
    for name, p in backbones.named_tensors():
        tensors[name] = p.detach().numpy()
    for name, p in bridge.named_tensors().items():
        tensors[f"bridge.{name}"] = p.detach().numpy()
    train_state: dict = {
        "step": state.step if state else 0,
        "best_metric": (None if state is None or state.best_metric == -math.inf else state.best_metric),
        "best_step": state.best_step if state else -1,
    }
    if state is not None:
        for name, m in state.adam.m.items():
            tensors[f"adam.m.{name}"] = m.detach().numpy()
        for name, v in state.adam.v.items():
            tensors[f"adam.v.{name}"] = v.detach().numpy()
        train_state["adam_step"] = state.adam.t
        train_state["rng_state"] = state.rng.bit_generator.state
    meta = {
        "vision_cfg": asdict(backbones.vision_cfg),
        "decoder_cfg": asdict(backbones.decoder_cfg),
        "backbone_seed": backbones.seed,
        "retrieval_dim": bridge.retrieval_dim,
        "vocab_tokens": list(vocab.id_to_token),
    }
    if cfg is not None:
        meta["train_cfg"] = asdict(cfg)
    if extra_meta:
        meta.update(extra_meta)
    train_state["meta"] = meta
    write_container(path, tensors, train_state)


def load_checkpoint(path: str | Path) -> LoadedCheckpoint:
    """Rebuild backbones, bridge, and (when present) optimizer/RNG state."""
    tensors, train_state = read_container(path)
    meta = train_state.get("meta")
    if not meta:
        raise CheckpointError(f"container at {path} carries no model metadata")
    vocab_tokens = meta["vocab_tokens"]
    vocab = Vocabulary(
        token_to_id={t: i for i, t in enumerate(vocab_tokens)},
        id_to_token=tuple(vocab_tokens),
    )
    backbones = init_backbones(
        VisionEncoderConfig(**meta["vision_cfg"]),
        DecoderConfig(**meta["decoder_cfg"]),
        seed=meta.get("backbone_seed", 0),
    )
    with torch.no_grad():
        for name, p in backbones.named_tensors():
            if name not in tensors:
                raise CheckpointError(f"checkpoint missing backbone tensor {name}")
            arr = tensors[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(f"tensor {name}: shape {arr.shape} != expected {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr))

    def bridge_tensor(name: str) -> torch.Tensor:
        key = f"bridge.{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint missing bridge tensor {key}")
        return torch.from_numpy(tensors[key].copy())

    bridge = BridgeParameters(
        prefix_proj=bridge_tensor("prefix_proj"),
        image_proj=bridge_tensor("image_proj"),
        text_proj=bridge_tensor("text_proj"),
        ret_embedding=bridge_tensor("ret_embedding"),
        log_temperature=bridge_tensor("log_temperature").reshape(()),
    )

    state = None
    if "rng_state" in train_state:
        adam = AdamOptimizer(bridge.named_tensors())
        adam.t = train_state.get("adam_step", 0)
        for name in bridge.named_tensors():
            if f"adam.m.{name}" in tensors:
                adam.m[name] = torch.from_numpy(tensors[f"adam.m.{name}"].copy()).reshape(adam.m[name].shape)
                adam.v[name] = torch.from_numpy(tensors[f"adam.v.{name}"].copy()).reshape(adam.v[name].shape)
        rng = np.random.default_rng()
        rng.bit_generator.state = train_state["rng_state"]
        best = train_state.get("best_metric")
        state = TrainState(
            step=train_state.get("step", 0),
            adam=adam,
            rng=rng,
            best_metric=-math.inf if best is None else float(best),
            best_step=train_state.get("best_step", -1),
        )
    return LoadedCheckpoint(backbones=backbones, bridge=bridge, state=state, vocab=vocab, meta=meta)
