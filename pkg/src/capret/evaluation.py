"""Caption generation (greedy and beam) and corpus-level evaluation.

Generation conditions the decoder on a single projected visual-prefix token,
then decodes autoregressively until EOS, the retrieval token, or the token
budget.  Corpus evaluation generates one caption per image and scores it
against all references with BLEU-1..4, ROUGE-L, and CIDEr-D, optionally
writing a JSON-lines per-image log.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from capret.backbones import BackboneBundle, decoder_forward, encode_image
from capret.bridge import BridgeParameters, project_visual_prefix
from capret.data.images import load_and_preprocess_image
from capret.data.manifest import DatasetManifest
from capret.data.vocab import Vocabulary, detokenize
from capret.metrics import bleu, cider_d, corpus_bleu, rouge_l


@dataclass(frozen=True)
class GenerationConfig:
    mode: str = "greedy"
    beam_width: int = 1
    max_new_tokens: int = 20

    def __post_init__(self):
        if self.mode not in ("greedy", "beam"):
            raise ValueError(f"mode must be 'greedy' or 'beam', got {self.mode!r}")
        if self.mode == "greedy" and self.beam_width != 1:
            raise ValueError("greedy decoding requires beam_width=1")
        if self.beam_width < 1:
            raise ValueError(f"beam_width must be >= 1, got {self.beam_width}")
        if self.max_new_tokens < 1:
            raise ValueError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")


@dataclass(frozen=True)
class GeneratedCaption:
    """Decoded text plus the raw token ids and a truncation flag (set when
    the budget ran out before a stop token)."""

    text: str
    token_ids: tuple[int, ...]
    truncated: bool

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True)
class CorpusScore:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    cider_d: float

    def __post_init__(self):
        for name in ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l"):
            v = getattr(self, name)
            if not -1e-9 <= v <= 1.0 + 1e-9:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not -1e-9 <= self.cider_d <= 10.0 + 1e-9:
            raise ValueError(f"cider_d={self.cider_d} outside [0, 10]")

    def as_dict(self) -> dict[str, float]:
        return {
            "bleu1": self.bleu1,
            "bleu2": self.bleu2,
            "bleu3": self.bleu3,
            "bleu4": self.bleu4,
            "rouge_l": self.rouge_l,
            "cider_d": self.cider_d,
        }


def _next_logprobs(backbones, prefix, ids, ret_embedding) -> np.ndarray:
    logits, _ = decoder_forward(backbones, prefix, ids, ret_embedding)
    x = logits[-1].astype(np.float64)
    x = x - x.max()
    return x - np.log(np.exp(x).sum())


def generate_caption(
    backbones: BackboneBundle,
    bridge: BridgeParameters,
    image: np.ndarray,
    vocab: Vocabulary,
    cfg: GenerationConfig = GenerationConfig(),
) -> GeneratedCaption:
    """Caption one preprocessed image.

    Greedy decoding is a pure function of (parameters, image, config); beam
    search keeps ``beam_width`` candidates ranked by total log-probability
    with deterministic lowest-id tie-breaks, so beam_width=1 equals greedy.
    """
    v = encode_image(backbones, image)
    prefix = project_visual_prefix(bridge, v).detach().numpy()
    stops = (vocab.eos_id, vocab.ret_id)
    # one prefix slot plus BOS plus generated tokens must fit the context
    budget = min(cfg.max_new_tokens, backbones.decoder_cfg.context_len - 2)

    # beams: (cumulative logprob, ids after BOS, done)
    beams: list[tuple[float, tuple[int, ...], bool]] = [(0.0, (), False)]
    for _ in range(budget):
        candidates = [b for b in beams if b[2]]
        expanded = False
        for score, ids, done in beams:
            if done:
                continue
            expanded = True
            logprobs = _next_logprobs(backbones, prefix, [vocab.bos_id, *ids], bridge.ret_embedding)
            top = np.argsort(-logprobs, kind="stable")[: cfg.beam_width]
            for tok in top:
                tok = int(tok)
                candidates.append((score + float(logprobs[tok]), (*ids, tok), tok in stops))
        if not expanded:
            break
        candidates.sort(key=lambda b: (-b[0], b[1]))
        beams = candidates[: cfg.beam_width]
        if all(b[2] for b in beams):
            break
    score, ids, done = beams[0]
    return GeneratedCaption(text=detokenize(list(ids), vocab), token_ids=ids, truncated=not done)


def evaluate_corpus(
    backbones: BackboneBundle,
    bridge: BridgeParameters,
    manifest: DatasetManifest,
    split: str,
    vocab: Vocabulary,
    cfg: GenerationConfig = GenerationConfig(),
    log_path: str | Path | None = None,
) -> tuple[CorpusScore, list[dict]]:
    """Generate one caption per image of a split and score the corpus.

    Returns (CorpusScore, per-image rows); the rows carry sentence-level
    metric values and are also written to ``log_path`` as JSON lines when
    given, followed by one summary record.
    """
    records = manifest.split_records(split)
    if not records:
        raise ValueError(f"split {split!r} of {manifest.name!r} is empty")
    hypotheses, references, rows = [], [], []
    for rec in records:
        image = load_and_preprocess_image(manifest.image_path(rec))
        gen = generate_caption(backbones, bridge, image, vocab, cfg)
        refs = list(rec.captions)
        hypotheses.append(gen.text)
        references.append(refs)
        rows.append(
            {
                "image": rec.image_uri,
                "hypothesis": gen.text,
                "references": refs,
                "truncated": gen.truncated,
                "bleu1": bleu(gen.text, refs, 1),
                "bleu2": bleu(gen.text, refs, 2),
                "bleu3": bleu(gen.text, refs, 3),
                "bleu4": bleu(gen.text, refs, 4),
                "rouge_l": rouge_l(gen.text, refs),
            }
        )
    b1, b2, b3, b4 = corpus_bleu(hypotheses, references, max_n=4)
    rl = float(np.mean([r["rouge_l"] for r in rows]))
    cd, per_image_cd = cider_d(hypotheses, references)
    for row, c in zip(rows, per_image_cd):
        row["cider_d"] = c
    score = CorpusScore(bleu1=b1, bleu2=b2, bleu3=b3, bleu4=b4, rouge_l=rl, cider_d=cd)
    if log_path is not None:
        with open(log_path, "w") as f:
            for row in rows:
                f.write(json.dumps(row) + "\n")
            f.write(json.dumps({"summary": True, "split": split, **score.as_dict()}) + "\n")
    return score, rows
