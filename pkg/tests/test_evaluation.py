import json
import math

import numpy as np
import pytest

import capret.evaluation as evaluation
from capret.evaluation import (
    CorpusScore,
    GeneratedCaption,
    GenerationConfig,
    evaluate_corpus,
    generate_caption,
)
from capret.metrics import corpus_bleu
from capret.training import load_checkpoint

from conftest import make_toy_model


def _scripted(vocab, plan):
    """A stand-in for the next-token distribution: ``plan`` maps the tuple of
    already-generated ids to {token: probability}; unlisted tokens share the
    leftover mass."""

    def fake_logprobs(backbones, prefix, ids, ret_embedding):
        generated = tuple(ids[1:])  # ids[0] is BOS
        probs = np.full(vocab.size, 1e-9)
        step_plan = plan.get(generated, {})
        listed = sum(step_plan.values())
        rest = max(1e-9, (1.0 - listed) / max(1, vocab.size - len(step_plan)))
        probs[:] = rest
        for tok, p in step_plan.items():
            probs[tok] = p
        probs = probs / probs.sum()
        return np.log(probs)

    return fake_logprobs


def test_generation_config_validation():
    with pytest.raises(ValueError):
        GenerationConfig(mode="sampling")
    with pytest.raises(ValueError):
        GenerationConfig(mode="greedy", beam_width=2)
    with pytest.raises(ValueError):
        GenerationConfig(mode="beam", beam_width=0)
    with pytest.raises(ValueError):
        GenerationConfig(max_new_tokens=0)


def test_corpus_score_validation():
    with pytest.raises(ValueError):
        CorpusScore(bleu1=1.2, bleu2=0, bleu3=0, bleu4=0, rouge_l=0, cider_d=0)
    with pytest.raises(ValueError):
        CorpusScore(bleu1=0, bleu2=0, bleu3=0, bleu4=0, rouge_l=0, cider_d=11.0)
    score = CorpusScore(bleu1=0.5, bleu2=0.4, bleu3=0.3, bleu4=0.2, rouge_l=0.6, cider_d=3.3)
    assert score.as_dict()["bleu1"] == 0.5


def _image():
    return np.zeros((224, 224, 3), dtype=np.float32)


def test_greedy_follows_argmax_chain(toy_model, monkeypatch):
    backbones, bridge, vocab = toy_model
    w1, w2 = 7, 9
    plan = {
        (): {w1: 0.9},
        (w1,): {w2: 0.9},
        (w1, w2): {vocab.eos_id: 0.9},
    }
    monkeypatch.setattr(evaluation, "_next_logprobs", _scripted(vocab, plan))
    gen = generate_caption(backbones, bridge, _image(), vocab)
    assert gen.token_ids == (w1, w2, vocab.eos_id)
    assert gen.text == f"{vocab.id_to_token[w1]} {vocab.id_to_token[w2]}"
    assert not gen.truncated


def test_generation_stops_at_ret_and_strips_it(toy_model, monkeypatch):
    backbones, bridge, vocab = toy_model
    w1 = 8
    plan = {(): {w1: 0.9}, (w1,): {vocab.ret_id: 0.9}}
    monkeypatch.setattr(evaluation, "_next_logprobs", _scripted(vocab, plan))
    gen = generate_caption(backbones, bridge, _image(), vocab)
    assert gen.token_ids == (w1, vocab.ret_id)
    assert gen.text == vocab.id_to_token[w1]
    assert not gen.truncated


def test_generation_truncates_at_budget(toy_model, monkeypatch):
    backbones, bridge, vocab = toy_model
    w1 = 7  # plan never emits a stop token
    monkeypatch.setattr(evaluation, "_next_logprobs", _scripted(vocab, {(): {w1: 0.9}}))
    cfg = GenerationConfig(max_new_tokens=5)
    gen = generate_caption(backbones, bridge, _image(), vocab, cfg)
    assert gen.truncated
    assert len(gen.token_ids) == 5


def test_budget_respects_context_length(toy_model, monkeypatch):
    backbones, bridge, vocab = toy_model
    monkeypatch.setattr(evaluation, "_next_logprobs", _scripted(vocab, {}))
    cfg = GenerationConfig(max_new_tokens=500)
    gen = generate_caption(backbones, bridge, _image(), vocab, cfg)
    # prefix + BOS + generated must fit the 24-token context
    assert len(gen.token_ids) == backbones.decoder_cfg.context_len - 2


def test_beam_overtakes_greedy_on_delayed_reward(toy_model, monkeypatch):
    backbones, bridge, vocab = toy_model
    a, b = 7, 8
    plan = {
        (): {a: 0.6, b: 0.4},
        (a,): {vocab.eos_id: 0.55},
        (b,): {vocab.eos_id: 0.95},
    }
    monkeypatch.setattr(evaluation, "_next_logprobs", _scripted(vocab, plan))
    greedy = generate_caption(backbones, bridge, _image(), vocab, GenerationConfig())
    beam = generate_caption(
        backbones, bridge, _image(), vocab, GenerationConfig(mode="beam", beam_width=2)
    )
    assert greedy.token_ids[0] == a  # locally best
    assert beam.token_ids[0] == b  # globally best: 0.4*0.95 > 0.6*0.55
    assert beam.token_ids[-1] == vocab.eos_id


def test_ties_break_toward_lower_token_id(toy_model, monkeypatch):
    backbones, bridge, vocab = toy_model
    plan = {
        (): {7: 0.45, 8: 0.45},
        (7,): {vocab.eos_id: 0.9},
        (8,): {vocab.eos_id: 0.9},
    }
    monkeypatch.setattr(evaluation, "_next_logprobs", _scripted(vocab, plan))
    for cfg in (GenerationConfig(), GenerationConfig(mode="beam", beam_width=3)):
        gen = generate_caption(backbones, bridge, _image(), vocab, cfg)
        assert gen.token_ids[0] == 7


def test_beam_width_one_equals_greedy_on_random_models():
    rng = np.random.default_rng(0)
    for seed in range(20):
        backbones, bridge, vocab = make_toy_model(seed=seed)
        image = rng.random((224, 224, 3)).astype(np.float32)
        greedy = generate_caption(backbones, bridge, image, vocab, GenerationConfig())
        beam = generate_caption(
            backbones, bridge, image, vocab, GenerationConfig(mode="beam", beam_width=1)
        )
        assert greedy.token_ids == beam.token_ids
        assert greedy.text == beam.text


def test_greedy_is_deterministic(toy_model):
    backbones, bridge, vocab = toy_model
    rng = np.random.default_rng(5)
    image = rng.random((224, 224, 3)).astype(np.float32)
    first = generate_caption(backbones, bridge, image, vocab)
    second = generate_caption(backbones, bridge, image, vocab)
    assert first.token_ids == second.token_ids


def test_generated_caption_str():
    gen = GeneratedCaption(text="two boats", token_ids=(4, 5), truncated=False)
    assert str(gen) == "two boats"


def test_evaluate_corpus_scores_and_log(small_model_dir, tmp_path):
    loaded = load_checkpoint(small_model_dir["checkpoint"])
    manifest = small_model_dir["manifest"]
    log_path = tmp_path / "captions.jsonl"
    score, rows = evaluate_corpus(
        loaded.backbones, loaded.bridge, manifest, "train", loaded.vocab,
        GenerationConfig(max_new_tokens=8), log_path=log_path,
    )
    n = len(manifest.split_records("train"))
    assert len(rows) == n
    for row in rows:
        assert set(row) >= {"image", "hypothesis", "references", "truncated",
                            "bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider_d"}
    # corpus BLEU must pool counts over the same hypotheses the rows record
    again = corpus_bleu([r["hypothesis"] for r in rows], [r["references"] for r in rows], max_n=4)
    assert score.bleu1 == pytest.approx(again[0], abs=1e-12)
    assert score.bleu4 == pytest.approx(again[3], abs=1e-12)
    lines = [json.loads(line) for line in log_path.read_text().splitlines()]
    assert len(lines) == n + 1
    assert lines[-1]["summary"] is True
    assert lines[-1]["bleu1"] == pytest.approx(score.bleu1)


def test_evaluate_corpus_empty_split_rejected(small_model_dir):
    from capret.data.manifest import DatasetManifest

    loaded = load_checkpoint(small_model_dir["checkpoint"])
    manifest = small_model_dir["manifest"]
    only_train = DatasetManifest(
        name="t", base_dir=manifest.base_dir,
        records=tuple(r for r in manifest.records if r.split == "train"),
    )
    with pytest.raises(ValueError):
        evaluate_corpus(loaded.backbones, loaded.bridge, only_train, "val", loaded.vocab)
