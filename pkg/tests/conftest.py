import sys

import numpy as np
import pytest

from capret.backbones import DecoderConfig, VisionEncoderConfig, init_backbones
from capret.bridge import init_bridge
from capret.data.manifest import ImageCaptionRecord
from capret.data.synthetic import generate_synthetic_dataset
from capret.data.vocab import build_vocabulary
from capret.training import build_interleaved_batch

# Small dims used throughout the unit tests: m=8, D=H=16, q=4, V=20.
TOY_WORDS = [
    "water", "forest", "buildings", "tanks", "runway",
    "one", "two", "three", "red", "blue",
    "scene", "with", "objects", "a",
]  # 14 words + 6 specials = vocab of 20


def toy_vision_cfg() -> VisionEncoderConfig:
    return VisionEncoderConfig(patch_size=112, embed_dim=8, n_layers=1, n_heads=2)


def toy_decoder_cfg(vocab_size: int = 20) -> DecoderConfig:
    return DecoderConfig(
        vocab_size=vocab_size, embed_dim=16, hidden_dim=16, n_layers=1, n_heads=2, context_len=24
    )


def make_toy_model(seed: int = 0, retrieval_dim: int = 4):
    vocab = build_vocabulary([" ".join(TOY_WORDS)])
    assert vocab.size == 20
    backbones = init_backbones(toy_vision_cfg(), toy_decoder_cfg(vocab.size), seed=seed)
    bridge = init_bridge(backbones, retrieval_dim=retrieval_dim, seed=seed)
    return backbones, bridge, vocab


def make_toy_batch(vocab, seed: int = 0, n: int = 2, context_len: int = 24):
    rng = np.random.default_rng(seed)
    records = [
        ImageCaptionRecord(
            image_uri=f"img_{i}.png",
            split="train",
            captions=("water scene with one red objects", "a forest with two blue objects"),
        )
        for i in range(n)
    ]
    vectors = rng.standard_normal((n, 8)).astype(np.float32)
    return build_interleaved_batch(records, vocab, vectors, rng, context_len=context_len)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance criteria verdicts after the test report."""
    module = sys.modules.get("test_acceptance")
    verdicts = getattr(module, "VERDICTS", None) if module else None
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for line in verdicts:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_model():
    return make_toy_model()


@pytest.fixture(scope="session")
def ds8(tmp_path_factory):
    """8-image synthetic dataset (6 train / 1 val / 1 test)."""
    out = tmp_path_factory.mktemp("ds8")
    return generate_synthetic_dataset(8, 3, out)


@pytest.fixture(scope="session")
def small_model_dir(tmp_path_factory, ds8):
    """A saved checkpoint + retrieval index over ds8 at small dims, shared by
    the CLI and service tests (quality does not matter there)."""
    from capret.retrieval import build_index, save_index
    from capret.training import TrainConfig, save_checkpoint, train_bridge

    out = tmp_path_factory.mktemp("model")
    vocab = build_vocabulary(ds8)
    vision_cfg = VisionEncoderConfig(patch_size=56, embed_dim=16, n_layers=1, n_heads=2)
    decoder_cfg = DecoderConfig(
        vocab_size=vocab.size, embed_dim=32, hidden_dim=32, n_layers=1, n_heads=2, context_len=32
    )
    backbones = init_backbones(vision_cfg, decoder_cfg, seed=5)
    bridge = init_bridge(backbones, retrieval_dim=8, seed=5)
    cfg = TrainConfig(batch_size=4, max_steps=3, warmup_steps=0, seed=5, eval_every=10, log_every=10)
    bridge, _ = train_bridge(backbones, bridge, ds8, cfg, vocab=vocab)
    ckpt = out / "ckpt"
    save_checkpoint(backbones, bridge, None, ckpt, vocab=vocab, cfg=cfg)
    index = build_index(backbones, bridge, ds8, "train")
    save_index(index, out / "index")
    return {"root": out, "checkpoint": ckpt, "index": out / "index", "manifest": ds8, "vocab": vocab}
