"""Frozen backbone networks.

Three small transformers with fixed interfaces: a vision encoder producing a
single image vector, a text encoder used only for stage-1 contrastive
fine-tuning, and a causal decoder exposing per-position logits and hidden
states.  They are deliberately tiny stand-ins for large pretrained models;
the surrounding code only touches the interfaces, so heavier weights could be
slotted in without changes elsewhere.

All parameters are created with ``requires_grad=False``.  Training stages
that legitimately update a backbone (stage-1 fine-tuning, optional decoder
language-model warmup) flip the flag temporarily and re-freeze afterwards.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from capret.data.images import TARGET_SIZE


class ConfigError(ValueError):
    """Raised for invalid backbone configurations."""


@dataclass(frozen=True)
class VisionEncoderConfig:
    patch_size: int = 32
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4

    def __post_init__(self):
        if TARGET_SIZE % self.patch_size != 0:
            raise ConfigError(f"patch_size {self.patch_size} must divide {TARGET_SIZE}")
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} must be divisible by n_heads {self.n_heads}")


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    embed_dim: int = 128  # input embedding width
    hidden_dim: int = 128  # width at the output of the stack
    n_layers: int = 2
    n_heads: int = 4
    context_len: int = 64

    def __post_init__(self):
        # The stack keeps one width throughout; the two names exist because
        # the input-projection and retrieval-projection shapes are specified
        # against them separately.
        if self.embed_dim != self.hidden_dim:
            raise ConfigError("embed_dim and hidden_dim must match")
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} must be divisible by n_heads {self.n_heads}")
        if self.context_len < 1:
            raise ConfigError("context_len must be >= 1")


class Block(nn.Module):
    """Pre-norm transformer block (attention + 2-layer MLP)."""

    def __init__(self, dim: int, n_heads: int, causal: bool):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.causal = causal
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 2 * dim)
        self.fc2 = nn.Linear(2 * dim, dim)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        qkv = self.qkv(x).view(b, t, 3, self.n_heads, self.head_dim)
        q, k, v = qkv.unbind(dim=2)  # each [b, t, heads, head_dim]
        q = q.transpose(1, 2)
        k = k.transpose(1, 2)
        v = v.transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / self.head_dim**0.5
        if self.causal:
            mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1)
            scores = scores.masked_fill(mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.norm1(x))
        x = x + self.fc2(torch.nn.functional.gelu(self.fc1(self.norm2(x))))
        return x


def _pad_time(x: torch.Tensor, length: int) -> torch.Tensor:
    """Zero-pad [B, T, D] to [B, length, D].

    Causal stacks always run at the full context length: CPU matmul kernels
    pick accumulation orders by shape, so per-row results are only bitwise
    reproducible when every call uses the same sequence length.  Padded rows
    sit behind the causal mask (their softmax weight is exactly 0.0 for real
    rows) and are sliced off before returning.
    """
    b, t, d = x.shape
    if t == length:
        return x
    return torch.cat([x, x.new_zeros(b, length - t, d)], dim=1)


class VisionEncoder(nn.Module):
    """Patch-embedding transformer pooled through a learned CLS token."""

    def __init__(self, cfg: VisionEncoderConfig):
        super().__init__()
        self.cfg = cfg
        n_patches = (TARGET_SIZE // cfg.patch_size) ** 2
        self.patch_embed = nn.Linear(3 * cfg.patch_size**2, cfg.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(cfg.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(n_patches + 1, cfg.embed_dim))
        self.blocks = nn.ModuleList(Block(cfg.embed_dim, cfg.n_heads, causal=False) for _ in range(cfg.n_layers))
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """images: [B, 224, 224, 3] floats in [0,1] -> [B, embed_dim]."""
        b, h, w, c = images.shape
        p = self.cfg.patch_size
        if (h, w, c) != (TARGET_SIZE, TARGET_SIZE, 3):
            raise ValueError(f"expected [B, {TARGET_SIZE}, {TARGET_SIZE}, 3] images, got {tuple(images.shape)}")
        patches = images.view(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5).reshape(b, -1, 3 * p * p)
        x = self.patch_embed(patches)
        cls = self.cls_token.to(x.dtype).expand(b, 1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed.to(x.dtype)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)[:, 0, :]


class TextEncoder(nn.Module):
    """Causal text transformer for stage-1 contrastive training; a caption is
    represented by the hidden state at its EOS position."""

    def __init__(self, vocab_size: int, embed_dim: int, n_layers: int, n_heads: int, context_len: int):
        super().__init__()
        self.context_len = context_len
        self.token_embed = nn.Embedding(vocab_size, embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(context_len, embed_dim))
        self.blocks = nn.ModuleList(Block(embed_dim, n_heads, causal=True) for _ in range(n_layers))
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """ids: [B, T] -> hidden states [B, T, embed_dim]."""
        b, t = ids.shape
        if t > self.context_len:
            raise ValueError(f"sequence length {t} exceeds context {self.context_len}")
        x = _pad_time(self.token_embed(ids), self.context_len) + self.pos_embed.to(self.token_embed.weight.dtype)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)[:, :t]


class CausalDecoder(nn.Module):
    """Causal transformer over embedded sequences with a logit head.

    ``forward_embeddings`` takes already-assembled input embeddings so that
    visual prefixes (and the externally-owned retrieval-token embedding) can
    be spliced in anywhere.
    """

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.context_len, cfg.embed_dim))
        self.blocks = nn.ModuleList(Block(cfg.embed_dim, cfg.n_heads, causal=True) for _ in range(cfg.n_layers))
        self.norm = nn.LayerNorm(cfg.hidden_dim)
        self.head = nn.Linear(cfg.hidden_dim, cfg.vocab_size, bias=False)

    def forward_embeddings(self, embeddings: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """embeddings: [B, T, D] -> (logits [B, T, V], hidden [B, T, H])."""
        b, t, d = embeddings.shape
        if t > self.cfg.context_len:
            raise ValueError(f"sequence length {t} exceeds context {self.cfg.context_len}")
        x = _pad_time(embeddings, self.cfg.context_len) + self.pos_embed.to(embeddings.dtype)
        for blk in self.blocks:
            x = blk(x)
        hidden = self.norm(x)
        return self.head(hidden)[:, :t], hidden[:, :t]

    def embed_tokens(self, ids: torch.Tensor, ret_embedding: torch.Tensor | None = None) -> torch.Tensor:
        """Embed token ids, optionally substituting the bridge-owned
        retrieval-token row (the table's own last row stays frozen)."""
        emb = self.token_embed(ids)
        if ret_embedding is not None:
            mask = (ids == self.cfg.vocab_size - 1).unsqueeze(-1)
            emb = torch.where(mask, ret_embedding.to(emb.dtype), emb)
        return emb


@dataclass
class BackboneBundle:
    """The three frozen networks plus the configuration that built them."""

    vision: VisionEncoder
    text: TextEncoder
    decoder: CausalDecoder
    vision_cfg: VisionEncoderConfig
    decoder_cfg: DecoderConfig
    seed: int

    def modules(self) -> dict[str, nn.Module]:
        return {"vision": self.vision, "text": self.text, "decoder": self.decoder}

    def named_tensors(self):
        for prefix, module in self.modules().items():
            for name, p in module.named_parameters():
                yield f"{prefix}.{name}", p

    def tensor_digests(self) -> dict[str, str]:
        """SHA-256 per parameter tensor; the freeze contract asserts these
        never change during bridge training."""
        return {name: _digest(p) for name, p in self.named_tensors()}

    def assert_frozen(self) -> None:
        for name, p in self.named_tensors():
            if p.requires_grad:
                raise RuntimeError(f"backbone tensor {name} is not frozen")

    def to_double(self) -> "BackboneBundle":
        """A float64 copy (used by the finite-difference gradient check)."""
        import copy

        other = BackboneBundle(
            vision=copy.deepcopy(self.vision).double(),
            text=copy.deepcopy(self.text).double(),
            decoder=copy.deepcopy(self.decoder).double(),
            vision_cfg=self.vision_cfg,
            decoder_cfg=self.decoder_cfg,
            seed=self.seed,
        )
        for m in other.modules().values():
            freeze(m)
        return other


def _digest(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def freeze(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)


def _init_uniform(module: nn.Module, gen: torch.Generator) -> None:
    """Scaled-uniform init: LayerNorms start as identity, biases at zero, and
    every other tensor draws U(+-1/sqrt(last dim)).  For linear weights the
    last dim is the fan-in, so this is the usual 1/sqrt(fan_in) scheme."""
    for name, p in module.named_parameters():
        if "norm" in name:
            p.data.fill_(1.0 if name.endswith("weight") else 0.0)
        elif name.endswith("bias"):
            p.data.zero_()
        else:
            bound = p.shape[-1] ** -0.5
            p.data.uniform_(-bound, bound, generator=gen)


def init_backbones(vision_cfg: VisionEncoderConfig, decoder_cfg: DecoderConfig, seed: int) -> BackboneBundle:
    """Deterministically initialize the three frozen networks from one seed."""
    gen = torch.Generator().manual_seed(seed)
    vision = VisionEncoder(vision_cfg)
    text = TextEncoder(
        vocab_size=decoder_cfg.vocab_size,
        embed_dim=vision_cfg.embed_dim,
        n_layers=vision_cfg.n_layers,
        n_heads=vision_cfg.n_heads,
        context_len=decoder_cfg.context_len,
    )
    decoder = CausalDecoder(decoder_cfg)
    for module in (vision, text, decoder):
        _init_uniform(module, gen)
        freeze(module)
    return BackboneBundle(
        vision=vision,
        text=text,
        decoder=decoder,
        vision_cfg=vision_cfg,
        decoder_cfg=decoder_cfg,
        seed=seed,
    )


def encode_image(bundle: BackboneBundle, image: np.ndarray) -> np.ndarray:
    """One preprocessed image [224,224,3] -> vision embedding [m]."""
    if image.shape != (TARGET_SIZE, TARGET_SIZE, 3):
        raise ValueError(f"expected ({TARGET_SIZE},{TARGET_SIZE},3) image, got {image.shape}")
    with torch.no_grad():
        v = bundle.vision(torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).unsqueeze(0))
    return v[0].numpy()


def encode_caption(bundle: BackboneBundle, token_ids: list[int]) -> np.ndarray:
    """Stage-1 text embedding: hidden state at the final (EOS) position."""
    with torch.no_grad():
        hidden = bundle.text(torch.tensor([token_ids], dtype=torch.long))
    return hidden[0, len(token_ids) - 1].numpy()


def decoder_forward(
    bundle: BackboneBundle,
    prefix_embeddings: np.ndarray | None,
    token_ids: list[int],
    ret_embedding: torch.Tensor | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Run the decoder on [prefix embeddings..., token embeddings...].

    Returns (logits [T, vocab], hidden [T, hidden_dim]) over all positions,
    prefix included.
    """
    parts = []
    if prefix_embeddings is not None and len(prefix_embeddings) > 0:
        pre = torch.as_tensor(np.asarray(prefix_embeddings, dtype=np.float32))
        if pre.ndim == 1:
            pre = pre.unsqueeze(0)
        parts.append(pre)
    if token_ids:
        parts.append(bundle.decoder.embed_tokens(torch.tensor(token_ids, dtype=torch.long), ret_embedding))
    if not parts:
        raise ValueError("empty input: need a prefix or at least one token")
    emb = torch.cat(parts, dim=0).unsqueeze(0)
    with torch.no_grad():
        logits, hidden = bundle.decoder.forward_embeddings(emb)
    return logits[0].numpy(), hidden[0].numpy()


def hidden_at_ret(
    bundle: BackboneBundle,
    prefix_embeddings: np.ndarray | None,
    token_ids: list[int],
    ret_embedding: torch.Tensor | None = None,
) -> np.ndarray:
    """Decoder hidden state at the final position, which must hold the
    retrieval token (always the largest vocabulary id)."""
    ret_id = bundle.decoder_cfg.vocab_size - 1
    if not token_ids or token_ids[-1] != ret_id:
        raise ValueError(f"sequence must end with the retrieval token id {ret_id}")
    _, hidden = decoder_forward(bundle, prefix_embeddings, token_ids, ret_embedding)
    return hidden[-1]
