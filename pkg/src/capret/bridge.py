"""The trainable bridge between the frozen backbones.

Exactly five tensors carry gradients anywhere in the system: the visual
prefix projection (image embedding -> decoder input space), the two
retrieval projections (image embedding / retrieval-token hidden state ->
shared retrieval space), the input embedding row of the retrieval token,
and the log of the contrastive temperature.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch

from capret.backbones import BackboneBundle, DecoderConfig

INITIAL_TEMPERATURE = 0.07  # widespread contrastive-learning default


@dataclass
class BridgeParameters:
    prefix_proj: torch.Tensor  # [m, D]
    image_proj: torch.Tensor  # [m, q]
    text_proj: torch.Tensor  # [H, q]
    ret_embedding: torch.Tensor  # [D]
    log_temperature: torch.Tensor  # scalar; temperature = exp(log_temperature) > 0

    def __post_init__(self):
        m, d = self.prefix_proj.shape
        q = self.image_proj.shape[1]
        if self.image_proj.shape[0] != m:
            raise ValueError("image_proj rows must match the vision embedding width")
        if self.text_proj.shape[1] != q:
            raise ValueError("text_proj and image_proj must share the retrieval width")
        if self.ret_embedding.shape != (d,):
            raise ValueError("ret_embedding must live in the decoder input space")
        if q < 1:
            raise ValueError("retrieval width q must be >= 1")
        if not q < d:
            raise ValueError(f"retrieval width q={q} must be smaller than the decoder width {d}")

    @property
    def retrieval_dim(self) -> int:
        return self.image_proj.shape[1]

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp()

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {
            "prefix_proj": self.prefix_proj,
            "image_proj": self.image_proj,
            "text_proj": self.text_proj,
            "ret_embedding": self.ret_embedding,
            "log_temperature": self.log_temperature,
        }

    def tensor_digests(self) -> dict[str, str]:
        return {
            name: hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()
            for name, t in self.named_tensors().items()
        }

    def requires_grad_(self, flag: bool = True) -> "BridgeParameters":
        for t in self.named_tensors().values():
            t.requires_grad_(flag)
        return self

    def zero_grad(self) -> None:
        for t in self.named_tensors().values():
            t.grad = None

    def to_double(self) -> "BridgeParameters":
        out = BridgeParameters(
            prefix_proj=self.prefix_proj.detach().double(),
            image_proj=self.image_proj.detach().double(),
            text_proj=self.text_proj.detach().double(),
            ret_embedding=self.ret_embedding.detach().double(),
            log_temperature=self.log_temperature.detach().double(),
        )
        return out.requires_grad_(True)


def init_bridge(backbones: BackboneBundle, retrieval_dim: int, seed: int) -> BridgeParameters:
    """Seeded init: projections U(+-1/sqrt(fan_in)); the retrieval-token
    embedding starts at the mean decoder embedding row plus small noise."""
    m = backbones.vision_cfg.embed_dim
    d = backbones.decoder_cfg.embed_dim
    h = backbones.decoder_cfg.hidden_dim
    gen = torch.Generator().manual_seed(seed)

    def uniform(rows, cols, fan_in):
        t = torch.empty(rows, cols)
        bound = fan_in**-0.5
        t.uniform_(-bound, bound, generator=gen)
        return t

    ret = backbones.decoder.token_embed.weight.detach().mean(dim=0).clone()
    ret += torch.empty(d).uniform_(-0.01, 0.01, generator=gen)

    bridge = BridgeParameters(
        prefix_proj=uniform(m, d, m),
        image_proj=uniform(m, retrieval_dim, m),
        text_proj=uniform(h, retrieval_dim, h),
        ret_embedding=ret,
        log_temperature=torch.tensor(math.log(INITIAL_TEMPERATURE)),
    )
    return bridge.requires_grad_(True)


def _as_tensor(v, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(v)) if not isinstance(v, torch.Tensor) else v
    return t.to(like.dtype)


def project_visual_prefix(bridge: BridgeParameters, v) -> torch.Tensor:
    """Image embedding [m] (or batch [B, m]) -> decoder-input prefix [D].

    One prefix position per image; the decoder treats it exactly like a
    token embedding.
    """
    t = _as_tensor(v, bridge.prefix_proj)
    if t.shape[-1] != bridge.prefix_proj.shape[0]:
        raise ValueError(f"expected last dim {bridge.prefix_proj.shape[0]}, got {t.shape[-1]}")
    return t @ bridge.prefix_proj


def project_image_for_retrieval(bridge: BridgeParameters, v) -> torch.Tensor:
    """Image embedding [m] (or batch) -> retrieval-space vector [q]."""
    t = _as_tensor(v, bridge.image_proj)
    if t.shape[-1] != bridge.image_proj.shape[0]:
        raise ValueError(f"expected last dim {bridge.image_proj.shape[0]}, got {t.shape[-1]}")
    return t @ bridge.image_proj


def project_ret_for_retrieval(bridge: BridgeParameters, h) -> torch.Tensor:
    """Retrieval-token hidden state [H] (or batch) -> retrieval-space vector [q]."""
    t = _as_tensor(h, bridge.text_proj)
    if t.shape[-1] != bridge.text_proj.shape[0]:
        raise ValueError(f"expected last dim {bridge.text_proj.shape[0]}, got {t.shape[-1]}")
    return t @ bridge.text_proj


def trainable_parameters(
    bridge: BridgeParameters, decoder_cfg: DecoderConfig | None = None
) -> dict[str, torch.Tensor]:
    """The closed set of tensors that may receive gradient updates."""
    params = bridge.named_tensors()
    if decoder_cfg is not None and bridge.ret_embedding.shape[0] != decoder_cfg.embed_dim:
        raise ValueError("bridge does not match the decoder configuration")
    return params


def trainable_count(bridge: BridgeParameters) -> int:
    return sum(t.numel() for t in bridge.named_tensors().values())
