"""Frozen dual-encoder backbone with injectable prompt tokens.

The synthetic backend is a small randomly initialized ViT-style image
tower plus a matching text tower. All weights are a pure function of the
config seed and are frozen at construction; gradients still flow
*through* the towers to any prompt tokens fed in.

A real pretrained model can be registered as an adapter via
``register_backend``; nothing in the package requires one.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError, PreconditionError

SLOT_ID = -1  # sentinel marking where learned text prompts are spliced
BOS_ID = 0


@dataclass
class BackboneConfig:
    embed_dim: int = 64
    text_dim: int = 32
    proj_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    num_patches: int = 16
    patch_dim: int = 32
    vocab_size: int = 512
    context_length: int = 64
    use_positional: bool = True
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if min(self.embed_dim, self.text_dim, self.proj_dim) <= 0:
            raise ConfigError("embed_dim, text_dim and proj_dim must be positive")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.num_patches < 1 or self.patch_dim < 1:
            raise ConfigError("num_patches and patch_dim must be positive")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


@dataclass
class PromptedSequence:
    """Ordered image-tower input: [cls, prompts..., patches...].

    ``prompts`` may have zero rows (plain unprompted forward). Tensors are
    either unbatched (cls: (d,), prompts: (n, d), patches: (p, d)) or
    batched with a leading batch axis on every field.
    """

    cls: torch.Tensor
    prompts: torch.Tensor
    patches: torch.Tensor

    @property
    def batched(self) -> bool:
        return self.cls.dim() == 2

    def tokens(self) -> torch.Tensor:
        cls = self.cls.unsqueeze(-2)
        return torch.cat([cls, self.prompts, self.patches], dim=-2)


def tokenize(text: str, vocab_size: int) -> list[int]:
    """Whitespace tokenizer stub: words hash deterministically into the vocab."""
    ids = []
    for word in text.split():
        if word == "<P>":
            ids.append(SLOT_ID)
        else:
            ids.append(1 + zlib.crc32(word.lower().encode()) % (vocab_size - 1))
    return ids


def _seed_parameters(module: nn.Module, seed: int) -> None:
    g = torch.Generator().manual_seed(seed)
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if p.dim() >= 2:
                std = 0.7 / (p.shape[-1] ** 0.5)
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * std)
            elif "pos_embed" in name or "bias" in name or "token" in name:
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * 0.1)
            # LayerNorm weights keep their (1, 0) default


class TransformerLayer(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, width: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(width)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        attn_out, _ = self.attn(h, h, h, need_weights=False)
        x = x + attn_out
        x = x + self.mlp(self.ln2(x))
        return x


class SyntheticBackbone(nn.Module):
    """Deterministic frozen backbone for desk-scale runs."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        c = config
        self.patch_proj = nn.Linear(c.patch_dim, c.embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(c.num_patches, c.embed_dim))
        self.cls_init = nn.Parameter(torch.zeros(c.embed_dim))
        self.layers = nn.ModuleList(
            TransformerLayer(c.embed_dim, c.num_heads) for _ in range(c.num_layers)
        )
        self.ln_final = nn.LayerNorm(c.embed_dim)
        self.head = nn.Linear(c.embed_dim, c.proj_dim, bias=False)

        self.token_embed = nn.Embedding(c.vocab_size, c.text_dim)
        self.text_pos_embed = nn.Parameter(torch.zeros(c.context_length, c.text_dim))
        text_heads = max(1, c.text_dim // 16)
        self.text_layers = nn.ModuleList(
            TransformerLayer(c.text_dim, text_heads) for _ in range(c.num_layers)
        )
        self.text_ln_final = nn.LayerNorm(c.text_dim)
        self.text_head = nn.Linear(c.text_dim, c.proj_dim, bias=False)

        _seed_parameters(self, c.seed)
        if not c.use_positional:
            with torch.no_grad():
                self.pos_embed.zero_()
        self.to(c.torch_dtype)
        for p in self.parameters():
            p.requires_grad_(False)

    # -- image tower ----------------------------------------------------

    def embed_patches(self, image: torch.Tensor) -> torch.Tensor:
        """Project a (num_patches, patch_dim) feature grid into patch tokens."""
        c = self.config
        if image.shape[-2:] != (c.num_patches, c.patch_dim):
            raise PreconditionError(
                f"expected patch grid (..., {c.num_patches}, {c.patch_dim}), "
                f"got {tuple(image.shape)}"
            )
        image = image.to(self.config.torch_dtype)
        return self.patch_proj(image) + self.pos_embed

    def forward_image(self, seq: PromptedSequence) -> torch.Tensor:
        """Run the frozen tower over [cls, prompts, patches], project the cls slot."""
        c = self.config
        x = seq.tokens()
        if x.shape[-1] != c.embed_dim:
            raise PreconditionError(
                f"token width {x.shape[-1]} does not match embed_dim {c.embed_dim}"
            )
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after image layer {i}")
        out = self.head(self.ln_final(x[:, 0]))
        return out.squeeze(0) if squeeze else out

    # -- text tower -----------------------------------------------------

    def encode_text(self, caption_tokens, learned_prompt_slots: torch.Tensor | None = None) -> torch.Tensor:
        """Encode token ids (with an optional <P> slot) into the joint space.

        ``learned_prompt_slots`` (n, text_dim) is spliced at the SLOT_ID
        position before positional encoding.
        """
        c = self.config
        if learned_prompt_slots is not None and learned_prompt_slots.shape[-1] != c.text_dim:
            raise PreconditionError(
                f"text prompt width {learned_prompt_slots.shape[-1]} != text_dim {c.text_dim}"
            )
        parts = [self.token_embed(torch.tensor([BOS_ID]))]
        for tid in caption_tokens:
            if tid == SLOT_ID:
                if learned_prompt_slots is None:
                    raise PreconditionError("caption has a prompt slot but no prompts given")
                parts.append(learned_prompt_slots.to(c.torch_dtype))
            else:
                parts.append(self.token_embed(torch.tensor([int(tid)])))
        x = torch.cat(parts, dim=0)
        if x.shape[0] > c.context_length:
            raise PreconditionError(
                f"caption length {x.shape[0]} exceeds context length {c.context_length}"
            )
        x = x + self.text_pos_embed[: x.shape[0]]
        x = x.unsqueeze(0)
        for i, layer in enumerate(self.text_layers):
            x = layer(x)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after text layer {i}")
        return self.text_head(self.text_ln_final(x[0, 0]))


_BACKENDS = {"synthetic": SyntheticBackbone}


def register_backend(name: str, factory) -> None:
    """Adapter slot for real pretrained backbones."""
    _BACKENDS[name] = factory


def build_backbone(config: BackboneConfig, backend: str = "synthetic"):
    if backend not in _BACKENDS:
        raise ConfigError(f"unknown backbone backend {backend!r}")
    return _BACKENDS[backend](config)
