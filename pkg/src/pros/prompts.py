"""Learnable prompt parameters and mask construction/application.

Holds the per-domain and per-class prompt units, the text prompts, the
two simulator templates and the trainable cls token. Masks select units
by discarding tokens outright (no zeroing), so discarded units neither
contribute tokens nor receive gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .backbone import PromptedSequence
from .errors import PreconditionError

IRRELEVANCE = "irrelevance"
RELEVANCE = "relevance"


@dataclass
class MaskSpec:
    domain_mask: np.ndarray  # binary, length K
    semantic_mask: np.ndarray  # binary, length |C_train|
    mode: str

    def __post_init__(self):
        if self.mode not in (IRRELEVANCE, RELEVANCE):
            raise PreconditionError(f"unknown mask mode {self.mode!r}")


def build_mask(domain_idx: int, class_idx: int, num_domains: int, num_classes: int,
               mode: str = IRRELEVANCE) -> MaskSpec:
    """One-hot at (domain_idx, class_idx) for irrelevance, its complement for relevance."""
    if not 0 <= domain_idx < num_domains:
        raise PreconditionError(f"domain index {domain_idx} out of range [0, {num_domains})")
    if not 0 <= class_idx < num_classes:
        raise PreconditionError(f"class index {class_idx} out of range [0, {num_classes})")
    dm = np.zeros(num_domains, dtype=np.int8)
    sm = np.zeros(num_classes, dtype=np.int8)
    dm[domain_idx] = 1
    sm[class_idx] = 1
    if mode == RELEVANCE:
        dm, sm = 1 - dm, 1 - sm
    return MaskSpec(dm, sm, mode)


class PromptBank(nn.Module):
    """All trainable prompt parameters.

    domain_units: (K, embed_dim)          one unit per source domain
    semantic_units: (|C_train|, embed_dim) one unit per training class
    text_prompt: (text_prompt_len, text_dim)
    domain_template / semantic_template: (embed_dim,) simulator query templates
    cls_token: (embed_dim,) trainable copy of the backbone cls embedding
    """

    def __init__(self, num_domains: int, num_classes: int, embed_dim: int, text_dim: int,
                 text_prompt_len: int = 16, cls_init: torch.Tensor | None = None,
                 seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        if num_domains < 2 or num_classes < 2:
            raise PreconditionError("need at least 2 source domains and 2 training classes")
        if text_prompt_len < 1:
            raise PreconditionError("text_prompt_len must be >= 1")
        g = torch.Generator().manual_seed(seed)

        def init(*shape):
            t = torch.randn(shape, generator=g, dtype=torch.float64) * 0.02
            return nn.Parameter(t.clamp(-0.04, 0.04).to(dtype))

        self.num_domains = num_domains
        self.num_classes = num_classes
        self.domain_units = init(num_domains, embed_dim)
        self.semantic_units = init(num_classes, embed_dim)
        self.text_prompt = init(text_prompt_len, text_dim)
        self.domain_template = init(embed_dim)
        self.semantic_template = init(embed_dim)
        if cls_init is not None:
            self.cls_token = nn.Parameter(cls_init.detach().clone().to(dtype))
        else:
            self.cls_token = init(embed_dim)

    def unit_parameters(self):
        """Stage-1 trainables: units, text prompt, cls."""
        return [self.domain_units, self.semantic_units, self.text_prompt, self.cls_token]

    def template_parameters(self):
        """Stage-2 trainables owned by the bank."""
        return [self.domain_template, self.semantic_template]


def apply_mask(bank: PromptBank, mask: MaskSpec) -> tuple[torch.Tensor, torch.Tensor]:
    """Select surviving units in original index order; discarded rows get no gradient."""
    if len(mask.domain_mask) != bank.num_domains:
        raise PreconditionError(
            f"domain mask length {len(mask.domain_mask)} != K {bank.num_domains}")
    if len(mask.semantic_mask) != bank.num_classes:
        raise PreconditionError(
            f"semantic mask length {len(mask.semantic_mask)} != |C| {bank.num_classes}")
    d_idx = torch.from_numpy(np.flatnonzero(mask.domain_mask))
    s_idx = torch.from_numpy(np.flatnonzero(mask.semantic_mask))
    return bank.domain_units[d_idx], bank.semantic_units[s_idx]


def assemble_pul_input(cls_token: torch.Tensor, bank: PromptBank, mask: MaskSpec,
                       patches: torch.Tensor) -> PromptedSequence:
    """Stage-1 prompted input [cls, own dp, own sp, patches]."""
    if mask.mode != IRRELEVANCE:
        raise PreconditionError("stage-1 input requires an irrelevance mask")
    dp, sp = apply_mask(bank, mask)
    return PromptedSequence(cls=cls_token, prompts=torch.cat([dp, sp], dim=0), patches=patches)
