"""Content-aware prompt simulator.

A small trainable transformer that reads [domain template, semantic
template, surviving domain units, surviving semantic units, patch tokens]
and emits one dynamic domain prompt and one dynamic semantic prompt
(lengths configurable), read back at the template positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import PromptedSequence, TransformerLayer
from .errors import ConfigError, NumericError, PreconditionError


@dataclass
class CaPSConfig:
    num_layers: int = 2
    num_heads: int = 8
    width: int = 64
    n_d: int = 1
    n_s: int = 1
    mlp_ratio: float = 4.0
    max_seq_len: int = 256
    input_dim: int | None = None  # set when backbone tokens differ from width
    seed: int = 1

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError("CaPS num_layers must be >= 1")
        if self.width % self.num_heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.num_heads}")
        if self.n_d < 1 or self.n_s < 1:
            raise ConfigError("n_d and n_s must be >= 1")


class PromptSimulator(nn.Module):
    def __init__(self, config: CaPSConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        c = config
        g = torch.Generator().manual_seed(c.seed)

        def randn(*shape, std):
            return torch.randn(shape, generator=g, dtype=torch.float64).to(dtype) * std

        self.pos_embed = nn.Parameter(randn(c.max_seq_len, c.width, std=0.02))
        self.blocks = nn.ModuleList(
            TransformerLayer(c.width, c.num_heads, c.mlp_ratio) for _ in range(c.num_layers)
        )
        self.input_proj = None
        if c.input_dim is not None and c.input_dim != c.width:
            self.input_proj = nn.Linear(c.input_dim, c.width)
        for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            if name == "pos_embed":
                continue
            with torch.no_grad():
                if p.dim() >= 2:
                    p.copy_(randn(*p.shape, std=0.7 / (p.shape[-1] ** 0.5)))
                elif "bias" in name:
                    # seeded; torch's default bias init reads the global rng
                    p.copy_(randn(*p.shape, std=0.02))
        self.to(dtype)

    def _project(self, tokens: torch.Tensor) -> torch.Tensor:
        if self.input_proj is not None and tokens.shape[-1] != self.config.width:
            return self.input_proj(tokens)
        if tokens.shape[-1] != self.config.width:
            raise PreconditionError(
                f"token width {tokens.shape[-1]} does not match CaPS width {self.config.width}"
            )
        return tokens

    def simulate(self, domain_template: torch.Tensor, semantic_template: torch.Tensor,
                 dp: torch.Tensor, sp: torch.Tensor, patches: torch.Tensor,
                 token_rows: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (P_d, P_s) read at the template positions.

        Accepts unbatched inputs (dp: (kd, w), patches: (p, w)) or batched
        ones with a leading batch axis on dp, sp and patches.

        ``token_rows`` gives each token's canonical positional row (the row
        it would occupy in the full unmasked layout), so a masked training
        sequence shares positional vectors with full-bank inference. The
        default ``arange`` is correct whenever the unit banks are complete.
        """
        c = self.config
        batched = patches.dim() == 3
        if not batched:
            dp, sp, patches = dp.unsqueeze(0), sp.unsqueeze(0), patches.unsqueeze(0)
            if token_rows is not None and token_rows.dim() == 1:
                token_rows = token_rows.unsqueeze(0)
        b = patches.shape[0]
        dt = domain_template.expand(b, c.n_d, -1)
        st = semantic_template.expand(b, c.n_s, -1)
        if dp.dim() == 2:
            dp = dp.expand(b, -1, -1)
        if sp.dim() == 2:
            sp = sp.expand(b, -1, -1)
        x = torch.cat([dt, st, self._project(dp), self._project(sp),
                       self._project(patches)], dim=1)
        if token_rows is None:
            token_rows = torch.arange(x.shape[1])
        if int(token_rows.max()) >= c.max_seq_len:
            raise PreconditionError(
                f"CaPS positional row {int(token_rows.max())} exceeds max_seq_len "
                f"{c.max_seq_len}")
        if token_rows.dim() == 1:
            token_rows = token_rows.expand(b, -1)
        if token_rows.shape != x.shape[:2]:
            raise PreconditionError(
                f"token_rows shape {tuple(token_rows.shape)} does not match "
                f"sequence {tuple(x.shape[:2])}")
        x = x + self.pos_embed[token_rows]
        for block in self.blocks:
            x = block(x)
        if not torch.isfinite(x).all():
            raise NumericError("non-finite CaPS output")
        p_d = x[:, : c.n_d]
        p_s = x[:, c.n_d : c.n_d + c.n_s]
        if not batched:
            p_d, p_s = p_d.squeeze(0), p_s.squeeze(0)
        return p_d, p_s


def assemble_inference_input(cls_token: torch.Tensor, p_d: torch.Tensor, p_s: torch.Tensor,
                             patches: torch.Tensor) -> PromptedSequence:
    """Image-tower input [cls, P_d, P_s, patches] used in stage 2 and at retrieval."""
    width = patches.shape[-1]
    if p_d.shape[-1] != width or p_s.shape[-1] != width:
        raise PreconditionError(
            f"dynamic prompt width ({p_d.shape[-1]}, {p_s.shape[-1]}) != token width {width}")
    return PromptedSequence(cls=cls_token, prompts=torch.cat([p_d, p_s], dim=-2),
                            patches=patches)
