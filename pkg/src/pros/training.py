"""Two-stage optimization: unit learning, then simulator learning.

Stage 1 (PUL) trains the prompt units, text prompts and cls token with
per-sample own-unit selection. Stage 2 (CSL) freezes those and trains the
simulator plus its two templates under hidden-own-unit masking, aligning
against a cached caption bank. Both stages share the softmax
cross-entropy objective over cosine similarities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F

from . import retrieval
from .backbone import BackboneConfig, PromptedSequence, build_backbone, tokenize
from .caps import CaPSConfig, PromptSimulator, assemble_inference_input
from .errors import ConfigError, PreconditionError
from .prompts import PromptBank

CHECKPOINT_VERSION = 1
STAGES = ("PUL", "CSL")
ABLATION_FLAGS = ("no_sp", "no_dp", "no_mask", "no_caps", "no_cls_train")


@dataclass
class TrainConfig:
    stage: str = "PUL"
    epochs: int = 10
    early_stop_patience: int = 2
    batch_size: int = 50
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    temperature: float = 0.01
    seed: int = 0
    val_map_k: int = 200

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.lr_schedule != "cosine":
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")


class ProsModel:
    """Bundles the frozen backbone with all trainable prompt state."""

    def __init__(self, backbone, bank: PromptBank, simulator: PromptSimulator,
                 domains: list[str], classes: list[str], tau: float = 0.01,
                 ablation: set[str] | None = None):
        self.backbone = backbone
        self.bank = bank
        self.simulator = simulator
        self.domains = list(domains)
        self.classes = list(classes)
        self.tau = tau
        self.ablation = set(ablation or ())
        bad = self.ablation - set(ABLATION_FLAGS)
        if bad:
            raise ConfigError(f"unknown ablation flags {sorted(bad)}")
        self.stage1_complete = False

    def domain_index(self, name: str) -> int:
        try:
            return self.domains.index(name)
        except ValueError:
            raise PreconditionError(f"domain {name!r} not in training domains {self.domains}")

    def class_index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise PreconditionError(f"class {name!r} not in training classes")


def build_model(backbone_config: BackboneConfig, caps_config: CaPSConfig,
                domains, classes, text_prompt_len: int = 16, prompt_seed: int = 0,
                tau: float = 0.01, ablation=None, backend: str = "synthetic") -> ProsModel:
    backbone = build_backbone(backbone_config, backend)
    bank = PromptBank(num_domains=len(domains), num_classes=len(classes),
                      embed_dim=backbone_config.embed_dim, text_dim=backbone_config.text_dim,
                      text_prompt_len=text_prompt_len, cls_init=backbone.cls_init,
                      seed=prompt_seed, dtype=backbone_config.torch_dtype)
    simulator = PromptSimulator(caps_config, dtype=backbone_config.torch_dtype)
    return ProsModel(backbone, bank, simulator, domains, classes, tau=tau, ablation=ablation)


# -- objective ---------------------------------------------------------


def caption_template(name: str) -> str:
    return f"a photo of {name} from <P> domain ."


def build_caption_bank(backbone, class_names, text_prompt: torch.Tensor) -> torch.Tensor:
    """Per-class unit-normalized text features with the learned prompts spliced in."""
    if len(set(class_names)) != len(class_names):
        raise PreconditionError("duplicate class names in caption bank")
    if not class_names:
        raise PreconditionError("caption bank needs at least one class")
    feats = []
    for name in class_names:
        ids = tokenize(caption_template(name), backbone.config.vocab_size)
        feats.append(backbone.encode_text(ids, text_prompt))
    bank = torch.stack(feats)
    return bank / bank.norm(dim=-1, keepdim=True)


def align_loss(image_features: torch.Tensor, caption_bank: torch.Tensor, labels,
               tau: float) -> torch.Tensor:
    """Cross-entropy over cosine similarities scaled by 1/tau."""
    if tau <= 0:
        raise PreconditionError("temperature must be positive")
    single = image_features.dim() == 1
    if single:
        image_features = image_features.unsqueeze(0)
    labels = torch.as_tensor(labels).reshape(-1)
    if labels.min() < 0 or labels.max() >= caption_bank.shape[0]:
        raise PreconditionError("label outside caption bank range")
    f = image_features / image_features.norm(dim=-1, keepdim=True)
    g = caption_bank / caption_bank.norm(dim=-1, keepdim=True)
    logits = (f @ g.T) / tau
    return F.cross_entropy(logits, labels)


# -- per-stage forwards ------------------------------------------------


def _check_indices(model: ProsModel, d_idx: torch.Tensor, c_idx: torch.Tensor) -> None:
    if d_idx.numel() and (d_idx.min() < 0 or d_idx.max() >= len(model.domains)):
        raise PreconditionError("domain index outside the training domain set")
    if c_idx.numel() and (c_idx.min() < 0 or c_idx.max() >= len(model.classes)):
        raise PreconditionError("class index outside the training class set")


def pul_forward(model: ProsModel, grids: torch.Tensor, d_idx: torch.Tensor,
                c_idx: torch.Tensor) -> torch.Tensor:
    """Batched stage-1 loss: own-unit prompted forward vs live caption bank."""
    _check_indices(model, d_idx, c_idx)
    patches = model.backbone.embed_patches(grids)
    b = patches.shape[0]
    parts = []
    if "no_dp" not in model.ablation:
        parts.append(model.bank.domain_units[d_idx].unsqueeze(1))
    if "no_sp" not in model.ablation:
        parts.append(model.bank.semantic_units[c_idx].unsqueeze(1))
    prompts = torch.cat(parts, dim=1) if parts else patches[:, :0]
    seq = PromptedSequence(cls=model.bank.cls_token.expand(b, -1),
                           prompts=prompts, patches=patches)
    feats = model.backbone.forward_image(seq)
    caption_bank = build_caption_bank(model.backbone, model.classes, model.bank.text_prompt)
    return align_loss(feats, caption_bank, c_idx, model.tau)


def _complement_indices(idx: torch.Tensor, size: int) -> torch.Tensor:
    rows = torch.arange(size).expand(idx.shape[0], size)
    keep = rows != idx.unsqueeze(1)
    return rows[keep].reshape(idx.shape[0], size - 1)


def csl_forward(model: ProsModel, grids: torch.Tensor, d_idx: torch.Tensor,
                c_idx: torch.Tensor, caption_bank: torch.Tensor,
                use_mask: bool = True) -> torch.Tensor:
    """Batched stage-2 loss: simulate dynamic prompts with own units hidden."""
    _check_indices(model, d_idx, c_idx)
    patches = model.backbone.embed_patches(grids)
    b = patches.shape[0]
    du = model.bank.domain_units.detach()  # frozen inputs in stage 2
    su = model.bank.semantic_units.detach()
    k, c = len(model.domains), len(model.classes)
    if use_mask and "no_mask" not in model.ablation:
        d_keep = _complement_indices(d_idx, k)
        s_keep = _complement_indices(c_idx, c)
    else:
        d_keep = torch.arange(k).expand(b, -1)
        s_keep = torch.arange(c).expand(b, -1)
    dp, sp = du[d_keep], su[s_keep]
    if "no_dp" in model.ablation:
        d_keep, dp = d_keep[:, :0], dp[:, :0]
    if "no_sp" in model.ablation:
        s_keep, sp = s_keep[:, :0], sp[:, :0]
    # canonical positional rows: units keep their full-bank rows so the
    # masked training layout matches full-bank inference
    cfg = model.simulator.config
    n_t = cfg.n_d + cfg.n_s
    rows = torch.cat([torch.arange(n_t).expand(b, -1), n_t + d_keep,
                      n_t + k + s_keep,
                      (n_t + k + c) + torch.arange(patches.shape[1]).expand(b, -1)], dim=1)
    p_d, p_s = model.simulator.simulate(model.bank.domain_template,
                                        model.bank.semantic_template, dp, sp, patches,
                                        token_rows=rows)
    cls = model.bank.cls_token.detach().expand(b, -1)
    seq = assemble_inference_input(cls, p_d, p_s, patches)
    feats = model.backbone.forward_image(seq)
    return align_loss(feats, caption_bank, c_idx, model.tau)


def stage_parameters(model: ProsModel, stage: str) -> list[torch.nn.Parameter]:
    """Exact trainable sets per stage; the intersection is empty."""
    if stage == "PUL":
        params = [model.bank.domain_units, model.bank.semantic_units, model.bank.text_prompt]
        if "no_cls_train" not in model.ablation:
            params.append(model.bank.cls_token)
        return params
    return [model.bank.domain_template, model.bank.semantic_template,
            *model.simulator.parameters()]


def pul_step(model: ProsModel, optimizer, grids, d_idx, c_idx) -> float:
    optimizer.zero_grad()
    loss = pul_forward(model, grids, d_idx, c_idx)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def csl_step(model: ProsModel, optimizer, grids, d_idx, c_idx, caption_bank,
             use_mask: bool = True) -> float:
    if not model.stage1_complete:
        raise PreconditionError("stage 2 requires a completed stage-1 checkpoint")
    optimizer.zero_grad()
    loss = csl_forward(model, grids, d_idx, c_idx, caption_bank, use_mask=use_mask)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


# -- training loop -----------------------------------------------------


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    if total_epochs <= 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / (total_epochs - 1)))


@dataclass
class TrainResult:
    stage: str
    epoch_losses: list[float]
    val_maps: list[float]
    best_epoch: int
    best_val_map: float
    log_lines: list[str] = field(default_factory=list)


def _trainable_state(model: ProsModel) -> dict:
    state = {f"bank.{k}": v.detach().clone() for k, v in model.bank.state_dict().items()}
    state.update({f"caps.{k}": v.detach().clone()
                  for k, v in model.simulator.state_dict().items()})
    return state


def _load_trainable_state(model: ProsModel, state: dict) -> None:
    model.bank.load_state_dict(
        {k[len("bank."):]: v for k, v in state.items() if k.startswith("bank.")})
    model.simulator.load_state_dict(
        {k[len("caps."):]: v for k, v in state.items() if k.startswith("caps.")})


def _validation_map(model: ProsModel, split, load_sample, cfg: TrainConfig,
                    stage: str) -> float:
    if not split.val_queries or not split.val_gallery:
        return 0.0
    use_caps = stage == "CSL" and "no_caps" not in model.ablation
    queries = retrieval.extract_features(model.backbone, model.bank, model.simulator,
                                         split.val_queries, load_sample, use_caps=use_caps,
                                         ablation=model.ablation)
    gallery = retrieval.extract_features(model.backbone, model.bank, model.simulator,
                                         split.val_gallery, load_sample, use_caps=use_caps,
                                         ablation=model.ablation)
    report = retrieval.evaluate_retrieval(queries, gallery, map_k=cfg.val_map_k)
    return report["map_at_k"]


def train_stage(model: ProsModel, cfg: TrainConfig, split, load_sample,
                log=None) -> TrainResult:
    """Run one stage with cosine lr decay and early stopping on validation mAP."""
    if not split.train_items:
        raise PreconditionError("empty training split")
    if cfg.stage == "CSL" and not model.stage1_complete:
        raise PreconditionError("stage 2 requires a completed stage-1 checkpoint")

    grids = torch.from_numpy(np.stack([load_sample(it) for it in split.train_items]))
    d_idx = torch.tensor([model.domain_index(it.domain) for it in split.train_items])
    c_idx = torch.tensor([model.class_index(it.class_name) for it in split.train_items])

    params = stage_parameters(model, cfg.stage)
    optimizer = torch.optim.Adam(params, lr=cfg.lr)
    caption_bank = None
    if cfg.stage == "CSL":
        with torch.no_grad():  # P_t is fixed in stage 2; cache the bank once
            caption_bank = build_caption_bank(model.backbone, model.classes,
                                              model.bank.text_prompt)

    n = len(split.train_items)
    lines: list[str] = []
    epoch_losses, val_maps = [], []
    best_map, best_epoch, best_state = -1.0, -1, _trainable_state(model)
    step = 0
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = np.random.default_rng(cfg.seed * 100003 + epoch).permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            sel = torch.from_numpy(order[start:start + cfg.batch_size])
            if cfg.stage == "PUL":
                loss = pul_step(model, optimizer, grids[sel], d_idx[sel], c_idx[sel])
            else:
                loss = csl_step(model, optimizer, grids[sel], d_idx[sel], c_idx[sel],
                                caption_bank)
            if not math.isfinite(loss):
                raise PreconditionError(f"non-finite loss at epoch {epoch} step {step}")
            losses.append(loss)
            lines.append(f"{epoch}, {step}, {cfg.stage}, {loss:.6f}, {lr:.6g}")
            step += 1
        epoch_losses.append(float(np.mean(losses)))
        val_map = _validation_map(model, split, load_sample, cfg, cfg.stage)
        val_maps.append(val_map)
        lines.append(f"{epoch}, {step}, {cfg.stage}, val_map={val_map:.6f}, {lr:.6g}")
        if log:
            log(lines[-1])
        if val_map > best_map:
            best_map, best_epoch = val_map, epoch
            best_state = _trainable_state(model)
        elif epoch - best_epoch >= max(cfg.early_stop_patience, 1):
            break
    _load_trainable_state(model, best_state)
    if cfg.stage == "PUL":
        model.stage1_complete = True
    return TrainResult(stage=cfg.stage, epoch_losses=epoch_losses, val_maps=val_maps,
                       best_epoch=best_epoch, best_val_map=best_map, log_lines=lines)


# -- checkpoints -------------------------------------------------------


def save_checkpoint(path, model: ProsModel, train_config: TrainConfig,
                    metadata: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "backbone_config": asdict(model.backbone.config),
        "caps_config": asdict(model.simulator.config),
        "train_config": asdict(train_config),
        "bank_state": model.bank.state_dict(),
        "caps_state": model.simulator.state_dict(),
        "domains": model.domains,
        "classes": model.classes,
        "tau": model.tau,
        "ablation": sorted(model.ablation),
        "stage1_complete": model.stage1_complete,
        "stage": train_config.stage,
        "metadata": metadata or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[ProsModel, dict]:
    payload = torch.load(path, weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise PreconditionError(
            f"unsupported checkpoint version {payload.get('format_version')}")
    backbone_config = BackboneConfig(**payload["backbone_config"])
    caps_config = CaPSConfig(**payload["caps_config"])
    model = build_model(backbone_config, caps_config, payload["domains"],
                        payload["classes"],
                        text_prompt_len=payload["bank_state"]["text_prompt"].shape[0],
                        tau=payload["tau"], ablation=payload["ablation"])
    model.bank.load_state_dict(payload["bank_state"])
    model.simulator.load_state_dict(payload["caps_state"])
    model.stage1_complete = payload["stage1_complete"]
    return model, payload
