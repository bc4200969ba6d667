"""Command-line entry points wiring the full pipeline.

All artifacts live under a working directory (override any path via the
config file): manifest.tsv, samples.npy, split.txt, pul.ckpt, csl.ckpt,
embeddings.bin, report.json, sigma.json and per-stage training logs.

Exit codes: 0 success, 2 config error, 3 precondition violation,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import protocol, retrieval, training
from .backbone import BackboneConfig
from .caps import CaPSConfig
from .errors import ConfigError, PreconditionError, ProsError
from .training import ABLATION_FLAGS, TrainConfig

DEFAULT_CONFIG = {
    "workdir": "runs/default",
    "paths": {},  # overrides for manifest/samples/split/pul_checkpoint/...
    "backbone": {},
    "caps": {},
    "train": {},
    "data": {},
    "protocol": {
        "protocol": "UCDR",
        "held_out_domain": "styled3",
        "gallery_mode": "unseen",
        "query_fraction": 0.25,
        "partition_seed": 0,
    },
    "text_prompt_len": 16,
    "prompt_seed": 0,
    "ablation": [],
}

_PATH_NAMES = {
    "manifest": "manifest.tsv",
    "samples": "samples.npy",
    "split": "split.txt",
    "pul_checkpoint": "pul.ckpt",
    "csl_checkpoint": "csl.ckpt",
    "embeddings": "embeddings.bin",
    "report": "report.json",
    "sigma": "sigma.json",
}


class RunConfig:
    def __init__(self, raw: dict):
        self.raw = raw
        self.workdir = Path(raw["workdir"])
        try:
            self.data = protocol.SyntheticDataConfig(**raw["data"])
            self.backbone = BackboneConfig(
                **{"num_patches": self.data.num_patches,
                   "patch_dim": self.data.patch_dim, **raw["backbone"]})
            self.caps = CaPSConfig(
                **{"width": self.backbone.embed_dim, **raw["caps"]})
            self.train = {k: v for k, v in raw["train"].items()}
            self.proto = dict(raw["protocol"])
            self.ablation = set(raw["ablation"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        bad = self.ablation - set(ABLATION_FLAGS)
        if bad:
            raise ConfigError(f"unknown ablation flags {sorted(bad)}")

    def path(self, name: str) -> Path:
        if name in self.raw["paths"]:
            return Path(self.raw["paths"][name])
        return self.workdir / _PATH_NAMES[name]

    def train_config(self, stage: str) -> TrainConfig:
        return TrainConfig(**{**self.train, "stage": stage})


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULT_CONFIG.items()}
    raw["ablation"] = list(DEFAULT_CONFIG["ablation"])
    if path:
        try:
            with open(path) as f:
                user = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must be a mapping")
        for key, value in user.items():
            if key not in raw:
                raise ConfigError(f"unknown config section {key!r}")
            if isinstance(raw[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"config section {key!r} must be a mapping")
                raw[key].update(value)
            else:
                raw[key] = value
    for key, value in (overrides or {}).items():
        section, _, leaf = key.partition(".")
        if leaf:
            raw[section][leaf] = value
        else:
            raw[section] = value
    return RunConfig(raw)


def _apply_common_overrides(cfg_args, args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["data.seed"] = args.seed
        overrides["train.seed"] = args.seed
        overrides["prompt_seed"] = args.seed
    if args.ablate:
        flags = [f for part in args.ablate for f in part.split(",") if f]
        overrides["ablation"] = flags
    if getattr(args, "workdir", None):
        overrides["workdir"] = args.workdir
    return overrides


def _load_samples(cfg: RunConfig, manifest):
    grids = np.load(cfg.path("samples"))
    row = {it.sample_id: i for i, it in enumerate(manifest.items)}
    if grids.shape[0] != len(manifest.items):
        raise PreconditionError(
            f"samples file has {grids.shape[0]} rows, manifest has {len(manifest.items)}")

    def load(item):
        return grids[row[item.sample_id]]

    return load


def _load_world(cfg: RunConfig):
    manifest = protocol.load_manifest(cfg.path("manifest"))
    split = protocol.load_split(cfg.path("split"))
    return manifest, split, _load_samples(cfg, manifest)


# -- commands ----------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> int:
    manifest, gen = protocol.generate_synthetic_dataset(cfg.data)
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    protocol.save_manifest(manifest, cfg.path("manifest"))
    grids = np.stack([gen.render_source(it.source) for it in manifest.items])
    np.save(cfg.path("samples"), grids)
    partition = protocol.partition_classes(manifest.classes,
                                           seed=cfg.proto["partition_seed"])
    split = protocol.build_split(manifest, cfg.proto["protocol"],
                                 cfg.proto.get("held_out_domain"), partition,
                                 gallery_mode=cfg.proto["gallery_mode"],
                                 query_fraction=cfg.proto["query_fraction"],
                                 seed=cfg.data.seed)
    protocol.save_split(split, cfg.path("split"))
    print(f"wrote {len(manifest.items)} items to {cfg.path('manifest')}")
    return 0


def _build_fresh_model(cfg: RunConfig, split) -> training.ProsModel:
    manifest = protocol.load_manifest(cfg.path("manifest"))
    train_domains = [d for d in manifest.domains if d != split.held_out_domain]
    tau = cfg.train_config("PUL").temperature
    return training.build_model(cfg.backbone, cfg.caps, train_domains,
                                list(split.class_partition.train),
                                text_prompt_len=cfg.raw["text_prompt_len"],
                                prompt_seed=cfg.raw["prompt_seed"], tau=tau,
                                ablation=cfg.ablation)


def cmd_train(cfg: RunConfig, stage: str, from_checkpoint: str | None) -> int:
    _, split, load_sample = _load_world(cfg)
    stage = stage.upper()
    if stage == "CSL":
        if from_checkpoint is None:
            from_checkpoint = cfg.path("pul_checkpoint")
        if not Path(from_checkpoint).exists():
            raise PreconditionError(
                f"stage csl requires a stage-1 checkpoint (missing {from_checkpoint})")
        model, _ = training.load_checkpoint(from_checkpoint)
        model.ablation = cfg.ablation
    else:
        model = _build_fresh_model(cfg, split)
    train_cfg = cfg.train_config(stage)
    result = training.train_stage(model, train_cfg, split, load_sample)
    ckpt = cfg.path("pul_checkpoint" if stage == "PUL" else "csl_checkpoint")
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    training.save_checkpoint(ckpt, model, train_cfg,
                             metadata={"best_epoch": result.best_epoch,
                                       "best_val_map": result.best_val_map,
                                       "ablation": sorted(cfg.ablation)})
    log_path = cfg.workdir / f"train_{stage.lower()}.log"
    log_path.write_text("\n".join(result.log_lines) + "\n")
    print(f"stage {stage} best val mAP {result.best_val_map:.4f} "
          f"(epoch {result.best_epoch}); checkpoint: {ckpt}")
    return 0


def _load_inference_model(cfg: RunConfig):
    use_caps = "no_caps" not in cfg.ablation
    ckpt = cfg.path("csl_checkpoint" if use_caps else "pul_checkpoint")
    if not ckpt.exists():
        raise PreconditionError(f"missing checkpoint {ckpt}")
    model, payload = training.load_checkpoint(ckpt)
    if use_caps and payload["stage"] != "CSL":
        raise PreconditionError(
            f"checkpoint {ckpt} has no trained simulator (stage {payload['stage']})")
    return model, use_caps


def cmd_index(cfg: RunConfig) -> int:
    _, split, load_sample = _load_world(cfg)
    model, use_caps = _load_inference_model(cfg)
    gallery = retrieval.extract_features(model.backbone, model.bank, model.simulator,
                                         split.gallery_items, load_sample,
                                         use_caps=use_caps, ablation=model.ablation)
    retrieval.save_embeddings(gallery, cfg.path("embeddings"))
    print(f"indexed {len(gallery)} gallery items -> {cfg.path('embeddings')}")
    return 0


def cmd_search(cfg: RunConfig, query_ids: list[str], k: int) -> int:
    _, split, load_sample = _load_world(cfg)
    model, use_caps = _load_inference_model(cfg)
    gallery = retrieval.load_embeddings(cfg.path("embeddings"))
    if gallery.vectors.shape[1] != model.backbone.config.proj_dim:
        raise PreconditionError(
            f"embedding dim {gallery.vectors.shape[1]} != checkpoint proj_dim "
            f"{model.backbone.config.proj_dim}")
    if k > len(gallery):
        print(f"warning: k={k} larger than gallery ({len(gallery)}), clipping",
              file=sys.stderr)
        k = len(gallery)
    by_id = {it.sample_id: it for it in split.test_queries}
    items = []
    for qid in query_ids:
        if qid not in by_id:
            raise PreconditionError(f"query id {qid!r} not in the split's test queries")
        items.append(by_id[qid])
    queries = retrieval.extract_features(model.backbone, model.bank, model.simulator,
                                         items, load_sample, use_caps=use_caps,
                                         ablation=model.ablation)
    for i, qid in enumerate(queries.ids):
        result = retrieval.rank(queries.vectors[i], gallery, query_id=qid)
        for rank_pos in range(k):
            print(f"{qid}\t{rank_pos + 1}\t{result.gallery_ids[rank_pos]}"
                  f"\t{result.scores[rank_pos]:.6f}")
    return 0


def _gallery_views(split, gallery):
    """Unseen-gallery view plus the mixed view when the split carries one."""
    query_classes = {it.class_name for it in split.test_queries}
    keep = [i for i, c in enumerate(gallery.classes) if c in query_classes]
    unseen = retrieval.EmbeddingGallery(
        ids=[gallery.ids[i] for i in keep], vectors=gallery.vectors[keep],
        classes=[gallery.classes[i] for i in keep],
        domains=[gallery.domains[i] for i in keep])
    views = {"unseen": unseen}
    if split.gallery_mode == "mixed":
        views["mixed"] = gallery
    return views


def cmd_evaluate(cfg: RunConfig, map_k: int = 200, prec_k: int = 200) -> int:
    _, split, load_sample = _load_world(cfg)
    model, use_caps = _load_inference_model(cfg)
    gallery = retrieval.extract_features(model.backbone, model.bank, model.simulator,
                                         split.gallery_items, load_sample,
                                         use_caps=use_caps, ablation=model.ablation)
    queries = retrieval.extract_features(model.backbone, model.bank, model.simulator,
                                         split.test_queries, load_sample,
                                         use_caps=use_caps, ablation=model.ablation)
    report = {"protocol": split.protocol, "gallery_mode": split.gallery_mode,
              "held_out_domain": split.held_out_domain,
              "ablation": sorted(cfg.ablation), "galleries": {}}
    for name, view in _gallery_views(split, gallery).items():
        report["galleries"][name] = retrieval.evaluate_retrieval(
            queries, view, map_k=map_k, prec_k=prec_k)
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    with open(cfg.path("report"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_diagnose(cfg: RunConfig) -> int:
    _, split, load_sample = _load_world(cfg)
    model, use_caps = _load_inference_model(cfg)
    items = split.test_queries + split.gallery_items
    feats = retrieval.extract_features(model.backbone, model.bank, model.simulator,
                                       items, load_sample, use_caps=use_caps,
                                       ablation=model.ablation)
    sigma = retrieval.sigma_diagnostic(feats.vectors, feats.classes)
    out = {"sigma": sigma.sigma, "max_intra": sigma.max_intra,
           "min_inter": sigma.min_inter, "excluded_classes": sigma.excluded_classes,
           "num_points": len(items), "ablation": sorted(cfg.ablation)}
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    with open(cfg.path("sigma"), "w") as f:
        json.dump(out, f, indent=2, sort_keys=True)
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


# -- argument parsing --------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pros", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--workdir", help="override the working directory")
        p.add_argument("--seed", type=int, help="override data/train/prompt seeds")
        p.add_argument("--ablate", action="append", default=[],
                       help="comma-separated ablation flags "
                            f"({', '.join(ABLATION_FLAGS)})")
        return p

    common(sub.add_parser("gen-data", help="generate the synthetic dataset and split"))
    p = common(sub.add_parser("train", help="run one training stage"))
    p.add_argument("--stage", choices=["pul", "csl"], required=True)
    p.add_argument("--from-checkpoint", help="stage-1 checkpoint for --stage csl")
    common(sub.add_parser("index", help="embed the gallery to an embedding file"))
    p = common(sub.add_parser("search", help="rank queries against the index"))
    p.add_argument("--query-ids", required=True, help="comma-separated query sample ids")
    p.add_argument("-k", type=int, default=10)
    p = common(sub.add_parser("evaluate", help="compute the retrieval metric report"))
    p.add_argument("--map-k", type=int, default=200)
    p.add_argument("--prec-k", type=int, default=200)
    common(sub.add_parser("diagnose", help="compute the cluster-quality sigma report"))
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config, _apply_common_overrides(None, args))
    if args.command == "gen-data":
        return cmd_gen_data(cfg)
    if args.command == "train":
        return cmd_train(cfg, args.stage, args.from_checkpoint)
    if args.command == "index":
        return cmd_index(cfg)
    if args.command == "search":
        return cmd_search(cfg, [q for q in args.query_ids.split(",") if q], args.k)
    if args.command == "evaluate":
        return cmd_evaluate(cfg, map_k=args.map_k, prec_k=args.prec_k)
    if args.command == "diagnose":
        return cmd_diagnose(cfg)
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> None:
    try:
        sys.exit(run(argv))
    except ProsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(exc.exit_code)


if __name__ == "__main__":
    main()
