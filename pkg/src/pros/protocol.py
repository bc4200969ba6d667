"""Dataset manifests, evaluation-protocol splits and the synthetic generator.

The synthetic dataset gives every class a latent prototype vector and
every domain a fixed orthogonal distortion plus bias; samples are patch
grids consumable by the synthetic backbone. Domain 0 is distortion-free
and plays the role of the photo ("real") gallery domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, PreconditionError

PROTOCOLS = ("UCDR", "UcCDR", "UdCDR")
MANIFEST_HEADER = "#pros-manifest v1"
SPLIT_HEADER = "#pros-split v1"


@dataclass(frozen=True)
class ManifestItem:
    sample_id: str
    source: str
    domain: str
    class_name: str


@dataclass
class DatasetManifest:
    items: list[ManifestItem]
    domains: list[str]
    classes: list[str]

    def __post_init__(self):
        ids = [it.sample_id for it in self.items]
        if len(set(ids)) != len(ids):
            raise PreconditionError("duplicate sample ids in manifest")
        dset, cset = set(self.domains), set(self.classes)
        for it in self.items:
            if it.domain not in dset or it.class_name not in cset:
                raise PreconditionError(
                    f"item {it.sample_id} references unknown domain/class "
                    f"({it.domain}, {it.class_name})")


@dataclass(frozen=True)
class ClassPartition:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def validate(self, all_classes) -> None:
        parts = [set(self.train), set(self.val), set(self.test)]
        if parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2]:
            raise PreconditionError("class partition sets overlap")
        if parts[0] | parts[1] | parts[2] != set(all_classes):
            raise PreconditionError("class partition does not cover the class vocabulary")


def partition_classes(classes, seed: int = 0,
                      ratios: tuple[float, float, float] = (0.71, 0.16, 0.13)) -> ClassPartition:
    """Shuffled split mirroring the benchmark train/val/test class ratios."""
    rng = np.random.default_rng(seed)
    order = [classes[i] for i in rng.permutation(len(classes))]
    n = len(classes)
    # at least 2 test classes so unseen-class metrics stay meaningful
    n_test = max(2, round(n * ratios[2]))
    n_val = max(1, round(n * ratios[1]))
    if n_test + n_val >= n:
        raise PreconditionError(f"too few classes ({n}) to partition")
    return ClassPartition(train=tuple(sorted(order[: n - n_val - n_test])),
                          val=tuple(sorted(order[n - n_val - n_test: n - n_test])),
                          test=tuple(sorted(order[n - n_test:])))


@dataclass
class ProtocolSplit:
    protocol: str
    gallery_mode: str
    held_out_domain: str | None
    class_partition: ClassPartition
    train_items: list[ManifestItem]
    val_queries: list[ManifestItem]
    val_gallery: list[ManifestItem]
    test_queries: list[ManifestItem]
    gallery_items: list[ManifestItem]
    real_domain: str = "real"


# -- synthetic data ----------------------------------------------------


@dataclass
class SyntheticDataConfig:
    seed: int = 0
    num_domains: int = 4
    num_classes: int = 10
    samples_per_pair: int = 50
    num_patches: int = 16
    patch_dim: int = 32
    rotation_strength: float = 0.05
    style_dim: int = 3
    style_strength: float = 4.0
    patch_noise: float = 0.25
    class_dim: int = 8

    def __post_init__(self):
        if self.num_domains < 2:
            raise ConfigError("need K >= 2 domains")
        if self.num_classes < 4:
            raise ConfigError("need C >= 4 classes")
        if self.samples_per_pair < 2:
            raise ConfigError("need n >= 2 samples per (domain, class)")
        if self.num_patches < 1 or self.patch_dim < 2:
            raise ConfigError("degenerate patch grid dimensions")
        if not 1 <= self.style_dim < self.patch_dim:
            raise ConfigError("style_dim must be in [1, patch_dim)")
        if not 2 <= self.class_dim <= self.patch_dim:
            raise ConfigError("class_dim must be in [2, patch_dim]")


class SyntheticGenerator:
    """Deterministic sample renderer: class prototype -> domain distortion.

    Every domain applies a mild fixed rotation plus a bias ("style")
    offset. Styles of all domains live in one shared low-dimensional
    subspace, so invariance learned on source domains can transfer to a
    held-out one. Domain 0 is the identity (the photo analog).
    """

    def __init__(self, config: SyntheticDataConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        # prototypes crowd a low-dim subspace so unseen classes sit between
        # seen ones instead of in fresh directions
        class_basis, _ = np.linalg.qr(
            rng.standard_normal((config.patch_dim, config.class_dim)))
        protos = rng.standard_normal((config.num_classes, config.class_dim)) @ class_basis.T
        self.prototypes = protos / np.linalg.norm(protos, axis=1, keepdims=True)
        eye = np.eye(config.patch_dim)
        style_basis, _ = np.linalg.qr(
            rng.standard_normal((config.patch_dim, config.style_dim)))
        self.rotations = [eye]
        self.biases = [np.zeros(config.patch_dim)]
        for _ in range(config.num_domains - 1):
            g = rng.standard_normal((config.patch_dim, config.patch_dim))
            q, r = np.linalg.qr(eye + config.rotation_strength * g)
            q = q * np.sign(np.diag(r))  # fix QR sign ambiguity
            self.rotations.append(q)
            direction = rng.standard_normal(config.style_dim)
            direction /= np.linalg.norm(direction)
            # fixed-magnitude style: domain difficulty is uniform across seeds
            self.biases.append(style_basis @ (config.style_strength * direction))

    def render(self, domain_idx: int, class_idx: int, sample_idx: int) -> np.ndarray:
        c = self.config
        rng = np.random.default_rng([c.seed, domain_idx, class_idx, sample_idx])
        latent = self.prototypes[class_idx] + c.patch_noise * rng.standard_normal(
            (c.num_patches, c.patch_dim))
        grid = latent @ self.rotations[domain_idx].T + self.biases[domain_idx]
        return grid.astype(np.float32)

    def render_source(self, source: str) -> np.ndarray:
        d, cl, i = (int(x) for x in source.split(","))
        return self.render(d, cl, i)


def domain_name(idx: int) -> str:
    return "real" if idx == 0 else f"styled{idx}"


def class_name(idx: int) -> str:
    return f"class{idx:02d}"


def generate_synthetic_dataset(config: SyntheticDataConfig) -> tuple[DatasetManifest, SyntheticGenerator]:
    gen = SyntheticGenerator(config)
    items = []
    for d in range(config.num_domains):
        for cl in range(config.num_classes):
            for i in range(config.samples_per_pair):
                items.append(ManifestItem(
                    sample_id=f"d{d}_c{cl:02d}_{i:03d}",
                    source=f"{d},{cl},{i}",
                    domain=domain_name(d),
                    class_name=class_name(cl)))
    manifest = DatasetManifest(
        items=items,
        domains=[domain_name(d) for d in range(config.num_domains)],
        classes=[class_name(c) for c in range(config.num_classes)])
    return manifest, gen


# -- split construction ------------------------------------------------


def _stratified_subsample(items, fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[ManifestItem]] = {}
    for it in items:
        by_class.setdefault(it.class_name, []).append(it)
    picked = []
    for cname in sorted(by_class):
        group = by_class[cname]
        k = max(1, round(fraction * len(group)))
        idx = rng.permutation(len(group))[:k]
        picked.extend(group[i] for i in sorted(idx))
    return picked


def build_split(manifest: DatasetManifest, protocol: str, held_out_domain: str | None,
                class_partition: ClassPartition, gallery_mode: str = "unseen",
                query_fraction: float = 0.25, seed: int = 0) -> ProtocolSplit:
    if protocol not in PROTOCOLS:
        raise PreconditionError(f"unknown protocol {protocol!r}")
    if gallery_mode not in ("unseen", "mixed"):
        raise PreconditionError(f"unknown gallery mode {gallery_mode!r}")
    class_partition.validate(manifest.classes)
    real = manifest.domains[0]
    if protocol in ("UCDR", "UdCDR"):
        if held_out_domain is None or held_out_domain not in manifest.domains:
            raise PreconditionError(
                f"protocol {protocol} requires a held-out domain from {manifest.domains}")
    train_classes = set(class_partition.train)
    val_classes = set(class_partition.val)
    test_classes = set(class_partition.test)
    train_domains = [d for d in manifest.domains if d != held_out_domain]

    train_items = [it for it in manifest.items
                   if it.domain in train_domains and it.class_name in train_classes]
    if not train_items:
        raise PreconditionError("empty training split")

    if protocol == "UCDR":
        test_queries = [it for it in manifest.items
                        if it.domain == held_out_domain and it.class_name in test_classes]
        query_class_set = test_classes
    elif protocol == "UcCDR":
        test_queries = [it for it in manifest.items
                        if it.domain in train_domains and it.domain != real
                        and it.class_name in test_classes]
        query_class_set = test_classes
    else:  # UdCDR: unseen domain, seen classes, subsampled queries
        pool = [it for it in manifest.items
                if it.domain == held_out_domain and it.class_name in train_classes]
        test_queries = _stratified_subsample(pool, query_fraction, seed)
        query_class_set = train_classes

    gallery_items = [it for it in manifest.items
                     if it.domain == real and it.class_name in query_class_set]
    if gallery_mode == "mixed":
        extra_classes = train_classes if protocol != "UdCDR" else test_classes
        gallery_items = gallery_items + [
            it for it in manifest.items
            if it.domain == real and it.class_name in extra_classes]

    # validation mirrors the test-time query/gallery construction on the
    # val classes: queries from the held-out domain when one exists,
    # otherwise from the non-real training domains
    if held_out_domain is not None:
        val_query_domains = [held_out_domain]
    else:
        val_query_domains = [d for d in train_domains if d != real] or train_domains
    val_queries = [it for it in manifest.items
                   if it.domain in val_query_domains and it.class_name in val_classes]
    val_gallery = [it for it in manifest.items
                   if it.domain == real and it.class_name in val_classes]

    train_ids = {it.sample_id for it in train_items}
    if any(it.sample_id in train_ids for it in test_queries):
        raise PreconditionError("leakage: test query appears in training set")

    return ProtocolSplit(protocol=protocol, gallery_mode=gallery_mode,
                         held_out_domain=held_out_domain, class_partition=class_partition,
                         train_items=train_items, val_queries=val_queries,
                         val_gallery=val_gallery, test_queries=test_queries,
                         gallery_items=gallery_items, real_domain=real)


# -- file formats ------------------------------------------------------


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w") as f:
        f.write(MANIFEST_HEADER + "\n")
        f.write("#domains\t" + "\t".join(manifest.domains) + "\n")
        f.write("#classes\t" + "\t".join(manifest.classes) + "\n")
        for it in manifest.items:
            f.write(f"{it.sample_id}\t{it.source}\t{it.domain}\t{it.class_name}\n")


def load_manifest(path) -> DatasetManifest:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise PreconditionError(f"{path}: missing manifest header {MANIFEST_HEADER!r}")
    domains, classes, items = [], [], []
    for line in lines[1:]:
        if line.startswith("#domains\t"):
            domains = line.split("\t")[1:]
        elif line.startswith("#classes\t"):
            classes = line.split("\t")[1:]
        elif line:
            sid, source, dom, cls = line.split("\t")
            items.append(ManifestItem(sid, source, dom, cls))
    return DatasetManifest(items=items, domains=domains, classes=classes)


_SECTIONS = ("train", "val_queries", "val_gallery", "test_queries", "gallery")


def save_split(split: ProtocolSplit, path) -> None:
    with open(path, "w") as f:
        f.write(SPLIT_HEADER + "\n")
        f.write(f"protocol={split.protocol}\n")
        f.write(f"gallery_mode={split.gallery_mode}\n")
        f.write(f"held_out_domain={split.held_out_domain or ''}\n")
        f.write(f"real_domain={split.real_domain}\n")
        f.write("train_classes=" + ",".join(split.class_partition.train) + "\n")
        f.write("val_classes=" + ",".join(split.class_partition.val) + "\n")
        f.write("test_classes=" + ",".join(split.class_partition.test) + "\n")
        for section, items in zip(_SECTIONS, (split.train_items, split.val_queries,
                                              split.val_gallery, split.test_queries,
                                              split.gallery_items)):
            f.write(f"[{section}]\n")
            for it in items:
                f.write(f"{it.sample_id}\t{it.source}\t{it.domain}\t{it.class_name}\n")


def load_split(path) -> ProtocolSplit:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != SPLIT_HEADER:
        raise PreconditionError(f"{path}: missing split header {SPLIT_HEADER!r}")
    meta: dict[str, str] = {}
    sections: dict[str, list[ManifestItem]] = {s: [] for s in _SECTIONS}
    current = None
    for line in lines[1:]:
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            if current not in sections:
                raise PreconditionError(f"unknown split section {current!r}")
        elif current is None:
            key, _, value = line.partition("=")
            meta[key] = value
        else:
            sid, source, dom, cls = line.split("\t")
            sections[current].append(ManifestItem(sid, source, dom, cls))
    partition = ClassPartition(
        train=tuple(x for x in meta["train_classes"].split(",") if x),
        val=tuple(x for x in meta["val_classes"].split(",") if x),
        test=tuple(x for x in meta["test_classes"].split(",") if x))
    return ProtocolSplit(protocol=meta["protocol"], gallery_mode=meta["gallery_mode"],
                         held_out_domain=meta["held_out_domain"] or None,
                         class_partition=partition, train_items=sections["train"],
                         val_queries=sections["val_queries"], val_gallery=sections["val_gallery"],
                         test_queries=sections["test_queries"], gallery_items=sections["gallery"],
                         real_domain=meta.get("real_domain", "real"))
