"""Feature extraction, gallery ranking and evaluation metrics."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import PromptedSequence
from .caps import assemble_inference_input
from .errors import PreconditionError

EMBED_MAGIC = b"PROSEMB1"


@dataclass
class EmbeddingGallery:
    ids: list[str]
    vectors: np.ndarray  # (n, proj_dim) float32, unit-normalized
    classes: list[str]
    domains: list[str]

    def __post_init__(self):
        n = len(self.ids)
        if not (len(self.classes) == len(self.domains) == n and self.vectors.shape[0] == n):
            raise PreconditionError("gallery arrays have mismatched lengths")
        if len(set(self.ids)) != n:
            raise PreconditionError("gallery ids are not unique")
        if n:
            norms = np.linalg.norm(self.vectors, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-6):
                raise PreconditionError("gallery vectors must be unit-normalized")

    def __len__(self):
        return len(self.ids)


@dataclass
class RankedResult:
    query_id: str
    gallery_ids: list[str]
    scores: np.ndarray


def extract_features(backbone, bank, simulator, items, load_sample, batch_size: int = 64,
                     use_caps: bool = True, ablation=()) -> EmbeddingGallery:
    """Embed items through the retrieval path and unit-normalize.

    Full path: simulate dynamic prompts with the complete (unmasked) unit
    banks, then run [cls, P_d, P_s, patches] through the frozen image
    tower. With ``use_caps=False`` the simulator is bypassed and items go
    through a plain [cls, patches] forward.
    """
    if use_caps and simulator is None:
        raise PreconditionError("retrieval path requires simulator weights (or use_caps=False)")
    ids, classes, domains, chunks = [], [], [], []
    items = list(items)
    if use_caps:
        k = bank.domain_units.shape[0]
        c = bank.semantic_units.shape[0]
        n_t = simulator.config.n_d + simulator.config.n_s
        dp = bank.domain_units if "no_dp" not in ablation else bank.domain_units[:0]
        sp = bank.semantic_units if "no_sp" not in ablation else bank.semantic_units[:0]
        num_patches = backbone.config.num_patches
        rows = torch.cat([torch.arange(n_t),
                          n_t + torch.arange(dp.shape[0]),
                          n_t + k + torch.arange(sp.shape[0]),
                          (n_t + k + c) + torch.arange(num_patches)])
    with torch.no_grad():
        for start in range(0, len(items), batch_size):
            batch = items[start:start + batch_size]
            grids = torch.from_numpy(np.stack([load_sample(it) for it in batch]))
            patches = backbone.embed_patches(grids)
            cls = bank.cls_token.expand(len(batch), -1)
            if use_caps:
                p_d, p_s = simulator.simulate(bank.domain_template, bank.semantic_template,
                                              dp, sp, patches, token_rows=rows)
                seq = assemble_inference_input(cls, p_d, p_s, patches)
            else:
                seq = PromptedSequence(cls=cls, prompts=patches[:, :0], patches=patches)
            feats = backbone.forward_image(seq)
            feats = feats / feats.norm(dim=-1, keepdim=True)
            chunks.append(feats.to(torch.float32).numpy())
            ids.extend(it.sample_id for it in batch)
            classes.extend(it.class_name for it in batch)
            domains.extend(it.domain for it in batch)
    vectors = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 1), np.float32)
    # renormalize after the float32 cast so stored norms hit the contract
    if len(ids):
        vectors = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
    return EmbeddingGallery(ids=ids, vectors=vectors, classes=classes, domains=domains)


def rank(query_vector: np.ndarray, gallery: EmbeddingGallery,
         query_id: str = "query") -> RankedResult:
    """Full cosine ordering with deterministic ascending-id tie-break."""
    if len(gallery) == 0:
        raise PreconditionError("cannot rank against an empty gallery")
    scores = gallery.vectors @ np.asarray(query_vector, dtype=np.float64)
    order = sorted(range(len(gallery)), key=lambda i: (-scores[i], gallery.ids[i]))
    return RankedResult(query_id=query_id,
                        gallery_ids=[gallery.ids[i] for i in order],
                        scores=scores[np.array(order)])


@dataclass
class MetricValue:
    value: float
    queries_used: int
    queries_excluded: int  # queries with zero relevant gallery items

    def __float__(self):
        return self.value


def _relevance(result: RankedResult, gallery: EmbeddingGallery, query_class: str):
    class_of = dict(zip(gallery.ids, gallery.classes))
    rel = [1 if class_of[gid] == query_class else 0 for gid in result.gallery_ids]
    return rel, sum(1 for c in gallery.classes if c == query_class)


def average_precision(rel, total_relevant: int, k: int) -> float:
    """Truncated AP: (1/min(R,k)) * sum of precision at relevant hit ranks."""
    if k < 1:
        raise PreconditionError("k must be >= 1")
    hits = 0
    score = 0.0
    for i, r in enumerate(rel[:k], start=1):
        if r:
            hits += 1
            score += hits / i
    return score / min(total_relevant, k)


def map_at_k(results, query_classes, gallery: EmbeddingGallery, k: int) -> MetricValue:
    aps, excluded = [], 0
    for result, qclass in zip(results, query_classes):
        rel, total = _relevance(result, gallery, qclass)
        if total == 0:
            excluded += 1
            continue
        aps.append(average_precision(rel, total, k))
    value = float(np.mean(aps)) if aps else 0.0
    return MetricValue(value, len(aps), excluded)


def prec_at_k(results, query_classes, gallery: EmbeddingGallery, k: int) -> MetricValue:
    k = min(k, len(gallery))  # clipped when the gallery is smaller than k
    precs, excluded = [], 0
    for result, qclass in zip(results, query_classes):
        rel, total = _relevance(result, gallery, qclass)
        if total == 0:
            excluded += 1
            continue
        precs.append(sum(rel[:k]) / k)
    value = float(np.mean(precs)) if precs else 0.0
    return MetricValue(value, len(precs), excluded)


def map_all(results, query_classes, gallery: EmbeddingGallery) -> MetricValue:
    return map_at_k(results, query_classes, gallery, k=len(gallery))


@dataclass
class SigmaReport:
    sigma: float
    max_intra: float
    min_inter: float
    excluded_classes: list[str] = field(default_factory=list)

    def __float__(self):
        return self.sigma


def sigma_diagnostic(vectors: np.ndarray, labels) -> SigmaReport:
    """Cluster-quality ratio: max intra-class spread over min inter-class gap.

    Lower is better. Classes with a single sample are excluded from the
    intra term and reported. Zero inter-class distance yields +inf.
    """
    labels = list(labels)
    uniq = sorted(set(labels))
    if len(uniq) < 2:
        raise PreconditionError("sigma diagnostic needs at least 2 classes")
    vectors = np.asarray(vectors, dtype=np.float64)
    groups = {c: vectors[[i for i, l in enumerate(labels) if l == c]] for c in uniq}
    excluded = [c for c in uniq if len(groups[c]) < 2]
    intra_groups = [c for c in uniq if len(groups[c]) >= 2]
    if not intra_groups:
        raise PreconditionError("sigma diagnostic needs a class with >= 2 samples")

    def pdist(a, b):
        d2 = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
              - 2.0 * (a @ b.T))
        return np.sqrt(np.maximum(d2, 0.0))

    max_intra = 0.0
    for c in intra_groups:
        d = pdist(groups[c], groups[c])
        max_intra = max(max_intra, float(d.max()))
    min_inter = math.inf
    for i, ci in enumerate(uniq):
        for cj in uniq[i + 1:]:
            min_inter = min(min_inter, float(pdist(groups[ci], groups[cj]).min()))
    sigma = max_intra / min_inter if min_inter > 0 else math.inf
    return SigmaReport(sigma=sigma, max_intra=max_intra, min_inter=min_inter,
                       excluded_classes=excluded)


def evaluate_retrieval(queries: EmbeddingGallery, gallery: EmbeddingGallery,
                       map_k: int = 200, prec_k: int = 200) -> dict:
    """Rank every query and report mAP@k, Prec@k and mAP@all."""
    results = [rank(queries.vectors[i], gallery, query_id=qid)
               for i, qid in enumerate(queries.ids)]
    m_k = map_at_k(results, queries.classes, gallery, k=min(map_k, len(gallery)))
    p_k = prec_at_k(results, queries.classes, gallery, k=prec_k)
    m_all = map_all(results, queries.classes, gallery)
    return {
        "map_at_k": m_k.value, "prec_at_k": p_k.value, "map_all": m_all.value,
        "k": min(map_k, len(gallery)), "num_queries": len(queries),
        "queries_excluded": m_k.queries_excluded,
    }


# -- embedding file ----------------------------------------------------


def save_embeddings(gallery: EmbeddingGallery, path) -> None:
    with open(path, "wb") as f:
        f.write(EMBED_MAGIC)
        f.write(struct.pack("<II", gallery.vectors.shape[1] if len(gallery) else 0,
                            len(gallery)))
        for i in range(len(gallery)):
            for text in (gallery.ids[i], gallery.classes[i], gallery.domains[i]):
                raw = text.encode()
                f.write(struct.pack("<H", len(raw)))
                f.write(raw)
            f.write(gallery.vectors[i].astype("<f4").tobytes())


def load_embeddings(path) -> EmbeddingGallery:
    with open(path, "rb") as f:
        if f.read(8) != EMBED_MAGIC:
            raise PreconditionError(f"{path}: not an embedding file")
        dim, count = struct.unpack("<II", f.read(8))
        ids, classes, domains, vecs = [], [], [], []
        for _ in range(count):
            fields = []
            for _ in range(3):
                (n,) = struct.unpack("<H", f.read(2))
                fields.append(f.read(n).decode())
            ids.append(fields[0])
            classes.append(fields[1])
            domains.append(fields[2])
            vecs.append(np.frombuffer(f.read(4 * dim), dtype="<f4"))
    vectors = np.stack(vecs) if vecs else np.zeros((0, max(dim, 1)), np.float32)
    return EmbeddingGallery(ids=ids, vectors=vectors, classes=classes, domains=domains)
