"""Stage 2: the compatibility model scoring (top, template) queries.

A shared convolutional encoder maps tops, templates, and candidate bottoms
to 512-d features. The top and template features are concatenated and pushed
through a two-layer dense head into a 128-d query space; candidate bottoms
go through a separate two-layer head into their own 128-d space. The
compatibility score of a query and a candidate is the plain dot product of
the two embeddings.

Training optimizes a weighted sum of a pairwise ranking term (BPR), a
softmax contrastive term (InfoNCE with temperature tau, computed over the
other bottoms in the batch), and an L2-norm penalty on the parameters:

    loss = alpha * bpr + beta * nce + gamma * ||theta||_2

Setting alpha=0 or beta=0 yields the single-component ablation variants.
"""

from __future__ import annotations

import csv
import struct
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .cigm import Template, TrainingDivergedError
from .data import ImageStore, ItemImage, PairManifest, batch_iter, load_image, sample_negative
from .util import stable_seed

FEATURE_DIM = 512
EMBED_DIM = 128
CHECKPOINT_FORMAT_VERSION = 1
ENCODER_VARIANTS = ("paper_backbone", "tiny")
_EMB_MAGIC = b"GECOEMB1"


class MissingTemplateError(RuntimeError):
    """A training top has no generated template."""


@dataclass
class EncoderConfig:
    """Feature extractor settings. The feature dimension is fixed at 512.

    ``paper_backbone`` is a residual 18-layer convolutional encoder;
    ``tiny`` is a 4-conv-block encoder meant for desk-scale runs. Pretrained
    backbone weights, when requested, are loaded from a local file.
    """

    variant: str = "paper_backbone"
    pretrained: bool = False
    weights_path: Optional[str] = None

    def validate(self) -> None:
        if self.variant not in ENCODER_VARIANTS:
            raise ValueError(f"unknown encoder variant {self.variant!r}")
        if self.pretrained and self.variant != "paper_backbone":
            raise ValueError("pretrained weights only apply to the paper_backbone variant")
        if self.pretrained and not self.weights_path:
            raise ValueError("pretrained=True requires weights_path")


@dataclass
class LossWeights:
    alpha: float = 0.5   # BPR weight
    beta: float = 1.0    # InfoNCE weight
    gamma: float = 1e-4  # L2 weight
    tau: float = 0.5     # InfoNCE temperature

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError("alpha, beta, gamma must be >= 0")
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("alpha and beta cannot both be 0")


class TinyEncoder(nn.Module):
    """4-conv-block encoder for small images and fast CPU runs.

    No normalization layers: per-channel activation means carry most of the
    color signal at this scale, and normalization would strip them.
    """

    def __init__(self, feature_dim: int = FEATURE_DIM, widths: Sequence[int] = (16, 32, 64, 128)):
        super().__init__()
        blocks: List[nn.Module] = []
        in_ch = 3
        for w in widths:
            blocks += [nn.Conv2d(in_ch, w, 4, 2, 1), nn.ReLU()]
            in_ch = w
        self.features = nn.Sequential(*blocks)
        self.fc = nn.Linear(in_ch, feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        h = F.adaptive_avg_pool2d(h, 1).flatten(1)
        return self.fc(h)


def build_encoder(cfg: EncoderConfig, feature_dim: int = FEATURE_DIM) -> nn.Module:
    cfg.validate()
    if cfg.variant == "tiny":
        return TinyEncoder(feature_dim)
    if feature_dim != FEATURE_DIM:
        raise ValueError("paper_backbone produces 512-d features")
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    if cfg.pretrained:
        state = torch.load(cfg.weights_path, weights_only=True)
        net.load_state_dict(state)
    net.fc = nn.Identity()
    return net


class ProjectionHead(nn.Module):
    """Two dense layers with a ReLU in between."""

    def __init__(self, in_dim: int, out_dim: int, hidden_dim: Optional[int] = None):
        super().__init__()
        hidden = hidden_dim if hidden_dim is not None else max(in_dim // 2, out_dim)
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class CompatibilityModel(nn.Module):
    """Shared encoder plus disjoint query and candidate projection heads."""

    def __init__(
        self,
        enc_cfg: EncoderConfig,
        feature_dim: int = FEATURE_DIM,
        embed_dim: int = EMBED_DIM,
    ):
        super().__init__()
        self.enc_cfg = enc_cfg
        self.feature_dim = feature_dim
        self.embed_dim = embed_dim
        self.encoder = build_encoder(enc_cfg, feature_dim)
        self.query_head = ProjectionHead(2 * feature_dim, embed_dim)
        self.candidate_head = ProjectionHead(feature_dim, embed_dim)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, feature_dim); one shared encoder for all roles."""
        return self.encoder(images)

    def compose_query(self, top_feat: torch.Tensor, template_feat: torch.Tensor) -> torch.Tensor:
        """Concatenate (top, template) features and project to the query space."""
        return self.query_head(torch.cat([top_feat, template_feat], dim=-1))

    def project_candidate(self, bottom_feat: torch.Tensor) -> torch.Tensor:
        return self.candidate_head(bottom_feat)


def encode(model: CompatibilityModel, image: ItemImage) -> np.ndarray:
    """Single-image feature extraction; returns a float32 feature vector."""
    model.eval()
    with torch.no_grad():
        feat = model.encode(torch.from_numpy(image.pixels).unsqueeze(0))[0]
    out = feat.numpy()
    if not np.isfinite(out).all():
        raise ValueError("encoder produced non-finite features")
    return out


def compose_query(model: CompatibilityModel, top_feat: np.ndarray, template_feat: np.ndarray) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        q = model.compose_query(
            torch.as_tensor(top_feat, dtype=torch.float32),
            torch.as_tensor(template_feat, dtype=torch.float32),
        )
    return q.numpy()


def project_candidate(model: CompatibilityModel, bottom_feat: np.ndarray) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        c = model.project_candidate(torch.as_tensor(bottom_feat, dtype=torch.float32))
    return c.numpy()


def score(query_emb: np.ndarray, candidate_emb: np.ndarray) -> float:
    """The compatibility score is the dot product of the two embeddings."""
    return float(np.dot(np.asarray(query_emb), np.asarray(candidate_emb)))


def bpr_loss(pos_scores: torch.Tensor, neg_scores: torch.Tensor) -> torch.Tensor:
    """-log sigmoid(pos - neg), elementwise, in the stable softplus form."""
    return F.softplus(neg_scores - pos_scores)


def info_nce_loss(
    pos_score: torch.Tensor,
    neg_scores: torch.Tensor,
    tau: float,
    *,
    outer_scale: bool = True,
) -> torch.Tensor:
    """Softmax contrastive loss over one positive and its negatives.

    The denominator includes the positive term, so the loss is bounded below
    by 0 and equals (1/tau) * ln K when all K candidate scores are equal.
    ``outer_scale`` keeps the extra 1/tau factor in front of the log; pass
    False for the canonical form without it. Lower temperatures sharpen the
    softmax; as tau -> 0+ with the positive strictly on top, the loss -> 0.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    pos = torch.as_tensor(pos_score, dtype=torch.get_default_dtype()) \
        if not torch.is_tensor(pos_score) else pos_score
    negs = torch.as_tensor(neg_scores, dtype=pos.dtype) \
        if not torch.is_tensor(neg_scores) else neg_scores
    if negs.numel() < 1:
        raise ValueError("at least one negative score is required")
    logits = torch.cat([pos.reshape(1), negs.reshape(-1)]) / tau
    loss = torch.logsumexp(logits, dim=0) - logits[0]
    return loss / tau if outer_scale else loss


def info_nce_matrix(score_matrix: torch.Tensor, tau: float, *, outer_scale: bool = True) -> torch.Tensor:
    """Per-row contrastive losses for a (B, B) in-batch score matrix.

    Row i holds the scores of query i against every bottom in the batch;
    the diagonal entry is the positive.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    logits = score_matrix / tau
    loss = torch.logsumexp(logits, dim=1) - logits.diagonal()
    return loss / tau if outer_scale else loss


def reg_loss(parameters: Iterable[torch.Tensor]) -> torch.Tensor:
    """Unsquared L2 norm over all trainable parameters."""
    sq = None
    for p in parameters:
        term = p.square().sum()
        sq = term if sq is None else sq + term
    if sq is None:
        return torch.zeros(())
    return torch.sqrt(sq)


def total_loss(
    pos_scores: torch.Tensor,
    bpr_neg_scores: torch.Tensor,
    nce_score_matrix: Optional[torch.Tensor],
    weights: LossWeights,
    parameters: Iterable[torch.Tensor],
    *,
    nce_outer_scale: bool = True,
) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Weighted batch objective; returns (scalar loss, component values).

    Zero-weight components are skipped entirely, so the alpha=0 / beta=0
    ablations reduce exactly to the remaining terms.
    """
    weights.validate()
    zero = pos_scores.sum() * 0.0
    bpr = bpr_loss(pos_scores, bpr_neg_scores).mean() if weights.alpha > 0 else zero
    if weights.beta > 0:
        if nce_score_matrix is None:
            raise ValueError("beta > 0 requires an in-batch score matrix")
        nce = info_nce_matrix(nce_score_matrix, weights.tau, outer_scale=nce_outer_scale).mean()
    else:
        nce = zero
    reg = reg_loss(parameters) if weights.gamma > 0 else zero
    loss = weights.alpha * bpr + weights.beta * nce + weights.gamma * reg
    components = {"bpr": float(bpr.detach()), "nce": float(nce.detach()),
                  "reg": float(reg.detach())}
    return loss, components


class GecoCheckpoint:
    """Self-describing checkpoint for the compatibility model."""

    def __init__(self, payload: dict):
        if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {payload.get('format_version')!r}")
        if payload.get("kind") != "geco":
            raise ValueError(f"not a stage-2 checkpoint: kind={payload.get('kind')!r}")
        self.payload = payload

    @property
    def epoch(self) -> int:
        return self.payload["epoch"]

    @property
    def enc_cfg(self) -> EncoderConfig:
        return EncoderConfig(**self.payload["enc_cfg"])

    @property
    def weights(self) -> LossWeights:
        return LossWeights(**self.payload["loss_weights"])

    @property
    def image_size(self) -> int:
        return self.payload["image_size"]

    @property
    def train_params(self) -> dict:
        return self.payload["train_params"]

    def build_model(self) -> CompatibilityModel:
        model = CompatibilityModel(self.enc_cfg)
        model.load_state_dict(self.payload["model_state"])
        return model

    def save(self, path: str | Path) -> None:
        torch.save(self.payload, path)

    @classmethod
    def load(cls, path: str | Path) -> "GecoCheckpoint":
        return cls(torch.load(path, weights_only=True))


class TemplateStore:
    """Loads generated templates by seed top id, with a cache."""

    def __init__(self, index: Dict[str, Tuple[int, Path]], size: int):
        self.index = index
        self.size = size
        self._cache: Dict[str, ItemImage] = {}

    def get(self, top_id: str) -> ItemImage:
        if top_id in self._cache:
            return self._cache[top_id]
        if top_id not in self.index:
            raise MissingTemplateError(f"no template for top {top_id!r}")
        _, path = self.index[top_id]
        img = load_image(path, self.size, item_id=f"template:{top_id}", category="bottom")
        self._cache[top_id] = img
        return img


def _stack(images: Sequence[ItemImage], device: str) -> torch.Tensor:
    return torch.stack([torch.from_numpy(i.pixels) for i in images]).to(device)


def _quick_val_auc(
    model: CompatibilityModel,
    manifest: PairManifest,
    templates: TemplateStore,
    store: ImageStore,
    neg_of_pair: Dict[str, str],
    device: str,
) -> float:
    """AUC of val pairs against one fixed pre-sampled negative each."""
    pairs = manifest.pairs_of_split("val")
    if not pairs:
        return float("nan")
    model.eval()
    wins = 0.0
    with torch.no_grad():
        for p in pairs:
            top = _stack([store.get(p.top_id)], device)
            tmpl = _stack([templates.get(p.top_id)], device)
            cands = _stack([store.get(p.bottom_id), store.get(neg_of_pair[p.pair_id])], device)
            q = model.compose_query(model.encode(top), model.encode(tmpl))[0]
            embs = model.project_candidate(model.encode(cands))
            s_pos, s_neg = (embs @ q).tolist()
            if s_pos > s_neg:
                wins += 1.0
    model.train()
    return wins / len(pairs)


def train_geco(
    manifest: PairManifest,
    template_index: Dict[str, Tuple[int, Path]],
    enc_cfg: EncoderConfig,
    weights: LossWeights,
    *,
    epochs: int,
    lr: float,
    batch_size: int,
    rng_seed: int,
    out_dir: str | Path,
    image_size: int = 128,
    scheduler_step: int = 8,
    scheduler_factor: float = 0.1,
    nce_outer_scale: bool = True,
    device: str = "cpu",
) -> GecoCheckpoint:
    """Train the compatibility model on (top, template, bottom) triplets.

    The BPR negative is the explicitly sampled bottom of each triplet; the
    InfoNCE negatives are the other bottoms in the batch, with the positive
    kept in the denominator. The learning rate decays by scheduler_factor
    every scheduler_step epochs. Logs per-epoch loss components and a
    validation AUC. Requires a template for every training top.
    """
    enc_cfg.validate()
    weights.validate()
    train_pairs = manifest.pairs_of_split("train")
    if not train_pairs:
        raise ValueError("manifest has an empty train split")
    for p in train_pairs:
        if p.top_id not in template_index:
            raise MissingTemplateError(f"no template for top {p.top_id!r}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(stable_seed(rng_seed, "geco-init"))
    model = CompatibilityModel(enc_cfg).to(device)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=scheduler_step, gamma=scheduler_factor)

    store = ImageStore(manifest, image_size)
    templates = TemplateStore(template_index, image_size)
    # Fixed per-pair validation negatives so the logged AUC is comparable
    # across epochs.
    val_neg = {
        p.pair_id: sample_negative(manifest, p.top_id, stable_seed(rng_seed, "geco-val", p.pair_id))
        for p in manifest.pairs_of_split("val")
    } if manifest.pairs_of_split("val") else {}

    train_params = {
        "epochs": epochs, "lr": lr, "batch_size": batch_size, "rng_seed": rng_seed,
        "scheduler_step": scheduler_step, "scheduler_factor": scheduler_factor,
        "image_size": image_size, "nce_outer_scale": nce_outer_scale,
    }
    log_path = out_dir / "geco_train_log.csv"
    with open(log_path, "w", newline="", encoding="utf-8") as log_file:
        log = csv.writer(log_file)
        log.writerow(["epoch", "loss", "bpr", "nce", "reg", "val_auc", "lr", "wall_seconds"])
        for epoch in range(epochs):
            t0 = time.perf_counter()
            sums = {"loss": 0.0, "bpr": 0.0, "nce": 0.0, "reg": 0.0}
            n_batches = 0
            batches = batch_iter(
                manifest, "train", batch_size, shuffle=True,
                rng_seed=stable_seed(rng_seed, "geco-data", epoch),
                image_size=image_size, store=store,
            )
            for batch in batches:
                tops = _stack(batch.tops, device)
                tmpl = _stack([templates.get(t.item_id) for t in batch.tops], device)
                pos = _stack(batch.positive_bottoms, device)
                neg = _stack(batch.negative_bottoms, device)

                n = len(batch)
                feats = model.encode(torch.cat([tops, tmpl, pos, neg]))
                top_f, tmpl_f, pos_f, neg_f = feats.split(n)
                q = model.compose_query(top_f, tmpl_f)
                pos_emb = model.project_candidate(pos_f)
                neg_emb = model.project_candidate(neg_f)

                pos_scores = (q * pos_emb).sum(dim=1)
                neg_scores = (q * neg_emb).sum(dim=1)
                nce_matrix = q @ pos_emb.T if weights.beta > 0 else None

                opt.zero_grad()
                loss, comps = total_loss(
                    pos_scores, neg_scores, nce_matrix, weights,
                    model.parameters(), nce_outer_scale=nce_outer_scale,
                )
                loss.backward()
                opt.step()

                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {n_batches}: {loss.item()!r}"
                    )
                sums["loss"] += loss.item()
                for k in ("bpr", "nce", "reg"):
                    sums[k] += comps[k]
                n_batches += 1
            sched.step()
            val_auc = _quick_val_auc(model, manifest, templates, store, val_neg, device)
            log.writerow([
                epoch,
                f"{sums['loss'] / n_batches:.6f}",
                f"{sums['bpr'] / n_batches:.6f}",
                f"{sums['nce'] / n_batches:.6f}",
                f"{sums['reg'] / n_batches:.6f}",
                f"{val_auc:.6f}",
                f"{opt.param_groups[0]['lr']:.8f}",
                f"{time.perf_counter() - t0:.3f}",
            ])
            log_file.flush()

    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "geco",
        "enc_cfg": asdict(enc_cfg),
        "loss_weights": asdict(weights),
        "image_size": image_size,
        "model_state": model.state_dict(),
        "opt_state": opt.state_dict(),
        "sched_state": sched.state_dict(),
        "epoch": epochs,
        "train_params": train_params,
        "torch_rng_state": torch.get_rng_state(),
    }
    ckpt_path = out_dir / "geco.pt"
    torch.save(payload, ckpt_path)
    return GecoCheckpoint(torch.load(ckpt_path, weights_only=True))


def embed_candidates(
    model: CompatibilityModel,
    candidates: Sequence[ItemImage],
    *,
    batch_size: int = 64,
    device: str = "cpu",
) -> Tuple[List[str], np.ndarray]:
    """Project candidate bottoms into the candidate space, in input order."""
    model.eval()
    ids = [c.item_id for c in candidates]
    chunks = []
    with torch.no_grad():
        for start in range(0, len(candidates), batch_size):
            x = _stack(candidates[start:start + batch_size], device)
            chunks.append(model.project_candidate(model.encode(x)).cpu().numpy())
    vecs = np.concatenate(chunks) if chunks else np.zeros((0, model.embed_dim), dtype=np.float32)
    return ids, vecs.astype(np.float32)


def score_catalog(
    model: CompatibilityModel,
    top: ItemImage,
    template: ItemImage | Template,
    candidates: Sequence[ItemImage],
    *,
    precomputed: Optional[Tuple[List[str], np.ndarray]] = None,
    device: str = "cpu",
) -> List[Tuple[str, float]]:
    """Rank candidate bottoms for one (top, template) query.

    Returns (bottom_id, score) sorted by descending score, ties broken by
    ascending bottom_id. Candidate embeddings may be precomputed once via
    ``embed_candidates`` and reused across queries; both paths produce
    identical scores.
    """
    if len(candidates) == 0 and precomputed is None:
        raise ValueError("candidates must be nonempty")
    model.eval()
    with torch.no_grad():
        top_t = _stack([top], device)
        tmpl_img = template.pixels if isinstance(template, Template) else template.pixels
        tmpl_t = torch.from_numpy(tmpl_img).unsqueeze(0).to(device)
        q = model.compose_query(model.encode(top_t), model.encode(tmpl_t))[0].cpu().numpy()
    ids, vecs = precomputed if precomputed is not None else embed_candidates(model, candidates, device=device)
    scores = vecs @ q.astype(vecs.dtype)
    ranked = sorted(zip(ids, scores.tolist()), key=lambda kv: (-kv[1], kv[0]))
    return [(i, float(s)) for i, s in ranked]


def write_embedding_cache(
    path: str | Path, ids: Sequence[str], vectors: np.ndarray, checkpoint_hash: str
) -> None:
    """Binary candidate-embedding cache.

    Layout: magic, uint32 LE count, uint32 LE dim, uint16 LE hash length,
    hash bytes; then per record a uint16 LE id length, the UTF-8 id, and
    dim little-endian float32 values.
    """
    vectors = np.asarray(vectors, dtype="<f4")
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise ValueError("vectors must be (len(ids), dim)")
    hash_bytes = checkpoint_hash.encode("utf-8")
    with open(path, "wb") as f:
        f.write(_EMB_MAGIC)
        f.write(struct.pack("<II", len(ids), vectors.shape[1]))
        f.write(struct.pack("<H", len(hash_bytes)))
        f.write(hash_bytes)
        for item_id, vec in zip(ids, vectors):
            id_bytes = item_id.encode("utf-8")
            f.write(struct.pack("<H", len(id_bytes)))
            f.write(id_bytes)
            f.write(vec.tobytes())


def read_embedding_cache(path: str | Path) -> Tuple[List[str], np.ndarray, str]:
    with open(path, "rb") as f:
        magic = f.read(len(_EMB_MAGIC))
        if magic != _EMB_MAGIC:
            raise ValueError(f"{path}: not an embedding cache (magic {magic!r})")
        count, dim = struct.unpack("<II", f.read(8))
        (hash_len,) = struct.unpack("<H", f.read(2))
        ckpt_hash = f.read(hash_len).decode("utf-8")
        ids: List[str] = []
        vecs = np.empty((count, dim), dtype="<f4")
        for i in range(count):
            (id_len,) = struct.unpack("<H", f.read(2))
            ids.append(f.read(id_len).decode("utf-8"))
            vecs[i] = np.frombuffer(f.read(4 * dim), dtype="<f4")
    return ids, vecs, ckpt_hash


class GecoScorer:
    """Catalog scorer over a manifest, for the evaluation protocols.

    Candidate embeddings are computed on first use and cached; each top's
    query embedding is cached as well.
    """

    def __init__(
        self,
        model: CompatibilityModel,
        manifest: PairManifest,
        template_index: Dict[str, Tuple[int, Path]],
        image_size: int,
        device: str = "cpu",
    ):
        self.model = model.eval()
        self.manifest = manifest
        self.store = ImageStore(manifest, image_size)
        self.templates = TemplateStore(template_index, image_size)
        self.device = device
        self._query_cache: Dict[str, np.ndarray] = {}
        self._emb_cache: Dict[str, np.ndarray] = {}

    def _query(self, top_id: str) -> np.ndarray:
        if top_id not in self._query_cache:
            with torch.no_grad():
                top = _stack([self.store.get(top_id)], self.device)
                tmpl = _stack([self.templates.get(top_id)], self.device)
                q = self.model.compose_query(self.model.encode(top), self.model.encode(tmpl))
            self._query_cache[top_id] = q[0].cpu().numpy()
        return self._query_cache[top_id]

    def _embeddings(self, bottom_ids: Sequence[str]) -> np.ndarray:
        missing = [b for b in bottom_ids if b not in self._emb_cache]
        if missing:
            ids, vecs = embed_candidates(
                self.model, [self.store.get(b) for b in missing], device=self.device
            )
            self._emb_cache.update(dict(zip(ids, vecs)))
        return np.stack([self._emb_cache[b] for b in bottom_ids])

    def scores(self, top_id: str, bottom_ids: Sequence[str]) -> np.ndarray:
        q = self._query(top_id)
        return (self._embeddings(bottom_ids) @ q).astype(np.float64)
