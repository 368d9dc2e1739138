"""Reference scorers: RANDOM and a visual-only siamese BPR baseline.

The RANDOM scorer assigns each (top, bottom) pair a uniform deviate from a
stable hash of the ids, so it never looks at pixels and is reproducible
across processes. The siamese baseline embeds tops and bottoms with one
shared encoder into a common 128-d space and trains with the pairwise
ranking loss only.
"""

from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .cigm import TrainingDivergedError
from .compat import (
    CHECKPOINT_FORMAT_VERSION,
    EMBED_DIM,
    EncoderConfig,
    ProjectionHead,
    build_encoder,
    bpr_loss,
)
from .data import ImageStore, ItemImage, PairManifest, batch_iter
from .util import stable_seed


@dataclass
class RandomScorer:
    """Pixel-free scorer: stable hash of (seed, top_id, bottom_id) -> [0, 1)."""

    rng_seed: int = 0

    def score(self, top_id: str, bottom_id: str) -> float:
        material = f"{self.rng_seed}|{top_id}|{bottom_id}".encode("utf-8")
        digest = hashlib.sha256(material).digest()
        return int.from_bytes(digest[:8], "little") / 2.0 ** 64

    def scores(self, top_id: str, bottom_ids: Sequence[str]) -> np.ndarray:
        return np.array([self.score(top_id, b) for b in bottom_ids], dtype=np.float64)


@dataclass
class SiameseBprConfig:
    encoder: EncoderConfig
    embed_dim: int = EMBED_DIM
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 8


class SiameseModel(nn.Module):
    """One shared encoder and projection head for both tops and bottoms."""

    def __init__(self, enc_cfg: EncoderConfig, embed_dim: int = EMBED_DIM):
        super().__init__()
        self.enc_cfg = enc_cfg
        self.embed_dim = embed_dim
        self.encoder = build_encoder(enc_cfg)
        self.head = ProjectionHead(512, embed_dim)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(images))


def siamese_score(model: SiameseModel, top: ItemImage, bottom: ItemImage) -> float:
    model.eval()
    with torch.no_grad():
        x = torch.stack([torch.from_numpy(top.pixels), torch.from_numpy(bottom.pixels)])
        t_emb, b_emb = model.embed(x)
    return float(torch.dot(t_emb, b_emb))


def train_siamese_bpr(
    manifest: PairManifest,
    cfg: SiameseBprConfig,
    *,
    rng_seed: int,
    out_dir: str | Path | None = None,
    image_size: int = 128,
    device: str = "cpu",
) -> "SiameseCheckpoint":
    """BPR-only training of the siamese baseline on the train split."""
    cfg.encoder.validate()
    if not manifest.pairs_of_split("train"):
        raise ValueError("manifest has an empty train split")
    torch.manual_seed(stable_seed(rng_seed, "siamese-init"))
    model = SiameseModel(cfg.encoder, cfg.embed_dim).to(device)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    store = ImageStore(manifest, image_size)

    log_rows = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total = 0.0
        n_batches = 0
        batches = batch_iter(
            manifest, "train", cfg.batch_size, shuffle=True,
            rng_seed=stable_seed(rng_seed, "siamese-data", epoch),
            image_size=image_size, store=store,
        )
        for batch in batches:
            tops = torch.stack([torch.from_numpy(i.pixels) for i in batch.tops]).to(device)
            pos = torch.stack([torch.from_numpy(i.pixels) for i in batch.positive_bottoms]).to(device)
            neg = torch.stack([torch.from_numpy(i.pixels) for i in batch.negative_bottoms]).to(device)
            n = len(batch)
            embs = model.embed(torch.cat([tops, pos, neg]))
            t_emb, p_emb, n_emb = embs.split(n)
            loss = bpr_loss((t_emb * p_emb).sum(1), (t_emb * n_emb).sum(1)).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}: {loss.item()!r}"
                )
            total += loss.item()
            n_batches += 1
        log_rows.append((epoch, total / n_batches, time.perf_counter() - t0))

    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "siamese_bpr",
        "enc_cfg": asdict(cfg.encoder),
        "embed_dim": cfg.embed_dim,
        "image_size": image_size,
        "model_state": model.state_dict(),
        "opt_state": opt.state_dict(),
        "epoch": cfg.epochs,
        "train_params": {"epochs": cfg.epochs, "lr": cfg.lr,
                         "batch_size": cfg.batch_size, "rng_seed": rng_seed},
        "torch_rng_state": torch.get_rng_state(),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        torch.save(payload, out_dir / "siamese.pt")
        with open(out_dir / "siamese_train_log.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "bpr_loss", "wall_seconds"])
            for epoch, loss, wall in log_rows:
                w.writerow([epoch, f"{loss:.6f}", f"{wall:.3f}"])
    return SiameseCheckpoint(payload)


class SiameseCheckpoint:
    def __init__(self, payload: dict):
        if payload.get("kind") != "siamese_bpr":
            raise ValueError(f"not a siamese checkpoint: kind={payload.get('kind')!r}")
        self.payload = payload

    @property
    def image_size(self) -> int:
        return self.payload["image_size"]

    def build_model(self) -> SiameseModel:
        model = SiameseModel(EncoderConfig(**self.payload["enc_cfg"]), self.payload["embed_dim"])
        model.load_state_dict(self.payload["model_state"])
        return model

    def save(self, path: str | Path) -> None:
        torch.save(self.payload, path)

    @classmethod
    def load(cls, path: str | Path) -> "SiameseCheckpoint":
        return cls(torch.load(path, weights_only=True))


class SiameseScorer:
    """Catalog scorer over a manifest for the siamese baseline."""

    def __init__(self, model: SiameseModel, manifest: PairManifest, image_size: int,
                 device: str = "cpu"):
        self.model = model.eval()
        self.store = ImageStore(manifest, image_size)
        self.device = device
        self._emb_cache: Dict[str, np.ndarray] = {}

    def _embed(self, item_ids: Sequence[str]) -> np.ndarray:
        missing = [i for i in item_ids if i not in self._emb_cache]
        if missing:
            with torch.no_grad():
                for start in range(0, len(missing), 64):
                    chunk = missing[start:start + 64]
                    x = torch.stack([
                        torch.from_numpy(self.store.get(i).pixels) for i in chunk
                    ]).to(self.device)
                    vecs = self.model.embed(x).cpu().numpy()
                    self._emb_cache.update(dict(zip(chunk, vecs)))
        return np.stack([self._emb_cache[i] for i in item_ids])

    def scores(self, top_id: str, bottom_ids: Sequence[str]) -> np.ndarray:
        t = self._embed([top_id])[0]
        return (self._embed(bottom_ids) @ t).astype(np.float64)
