"""Stage 1: the complementary item generation model.

A skip-connected encoder-decoder generator translates a top image into a
bottom "template". A Gaussian noise vector is broadcast over the bottleneck's
spatial extent and concatenated channel-wise before the first decoder stage,
which keeps the generation stochastic and the sampled templates diverse. A
patch discriminator judges (top, bottom) pairs as a c x c grid of real/fake
probabilities rather than a single scalar.

Training alternates one discriminator step and one generator step per batch
with the real->1 / fake->0 label convention. The generator objective is the
adversarial term plus an L1 term against the ground-truth bottom, weighted
by ``l1_weight``.

Training mutates parameters from exactly one loop (single writer); inference
is read-only over parameters and safe to parallelize across inputs.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import ImageStore, ItemImage, PairManifest, batch_iter
from .util import stable_hash64, stable_seed

CHANNEL_CAP = 512
CHECKPOINT_FORMAT_VERSION = 1
_LOG_TINY = 1e-12


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite during training."""


@dataclass
class GeneratorConfig:
    image_size: int = 128
    depth: int = 7
    base_channels: int = 64
    noise_dim: int = 64

    def validate(self) -> None:
        if self.noise_dim < 1:
            raise ValueError("noise_dim must be >= 1")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        stride = 2 ** self.depth
        if self.image_size % stride != 0 or self.image_size // stride < 1:
            raise ValueError(
                f"image_size {self.image_size} must be a multiple of 2^depth={stride} "
                "with a bottleneck extent of at least 1"
            )

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // 2 ** self.depth


@dataclass
class DiscriminatorConfig:
    base_channels: int = 64
    n_down: int = 3  # stride-2 stages; two stride-1 convs follow

    def validate(self, image_size: int) -> None:
        if self.n_down < 1:
            raise ValueError("n_down must be >= 1")
        if self.patch_extent(image_size) < 1:
            raise ValueError(
                f"image_size {image_size} too small for n_down={self.n_down}"
            )

    def patch_extent(self, image_size: int) -> int:
        """Spatial extent c of the output patch grid (14 for 128 inputs)."""
        return image_size // 2 ** self.n_down - 2


def _init_conv_weights(module: nn.Module) -> None:
    # Normal(0, 0.02) init, the usual convention for this family of GANs.
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class UnetGenerator(nn.Module):
    """Encoder-decoder with skip connections and bottleneck noise injection."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = [min(cfg.base_channels * 2 ** i, CHANNEL_CAP) for i in range(cfg.depth)]
        self.enc = nn.ModuleList()
        for i in range(cfg.depth):
            in_ch = 3 if i == 0 else ch[i - 1]
            layers: List[nn.Module] = [nn.Conv2d(in_ch, ch[i], 4, 2, 1)]
            if i < cfg.depth - 1:  # bottleneck conv stays un-normalized
                layers.append(nn.InstanceNorm2d(ch[i]))
            layers.append(nn.LeakyReLU(0.2))
            self.enc.append(nn.Sequential(*layers))

        self.dec = nn.ModuleList()
        for j in range(cfg.depth):
            if j == 0:
                in_ch = ch[-1] + cfg.noise_dim
            else:
                in_ch = 2 * ch[cfg.depth - 1 - j]
            if j < cfg.depth - 1:
                out_ch = ch[cfg.depth - 2 - j]
                layers = [nn.ConvTranspose2d(in_ch, out_ch, 4, 2, 1)]
                if j > 0:  # both bottleneck-adjacent convs stay un-normalized
                    layers.append(nn.InstanceNorm2d(out_ch))
                layers.append(nn.ReLU())
                self.dec.append(nn.Sequential(*layers))
            else:
                self.dec.append(nn.Sequential(
                    nn.ConvTranspose2d(in_ch, 3, 4, 2, 1),
                    nn.Tanh(),
                ))
        _init_conv_weights(self)

    def forward(
        self,
        x: torch.Tensor,
        noise: torch.Tensor,
        skip_gains: Optional[Sequence[float]] = None,
    ) -> torch.Tensor:
        """Translate (B, 3, S, S) tops into (B, 3, S, S) templates.

        ``noise`` is (B, noise_dim). ``skip_gains`` optionally scales the
        skip tensor of each encoder level 0..depth-2 (diagnostics only).
        """
        cfg = self.cfg
        if x.shape[1:] != (3, cfg.image_size, cfg.image_size):
            raise ValueError(f"expected (B, 3, {cfg.image_size}, {cfg.image_size}), got {tuple(x.shape)}")
        if noise.shape != (x.shape[0], cfg.noise_dim):
            raise ValueError(f"expected noise (B, {cfg.noise_dim}), got {tuple(noise.shape)}")
        feats = []
        h = x
        for block in self.enc:
            h = block(h)
            feats.append(h)
        zmap = noise.view(*noise.shape, 1, 1).expand(-1, -1, h.shape[2], h.shape[3])
        h = torch.cat([h, zmap], dim=1)
        for j, block in enumerate(self.dec):
            if j > 0:
                skip = feats[cfg.depth - 1 - j]
                if skip_gains is not None:
                    skip = skip * skip_gains[cfg.depth - 1 - j]
                h = torch.cat([h, skip], dim=1)
            h = block(h)
        return h


class PatchDiscriminator(nn.Module):
    """Judges channel-concatenated (top, bottom) pairs as a c x c patch grid."""

    def __init__(self, cfg: DiscriminatorConfig, image_size: int):
        super().__init__()
        cfg.validate(image_size)
        self.cfg = cfg
        self.image_size = image_size
        b = cfg.base_channels
        layers: List[nn.Module] = [nn.Conv2d(6, b, 4, 2, 1), nn.LeakyReLU(0.2)]
        ch = b
        for i in range(1, cfg.n_down):
            nxt = min(b * 2 ** i, CHANNEL_CAP)
            layers += [nn.Conv2d(ch, nxt, 4, 2, 1), nn.InstanceNorm2d(nxt), nn.LeakyReLU(0.2)]
            ch = nxt
        nxt = min(b * 2 ** cfg.n_down, CHANNEL_CAP)
        layers += [nn.Conv2d(ch, nxt, 4, 1, 1), nn.InstanceNorm2d(nxt), nn.LeakyReLU(0.2)]
        layers += [nn.Conv2d(nxt, 1, 4, 1, 1), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)
        _init_conv_weights(self)

    def forward(self, top: torch.Tensor, bottom: torch.Tensor) -> torch.Tensor:
        if top.shape != bottom.shape or top.shape[1] != 3:
            raise ValueError(f"expected matching (B, 3, S, S) inputs, got {tuple(top.shape)} and {tuple(bottom.shape)}")
        if top.shape[2] != self.image_size:
            raise ValueError(f"expected image size {self.image_size}, got {top.shape[2]}")
        return self.net(torch.cat([top, bottom], dim=1)).squeeze(1)


def _check_finite(name: str, *tensors: torch.Tensor) -> None:
    # Best-effort guard: under functional transforms (vmap etc.) the bool
    # conversion is data-dependent control flow, so the check is skipped.
    try:
        ok = all(bool(torch.isfinite(t).all()) for t in tensors)
    except RuntimeError:
        return
    if not ok:
        raise ValueError(f"non-finite input to {name}")


def generator_loss(
    d_fake: torch.Tensor,
    template: torch.Tensor,
    target: torch.Tensor,
    l1_weight: float,
) -> torch.Tensor:
    """-mean(log D(fake)) + l1_weight * mean(|template - target|).

    The log mean runs over every patch cell, the L1 mean over every pixel
    and channel.
    """
    if l1_weight < 0:
        raise ValueError("l1_weight must be >= 0")
    _check_finite("generator_loss", d_fake, template, target)
    adv = -torch.log(d_fake.clamp_min(_LOG_TINY)).mean()
    return adv + l1_weight * (template - target).abs().mean()


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """-mean(log D(real)) - mean(log(1 - D(fake)))."""
    if d_real.shape != d_fake.shape:
        raise ValueError("patch grids must have the same shape")
    _check_finite("discriminator_loss", d_real, d_fake)
    real_term = -torch.log(d_real.clamp_min(_LOG_TINY)).mean()
    fake_term = -torch.log((1.0 - d_fake).clamp_min(_LOG_TINY)).mean()
    return real_term + fake_term


@dataclass
class Template:
    """A generated bottom image tied to its seed top and noise seed."""

    seed_top_id: str
    noise_seed: int
    pixels: np.ndarray  # float32, (3, S, S), values in [-1, 1]


def _to_tensor(img: ItemImage) -> torch.Tensor:
    return torch.from_numpy(img.pixels)


def generator_forward(gen: UnetGenerator, top: ItemImage, noise: np.ndarray) -> Template:
    """Single-item wrapper around the generator; deterministic in its inputs."""
    if not np.isfinite(noise).all():
        raise ValueError("noise must be finite")
    gen.eval()
    with torch.no_grad():
        z = torch.as_tensor(noise, dtype=torch.float32).reshape(1, -1)
        out = gen(_to_tensor(top).unsqueeze(0), z)[0]
    return Template(seed_top_id=top.item_id, noise_seed=-1, pixels=out.numpy())


def discriminator_forward(disc: PatchDiscriminator, top: ItemImage, bottom: ItemImage | Template) -> np.ndarray:
    """Single-pair wrapper; returns the (c, c) patch grid as float32."""
    disc.eval()
    with torch.no_grad():
        b = torch.from_numpy(bottom.pixels).unsqueeze(0)
        grid = disc(_to_tensor(top).unsqueeze(0), b)[0]
    return grid.numpy()


class CigmCheckpoint:
    """Self-describing checkpoint for the stage-1 model pair."""

    def __init__(self, payload: dict):
        if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {payload.get('format_version')!r}")
        if payload.get("kind") != "cigm":
            raise ValueError(f"not a stage-1 checkpoint: kind={payload.get('kind')!r}")
        self.payload = payload

    @property
    def epoch(self) -> int:
        return self.payload["epoch"]

    @property
    def gen_cfg(self) -> GeneratorConfig:
        return GeneratorConfig(**self.payload["gen_cfg"])

    @property
    def disc_cfg(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(**self.payload["disc_cfg"])

    @property
    def train_params(self) -> dict:
        return self.payload["train_params"]

    def build_generator(self) -> UnetGenerator:
        gen = UnetGenerator(self.gen_cfg)
        gen.load_state_dict(self.payload["generator_state"])
        return gen

    def build_discriminator(self) -> PatchDiscriminator:
        disc = PatchDiscriminator(self.disc_cfg, self.gen_cfg.image_size)
        disc.load_state_dict(self.payload["discriminator_state"])
        return disc

    def save(self, path: str | Path) -> None:
        torch.save(self.payload, path)

    @classmethod
    def load(cls, path: str | Path) -> "CigmCheckpoint":
        return cls(torch.load(path, weights_only=True))


def _checkpoint_payload(gen, disc, g_opt, d_opt, epoch, gen_cfg, disc_cfg, train_params) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "cigm",
        "gen_cfg": asdict(gen_cfg),
        "disc_cfg": asdict(disc_cfg),
        "generator_state": gen.state_dict(),
        "discriminator_state": disc.state_dict(),
        "g_opt_state": g_opt.state_dict(),
        "d_opt_state": d_opt.state_dict(),
        "epoch": epoch,
        "train_params": dict(train_params),
        "torch_rng_state": torch.get_rng_state(),
    }


def train_cigm(
    manifest: PairManifest,
    gen_cfg: GeneratorConfig,
    disc_cfg: DiscriminatorConfig,
    *,
    epochs: int,
    lr: float,
    batch_size: int,
    l1_weight: float,
    rng_seed: int,
    out_dir: str | Path,
    save_every: int = 0,
    device: str = "cpu",
) -> CigmCheckpoint:
    """Adversarial training loop over the train split.

    One discriminator step then one generator step per batch. Writes a
    per-epoch CSV log (epoch, g_loss, d_loss, mean_l1, wall_seconds) and a
    checkpoint at the end (plus every ``save_every`` epochs when > 0).
    Aborts with TrainingDivergedError if any loss goes non-finite.
    """
    gen_cfg.validate()
    disc_cfg.validate(gen_cfg.image_size)
    if not manifest.pairs_of_split("train"):
        raise ValueError("manifest has an empty train split")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(stable_seed(rng_seed, "cigm-init"))
    gen = UnetGenerator(gen_cfg).to(device)
    disc = PatchDiscriminator(disc_cfg, gen_cfg.image_size).to(device)
    g_opt = torch.optim.Adam(gen.parameters(), lr=lr, betas=(0.5, 0.999))
    d_opt = torch.optim.Adam(disc.parameters(), lr=lr, betas=(0.5, 0.999))
    noise_gen = torch.Generator(device="cpu").manual_seed(stable_seed(rng_seed, "cigm-noise"))

    train_params = {
        "epochs": epochs, "lr": lr, "batch_size": batch_size,
        "l1_weight": l1_weight, "rng_seed": rng_seed,
    }
    store = ImageStore(manifest, gen_cfg.image_size)
    log_path = out_dir / "cigm_train_log.csv"
    ckpt_path = out_dir / "cigm.pt"

    with open(log_path, "w", newline="", encoding="utf-8") as log_file:
        log = csv.writer(log_file)
        log.writerow(["epoch", "g_loss", "d_loss", "mean_l1", "wall_seconds"])
        for epoch in range(epochs):
            t0 = time.perf_counter()
            g_sum = d_sum = l1_sum = 0.0
            n_batches = 0
            batches = batch_iter(
                manifest, "train", batch_size, shuffle=True,
                rng_seed=stable_seed(rng_seed, "cigm-data", epoch),
                image_size=gen_cfg.image_size, store=store,
            )
            for batch in batches:
                tops = torch.stack([_to_tensor(i) for i in batch.tops]).to(device)
                gts = torch.stack([_to_tensor(i) for i in batch.positive_bottoms]).to(device)
                z = torch.randn(len(batch), gen_cfg.noise_dim, generator=noise_gen).to(device)

                fake = gen(tops, z)
                d_opt.zero_grad()
                d_loss = discriminator_loss(disc(tops, gts), disc(tops, fake.detach()))
                d_loss.backward()
                d_opt.step()

                g_opt.zero_grad()
                g_loss = generator_loss(disc(tops, fake), fake, gts, l1_weight)
                g_loss.backward()
                g_opt.step()

                if not (torch.isfinite(g_loss) and torch.isfinite(d_loss)):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {n_batches}: "
                        f"g={g_loss.item()!r} d={d_loss.item()!r}"
                    )
                with torch.no_grad():
                    l1 = (fake - gts).abs().mean().item()
                g_sum += g_loss.item()
                d_sum += d_loss.item()
                l1_sum += l1
                n_batches += 1
            log.writerow([
                epoch,
                f"{g_sum / n_batches:.6f}",
                f"{d_sum / n_batches:.6f}",
                f"{l1_sum / n_batches:.6f}",
                f"{time.perf_counter() - t0:.3f}",
            ])
            log_file.flush()
            if save_every > 0 and (epoch + 1) % save_every == 0:
                payload = _checkpoint_payload(gen, disc, g_opt, d_opt, epoch + 1,
                                              gen_cfg, disc_cfg, train_params)
                torch.save(payload, out_dir / f"cigm_epoch{epoch + 1:04d}.pt")

    payload = _checkpoint_payload(gen, disc, g_opt, d_opt, epochs, gen_cfg, disc_cfg, train_params)
    torch.save(payload, ckpt_path)
    return CigmCheckpoint(torch.load(ckpt_path, weights_only=True))


def noise_for_top(top_id: str, noise_seed: int, noise_dim: int) -> np.ndarray:
    """Per-top standard-normal noise, independent of generation order."""
    rng = np.random.default_rng([noise_seed & 0x7FFF_FFFF_FFFF_FFFF, stable_hash64(top_id)])
    return rng.standard_normal(noise_dim).astype(np.float32)


def template_to_png(pixels: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    arr = np.clip((pixels.transpose(1, 2, 0) + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def generate_templates(
    ckpt: CigmCheckpoint,
    tops: List[ItemImage],
    noise_seed: int,
    out_dir: str | Path,
    *,
    batch_size: int = 32,
) -> List[Template]:
    """Generate one template per top and write PNGs plus an index file.

    The noise for each top is derived from (noise_seed, top_id), so the
    result does not depend on the order or batching of ``tops``. The index
    is a CSV with columns seed_top_id, noise_seed, template_path.
    """
    out_dir = Path(out_dir)
    tmpl_dir = out_dir / "templates"
    tmpl_dir.mkdir(parents=True, exist_ok=True)
    gen = ckpt.build_generator()
    gen.eval()
    cfg = ckpt.gen_cfg

    templates: List[Template] = []
    with torch.no_grad():
        for start in range(0, len(tops), batch_size):
            chunk = tops[start:start + batch_size]
            for t in chunk:
                if t.pixels.shape != (3, cfg.image_size, cfg.image_size):
                    raise ValueError(
                        f"top {t.item_id!r} has shape {t.pixels.shape}, "
                        f"checkpoint expects (3, {cfg.image_size}, {cfg.image_size})"
                    )
            x = torch.stack([_to_tensor(t) for t in chunk])
            z = torch.from_numpy(np.stack([
                noise_for_top(t.item_id, noise_seed, cfg.noise_dim) for t in chunk
            ]))
            out = gen(x, z)
            for t, pix in zip(chunk, out):
                templates.append(Template(seed_top_id=t.item_id, noise_seed=noise_seed,
                                          pixels=pix.numpy()))

    index_path = out_dir / "template_index.csv"
    with open(index_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["seed_top_id", "noise_seed", "template_path"])
        for tmpl in templates:
            rel = f"templates/{tmpl.seed_top_id}.png"
            template_to_png(tmpl.pixels, out_dir / rel)
            writer.writerow([tmpl.seed_top_id, tmpl.noise_seed, rel])
    return templates


def load_template_index(path: str | Path) -> dict:
    """Read a template index; returns {seed_top_id: (noise_seed, abs_path)}."""
    path = Path(path)
    index = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["seed_top_id", "noise_seed", "template_path"]:
            raise ValueError(f"{path}: bad template index header {header!r}")
        for row in reader:
            if not row:
                continue
            top_id, seed, rel = row
            index[top_id] = (int(seed), path.parent / rel)
    return index
