"""Shared test utilities: in-memory manifests, metric oracles, and a
vectorized finite-difference gradient checker."""

from __future__ import annotations

from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import torch
from torch.func import functional_call, vmap

from geco.data import ItemImage, PairManifest, PairRecord, ItemRecord


def make_id_manifest(
    n_pairs: int,
    n_bottoms: int,
    split: str = "test",
    n_tops: int | None = None,
) -> PairManifest:
    """Build an images-free manifest for scorers that only need ids.

    Pair i joins top i (mod n_tops) with bottom i (mod n_bottoms); duplicate
    (top, bottom) combinations are skipped by offsetting the bottom index,
    so the pair count is exact.
    """
    n_tops = n_tops if n_tops is not None else n_pairs
    items: Dict[str, ItemRecord] = {}
    pairs: List[PairRecord] = []
    seen = set()
    bump = 0
    for i in range(n_pairs):
        top = f"t{i % n_tops:06d}"
        b_idx = i % n_bottoms
        while (top, f"b{b_idx:06d}") in seen:
            bump += 1
            b_idx = (b_idx + bump) % n_bottoms
        bottom = f"b{b_idx:06d}"
        seen.add((top, bottom))
        items.setdefault(top, ItemRecord(top, "top", f"{top}.png"))
        items.setdefault(bottom, ItemRecord(bottom, "bottom", f"{bottom}.png"))
        pairs.append(PairRecord(f"p{i:06d}", top, bottom, split))
    from pathlib import Path

    return PairManifest(pairs=tuple(pairs), items=items, root=Path("/nonexistent"))


def solid_image(item_id: str, category: str, size: int, value: float | Tuple[float, float, float]) -> ItemImage:
    if isinstance(value, tuple):
        px = np.empty((3, size, size), dtype=np.float32)
        for c, v in enumerate(value):
            px[c] = v
    else:
        px = np.full((3, size, size), value, dtype=np.float32)
    return ItemImage(item_id=item_id, category=category, pixels=px)


# ---------------------------------------------------------------------------
# Brute-force metric oracles (independent of the library implementation:
# explicit loops and comparison counting, no sorting).
# ---------------------------------------------------------------------------

def oracle_auc(queries) -> float:
    wins = 0
    total = 0
    for q in queries:
        pos_score = None
        for cid, s in q.candidates:
            if cid == q.positive_bottom_id:
                pos_score = s
        for cid, s in q.candidates:
            if cid == q.positive_bottom_id:
                continue
            if pos_score > s:
                wins += 1
            total += 1
    return wins / total


def oracle_mrr(queries) -> float:
    recips = []
    for q in queries:
        pos_score = None
        for cid, s in q.candidates:
            if cid == q.positive_bottom_id:
                pos_score = s
        rank = 0
        for cid, s in q.candidates:
            if cid == q.positive_bottom_id:
                continue
            if s > pos_score or (s == pos_score and cid < q.positive_bottom_id):
                rank += 1
        recips.append(1.0 / (rank + 1))
    return float(np.mean(recips))


# ---------------------------------------------------------------------------
# Gradient checking: autograd vs central finite differences over every
# parameter coordinate, vectorized with torch.func.vmap.
# ---------------------------------------------------------------------------

def flatten_params(module: torch.nn.Module) -> Tuple[List[Tuple[str, torch.Size, int]], torch.Tensor]:
    shapes = [(n, p.shape, p.numel()) for n, p in module.named_parameters()]
    flat = torch.cat([p.detach().reshape(-1) for _, p in module.named_parameters()])
    return shapes, flat


def unflatten_params(shapes, flat: torch.Tensor) -> Dict[str, torch.Tensor]:
    out = {}
    i = 0
    for name, shape, numel in shapes:
        out[name] = flat[i:i + numel].reshape(shape)
        i += numel
    return out


def autograd_gradient(
    module: torch.nn.Module,
    shapes,
    flat: torch.Tensor,
    loss_of_params: Callable[[Dict[str, torch.Tensor]], torch.Tensor],
) -> torch.Tensor:
    flat = flat.clone().requires_grad_(True)
    loss = loss_of_params(unflatten_params(shapes, flat))
    (grad,) = torch.autograd.grad(loss, flat)
    return grad.detach()


def fd_gradient(
    shapes,
    flat: torch.Tensor,
    loss_of_params: Callable[[Dict[str, torch.Tensor]], torch.Tensor],
    h: float = 1e-3,
    chunk: int = 128,
) -> torch.Tensor:
    """Central finite differences, (f(x+h e_i) - f(x-h e_i)) / 2h for all i."""

    def loss_of_flat(v: torch.Tensor) -> torch.Tensor:
        return loss_of_params(unflatten_params(shapes, v))

    n = flat.numel()
    batched = vmap(loss_of_flat)
    grads = torch.empty(n, dtype=flat.dtype)
    with torch.no_grad():
        for start in range(0, n, chunk):
            idx = torch.arange(start, min(start + chunk, n))
            base = flat.unsqueeze(0).repeat(len(idx), 1)
            plus = base.clone()
            plus[torch.arange(len(idx)), idx] += h
            minus = base
            minus[torch.arange(len(idx)), idx] -= h
            grads[idx] = (batched(plus) - batched(minus)) / (2.0 * h)
    return grads


class PreactRecorder:
    """Captures the inputs of every piecewise-linear activation in a model.

    The sign pattern of those pre-activations (plus any extra kink terms the
    loss contributes, such as the argument of an L1 norm) certifies that a
    finite-difference interval stayed inside one smooth piece of the loss.
    Central differences are only a gradient estimator on such intervals; a
    coordinate whose +h/-h evaluations show any sign flip is excluded from
    the comparison rather than counted as a gradient mismatch.
    """

    def __init__(self, *modules: torch.nn.Module):
        self.tensors: List[torch.Tensor] = []
        for module in modules:
            for m in module.modules():
                if isinstance(m, (torch.nn.ReLU, torch.nn.LeakyReLU)):
                    m.register_forward_pre_hook(self._hook)

    def _hook(self, module, inputs):
        self.tensors.append(inputs[0])

    def reset(self) -> None:
        self.tensors = []

    def certificate(self, *extra: torch.Tensor) -> torch.Tensor:
        parts = [t.reshape(-1) for t in self.tensors]
        parts += [t.reshape(-1) for t in extra]
        return torch.sign(torch.cat(parts))


def fd_gradient_certified(
    shapes,
    flat: torch.Tensor,
    loss_and_cert_of_params: Callable[[Dict[str, torch.Tensor]], Tuple[torch.Tensor, torch.Tensor]],
    h: float = 1e-3,
    chunk: int = 128,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Central FD plus a per-coordinate smoothness certificate.

    Returns (grads, valid_mask); valid_mask[i] is True when no activation
    sign differs between the -h, 0, and +h evaluations of coordinate i,
    i.e. the difference quotient stayed within one smooth piece.
    """

    def of_flat(v: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return loss_and_cert_of_params(unflatten_params(shapes, v))

    n = flat.numel()
    batched = vmap(of_flat)
    grads = torch.empty(n, dtype=flat.dtype)
    valid = torch.empty(n, dtype=torch.bool)
    with torch.no_grad():
        _, cert_center = of_flat(flat)
        cert_center = cert_center.unsqueeze(0)
        for start in range(0, n, chunk):
            idx = torch.arange(start, min(start + chunk, n))
            rows = torch.arange(len(idx))
            base = flat.unsqueeze(0).repeat(len(idx), 1)
            plus = base.clone()
            plus[rows, idx] += h
            minus = base
            minus[rows, idx] -= h
            loss_p, cert_p = batched(plus)
            loss_m, cert_m = batched(minus)
            grads[idx] = (loss_p - loss_m) / (2.0 * h)
            valid[idx] = ((cert_p == cert_center) & (cert_m == cert_center)).all(dim=1)
    return grads, valid


def fd_gradient_richardson(
    shapes,
    flat: torch.Tensor,
    loss_and_cert_of_params: Callable[[Dict[str, torch.Tensor]], Tuple[torch.Tensor, torch.Tensor]],
    h: float = 1e-3,
    chunk: int = 128,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Richardson-extrapolated central differences with kink certification.

    Combines central differences at the base step h and at h/2 as
    (4*FD(h/2) - FD(h)) / 3, cancelling the quadratic truncation term that
    the normalization layers' curvature makes significant at h = 1e-3.
    A coordinate is valid only when both stencils stayed inside one smooth
    piece of the loss.
    """
    g_h, valid_h = fd_gradient_certified(shapes, flat, loss_and_cert_of_params, h=h, chunk=chunk)
    g_h2, valid_h2 = fd_gradient_certified(shapes, flat, loss_and_cert_of_params, h=h / 2, chunk=chunk)
    return (4.0 * g_h2 - g_h) / 3.0, valid_h & valid_h2


def max_rel_error(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor | None = None) -> float:
    """Largest deviation relative to the overall gradient magnitude."""
    if mask is not None:
        a = a[mask]
        b = b[mask]
    scale = max(a.abs().max().item(), b.abs().max().item(), 1e-12)
    return ((a - b).abs().max() / scale).item()
