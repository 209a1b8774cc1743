"""Auxiliary segmentation-map adversarial loss wired into the baseline step.

A frozen segmentation backend maps images to per-pixel class probabilities;
extra patch discriminators judge those maps (full multi-class, collapsed
foreground/background, or both). The generator earns an additional
least-squares term for making the segmentation of its output look real,
while the backend itself only ever routes gradients, never learns.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import (
    BINARY,
    MULTICLASS,
    TrainConfig,
    VariantConfig,
    active_discriminators,
    total_objective,
)
from .gan import BaselineStepResult, BaselineTrainer, NetworkBundle, _ensure_finite, adversarial_loss
from .segmentation import BackendInferenceError, FgBgPartition, collapse_binary, resize_map
from .util import grad_norm, set_requires_grad


@dataclass
class StepReport:
    """Everything one training step exposes to logging and tests."""
    l_g: float
    l_b: float
    l_m: float
    total: float
    losses: dict[str, float]
    grad_norms: dict[str, float]
    disc_updates: dict[str, int]   # cumulative per-discriminator step counts


def _run_backend(seg: nn.Module, images: torch.Tensor, map_size: int | None) -> torch.Tensor:
    try:
        probs = seg(images)
    except Exception as exc:  # backend is external code; surface context
        raise BackendInferenceError(f"segmentation backend failed on a "
                                    f"{tuple(images.shape)} batch: {exc}") from exc
    if map_size is not None:
        probs = resize_map(probs, map_size)
    return probs


def seg_loss_generator(fake_color: torch.Tensor, seg: nn.Module,
                       seg_discs: dict[str, nn.Module], variant_cfg: VariantConfig,
                       partition: FgBgPartition,
                       map_size: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Generator-side auxiliary terms ``(l_b, l_m)``, unweighted.

    Each active discriminator contributes a least-squares realness loss on the
    segmentation of the generated image. Inactive terms, and terms whose
    weight is exactly zero, come back as 0 without touching the backend.
    """
    active = active_discriminators(variant_cfg)
    w = variant_cfg.weights
    zero = fake_color.new_zeros(())
    need_m = MULTICLASS in active and w.w_m > 0
    need_b = BINARY in active and w.w_b > 0
    if not (need_m or need_b):
        return zero, zero

    probs = _run_backend(seg, fake_color, map_size)
    l_b, l_m = zero, zero
    if need_m:
        disc = seg_discs[MULTICLASS]
        set_requires_grad(disc, False)
        l_m = adversarial_loss(disc(probs), True)
        set_requires_grad(disc, True)
    if need_b:
        disc = seg_discs[BINARY]
        set_requires_grad(disc, False)
        l_b = adversarial_loss(disc(collapse_binary(probs, partition)), True)
        set_requires_grad(disc, True)
    return l_b, l_m


def seg_loss_discriminator(real_color: torch.Tensor, fake_color: torch.Tensor,
                           seg: nn.Module, disc: nn.Module, which: str,
                           partition: FgBgPartition,
                           map_size: int | None = None) -> torch.Tensor:
    """Discriminator-side loss: real segmentation maps toward 1, fake toward 0.

    The backend runs under ``no_grad`` here — only the discriminator learns
    from this term, so there is no point building a graph through it.
    """
    with torch.no_grad():
        real_map = _run_backend(seg, real_color, map_size)
        fake_map = _run_backend(seg, fake_color.detach(), map_size)
        if which == BINARY:
            real_map = collapse_binary(real_map, partition)
            fake_map = collapse_binary(fake_map, partition)
    return 0.5 * (adversarial_loss(disc(real_map), True)
                  + adversarial_loss(disc(fake_map), False))


class SegGuidedTrainer(BaselineTrainer):
    """Baseline trainer plus the segmentation-map adversarial branch.

    With all auxiliary weights at zero this class runs the exact op sequence
    of ``BaselineTrainer`` — same RNG draws, same parameter trajectory — which
    is how ablations reduce to the raw baseline.
    """

    def __init__(self, bundle: NetworkBundle, cfg: TrainConfig, seg: nn.Module,
                 partition: FgBgPartition, map_size: int | None = None,
                 device: str = "cpu"):
        super().__init__(bundle, cfg, device)
        self.seg = seg.to(device).eval()
        set_requires_grad(self.seg, False)  # frozen: gradients pass through only
        self.partition = partition
        self.map_size = map_size
        self.variant_cfg = bundle.variant_cfg
        self._last_aux = (0.0, 0.0)

    @property
    def weights(self):
        return self.variant_cfg.weights

    def _enabled_discs(self) -> list[str]:
        w = self.weights
        return [name for name in sorted(active_discriminators(self.variant_cfg))
                if (w.w_b if name == BINARY else w.w_m) > 0]

    # hooks into the baseline step -----------------------------------------
    def scale_baseline_generator_loss(self, loss: torch.Tensor) -> torch.Tensor:
        if self.weights.w_g != 1.0:
            loss = self.weights.w_g * loss
        return loss

    def generator_auxiliary_loss(self, fake_color: torch.Tensor):
        self._last_aux = (0.0, 0.0)
        if not self._enabled_discs():
            return 0.0  # bit-identical to the baseline path
        l_b, l_m = seg_loss_generator(fake_color, self.seg, self.bundle.seg_discs,
                                      self.variant_cfg, self.partition, self.map_size)
        self._last_aux = (_ensure_finite("l_b", l_b),
                          _ensure_finite("l_m", l_m))
        return self.weights.w_b * l_b + self.weights.w_m * l_m

    def extra_discriminator_updates(self, real_color: torch.Tensor,
                                    fake_color: torch.Tensor) -> None:
        for name in self._enabled_discs():
            disc = self.bundle.seg_discs[name]
            opt = self.optimizers[f"disc_seg_{name}"]
            opt.zero_grad()
            loss = seg_loss_discriminator(real_color, fake_color, self.seg, disc,
                                          name, self.partition, self.map_size)
            _ensure_finite(f"disc_seg_{name}", loss)
            loss.backward()
            self._seg_grad_norms[f"disc_seg_{name}"] = grad_norm(disc)
            opt.step()
            self.disc_updates[f"seg_{name}"] += 1
            self._seg_losses[f"disc_seg_{name}"] = float(loss.detach())

    # ------------------------------------------------------------------
    def step(self, batch) -> StepReport:  # type: ignore[override]
        self._seg_losses: dict[str, float] = {}
        self._seg_grad_norms: dict[str, float] = {}
        base: BaselineStepResult = super().step(batch)
        l_b, l_m = self._last_aux
        losses = {**base.losses, **self._seg_losses,
                  "l_g": base.l_g, "l_b": l_b, "l_m": l_m}
        return StepReport(
            l_g=base.l_g, l_b=l_b, l_m=l_m,
            total=total_objective(base.l_g, l_b, l_m, self.weights),
            losses=losses,
            grad_norms={**base.grad_norms, **self._seg_grad_norms},
            disc_updates=dict(self.disc_updates),
        )


def make_trainer(bundle: NetworkBundle, cfg: TrainConfig, seg: nn.Module | None,
                 partition: FgBgPartition | None, map_size: int | None = None,
                 device: str = "cpu") -> BaselineTrainer:
    """Seg-guided trainer when a backend is supplied, raw baseline otherwise."""
    if seg is None:
        return BaselineTrainer(bundle, cfg, device)
    if partition is None:
        raise ValueError("a foreground/background partition is required with a backend")
    return SegGuidedTrainer(bundle, cfg, seg, partition, map_size, device)
