"""Baseline paired/unpaired translation networks, losses, and training steps.

The paired scheme uses a skip-connection encoder-decoder generator with a
conditional patch discriminator and an L1 reconstruction term; the unpaired
scheme uses two residual-block generators with cycle consistency. Both use
least-squares adversarial losses. The auxiliary segmentation loss plugs in
through the ``BaselineTrainer`` hooks, so a raw baseline run and a run with
the auxiliary branch disabled execute the exact same tensor ops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .config import (
    BINARY,
    ConfigError,
    NonFiniteLossError,
    Scheme,
    TrainConfig,
    VariantConfig,
    active_discriminators,
)
from .util import grad_norm, set_requires_grad

L1_WEIGHT = 100.0     # paired reconstruction weight
CYCLE_WEIGHT = 10.0   # unpaired cycle-consistency weight


class CheckpointError(RuntimeError):
    """Checkpoint missing or incompatible with the requested architecture."""


# --------------------------------------------------------------------------
# Networks
# --------------------------------------------------------------------------

class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    """Residual-block encoder-decoder (unpaired default).

    Two stride-2 downsamplings, so any input size divisible by 4 round-trips
    to its own shape. Output is tanh-bounded to [-1, 1].
    """

    def __init__(self, in_channels: int = 1, out_channels: int = 3,
                 ngf: int = 64, n_blocks: int = 9):
        super().__init__()
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_channels, ngf, 7),
            nn.InstanceNorm2d(ngf),
            nn.ReLU(inplace=True),
        ]
        ch = ngf
        for _ in range(2):
            layers += [
                nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1),
                nn.InstanceNorm2d(ch * 2),
                nn.ReLU(inplace=True),
            ]
            ch *= 2
        layers += [ResidualBlock(ch) for _ in range(n_blocks)]
        for _ in range(2):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(ch // 2),
                nn.ReLU(inplace=True),
            ]
            ch //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ch, out_channels, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class UnetBlock(nn.Module):
    """One level of the skip-connection encoder-decoder."""

    def __init__(self, outer_channels: int, inner_channels: int,
                 in_channels: int | None = None, submodule: nn.Module | None = None,
                 outermost: bool = False, innermost: bool = False,
                 dropout: bool = False):
        super().__init__()
        self.outermost = outermost
        if in_channels is None:
            in_channels = outer_channels

        downconv = nn.Conv2d(in_channels, inner_channels, 4, stride=2, padding=1)
        downrelu = nn.LeakyReLU(0.2, inplace=True)
        uprelu = nn.ReLU(inplace=True)

        if outermost:
            upconv = nn.ConvTranspose2d(inner_channels * 2, outer_channels, 4, stride=2, padding=1)
            model = [downconv, submodule, uprelu, upconv, nn.Tanh()]
        elif innermost:
            # no norm after the bottleneck conv: its output can be 1x1
            upconv = nn.ConvTranspose2d(inner_channels, outer_channels, 4, stride=2, padding=1)
            model = [downrelu, downconv, uprelu, upconv, nn.InstanceNorm2d(outer_channels)]
        else:
            upconv = nn.ConvTranspose2d(inner_channels * 2, outer_channels, 4, stride=2, padding=1)
            model = [downrelu, downconv, nn.InstanceNorm2d(inner_channels), submodule,
                     uprelu, upconv, nn.InstanceNorm2d(outer_channels)]
            if dropout:
                model.append(nn.Dropout(0.5))
        self.model = nn.Sequential(*model)

    def forward(self, x):
        if self.outermost:
            return self.model(x)
        return torch.cat([x, self.model(x)], dim=1)


def unet_depth_for(image_size: int, max_depth: int = 8) -> int:
    """Deepest stride-2 stack the image size supports (at least 2)."""
    depth = 0
    while depth < max_depth and image_size % 2 == 0 and image_size >= 2:
        image_size //= 2
        depth += 1
    if depth < 2:
        raise ConfigError("image size must be divisible by 4 for the paired generator")
    return depth


class UnetGenerator(nn.Module):
    """Skip-connection encoder-decoder (paired default), tanh output."""

    def __init__(self, in_channels: int = 1, out_channels: int = 3,
                 ngf: int = 64, depth: int = 8, use_dropout: bool = True):
        super().__init__()
        if depth < 2:
            raise ConfigError(f"unet depth must be >= 2, got {depth}")
        mult = lambda i: min(2 ** i, 8)
        block = UnetBlock(ngf * mult(depth - 2), ngf * mult(depth - 1), innermost=True)
        for i in range(depth - 2, 0, -1):
            block = UnetBlock(
                ngf * mult(i - 1), ngf * mult(i), submodule=block,
                dropout=use_dropout and mult(i) == 8 and mult(i - 1) == 8,
            )
        self.model = UnetBlock(out_channels, ngf, in_channels=in_channels,
                               submodule=block, outermost=True)

    def forward(self, x):
        return self.model(x)


class PatchDiscriminator(nn.Module):
    """Convolutional stack scoring overlapping patches (~70x70 receptive field).

    A 256x256 input yields a 30x30 score map with the default three stride-2
    layers. ``in_channels`` is 3 for color images, 1+3 for the conditional
    paired discriminator, and C or 2 for segmentation maps. Passing
    ``input_size`` clamps the depth so instance norm never sees a lone pixel
    on small inputs (anything down to 4x4 works).
    """

    def __init__(self, in_channels: int = 3, ndf: int = 64, n_layers: int = 3,
                 input_size: int | None = None):
        super().__init__()
        if input_size is not None:
            if input_size < 4:
                raise ConfigError(f"discriminator input must be >= 4x4, got {input_size}")
            n_layers = min(n_layers, max(0, int(math.log2(input_size)) - 2))
        layers: list[nn.Module] = [
            nn.Conv2d(in_channels, ndf, 4, stride=2 if n_layers >= 1 else 1, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        ch = ndf
        for i in range(1, n_layers):
            out = min(ndf * 2 ** i, ndf * 8)
            layers += [
                nn.Conv2d(ch, out, 4, stride=2, padding=1),
                nn.InstanceNorm2d(out),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch = out
        out = min(ndf * 2 ** max(n_layers, 1), ndf * 8)
        layers += [
            nn.Conv2d(ch, out, 4, stride=1, padding=1),
            nn.InstanceNorm2d(out),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(out, 1, 4, stride=1, padding=1),
        ]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


def init_weights(net: nn.Module, std: float = 0.02) -> nn.Module:
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.constant_(m.bias, 0.0)
    return net


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------

def adversarial_loss(scores: torch.Tensor, target_real: bool) -> torch.Tensor:
    """Least-squares GAN loss: MSE of the score map against 1 (real) or 0."""
    target = torch.ones_like(scores) if target_real else torch.zeros_like(scores)
    return F.mse_loss(scores, target)


def cycle_loss(x: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between an image and its reconstruction."""
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    return (x - x_rec).abs().mean()


# --------------------------------------------------------------------------
# Network bundle
# --------------------------------------------------------------------------

@dataclass
class NetworkBundle:
    scheme: Scheme
    variant_cfg: VariantConfig
    generators: dict[str, nn.Module]
    image_discs: dict[str, nn.Module]
    seg_discs: dict[str, nn.Module]
    arch: dict = field(default_factory=dict)

    def named_networks(self):
        for name, net in self.generators.items():
            yield f"gen_{name}", net
        for name, net in self.image_discs.items():
            yield f"disc_image_{name}", net
        for name, net in self.seg_discs.items():
            yield f"disc_seg_{name}", net

    def to(self, device) -> "NetworkBundle":
        for _, net in self.named_networks():
            net.to(device)
        return self


def build_generator(scheme: Scheme, in_channels: int, out_channels: int,
                    ngf: int, n_blocks: int, image_size: int,
                    use_dropout: bool = True) -> nn.Module:
    if scheme is Scheme.PAIRED:
        depth = unet_depth_for(image_size)
        net = UnetGenerator(in_channels, out_channels, ngf=ngf, depth=depth,
                            use_dropout=use_dropout)
    else:
        net = ResnetGenerator(in_channels, out_channels, ngf=ngf, n_blocks=n_blocks)
    return init_weights(net)


def build_networks(scheme: Scheme, variant_cfg: VariantConfig, *,
                   num_classes: int = 135, image_size: int = 256,
                   ngf: int = 64, ndf: int = 64, n_blocks: int = 9,
                   use_dropout: bool = True, seg_map_size: int | None = None,
                   seed: int | None = None) -> NetworkBundle:
    """Instantiate all networks a run needs.

    Construction order is fixed (generators, image discriminators, then the
    auxiliary segmentation discriminators) so the RNG draws for the baseline
    networks are identical whether or not auxiliary heads exist.
    """
    if not isinstance(scheme, Scheme):
        raise ConfigError(f"unknown training scheme: {scheme!r}")
    if seed is not None:
        torch.manual_seed(seed)

    generators: dict[str, nn.Module] = {}
    image_discs: dict[str, nn.Module] = {}
    if scheme is Scheme.PAIRED:
        generators["sketch2color"] = build_generator(scheme, 1, 3, ngf, n_blocks,
                                                     image_size, use_dropout)
        # conditional discriminator sees the sketch stacked with the color image
        image_discs["color"] = init_weights(
            PatchDiscriminator(in_channels=1 + 3, ndf=ndf, input_size=image_size))
    else:
        generators["sketch2color"] = build_generator(scheme, 1, 3, ngf, n_blocks,
                                                     image_size, use_dropout)
        generators["color2sketch"] = build_generator(scheme, 3, 1, ngf, n_blocks,
                                                     image_size, use_dropout)
        image_discs["color"] = init_weights(
            PatchDiscriminator(in_channels=3, ndf=ndf, input_size=image_size))
        image_discs["sketch"] = init_weights(
            PatchDiscriminator(in_channels=1, ndf=ndf, input_size=image_size))

    seg_discs: dict[str, nn.Module] = {}
    map_size = seg_map_size if seg_map_size is not None else image_size
    for name in sorted(active_discriminators(variant_cfg)):
        channels = 2 if name == BINARY else num_classes
        seg_discs[name] = init_weights(
            PatchDiscriminator(in_channels=channels, ndf=ndf, input_size=map_size))

    arch = {
        "scheme": scheme.value,
        "variant": variant_cfg.variant.value,
        "num_classes": num_classes,
        "image_size": image_size,
        "ngf": ngf,
        "ndf": ndf,
        "n_blocks": n_blocks,
        "use_dropout": use_dropout,
        "seg_map_size": map_size,
    }
    return NetworkBundle(scheme=scheme, variant_cfg=variant_cfg,
                         generators=generators, image_discs=image_discs,
                         seg_discs=seg_discs, arch=arch)


# --------------------------------------------------------------------------
# Baseline training step
# --------------------------------------------------------------------------

@dataclass
class BaselineStepResult:
    l_g: float                    # baseline generator objective
    losses: dict[str, float]      # individual components
    grad_norms: dict[str, float]
    fake_color: torch.Tensor      # detached generator output for this batch


def _ensure_finite(name: str, value) -> float:
    if torch.is_tensor(value):
        value = float(value.detach())
    if not math.isfinite(value):
        raise NonFiniteLossError(f"loss term {name} diverged to {value}")
    return value


class BaselineTrainer:
    """One logical training transaction per step: generator(s), then each
    discriminator. Subclasses hook in auxiliary generator losses and extra
    discriminator updates without touching the baseline op sequence."""

    def __init__(self, bundle: NetworkBundle, cfg: TrainConfig, device: str = "cpu"):
        self.bundle = bundle.to(device)
        self.cfg = cfg
        self.device = device
        self.optimizers = {
            name: torch.optim.Adam(net.parameters(), lr=cfg.learning_rate,
                                   betas=(cfg.beta1, cfg.beta2))
            for name, net in bundle.named_networks()
        }
        self.disc_updates = {name.removeprefix("disc_"): 0
                             for name, _ in bundle.named_networks()
                             if name.startswith("disc_")}
        self.step_count = 0

    # hooks -----------------------------------------------------------------
    def scale_baseline_generator_loss(self, loss: torch.Tensor) -> torch.Tensor:
        return loss

    def generator_auxiliary_loss(self, fake_color: torch.Tensor):
        return 0.0

    def extra_discriminator_updates(self, real_color: torch.Tensor,
                                    fake_color: torch.Tensor) -> None:
        pass

    # step ------------------------------------------------------------------
    def step(self, batch: tuple[torch.Tensor, torch.Tensor]) -> BaselineStepResult:
        self.step_count += 1
        if self.cfg.scheme is Scheme.PAIRED:
            result = self._step_paired(batch)
        else:
            result = self._step_unpaired(batch)
        return result

    def _disc_update(self, name: str, disc: nn.Module, real_pred_input: torch.Tensor,
                     fake_pred_input: torch.Tensor, grad_norms: dict[str, float],
                     losses: dict[str, float]) -> None:
        opt = self.optimizers[f"disc_{name}"]
        opt.zero_grad()
        loss = 0.5 * (adversarial_loss(disc(real_pred_input), True)
                      + adversarial_loss(disc(fake_pred_input), False))
        _ensure_finite(f"disc_{name}", loss)
        loss.backward()
        grad_norms[f"disc_{name}"] = grad_norm(disc)
        opt.step()
        self.disc_updates[name] += 1
        losses[f"disc_{name}"] = float(loss.detach())

    def _step_paired(self, batch) -> BaselineStepResult:
        sketch, color = (t.to(self.device) for t in batch)
        gen = self.bundle.generators["sketch2color"]
        disc = self.bundle.image_discs["color"]
        losses: dict[str, float] = {}
        grad_norms: dict[str, float] = {}

        fake = gen(sketch)

        # generator update; discriminator weights held out of the graph
        set_requires_grad(disc, False)
        self.optimizers["gen_sketch2color"].zero_grad()
        loss_adv = adversarial_loss(disc(torch.cat([sketch, fake], dim=1)), True)
        loss_rec = L1_WEIGHT * cycle_loss(fake, color)
        l_g = loss_adv + loss_rec
        losses["gen_adv"] = _ensure_finite("gen_adv", loss_adv)
        losses["gen_l1"] = _ensure_finite("gen_l1", loss_rec)
        total = self.scale_baseline_generator_loss(l_g) + self.generator_auxiliary_loss(fake)
        total.backward()
        grad_norms["gen_sketch2color"] = grad_norm(gen)
        self.optimizers["gen_sketch2color"].step()
        set_requires_grad(disc, True)

        # image discriminator update
        self._disc_update("image_color", disc,
                          torch.cat([sketch, color], dim=1),
                          torch.cat([sketch, fake.detach()], dim=1),
                          grad_norms, losses)

        self.extra_discriminator_updates(color, fake)
        return BaselineStepResult(l_g=float(l_g.detach()), losses=losses,
                                  grad_norms=grad_norms, fake_color=fake.detach())

    def _step_unpaired(self, batch) -> BaselineStepResult:
        sketch, color = (t.to(self.device) for t in batch)
        gen_sc = self.bundle.generators["sketch2color"]
        gen_cs = self.bundle.generators["color2sketch"]
        disc_color = self.bundle.image_discs["color"]
        disc_sketch = self.bundle.image_discs["sketch"]
        losses: dict[str, float] = {}
        grad_norms: dict[str, float] = {}

        fake_color = gen_sc(sketch)
        fake_sketch = gen_cs(color)

        # joint generator update
        set_requires_grad([disc_color, disc_sketch], False)
        self.optimizers["gen_sketch2color"].zero_grad()
        self.optimizers["gen_color2sketch"].zero_grad()
        loss_adv = (adversarial_loss(disc_color(fake_color), True)
                    + adversarial_loss(disc_sketch(fake_sketch), True))
        loss_cyc = CYCLE_WEIGHT * (cycle_loss(gen_cs(fake_color), sketch)
                                   + cycle_loss(gen_sc(fake_sketch), color))
        l_g = loss_adv + loss_cyc
        losses["gen_adv"] = _ensure_finite("gen_adv", loss_adv)
        losses["gen_cycle"] = _ensure_finite("gen_cycle", loss_cyc)
        total = self.scale_baseline_generator_loss(l_g) + self.generator_auxiliary_loss(fake_color)
        total.backward()
        grad_norms["gen_sketch2color"] = grad_norm(gen_sc)
        grad_norms["gen_color2sketch"] = grad_norm(gen_cs)
        self.optimizers["gen_sketch2color"].step()
        self.optimizers["gen_color2sketch"].step()
        set_requires_grad([disc_color, disc_sketch], True)

        # image discriminator updates
        self._disc_update("image_color", disc_color, color, fake_color.detach(),
                          grad_norms, losses)
        self._disc_update("image_sketch", disc_sketch, sketch, fake_sketch.detach(),
                          grad_norms, losses)

        self.extra_discriminator_updates(color, fake_color)
        return BaselineStepResult(l_g=float(l_g.detach()), losses=losses,
                                  grad_norms=grad_norms, fake_color=fake_color.detach())

    # learning-rate schedule -------------------------------------------------
    def lr_factor(self, epoch: int) -> float:
        """Constant for the first half of training, then linear toward 0."""
        decay_start = self.cfg.epochs // 2
        if self.cfg.epochs == 1 or epoch <= decay_start:
            return 1.0
        return min(1.0, (self.cfg.epochs - epoch + 1) / (self.cfg.epochs - decay_start))

    def set_epoch(self, epoch: int) -> None:
        factor = self.lr_factor(epoch)
        for opt in self.optimizers.values():
            for group in opt.param_groups:
                group["lr"] = self.cfg.learning_rate * factor


# --------------------------------------------------------------------------
# Checkpoints: {run}/{epoch:03d}_{net}.ckpt
# --------------------------------------------------------------------------

def checkpoint_paths(run_dir: str | Path, epoch: int, trainer: BaselineTrainer) -> dict[str, Path]:
    run_dir = Path(run_dir)
    paths = {name: run_dir / f"{epoch:03d}_{name}.ckpt"
             for name, _ in trainer.bundle.named_networks()}
    paths["trainer"] = run_dir / f"{epoch:03d}_trainer.ckpt"
    return paths


def save_checkpoint(run_dir: str | Path, epoch: int, trainer: BaselineTrainer,
                    extra_state: dict | None = None) -> list[Path]:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    paths = checkpoint_paths(run_dir, epoch, trainer)
    for name, net in trainer.bundle.named_networks():
        torch.save({
            "net": name,
            "epoch": epoch,
            "arch": trainer.bundle.arch,
            "params": net.state_dict(),
            "optim": trainer.optimizers[name].state_dict(),
        }, paths[name])
    trainer_state = {
        "epoch": epoch,
        "step_count": trainer.step_count,
        "disc_updates": dict(trainer.disc_updates),
        "torch_rng": torch.get_rng_state(),
    }
    if extra_state:
        trainer_state.update(extra_state)
    torch.save(trainer_state, paths["trainer"])
    return list(paths.values())


def load_checkpoint(run_dir: str | Path, epoch: int, trainer: BaselineTrainer) -> dict:
    """Restore networks, optimizers, counters, and the torch RNG stream."""
    paths = checkpoint_paths(run_dir, epoch, trainer)
    missing = [p for p in paths.values() if not p.is_file()]
    if missing:
        raise CheckpointError(f"missing checkpoint files for epoch {epoch}: {missing}")
    for name, net in trainer.bundle.named_networks():
        blob = torch.load(paths[name], weights_only=True)
        try:
            net.load_state_dict(blob["params"])
        except RuntimeError as exc:
            raise CheckpointError(f"{paths[name]}: architecture mismatch: {exc}") from exc
        trainer.optimizers[name].load_state_dict(blob["optim"])
    state = torch.load(paths["trainer"], weights_only=True)
    trainer.step_count = state["step_count"]
    trainer.disc_updates.update(state["disc_updates"])
    torch.set_rng_state(state["torch_rng"])
    return state


def latest_checkpoint_epoch(run_dir: str | Path) -> int | None:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        return None
    epochs = sorted({int(p.name.split("_", 1)[0])
                     for p in run_dir.glob("*_trainer.ckpt")})
    return epochs[-1] if epochs else None


def load_generator(ckpt_path: str | Path, name: str = "sketch2color") -> nn.Module:
    """Rebuild a generator from one checkpoint file's arch metadata."""
    ckpt_path = Path(ckpt_path)
    if not ckpt_path.is_file():
        raise CheckpointError(f"checkpoint not found: {ckpt_path}")
    blob = torch.load(ckpt_path, weights_only=True)
    arch = blob["arch"]
    scheme = Scheme(arch["scheme"])
    in_ch, out_ch = (1, 3) if name == "sketch2color" else (3, 1)
    gen = build_generator(scheme, in_ch, out_ch, arch["ngf"], arch["n_blocks"],
                          arch["image_size"], arch["use_dropout"])
    try:
        gen.load_state_dict(blob["params"])
    except RuntimeError as exc:
        raise CheckpointError(f"{ckpt_path}: architecture mismatch: {exc}") from exc
    gen.eval()
    return gen
