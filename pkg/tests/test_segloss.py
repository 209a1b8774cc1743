"""The auxiliary segmentation-map adversarial branch.

The load-bearing checks: generator gradients actually flow through the frozen
backend (finite differences), the discriminator term matches a hand-computed
least-squares value, and a disabled branch never calls the backend at all.
"""

import math

import pytest
import torch

from sketchcolor.config import (
    LossWeights,
    NonFiniteLossError,
    Scheme,
    TrainConfig,
    Variant,
    VariantConfig,
)
from sketchcolor.gan import BaselineTrainer, PatchDiscriminator, adversarial_loss, build_networks
from sketchcolor.segloss import (
    SegGuidedTrainer,
    StepReport,
    make_trainer,
    seg_loss_discriminator,
    seg_loss_generator,
)
from sketchcolor.segmentation import (
    BackendInferenceError,
    ColorQuantizationBackend,
    FgBgPartition,
    collapse_binary,
)
from sketchcolor.util import module_digest


class CountingBackend(torch.nn.Module):
    """Wraps the quantization backend and counts forward passes."""

    def __init__(self, inner):
        super().__init__()
        self.inner = inner
        self.calls = 0

    def forward(self, x):
        self.calls += 1
        return self.inner(x)


class ExplodingBackend(torch.nn.Module):
    def forward(self, x):
        raise RuntimeError("backend out of memory")


def variant_cfg(variant=Variant.BOTH, w_g=1.0, w_b=1.0, w_m=1.0):
    return VariantConfig(variant=variant, weights=LossWeights(w_g=w_g, w_b=w_b, w_m=w_m))


def make_parts(num_classes=4, num_things=2):
    return FgBgPartition.things_stuff(num_classes, num_things)


def seg_and_discs(num_classes=4, size=8, seed=0):
    torch.manual_seed(seed)
    seg = ColorQuantizationBackend(num_classes=num_classes, seed=seed)
    discs = {
        "multiclass": PatchDiscriminator(num_classes, ndf=8, input_size=size),
        "binary": PatchDiscriminator(2, ndf=8, input_size=size),
    }
    return seg, discs


# ---------------------------------------------------------- generator-side loss


def test_generator_loss_both_terms_live():
    seg, discs = seg_and_discs()
    fake = torch.rand(1, 3, 8, 8, requires_grad=True) * 2 - 1
    l_b, l_m = seg_loss_generator(fake, seg, discs, variant_cfg(), make_parts())
    assert l_b.item() > 0 and l_m.item() > 0
    (l_b + l_m).backward()  # both terms sit on the graph back to the image


def test_generator_loss_matches_direct_recomputation():
    seg, discs = seg_and_discs(seed=2)
    torch.manual_seed(3)
    fake = torch.rand(1, 3, 8, 8) * 2 - 1
    l_b, l_m = seg_loss_generator(fake, seg, discs, variant_cfg(), make_parts())
    probs = seg(fake)
    want_m = adversarial_loss(discs["multiclass"](probs), True)
    want_b = adversarial_loss(discs["binary"](collapse_binary(probs, make_parts())), True)
    assert l_m.item() == pytest.approx(want_m.item())
    assert l_b.item() == pytest.approx(want_b.item())


@pytest.mark.parametrize(
    "variant,w_b,w_m,want_calls,live",
    [
        (Variant.MULTICLASS, 1.0, 1.0, 1, "m"),
        (Variant.BINARY, 1.0, 1.0, 1, "b"),
        (Variant.BOTH, 0.0, 1.0, 1, "m"),
        (Variant.BOTH, 1.0, 0.0, 1, "b"),
        (Variant.BOTH, 0.0, 0.0, 0, ""),
        (Variant.MULTICLASS, 1.0, 0.0, 0, ""),
    ],
)
def test_generator_loss_gating(variant, w_b, w_m, want_calls, live):
    seg, discs = seg_and_discs()
    counting = CountingBackend(seg)
    fake = torch.rand(1, 3, 8, 8) * 2 - 1
    l_b, l_m = seg_loss_generator(fake, counting, discs,
                                  variant_cfg(variant, w_b=w_b, w_m=w_m), make_parts())
    assert counting.calls == want_calls
    assert (l_b.item() > 0) == ("b" in live)
    assert (l_m.item() > 0) == ("m" in live)


def test_generator_loss_resizes_map():
    seg, _ = seg_and_discs()
    discs = {"multiclass": PatchDiscriminator(4, ndf=8, input_size=4),
             "binary": PatchDiscriminator(2, ndf=8, input_size=4)}
    fake = torch.rand(1, 3, 16, 16) * 2 - 1
    l_b, l_m = seg_loss_generator(fake, seg, discs, variant_cfg(), make_parts(),
                                  map_size=4)
    assert math.isfinite(l_b.item()) and math.isfinite(l_m.item())


def test_backend_failure_is_wrapped_with_shape():
    _, discs = seg_and_discs()
    fake = torch.rand(2, 3, 8, 8)
    with pytest.raises(BackendInferenceError, match=r"\(2, 3, 8, 8\)"):
        seg_loss_generator(fake, ExplodingBackend(), discs, variant_cfg(), make_parts())


# ------------------------------------------------------------- gradient flow


def test_gradients_reach_the_image_through_frozen_backend():
    """Finite-difference probe in float64: the analytic gradient of the
    multiclass term w.r.t. a generated pixel must match (f(x+h)-f(x-h))/2h."""
    torch.manual_seed(0)
    seg = ColorQuantizationBackend(num_classes=2, sharpness=3.0, seed=1).double()
    disc = PatchDiscriminator(2, ndf=4, input_size=4).double()
    x = (torch.rand(1, 3, 4, 4, dtype=torch.float64) * 2 - 1).requires_grad_(True)

    def f(t):
        return adversarial_loss(disc(seg(t)), True)

    f(x).backward()
    h = 1e-6
    for idx in [(0, 0, 0, 0), (0, 1, 2, 3), (0, 2, 1, 1)]:
        plus, minus = x.detach().clone(), x.detach().clone()
        plus[idx] += h
        minus[idx] -= h
        fd = (f(plus).item() - f(minus).item()) / (2 * h)
        assert x.grad[idx].item() == pytest.approx(fd, rel=1e-3, abs=1e-8)


def test_backend_parameters_stay_frozen_through_training():
    bundle = build_networks(Scheme.PAIRED, variant_cfg(), num_classes=4,
                            image_size=16, ngf=8, ndf=8, n_blocks=2, seed=0)
    seg = ColorQuantizationBackend(num_classes=4, seed=0)
    trainer = SegGuidedTrainer(bundle, TrainConfig(image_size=16, epochs=2),
                               seg, make_parts())
    before = module_digest(seg)
    torch.manual_seed(0)
    for i in range(3):
        g = torch.Generator().manual_seed(i)
        trainer.step((torch.rand(1, 1, 16, 16, generator=g),
                      torch.rand(1, 3, 16, 16, generator=g) * 2 - 1))
    assert module_digest(seg) == before
    assert all(not p.requires_grad for p in seg.parameters())
    assert not seg.training


# ------------------------------------------------------- discriminator-side loss


def test_discriminator_loss_value_oracle():
    seg, discs = seg_and_discs(seed=1)
    torch.manual_seed(4)
    real = torch.rand(1, 3, 8, 8) * 2 - 1
    fake = torch.rand(1, 3, 8, 8) * 2 - 1
    got = seg_loss_discriminator(real, fake, seg, discs["multiclass"],
                                 "multiclass", make_parts())
    with torch.no_grad():
        want = 0.5 * (adversarial_loss(discs["multiclass"](seg(real)), True)
                      + adversarial_loss(discs["multiclass"](seg(fake)), False))
    assert got.item() == pytest.approx(want.item())


def test_discriminator_loss_binary_uses_collapsed_maps():
    seg, discs = seg_and_discs(seed=1)
    real = torch.rand(1, 3, 8, 8) * 2 - 1
    fake = torch.rand(1, 3, 8, 8) * 2 - 1
    part = make_parts()
    got = seg_loss_discriminator(real, fake, seg, discs["binary"], "binary", part)
    with torch.no_grad():
        want = 0.5 * (adversarial_loss(discs["binary"](collapse_binary(seg(real), part)), True)
                      + adversarial_loss(discs["binary"](collapse_binary(seg(fake), part)), False))
    assert got.item() == pytest.approx(want.item())


def test_discriminator_loss_detaches_the_generator():
    seg, discs = seg_and_discs()
    fake = (torch.rand(1, 3, 8, 8) * 2 - 1).requires_grad_(True)
    real = torch.rand(1, 3, 8, 8) * 2 - 1
    loss = seg_loss_discriminator(real, fake, seg, discs["multiclass"],
                                  "multiclass", make_parts())
    loss.backward()
    assert fake.grad is None  # only the discriminator learns from this term


# ------------------------------------------------------------ guided trainer


def guided_trainer(variant=Variant.BOTH, w_b=1.0, w_m=1.0, w_g=1.0,
                   scheme=Scheme.PAIRED, seed=0):
    vc = variant_cfg(variant, w_g=w_g, w_b=w_b, w_m=w_m)
    bundle = build_networks(scheme, vc, num_classes=4, image_size=16,
                            ngf=8, ndf=8, n_blocks=2, seed=seed)
    seg = ColorQuantizationBackend(num_classes=4, seed=0)
    cfg = TrainConfig(scheme=scheme, image_size=16, epochs=2)
    return SegGuidedTrainer(bundle, cfg, seg, make_parts())


def batch(seed=0, size=16):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(1, 1, size, size, generator=g),
            torch.rand(1, 3, size, size, generator=g) * 2 - 1)


def test_step_report_totals_are_consistent():
    trainer = guided_trainer(w_g=2.0, w_b=0.5, w_m=3.0)
    torch.manual_seed(0)
    report = trainer.step(batch())
    assert isinstance(report, StepReport)
    assert report.l_b > 0 and report.l_m > 0
    assert report.total == pytest.approx(2.0 * report.l_g + 0.5 * report.l_b + 3.0 * report.l_m)
    assert report.losses["l_b"] == report.l_b
    assert report.grad_norms["disc_seg_binary"] > 0
    assert report.grad_norms["disc_seg_multiclass"] > 0


@pytest.mark.parametrize(
    "variant,w_b,w_m,want",
    [
        (Variant.MULTICLASS, 1.0, 1.0, {"seg_multiclass": 2, "seg_binary": 0}),
        (Variant.BINARY, 1.0, 1.0, {"seg_binary": 2, "seg_multiclass": 0}),
        (Variant.BOTH, 1.0, 1.0, {"seg_binary": 2, "seg_multiclass": 2}),
        (Variant.BOTH, 0.0, 0.0, {"seg_binary": 0, "seg_multiclass": 0}),
    ],
)
def test_variant_gates_auxiliary_updates(variant, w_b, w_m, want):
    trainer = guided_trainer(variant, w_b=w_b, w_m=w_m)
    torch.manual_seed(0)
    for i in range(2):
        trainer.step(batch(seed=i))
    for name, count in want.items():
        assert trainer.disc_updates.get(name, 0) == count, name


def test_disabled_branch_returns_plain_float():
    # the hook must hand back a float 0.0, not a tensor, so the baseline
    # addition `scaled + aux` stays the exact same op sequence
    trainer = guided_trainer(w_b=0.0, w_m=0.0)
    aux = trainer.generator_auxiliary_loss(torch.rand(1, 3, 16, 16))
    assert type(aux) is float and aux == 0.0


def test_zero_weight_run_never_calls_backend():
    trainer = guided_trainer(w_b=0.0, w_m=0.0)
    trainer.seg = CountingBackend(trainer.seg)
    torch.manual_seed(0)
    report = trainer.step(batch())
    assert trainer.seg.calls == 0
    assert report.l_b == 0.0 and report.l_m == 0.0
    assert report.total == pytest.approx(report.l_g)


def test_unpaired_guided_step():
    trainer = guided_trainer(scheme=Scheme.UNPAIRED)
    torch.manual_seed(0)
    report = trainer.step(batch())
    assert report.l_b > 0 and report.l_m > 0
    assert trainer.disc_updates["image_sketch"] == 1
    assert trainer.disc_updates["seg_multiclass"] == 1


def test_nan_generator_output_names_aux_term():
    trainer = guided_trainer()

    class NanBackend(torch.nn.Module):
        def forward(self, x):
            return torch.full((x.shape[0], 4, x.shape[2], x.shape[3]), float("nan"))

    trainer.seg = NanBackend()
    with pytest.raises(NonFiniteLossError, match="l_[bm]"):
        trainer.step(batch())


def test_make_trainer_dispatch():
    vc = variant_cfg()
    bundle = build_networks(Scheme.PAIRED, vc, num_classes=4, image_size=16,
                            ngf=8, ndf=8, n_blocks=2, seed=0)
    cfg = TrainConfig(image_size=16)
    plain = make_trainer(bundle, cfg, None, None)
    assert type(plain) is BaselineTrainer
    guided = make_trainer(bundle, cfg, ColorQuantizationBackend(4), make_parts())
    assert isinstance(guided, SegGuidedTrainer)
    with pytest.raises(ValueError):
        make_trainer(bundle, cfg, ColorQuantizationBackend(4), None)
