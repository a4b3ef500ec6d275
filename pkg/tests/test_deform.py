import pytest
import torch
import torch.nn.functional as F

from helpers import max_relative_gradient_error
from trigait.deform import (
    DeformField,
    DeformationPredictor,
    SilhouetteGuidedAlign,
    deformable_sample,
    regular_taps,
)


class TestPredictor:
    def test_zero_init_gives_zero_offsets_and_half_mask(self):
        torch.manual_seed(0)
        pred = DeformationPredictor(channels=8)
        field = pred(torch.randn(2, 8, 16, 16), torch.randn(2, 8, 16, 16))
        assert torch.all(field.offsets == 0)
        assert torch.allclose(field.mask, torch.full_like(field.mask, 0.5))

    def test_output_shapes(self):
        pred = DeformationPredictor(channels=16)
        field = pred(torch.randn(3, 16, 16, 16), torch.randn(3, 16, 16, 16))
        assert field.offsets.shape == (3, 18, 16, 16)
        assert field.mask.shape == (3, 9, 16, 16)
        assert field.num_taps == 9

    def test_concatenation_order_matters(self):
        torch.manual_seed(1)
        pred = DeformationPredictor(channels=8)
        with torch.no_grad():
            pred.conv_offset.weight.normal_()
            pred.conv_mask.weight.normal_()
        a = torch.randn(1, 8, 8, 8)
        b = torch.randn(1, 8, 8, 8)
        ab = pred(a, b)
        ba = pred(b, a)
        assert not torch.allclose(ab.offsets, ba.offsets)

    def test_shape_mismatch_rejected(self):
        pred = DeformationPredictor(channels=8)
        with pytest.raises(ValueError, match="disagree"):
            pred(torch.randn(1, 8, 16, 16), torch.randn(1, 8, 8, 8))

    def test_mask_strictly_inside_unit_interval(self):
        torch.manual_seed(2)
        pred = DeformationPredictor(channels=4)
        with torch.no_grad():
            pred.conv_mask.weight.normal_(std=0.2)
        field = pred(torch.randn(2, 4, 8, 8), torch.randn(2, 4, 8, 8))
        assert torch.all(field.mask > 0) and torch.all(field.mask < 1)


class TestDeformField:
    def test_channel_pairing_enforced(self):
        with pytest.raises(ValueError, match="dy, dx"):
            DeformField(offsets=torch.zeros(1, 3, 4, 4), mask=torch.zeros(1, 2, 4, 4))


class TestRegularTaps:
    def test_row_major_3x3(self):
        taps = regular_taps(3)
        assert taps.tolist() == [
            [-1, -1], [-1, 0], [-1, 1],
            [0, -1], [0, 0], [0, 1],
            [1, -1], [1, 0], [1, 1],
        ]


class TestDeformableSample:
    def test_degenerate_field_reduces_to_convolution(self, rng):
        torch.manual_seed(3)
        feat = torch.from_numpy(rng.normal(size=(2, 4, 7, 7)))
        weight = torch.from_numpy(rng.normal(size=(4, 4, 3, 3)))
        offsets = torch.zeros(2, 18, 7, 7, dtype=torch.float64)
        mask = torch.ones(2, 9, 7, 7, dtype=torch.float64)
        out = deformable_sample(feat, offsets, mask, weight)
        expected = F.conv2d(feat, weight, padding=1)
        assert torch.allclose(out, expected, atol=1e-5)

    def test_half_pixel_shift_averages_neighbors(self):
        # single 1x1 tap, identity channel map, dx = +0.5 everywhere
        feat = torch.arange(16, dtype=torch.float64).reshape(1, 1, 4, 4)
        offsets = torch.zeros(1, 2, 4, 4, dtype=torch.float64)
        offsets[:, 1] = 0.5
        mask = torch.ones(1, 1, 4, 4, dtype=torch.float64)
        weight = torch.ones(1, 1, 1, 1, dtype=torch.float64)
        out = deformable_sample(feat, offsets, mask, weight)
        expected = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
        for y in range(4):
            for x in range(4):
                right = feat[0, 0, y, x + 1] if x + 1 < 4 else 0.0
                expected[0, 0, y, x] = 0.5 * feat[0, 0, y, x] + 0.5 * right
        assert torch.allclose(out, expected, atol=1e-12)

    def test_integer_offsets_are_exact(self):
        torch.manual_seed(4)
        feat = torch.randn(1, 3, 6, 6, dtype=torch.float64)
        offsets = torch.zeros(1, 2, 6, 6, dtype=torch.float64)
        offsets[:, 0] = 1.0  # dy
        offsets[:, 1] = -2.0  # dx
        mask = torch.ones(1, 1, 6, 6, dtype=torch.float64)
        eye = torch.eye(3, dtype=torch.float64).reshape(3, 3, 1, 1)
        out = deformable_sample(feat, offsets, mask, eye)
        expected = torch.zeros_like(feat)
        expected[:, :, :5, 2:] = feat[:, :, 1:, :4]
        assert torch.equal(out, expected)

    def test_out_of_bounds_reads_zero(self):
        feat = torch.randn(1, 2, 5, 5, dtype=torch.float64)
        offsets = torch.full((1, 2, 5, 5), 1e4, dtype=torch.float64)
        mask = torch.ones(1, 1, 5, 5, dtype=torch.float64)
        eye = torch.eye(2, dtype=torch.float64).reshape(2, 2, 1, 1)
        out = deformable_sample(feat, offsets, mask, eye)
        assert torch.all(out == 0)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(5)
        feat = torch.randn(1, 2, 5, 5, dtype=torch.float64, requires_grad=True)
        offsets = (torch.randn(1, 18, 5, 5, dtype=torch.float64) * 0.7).requires_grad_(True)
        mask_logit = torch.randn(1, 9, 5, 5, dtype=torch.float64, requires_grad=True)
        weight = torch.randn(2, 2, 3, 3, dtype=torch.float64, requires_grad=True)
        probe = torch.randn(1, 2, 5, 5, dtype=torch.float64)

        def loss():
            return (deformable_sample(feat, offsets, torch.sigmoid(mask_logit), weight) * probe).sum()

        err = max_relative_gradient_error(loss, [feat, offsets, mask_logit, weight], max_coords=20)
        assert err < 1e-4

    def test_shape_validation(self):
        feat = torch.randn(1, 2, 5, 5)
        with pytest.raises(ValueError, match="kernel"):
            deformable_sample(feat, torch.zeros(1, 4, 5, 5), torch.ones(1, 9, 5, 5), torch.randn(2, 2, 3, 3))
        with pytest.raises(ValueError, match="channels"):
            deformable_sample(feat, torch.zeros(1, 18, 5, 5), torch.ones(1, 9, 5, 5), torch.randn(2, 3, 3, 3))


@pytest.mark.heavy
@pytest.mark.xfail(
    strict=True,
    reason=(
        "trained F_projected' does not move closer to F than raw encoder "
        "output under either L2 or cosine distance; the training objective "
        "never pulls the aligned features toward the reference (measured: "
        "raw 0.81 vs aligned 1.42 mean cosine distance after training)"
    ),
)
def test_trained_alignment_reduces_distance_to_reference(tmp_path):
    """Directional claim: after training on a 90-deg-capture / 0-deg-projection
    split, mean per-frame distance(F_projected', F) < distance(f_pro, F)."""
    import numpy as np
    import torch.nn.functional as TF

    from trigait.dataset import SequenceStore, load_dataset, precompute_projections
    from trigait.synthesis import SynthConfig, generate_synthetic_dataset
    from trigait.training import Trainer, TrainConfig

    cfg = SynthConfig(
        num_identities=6, sequences_per_identity=4, frames_per_sequence=30,
        views_deg=(90.0,), clothing_levels=(0,), train_fraction=1.0,
    )
    index = generate_synthetic_dataset(cfg, seed=13, out_dir=tmp_path / "ds")
    precompute_projections(index, 0.0)
    index = load_dataset(tmp_path / "ds")
    trainer = Trainer(
        TrainConfig(
            data_root=str(tmp_path / "ds"), out_dir="", variant="full",
            P=3, K=2, T=8, epochs=80, base_lr=1e-3, lr_milestones=(60,), seed=0,
        ),
        index=index,
    )
    trainer.train()
    model = trainer.model.eval()
    store = SequenceStore(index)
    raw, aligned = [], []
    with torch.no_grad():
        for entry in index.entries[:8]:
            sils = torch.from_numpy(store.silhouettes(entry.key).astype(np.float32)).unsqueeze(0)
            projs = torch.from_numpy(store.projections(entry.key).astype(np.float32)).unsqueeze(0)
            f_app = model.encoder(sils)
            f_pro = model.projection_encoder(projs)
            f_aligned = model.projection_align(f_app, f_pro)
            raw.append((1 - TF.cosine_similarity(f_pro.flatten(2), f_app.flatten(2), dim=-1)).mean().item())
            aligned.append((1 - TF.cosine_similarity(f_aligned.flatten(2), f_app.flatten(2), dim=-1)).mean().item())
    assert np.mean(aligned) < np.mean(raw)


class TestSilhouetteGuidedAlign:
    def test_constructed_identity_configuration(self):
        torch.manual_seed(6)
        sild = SilhouetteGuidedAlign(channels=4)
        with torch.no_grad():
            # zero-init heads give mask 0.5; a doubled center-tap identity
            # kernel cancels it
            kernel = torch.zeros(4, 4, 3, 3)
            for c in range(4):
                kernel[c, c, 1, 1] = 2.0
            sild.tap_conv.weight.copy_(kernel)
        f_app = torch.randn(2, 4, 8, 8)
        f_pro = torch.randn(2, 4, 8, 8)
        out = sild(f_app, f_pro)
        assert torch.allclose(out, f_pro, atol=1e-6)

    def test_shape_preserved_batched_frames(self):
        sild = SilhouetteGuidedAlign(channels=8)
        f_app = torch.randn(2, 3, 8, 16, 16)
        f_pro = torch.randn(2, 3, 8, 16, 16)
        assert sild(f_app, f_pro).shape == (2, 3, 8, 16, 16)
