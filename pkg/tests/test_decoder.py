"""Decoder: query grid, SIM/CIM behavior, per-layer outputs, no suppression."""

import numpy as np
import pytest

from deco.core import ShapeError, Tensor, no_grad, ops
from deco.decoder import (CrossInteraction, Decoder, SelfInteraction,
                          grid_to_rows, init_queries)


def feats(rng, b, d, h, w):
    return Tensor(rng.normal(size=(b, d, h, w)).astype(np.float32))


class TestQueries:
    def test_init_shape(self, rng):
        q = init_queries(25, 5, 5, 16, rng)
        assert q.shape == (16, 5, 5)
        assert q.requires_grad

    def test_grid_must_factor_count(self, rng):
        with pytest.raises(ShapeError):
            init_queries(25, 4, 6, 16, rng)

    def test_grid_to_rows_row_major(self):
        d, h, w = 3, 2, 2
        data = np.arange(d * h * w, dtype=np.float32).reshape(d, h, w)
        rows = grid_to_rows(Tensor(data)).data
        assert rows.shape == (4, 3)
        # slot 1 is grid cell (0,1)
        np.testing.assert_array_equal(rows[1], data[:, 0, 1])

    def test_grid_to_rows_batched(self, rng):
        x = rng.normal(size=(2, 3, 2, 2)).astype(np.float32)
        rows = grid_to_rows(Tensor(x)).data
        assert rows.shape == (2, 4, 3)
        np.testing.assert_array_equal(rows[1, 2], x[1, :, 1, 0])


class TestSelfInteraction:
    def test_preserves_grid_shape(self, rng):
        sim = SelfInteraction(8, 3, 2, rng=rng)
        with no_grad():
            out = sim(feats(rng, 2, 8, 5, 5))
        assert out.shape == (2, 8, 5, 5)


class TestCrossInteraction:
    def test_dynamic_plane_tracks_features(self, rng):
        cim = CrossInteraction(8, 3, rng=rng)
        q = feats(rng, 1, 8, 2, 2)
        for fh, fw in [(4, 4), (5, 5), (4, 6)]:
            with no_grad():
                out = cim(q, feats(rng, 1, 8, fh, fw))
            assert cim.last_internal_hw == (fh, fw)
            assert out.shape == (1, 8, 2, 2)

    def test_fixed_plane_overrides_features(self, rng):
        cim = CrossInteraction(8, 3, fixed_size=(6, 6), rng=rng)
        with no_grad():
            out = cim(feats(rng, 1, 8, 2, 2), feats(rng, 1, 8, 4, 4))
        assert cim.last_internal_hw == (6, 6)
        assert out.shape == (1, 8, 2, 2)

    def test_fusion_modes_all_run(self, rng):
        q = feats(rng, 1, 8, 2, 2)
        f = feats(rng, 1, 8, 4, 4)
        outs = {}
        for mode in ("add", "multiply", "concat_conv"):
            cim = CrossInteraction(8, 3, fusion=mode, rng=rng)
            with no_grad():
                outs[mode] = cim(q, f).data
        assert outs["add"].shape == outs["multiply"].shape == outs["concat_conv"].shape

    def test_unknown_fusion_rejected(self, rng):
        with pytest.raises(ValueError, match="fusion"):
            CrossInteraction(8, 3, fusion="subtract", rng=rng)
        with pytest.raises(ValueError, match="upsample"):
            CrossInteraction(8, 3, upsample="bicubic", rng=rng)

    def test_channel_mismatch_rejected(self, rng):
        cim = CrossInteraction(8, 3, rng=rng)
        with pytest.raises(ShapeError):
            cim(feats(rng, 1, 8, 2, 2), feats(rng, 1, 6, 4, 4))

    def test_feature_dependence(self, rng):
        """Different feature maps must change the CIM output."""
        cim = CrossInteraction(8, 3, rng=rng)
        q = feats(rng, 1, 8, 2, 2)
        with no_grad():
            a = cim(q, feats(rng, 1, 8, 4, 4)).data
            b = cim(q, feats(rng, 1, 8, 4, 4)).data
        assert np.abs(a - b).max() > 1e-4


class TestDecoder:
    def test_aux_outputs_one_per_layer(self, rng):
        dec = Decoder(8, num_classes=3, num_layers=3, sim_kernel=3, cim_kernel=3, rng=rng)
        q = feats(rng, 2, 8, 2, 2)
        with no_grad():
            outs = dec(q, feats(rng, 2, 8, 4, 4))
        assert len(outs) == 3
        for logits, boxes in outs:
            assert logits.shape == (2, 4, 4)  # N=4 slots, 3 classes + no-object
            assert boxes.shape == (2, 4, 4)

    def test_final_only_without_aux(self, rng):
        dec = Decoder(8, num_classes=2, num_layers=3, sim_kernel=3, cim_kernel=3,
                      aux_outputs=False, rng=rng)
        with no_grad():
            outs = dec(feats(rng, 1, 8, 2, 2), feats(rng, 1, 8, 3, 3))
        assert len(outs) == 1

    def test_boxes_in_unit_interval(self, rng):
        dec = Decoder(8, num_classes=2, num_layers=1, sim_kernel=3, cim_kernel=3, rng=rng)
        with no_grad():
            outs = dec(feats(rng, 1, 8, 2, 2), feats(rng, 1, 8, 3, 3))
        boxes = outs[-1][1].data
        assert np.all((boxes > 0) & (boxes < 1))

    def test_at_least_one_layer(self, rng):
        with pytest.raises(ValueError):
            Decoder(8, num_classes=2, num_layers=0, sim_kernel=3, cim_kernel=3, rng=rng)


class TestModelContract:
    def test_exactly_n_predictions_any_image(self, tiny_model, rng):
        # 4 query slots -> always exactly 4 predictions, no suppression stage
        img = Tensor(rng.normal(size=(3, 64, 64)).astype(np.float32))
        det = tiny_model.predict(img)
        assert det.num_queries == 4
        assert det.class_logits.shape == (4, 4)
        assert det.boxes.shape == (4, 4)

    def test_batched_matches_single(self, tiny_model, rng):
        imgs = rng.normal(size=(2, 3, 64, 64)).astype(np.float32)
        with no_grad():
            batched = tiny_model.forward(Tensor(imgs))
            single0 = tiny_model.forward_single(Tensor(imgs[0]))
        np.testing.assert_allclose(batched[0].final.boxes.data,
                                   single0.final.boxes.data, atol=1e-6)

    def test_param_groups_cover_model(self, tiny_model):
        from deco.nn import check_param_cover

        backbone, rest = tiny_model.param_groups()
        check_param_cover([backbone, rest], tiny_model)
        assert all(n.startswith("backbone.") for n, _ in backbone)
        assert backbone and rest

    def test_dynamic_cim_plane_per_resolution(self, tiny_model):
        """The interchange plane follows the feature size at every layer."""
        for size, plane in [((64, 64), (2, 2)), ((96, 64), (3, 2))]:
            img = Tensor(np.zeros((1, 3) + size, np.float32))
            with no_grad():
                tiny_model.forward_batched(img)
            for layer in tiny_model.decoder.layers:
                assert layer.cim.last_internal_hw == plane
