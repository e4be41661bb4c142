"""View augmentation: drop-mask laws, noise statistics, determinism."""

import numpy as np
import pytest

from bandfuse.augment import (
    GLOBAL,
    LOCAL,
    apply_noise,
    band_drop_mask,
    make_view_batch,
    make_views,
    view_rng,
)
from bandfuse.config import AugmentConfig, default_config
from bandfuse.errors import UsageError


@pytest.fixture
def geometry():
    return default_config().geometry()


def enumerate_local_marginals(policy, geometry):
    """Exact conditional per-band drop probabilities by enumerating all
    2^n masks of the local-view process, conditioned on >=1 survivor."""
    mods = [m.n_bands for m in geometry.modalities]
    n_b = geometry.n_bands
    p_m, p_l = policy.local_modality_drop, policy.local_band_drop
    marg = np.zeros(n_b)
    total = 0.0
    for bits in range(2**n_b):
        mask = np.array([(bits >> i) & 1 for i in range(n_b)], dtype=bool)
        prob = 1.0
        start = 0
        for n in mods:
            block = mask[start:start + n]
            p_block_all = p_m + (1 - p_m) * p_l**n
            if block.all():
                prob *= p_block_all
            else:
                prob *= (1 - p_m) * np.prod([p_l if b else 1 - p_l for b in block])
            start += n
        if mask.all():
            continue  # rejected by the re-draw
        total += prob
        marg += prob * mask
    return marg / total


class TestDropMask:
    def test_zero_probs_all_false(self, geometry):
        policy = AugmentConfig(global_band_drop=0, local_modality_drop=0, local_band_drop=0)
        for kind in (GLOBAL, LOCAL):
            mask = band_drop_mask(policy, geometry, kind, np.random.default_rng(0))
            assert not mask.any()

    def test_certain_drop_forces_survivor(self, geometry):
        policy = AugmentConfig(local_modality_drop=1.0)
        mask = band_drop_mask(policy, geometry, LOCAL, np.random.default_rng(0))
        assert not mask.all()

    def test_global_never_drops_whole_modality(self, geometry):
        policy = AugmentConfig(global_band_drop=0.6)
        slices = [
            [b.band_id for b in geometry.bands() if b.modality_id == m.modality_id]
            for m in geometry.modalities
        ]
        rng = np.random.default_rng(7)
        for _ in range(300):
            mask = band_drop_mask(policy, geometry, GLOBAL, rng)
            for idx in slices:
                assert not mask[idx].all()

    def test_local_frequency_matches_enumeration_oracle(self, geometry):
        policy = AugmentConfig(local_modality_drop=0.5, local_band_drop=0.3)
        want = enumerate_local_marginals(policy, geometry)
        rng = np.random.default_rng(11)
        counts = np.zeros(geometry.n_bands)
        n = 10_000
        for _ in range(n):
            counts += band_drop_mask(policy, geometry, LOCAL, rng)
        np.testing.assert_allclose(counts / n, want, atol=0.02)

    def test_global_frequency_small_p(self, geometry):
        # with p_g small the modality constraint rarely bites, so the
        # conditional marginal stays within 2% of p_g itself
        policy = AugmentConfig(global_band_drop=0.1)
        rng = np.random.default_rng(13)
        counts = np.zeros(geometry.n_bands)
        n = 10_000
        for _ in range(n):
            counts += band_drop_mask(policy, geometry, GLOBAL, rng)
        np.testing.assert_allclose(counts / n, 0.1, atol=0.02)

    def test_unknown_kind(self, geometry):
        with pytest.raises(UsageError):
            band_drop_mask(AugmentConfig(), geometry, "other", np.random.default_rng(0))


class TestApplyNoise:
    def test_zero_sigmas_identity(self, rng):
        band = rng.standard_normal((8, 8)).astype(np.float32)
        out = apply_noise(band, 0.0, 0.0, np.random.default_rng(5))
        np.testing.assert_array_equal(out, band)
        assert out is not band

    def test_zero_image_multiplicative_only(self):
        band = np.zeros((16, 16), dtype=np.float32)
        out = apply_noise(band, 0.0, 0.5, np.random.default_rng(5))
        np.testing.assert_array_equal(out, 0.0)

    def test_variance_statistics_oracle(self):
        # var(x' - x) = sigma_add^2 + x^2 sigma_mul^2 on a constant image
        c, s_add, s_mul = 1.7, 0.05, 0.08
        band = np.full((1000, 1000), c, dtype=np.float64)
        out = apply_noise(band, s_add, s_mul, np.random.default_rng(3))
        var = (out - band).var()
        want = s_add**2 + c**2 * s_mul**2
        assert abs(var - want) / want < 0.05


class TestMakeViews:
    def test_deterministic_per_seed(self, geometry, rng):
        cfg = default_config()
        bands = [rng.standard_normal((s, s)).astype(np.float32) for s in geometry.band_sides()]
        a = make_views(bands, cfg.augment, geometry, 2, 4, seed=9, sample_id=3)
        b = make_views(bands, cfg.augment, geometry, 2, 4, seed=9, sample_id=3)
        np.testing.assert_array_equal(a[0], b[0])
        for va, vb in zip(a[1], b[1]):
            for xa, xb in zip(va, vb):
                assert (xa is None) == (xb is None)
                if xa is not None:
                    np.testing.assert_array_equal(xa, xb)
        c = make_views(bands, cfg.augment, geometry, 2, 4, seed=10, sample_id=3)
        assert not np.array_equal(a[0], c[0]) or any(
            xa is not None and xc is not None and not np.array_equal(xa, xc)
            for va, vc in zip(a[1], c[1]) for xa, xc in zip(va, vc)
        )

    def test_view_counting(self, geometry, rng):
        cfg = default_config()
        bands = [rng.standard_normal((s, s)).astype(np.float32) for s in geometry.band_sides()]
        masks, views = make_views(bands, cfg.augment, geometry, 2, 6, seed=1, sample_id=0)
        assert masks.shape == (8, geometry.n_bands)
        assert len(views) == 8

    def test_every_view_keeps_a_band(self, geometry, rng):
        cfg = default_config()
        cfg.augment.local_modality_drop = 0.95
        cfg.augment.local_band_drop = 0.9
        bands = [rng.standard_normal((s, s)).astype(np.float32) for s in geometry.band_sides()]
        for sid in range(50):
            masks, _ = make_views(bands, cfg.augment, geometry, 1, 3, seed=2, sample_id=sid)
            assert not masks.all(axis=1).any()

    def test_requires_more_local_than_global(self, geometry, rng):
        bands = [np.zeros((s, s), dtype=np.float32) for s in geometry.band_sides()]
        with pytest.raises(UsageError):
            make_views(bands, AugmentConfig(), geometry, 2, 2, seed=1, sample_id=0)

    def test_dropped_views_have_none_arrays(self, geometry, rng):
        cfg = default_config()
        cfg.augment.local_modality_drop = 1.0  # forced survivor keeps exactly one
        bands = [rng.standard_normal((s, s)).astype(np.float32) for s in geometry.band_sides()]
        masks, views = make_views(bands, cfg.augment, geometry, 1, 2, seed=3, sample_id=0)
        for v in (1, 2):
            for i, arr in enumerate(views[v]):
                assert (arr is None) == bool(masks[v, i])


class TestViewBatch:
    def test_layout_view_major(self, geometry, rng):
        cfg = default_config()
        samples = [
            [rng.standard_normal((s, s)).astype(np.float32) for s in geometry.band_sides()]
            for _ in range(3)
        ]
        vb = make_view_batch(samples, [0, 1, 2], cfg.augment, geometry, 2, 4, seed=4)
        assert vb.drop_mask.shape == (18, geometry.n_bands)
        assert vb.kinds == [GLOBAL, GLOBAL, LOCAL, LOCAL, LOCAL, LOCAL]
        # row of view v, sample b must equal the per-sample generation
        masks, views = make_views(samples[1], cfg.augment, geometry, 2, 4, seed=4, sample_id=1)
        np.testing.assert_array_equal(vb.drop_mask[2 * 3 + 1], masks[2])
        if views[2][0] is not None:
            np.testing.assert_array_equal(vb.band_images[0][2 * 3 + 1], views[2][0])

    def test_pipeline_identity_when_unaugmented(self, geometry, rng):
        # no noise, no drops: all views of a sample embed identically
        from bandfuse.encoder import build_model

        cfg = default_config()
        cfg.augment = AugmentConfig(global_band_drop=0, global_noise_add=0,
                                    global_noise_mul=0, local_modality_drop=0,
                                    local_band_drop=0, local_noise_add=0,
                                    local_noise_mul=0)
        samples = [
            [rng.standard_normal((s, s)).astype(np.float32) for s in geometry.band_sides()]
            for _ in range(2)
        ]
        vb = make_view_batch(samples, [0, 1], cfg.augment, geometry, 2, 4, seed=5)
        model = build_model(cfg, 0)
        emb = model.embed(vb.band_images, vb.drop_mask).data
        per_view = emb.reshape(6, 2, -1)
        for v in range(1, 6):
            np.testing.assert_array_equal(per_view[v], per_view[0])
