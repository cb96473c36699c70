import numpy as np
import pytest

from petctseg import preprocess
from petctseg.errors import DegenerateCorpusError, EmptyForegroundError, GeometryError
from petctseg.types import Grid3D, LabelMask, Volume

from conftest import make_study


def study_with_foreground(study_id, ct_fg, pet_fg, shape=(2, 2, 2)):
    """Foreground voxels carry the given values; one background voxel stays 0."""
    n = len(ct_fg)
    assert n < np.prod(shape)
    ct = np.zeros(shape, dtype=np.float32)
    pet = np.zeros(shape, dtype=np.float32)
    label = np.zeros(shape, dtype=np.uint8)
    flat_idx = [np.unravel_index(i, shape) for i in range(n)]
    for idx, cv, pv in zip(flat_idx, ct_fg, pet_fg):
        ct[idx] = cv
        pet[idx] = pv
        label[idx] = 1
    return make_study(study_id, shape=shape, ct=ct, pet=pet, label=label)


class TestForegroundStats:
    def test_two_value_example(self):
        study = study_with_foreground("s", [0.0, 10.0], [0.0, 10.0])
        stats = preprocess.compute_foreground_stats([study])
        for ch in (stats.ct, stats.pet):
            assert ch.mean == pytest.approx(5.0)
            assert ch.std == pytest.approx(5.0)  # population std
            assert ch.p_low == pytest.approx(0.05)
            assert ch.p_high == pytest.approx(9.95)

    def test_degenerate_corpus_rejected(self):
        study = study_with_foreground("s", [3.0, 3.0], [1.0, 1.0])
        with pytest.raises(DegenerateCorpusError):
            preprocess.compute_foreground_stats([study])

    def test_no_foreground_rejected(self):
        study = make_study(label=np.zeros((4, 4, 4), dtype=np.uint8))
        with pytest.raises(EmptyForegroundError):
            preprocess.compute_foreground_stats([study])

    def test_unlabeled_study_rejected(self):
        with pytest.raises(EmptyForegroundError):
            preprocess.compute_foreground_stats([make_study()])

    def test_order_invariance(self):
        rng = np.random.default_rng(0)
        studies = [
            study_with_foreground(f"s{i}", rng.normal(size=5), rng.normal(size=5), shape=(2, 3, 1))
            for i in range(4)
        ]
        a = preprocess.compute_foreground_stats(studies)
        b = preprocess.compute_foreground_stats(studies[::-1])
        assert a == b

    def test_multiset_doubling_invariance(self):
        # mean and population std are exactly invariant under duplicating the
        # corpus; the linear-interpolation percentile's index q*(n-1) shifts
        # with n, so its value can move by at most one inter-order-statistic
        # gap around the quantile
        rng = np.random.default_rng(1)
        studies = [
            study_with_foreground(f"s{i}", rng.normal(size=300), rng.normal(size=300), shape=(7, 7, 7))
            for i in range(3)
        ]
        once = preprocess.compute_foreground_stats(studies)
        twice = preprocess.compute_foreground_stats(studies + studies)
        pooled = np.sort(np.concatenate([s.ct.values[s.label.values.astype(bool)] for s in studies]))
        max_gap = float(np.max(np.diff(pooled)))
        for ch in ("ct", "pet"):
            assert once.channel(ch).mean == pytest.approx(twice.channel(ch).mean, abs=1e-12)
            assert once.channel(ch).std == pytest.approx(twice.channel(ch).std, abs=1e-12)
            assert abs(once.channel(ch).p_low - twice.channel(ch).p_low) <= max_gap
            assert abs(once.channel(ch).p_high - twice.channel(ch).p_high) <= max_gap


class TestNormalizeVolume:
    STATS = preprocess.ChannelStats(mean=2.0, std=4.0, p_low=-1.0, p_high=7.0)

    def _volume(self, values):
        arr = np.asarray(values, dtype=np.float32)
        return Volume(grid=Grid3D(shape=arr.shape, spacing=(1, 1, 1)), values=arr)

    def test_mean_maps_to_zero(self):
        out = preprocess.normalize_volume(self._volume([[[2.0]]]), self.STATS)
        assert out.values[0, 0, 0] == pytest.approx(0.0)

    def test_clipping_at_upper_percentile(self):
        out = preprocess.normalize_volume(self._volume([[[100.0]]]), self.STATS)
        assert out.values[0, 0, 0] == pytest.approx((7.0 - 2.0) / 4.0)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(7)
        vol = self._volume(rng.normal(2.0, 5.0, size=(4, 5, 3)))
        out = preprocess.normalize_volume(vol, self.STATS)
        s = self.STATS
        for z in range(4):
            for y in range(5):
                for x in range(3):
                    v = float(vol.values[z, y, x])
                    expected = (min(max(v, s.p_low), s.p_high) - s.mean) / s.std
                    got = float(out.values[z, y, x])
                    assert abs(got - expected) <= 1e-6 * max(1.0, abs(expected))

    def test_output_bounded_by_clip_range(self):
        rng = np.random.default_rng(8)
        vol = self._volume(rng.normal(0, 50, size=(6, 6, 6)))
        out = preprocess.normalize_volume(vol, self.STATS)
        lo = (self.STATS.p_low - self.STATS.mean) / self.STATS.std
        hi = (self.STATS.p_high - self.STATS.mean) / self.STATS.std
        assert np.all(out.values >= lo - 1e-6)
        assert np.all(out.values <= hi + 1e-6)


class TestResample:
    def test_identity_target(self):
        rng = np.random.default_rng(2)
        grid = Grid3D(shape=(4, 4, 4), spacing=(2, 2, 2))
        vol = Volume(grid=grid, values=rng.normal(size=(4, 4, 4)).astype(np.float32))
        out = preprocess.resample_to_grid(vol, grid)
        assert np.array_equal(out.values, vol.values)

    def test_mask_stays_binary(self):
        rng = np.random.default_rng(3)
        grid = Grid3D(shape=(6, 6, 6), spacing=(2, 2, 2))
        mask = LabelMask(grid=grid, values=(rng.random((6, 6, 6)) < 0.4).astype(np.uint8))
        target = Grid3D(shape=(9, 7, 5), spacing=(1.3, 1.7, 2.4), origin=(0.4, 0.2, 0.1))
        out = preprocess.resample_to_grid(mask, target)
        assert isinstance(out, LabelMask)
        assert set(np.unique(out.values)) <= {0, 1}

    def test_upsample_downsample_ramp(self):
        # linear ramp: trilinear resampling is exact at original sample points
        n = 9
        base = Grid3D(shape=(n, n, n), spacing=(2, 2, 2))
        zz, yy, xx = np.meshgrid(*(np.arange(n),) * 3, indexing="ij")
        ramp = (0.5 * zz + 1.5 * yy - 0.75 * xx).astype(np.float32)
        vol = Volume(grid=base, values=ramp)
        fine = Grid3D(shape=(2 * n - 1,) * 3, spacing=(1, 1, 1))
        up = preprocess.resample_to_grid(vol, fine)
        down = preprocess.resample_to_grid(up, base)
        assert np.max(np.abs(down.values - ramp)) <= 1e-6

    def test_disjoint_extents_rejected(self):
        grid = Grid3D(shape=(4, 4, 4), spacing=(1, 1, 1))
        vol = Volume(grid=grid, values=np.zeros((4, 4, 4), dtype=np.float32))
        far = Grid3D(shape=(4, 4, 4), spacing=(1, 1, 1), origin=(100.0, 0.0, 0.0))
        with pytest.raises(GeometryError):
            preprocess.resample_to_grid(vol, far)


class TestStatsFile:
    def test_round_trip(self, tmp_path):
        stats = preprocess.NormalizationStats(
            ct=preprocess.ChannelStats(mean=1.0, std=2.0, p_low=-3.0, p_high=5.0),
            pet=preprocess.ChannelStats(mean=0.5, std=0.25, p_low=0.0, p_high=9.0),
        )
        path = tmp_path / "stats.jsonl"
        preprocess.save_stats(stats, path)
        assert preprocess.load_stats(path) == stats
