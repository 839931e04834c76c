import numpy as np

from robustkit.rng import Rng, substream_seed


class TestDeterminism:
    def test_same_seed_same_uniform_stream(self):
        assert np.array_equal(Rng(42).uniform(1000), Rng(42).uniform(1000))

    def test_same_seed_same_normal_stream(self):
        assert np.array_equal(Rng(42).normal(999), Rng(42).normal(999))

    def test_same_seed_same_rademacher_stream(self):
        assert np.array_equal(Rng(1).rademacher(512), Rng(1).rademacher(512))

    def test_chunking_does_not_change_the_stream(self):
        r1 = Rng(7)
        a = np.concatenate([r1.uniform(3), r1.uniform(5), r1.uniform(2)])
        assert np.array_equal(a, Rng(7).uniform(10))

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(1).uniform(64), Rng(2).uniform(64))

    def test_derive_is_independent_of_consumption(self):
        r = Rng(5)
        child_before = r.derive("x").uniform(8)
        r.uniform(100)
        child_after = r.derive("x").uniform(8)
        assert np.array_equal(child_before, child_after)

    def test_derive_distinguishes_tags(self):
        r = Rng(5)
        assert not np.array_equal(r.derive("a").uniform(8), r.derive("b").uniform(8))
        assert not np.array_equal(r.derive(0).uniform(8), r.derive(1).uniform(8))

    def test_substream_seed_stable(self):
        assert substream_seed(3, "attack", 1, 2) == substream_seed(3, "attack", 1, 2)
        assert substream_seed(3, "attack", 1, 2) != substream_seed(3, "attack", 2, 1)

    def test_permutation_is_a_permutation(self):
        p = Rng(11).permutation(257)
        assert sorted(p) == list(range(257))
        assert np.array_equal(p, Rng(11).permutation(257))


class TestDistributions:
    def test_uniform_range_and_mean(self):
        u = Rng(3).uniform(200_000)
        assert u.min() >= 0.0 and u.max() < 1.0
        assert abs(u.mean() - 0.5) < 2e-3

    def test_uniform_scaling(self):
        u = Rng(3).uniform(100_000, low=-2.0, high=2.0)
        assert u.min() >= -2.0 and u.max() < 2.0
        assert abs(u.mean()) < 2e-2

    def test_normal_moments(self):
        z = Rng(9).normal(500_000)
        assert abs(z.mean()) < 5e-3
        assert abs(z.std() - 1.0) < 5e-3

    def test_rademacher_balance(self):
        s = Rng(4).rademacher(100_000)
        assert set(np.unique(s)) == {-1.0, 1.0}
        assert abs(s.mean()) < 1e-2

    def test_shapes(self):
        assert Rng(0).uniform((2, 3, 4)).shape == (2, 3, 4)
        assert Rng(0).normal((5,)).shape == (5,)
        assert Rng(0).rademacher(()).shape == ()
