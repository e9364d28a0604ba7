import numpy as np
import pytest

from foldnet.data import DataConfig, generate_dataset, generate_split


def cfg(**kw):
    base = dict(seed=11, sizes=(32, 8, 8), t_range=(8, 12), vocab_size=6,
                noise_rate=0.5)
    base.update(kw)
    return DataConfig(**base)


class TestGenerateDataset:
    def test_same_seed_identical(self):
        a = generate_dataset(cfg())
        b = generate_dataset(cfg())
        assert a == b

    def test_splits_use_distinct_streams(self):
        train, dev, test = generate_dataset(cfg(sizes=(8, 8, 8)))
        assert train != dev
        assert dev != test

    def test_zero_noise_targets_equal_inputs(self):
        train, _, _ = generate_dataset(cfg(noise_rate=0.0, vocab_size=8))
        for sample in train:
            assert sample.target == sample.inputs

    def test_targets_are_content_subsequence(self):
        train, dev, test = generate_dataset(cfg())
        for sample in train + dev + test:
            assert sample.target == tuple(v for v in sample.inputs if v != 0)
            assert len(sample.target) >= 1

    def test_targets_always_ctc_feasible(self):
        train, _, _ = generate_dataset(cfg(sizes=(200, 1, 1), vocab_size=2,
                                           noise_rate=0.3))
        for sample in train:
            dups = sum(1 for a, b in zip(sample.target, sample.target[1:])
                       if a == b)
            assert len(sample.inputs) >= len(sample.target) + dups

    def test_mean_target_length_matches_binomial(self):
        # noise 0.5 over T=12 keeps 6 content tokens in expectation.
        samples = generate_split(99, 0, 10_000, (12, 12), 16, 0.5)
        mean_len = np.mean([len(s.target) for s in samples])
        assert mean_len == pytest.approx(6.0, abs=0.2)

    def test_lengths_respect_range(self):
        train, _, _ = generate_dataset(cfg(t_range=(5, 7)))
        assert {len(s.inputs) for s in train} <= {5, 6, 7}

    def test_noise_rate_bounds(self):
        with pytest.raises(ValueError, match="noise_rate"):
            cfg(noise_rate=0.95)

    def test_vocab_lower_bound(self):
        with pytest.raises(ValueError, match="vocab"):
            cfg(vocab_size=1)

    def test_infeasible_range(self):
        with pytest.raises(ValueError, match="t_range"):
            cfg(t_range=(0, 4))
        with pytest.raises(ValueError, match="t_range"):
            cfg(t_range=(6, 4))

    def test_structurally_infeasible_draw_fails(self):
        # Long sequences with no noise and a binary vocabulary cannot avoid
        # adjacent duplicates, so resampling gives up.
        bad = cfg(t_range=(40, 40), vocab_size=2, noise_rate=0.0,
                  sizes=(4, 1, 1))
        with pytest.raises(ValueError, match="infeasible task"):
            generate_dataset(bad)
