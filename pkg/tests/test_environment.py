import hashlib

import numpy as np
import pytest
import scipy.stats

from refgame.environment import (
    DEFAULT_SIZES,
    EnvironmentSpec,
    GameInstance,
    all_objects,
    build_dataset,
    encode_objects,
    object_codes,
    one_hot_encode,
    read_split_file,
    sample_object,
    sample_objects,
    write_dataset_files,
    write_split_file,
)
from refgame.rng import RngStream


def object_probabilities(spec):
    """Exact probability of every object in lexicographic order."""
    p = np.ones(1)
    for row in spec.probs:
        p = np.kron(p, np.asarray(row))
    return p


def expected_distinct(spec, n_draws):
    """Coverage-expectation oracle: E[#distinct] = sum_o 1 - (1 - p_o)^n."""
    p = object_probabilities(spec)
    return float((1.0 - (1.0 - p) ** n_draws).sum())


class TestSpec:
    def test_uniform_preset(self):
        spec = EnvironmentSpec.uniform()
        assert spec.n_objects == 1024
        assert all(all(p == 0.25 for p in row) for row in spec.probs)

    def test_skewed_preset(self):
        spec = EnvironmentSpec.skewed()
        assert spec.probs[0] == (0.75, 0.15, 0.05, 0.05)
        assert all(all(p == 0.25 for p in row) for row in spec.probs[1:])

    def test_invalid_probs_rejected(self):
        with pytest.raises(ValueError, match="sum"):
            EnvironmentSpec(1, 2, ((0.6, 0.6),))
        with pytest.raises(ValueError, match="negative"):
            EnvironmentSpec(1, 2, ((1.5, -0.5),))


class TestSampling:
    def test_uniform_frequencies(self):
        spec = EnvironmentSpec.uniform()
        draws = sample_objects(spec, 100_000, RngStream(202).child("freq"))
        for f in range(5):
            freq = np.bincount(draws[:, f], minlength=4) / 100_000
            assert np.all(np.abs(freq - 0.25) < 0.005)

    def test_skewed_first_feature_frequencies(self):
        spec = EnvironmentSpec.skewed()
        draws = sample_objects(spec, 100_000, RngStream(102).child("freq"))
        freq = np.bincount(draws[:, 0], minlength=4) / 100_000
        assert np.all(np.abs(freq - np.array([0.75, 0.15, 0.05, 0.05])) < 0.005)

    def test_chi_square_goodness_of_fit(self):
        for spec, seed in [(EnvironmentSpec.uniform(), 103), (EnvironmentSpec.skewed(), 104)]:
            draws = sample_objects(spec, 100_000, RngStream(seed).child("chi2"))
            for f in range(spec.n_features):
                counts = np.bincount(draws[:, f], minlength=spec.n_values)
                expected = np.asarray(spec.probs[f]) * 100_000
                _, pvalue = scipy.stats.chisquare(counts, expected)
                assert pvalue > 0.001

    def test_single_draw_path(self):
        spec = EnvironmentSpec.skewed()
        rng = RngStream(105).child("single")
        draws = np.array([sample_object(spec, rng) for _ in range(5000)])
        assert draws.min() >= 1 and draws.max() <= 4
        freq1 = np.bincount(draws[:, 0] - 1, minlength=4) / 5000
        assert np.all(np.abs(freq1 - np.array([0.75, 0.15, 0.05, 0.05])) < 0.03)

    def test_degenerate_spec_single_object(self):
        spec = EnvironmentSpec(5, 4, tuple([(1.0, 0.0, 0.0, 0.0)] * 5))
        rng = RngStream(1)
        for _ in range(10):
            assert sample_object(spec, rng) == (1, 1, 1, 1, 1)


class TestBuildDataset:
    def test_default_sizes(self):
        splits = build_dataset(EnvironmentSpec.uniform(), DEFAULT_SIZES, RngStream(1).child("data"))
        assert (len(splits.train), len(splits.valid), len(splits.test)) == DEFAULT_SIZES

    def test_no_collisions(self):
        splits = build_dataset(EnvironmentSpec.skewed(), (2000, 500, 500), RngStream(2).child("data"))
        for part in (splits.train, splits.valid, splits.test):
            assert not (part.targets == part.distractors).all(axis=1).any()

    def test_distinct_test_targets_uniform(self):
        spec = EnvironmentSpec.uniform()
        oracle = expected_distinct(spec, 4000)
        assert abs(oracle - 1003.4) < 1.0
        splits = build_dataset(spec, DEFAULT_SIZES, RngStream(1).child("data"))
        distinct = len(np.unique(object_codes(splits.test.targets, spec)))
        assert abs(distinct - 1005) <= 15
        assert abs(distinct - oracle) <= 15

    def test_degenerate_spec_rejected(self):
        spec = EnvironmentSpec(2, 2, (((1.0, 0.0)), (1.0, 0.0)))
        with pytest.raises(ValueError, match="degenerate"):
            build_dataset(spec, (10, 10, 10), RngStream(3))

    def test_labels_are_binary_and_balanced(self):
        splits = build_dataset(EnvironmentSpec.uniform(), (20000, 100, 100), RngStream(4).child("data"))
        assert set(np.unique(splits.train.labels)) == {0, 1}
        assert abs(splits.train.labels.mean() - 0.5) < 0.01

    def test_instance_view(self):
        splits = build_dataset(EnvironmentSpec.uniform(), (10, 10, 10), RngStream(5).child("data"))
        inst = splits.train[0]
        assert isinstance(inst, GameInstance)
        assert inst.presented_pair()[inst.label] == inst.target


class TestEncoding:
    def test_all_ones_object(self):
        spec = EnvironmentSpec.uniform()
        enc = one_hot_encode((1, 1, 1, 1, 1), spec)
        assert np.nonzero(enc)[0].tolist() == [0, 4, 8, 12, 16]

    def test_all_fours_object(self):
        spec = EnvironmentSpec.uniform()
        enc = one_hot_encode((4, 4, 4, 4, 4), spec)
        assert np.nonzero(enc)[0].tolist() == [3, 7, 11, 15, 19]

    def test_encoding_sums_to_feature_count(self):
        spec = EnvironmentSpec.uniform()
        rng = RngStream(6).child("enc")
        for _ in range(20):
            assert one_hot_encode(sample_object(spec, rng), spec).sum() == 5.0

    def test_out_of_range_rejected(self):
        spec = EnvironmentSpec.uniform()
        with pytest.raises(ValueError, match="out of range"):
            one_hot_encode((0, 1, 1, 1, 1), spec)
        with pytest.raises(ValueError, match="out of range"):
            one_hot_encode((1, 1, 1, 1, 5), spec)

    def test_batch_matches_single(self):
        spec = EnvironmentSpec.uniform()
        values = sample_objects(spec, 50, RngStream(7).child("enc"))
        batch = encode_objects(values, spec)
        for i in range(50):
            single = one_hot_encode(tuple(int(v) + 1 for v in values[i]), spec)
            assert np.array_equal(batch[i], single)

    def test_all_objects_lexicographic(self):
        spec = EnvironmentSpec(2, 3, ((1 / 3,) * 3, (1 / 3,) * 3))
        objs = all_objects(spec)
        assert objs.shape == (9, 2)
        assert objs[0].tolist() == [0, 0]
        assert objs[-1].tolist() == [2, 2]
        assert np.array_equal(object_codes(objs, spec), np.arange(9))


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        spec = EnvironmentSpec.skewed()
        splits = build_dataset(spec, (200, 50, 50), RngStream(11).child("data"))
        path = tmp_path / "data.test.txt"
        write_split_file(path, splits, "test")
        got_spec, sizes, seed, name, part = read_split_file(path)
        assert got_spec == spec
        assert sizes == (200, 50, 50)
        assert seed == 11
        assert name == "test"
        assert part == splits.test

    def test_regeneration_byte_identical(self, tmp_path):
        spec = EnvironmentSpec.uniform()
        digests = []
        for round_dir in ("a", "b"):
            out = tmp_path / round_dir
            out.mkdir()
            splits = build_dataset(spec, (500, 100, 100), RngStream(42).child("data"))
            paths = write_dataset_files(splits, out)
            digests.append([hashlib.sha256(open(p, "rb").read()).hexdigest() for p in paths])
        assert digests[0] == digests[1]

    def test_different_seed_differs(self, tmp_path):
        spec = EnvironmentSpec.uniform()
        a = build_dataset(spec, (100, 50, 50), RngStream(1).child("data"))
        b = build_dataset(spec, (100, 50, 50), RngStream(2).child("data"))
        assert not np.array_equal(a.train.targets, b.train.targets)

    def test_rejects_corrupt_label(self, tmp_path):
        spec = EnvironmentSpec.uniform()
        splits = build_dataset(spec, (10, 10, 10), RngStream(9).child("data"))
        path = tmp_path / "data.train.txt"
        write_split_file(path, splits, "train")
        lines = path.read_text().splitlines()
        body = lines[1].split("|")
        body[2] = " 1 " if body[2].strip() == "0" else " 0 "
        lines[1] = "|".join(body)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match="inconsistent"):
            read_split_file(path)
