import numpy as np
import pytest

from metaif.bilevel import BilevelConfig, train_meta
from metaif.datasets import (
    CorruptionSpec,
    DataError,
    EpisodeSpec,
    corrupt,
    gen_synthetic_tasks,
    load_csv_corpus,
    load_tasks,
    make_episodes,
    save_tasks,
    write_csv_corpus,
)
from metaif.errors import ConfigError
from metaif.model import Architecture, MLP


def small_pool(rng, classes=4, per_class=6, dim=3):
    return {c: rng.normal(loc=c, size=(per_class, dim)) for c in range(classes)}


class TestSpecs:
    def test_non_positive_count(self):
        with pytest.raises(ConfigError):
            EpisodeSpec(n_way=0)

    @pytest.mark.parametrize("frac", [-0.1, 1.5])
    def test_fraction_range(self, frac):
        with pytest.raises(ConfigError):
            CorruptionSpec(task_fraction=frac)


class TestSynthetic:
    def test_counts(self):
        spec = EpisodeSpec(n_way=3, k_shot=2, k_query=4, num_tasks=5, seed=1)
        tasks = gen_synthetic_tasks(spec, clusters=6, dim=4)
        assert len(tasks) == 5
        for t in tasks:
            assert len(t.train) == 6 and len(t.val) == 12
            assert np.bincount(t.train.y).tolist() == [2, 2, 2]

    def test_deterministic(self):
        spec = EpisodeSpec(num_tasks=3, seed=9)
        a = gen_synthetic_tasks(spec, clusters=8, dim=5, noise=(0.1, 0.3))
        b = gen_synthetic_tasks(spec, clusters=8, dim=5, noise=(0.1, 0.3))
        for ta, tb in zip(a, b):
            assert ta.train.X.tobytes() == tb.train.X.tobytes()
            assert ta.val.y.tobytes() == tb.val.y.tobytes()

    def test_too_few_clusters(self):
        with pytest.raises(DataError):
            gen_synthetic_tasks(EpisodeSpec(n_way=5), clusters=3, dim=2)

    def test_shared_world(self):
        kw = dict(clusters=6, dim=3, noise=0.0, world_seed=4)
        a = gen_synthetic_tasks(EpisodeSpec(n_way=6, num_tasks=1, seed=0), **kw)[0]
        b = gen_synthetic_tasks(EpisodeSpec(n_way=6, num_tasks=1, seed=1), **kw)[0]
        np.testing.assert_array_equal(a.train.X, b.train.X)

    def test_noiseless_separable_linear_model(self):
        spec = EpisodeSpec(n_way=3, k_shot=2, k_query=3, num_tasks=2, seed=0)
        tasks = gen_synthetic_tasks(spec, clusters=3, dim=4, noise=0.0, separation=3.0)
        net = MLP(Architecture((4, 3), ()))
        state = train_meta(tasks, BilevelConfig(delta=1.0, outer_tol=1e-6), net, seed=0)
        for t in tasks:
            pred = net.predict(state.thetas[t.task_id], t.val.X)
            assert np.all(pred == t.val.y)


class TestCsvCorpus:
    def test_tiny_file(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("a,b,label\n1,2,0\n3,4,0\n5,6,1\n7,8,1\n")
        pool = load_csv_corpus(p)
        assert {k: len(v) for k, v in pool.items()} == {0: 2, 1: 2}
        np.testing.assert_array_equal(pool[1][0], [5.0, 6.0])

    def test_label_column_anywhere(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("cls,f\n2,0.5\n")
        assert load_csv_corpus(p, "cls")[2].tolist() == [[0.5]]

    def test_empty_file(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("")
        with pytest.raises(DataError, match="empty"):
            load_csv_corpus(p)

    def test_missing_label_column(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(DataError, match="label column"):
            load_csv_corpus(p)

    def test_non_numeric_reports_line(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("a,label\n1,0\nx,1\n")
        with pytest.raises(DataError, match=":3:"):
            load_csv_corpus(p)

    def test_ragged_row(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("a,b,label\n1,2,0\n1,0\n")
        with pytest.raises(DataError, match="expected 3 fields"):
            load_csv_corpus(p)

    def test_round_trip(self, tmp_path, rng):
        pool = small_pool(rng)
        write_csv_corpus(pool, tmp_path / "c.csv")
        back = load_csv_corpus(tmp_path / "c.csv")
        assert sorted(back) == sorted(pool)
        for k in pool:
            np.testing.assert_array_equal(back[k], pool[k])


class TestEpisodes:
    def test_minimal_sizes(self, rng):
        tasks = make_episodes(small_pool(rng), EpisodeSpec(n_way=2, k_shot=1, k_query=1, num_tasks=3))
        for t in tasks:
            assert len(t.train) == 2 and len(t.val) == 2
            assert sorted(t.train.y.tolist()) == [0, 1]

    def test_disjoint_splits(self, rng):
        tasks = make_episodes(small_pool(rng), EpisodeSpec(n_way=3, k_shot=2, k_query=3, num_tasks=20))
        for t in tasks:
            tr = {r.tobytes() for r in t.train.X}
            assert not any(r.tobytes() in tr for r in t.val.X)

    def test_insufficient_examples(self, rng):
        with pytest.raises(DataError, match="class"):
            make_episodes(small_pool(rng, per_class=3), EpisodeSpec(n_way=2, k_shot=2, k_query=2))

    def test_class_frequency_uniform(self, rng):
        pool = small_pool(rng, classes=6, per_class=3, dim=1)
        # class identity is recoverable from the feature's location
        spec = EpisodeSpec(n_way=2, k_shot=1, k_query=1, num_tasks=1000, seed=3)
        counts = np.zeros(6)
        lookup = {pool[c][i, 0]: c for c in pool for i in range(3)}
        for t in make_episodes(pool, spec):
            for x in t.train.X[:, 0]:
                counts[lookup[x]] += 1
        expected = 1000 * 2 / 6
        sigma = np.sqrt(1000 * (2 / 6) * (4 / 6))
        assert np.all(np.abs(counts - expected) < 3 * sigma)


class TestCorrupt:
    @pytest.fixture
    def tasks(self):
        return gen_synthetic_tasks(EpisodeSpec(n_way=2, k_shot=3, k_query=2, num_tasks=20, seed=0),
                                   clusters=4, dim=3)

    def test_zero_fraction(self, tasks):
        out = corrupt(tasks, CorruptionSpec(0.0, 0.5))
        assert not any(t.corrupted for t in out)
        for a, b in zip(tasks, out):
            np.testing.assert_array_equal(a.train.y, b.train.y)

    def test_binary_full_flip(self, tasks):
        out = corrupt(tasks, CorruptionSpec(1.0, 1.0))
        for a, b in zip(tasks, out):
            np.testing.assert_array_equal(b.train.y, 1 - a.train.y)

    def test_flagged_count(self, tasks):
        out = corrupt(tasks, CorruptionSpec(0.8, 0.4, seed=5))
        assert sum(t.corrupted for t in out) == 16

    def test_validation_untouched_and_flip_count(self, tasks):
        out = corrupt(tasks, CorruptionSpec(0.5, 0.5, seed=2))
        for a, b in zip(tasks, out):
            np.testing.assert_array_equal(a.val.y, b.val.y)
            np.testing.assert_array_equal(a.train.X, b.train.X)
            changed = int(np.sum(a.train.y != b.train.y))
            assert changed == (3 if b.corrupted else 0)

    def test_deterministic(self, tasks):
        a = corrupt(tasks, CorruptionSpec(0.3, 0.4, seed=1))
        b = corrupt(tasks, CorruptionSpec(0.3, 0.4, seed=1))
        assert [t.corrupted for t in a] == [t.corrupted for t in b]


class TestTaskBundle:
    def test_round_trip(self, tmp_path):
        tasks = gen_synthetic_tasks(EpisodeSpec(n_way=2, k_shot=2, k_query=2, num_tasks=3), clusters=3, dim=2)
        tasks = corrupt(tasks, CorruptionSpec(0.4, 0.5, seed=0))
        save_tasks(tasks, tmp_path / "b", meta={"seed": 0})
        back, manifest = load_tasks(tmp_path / "b")
        assert manifest["seed"] == 0 and manifest["format"] == "metaif-tasks/1"
        for a, b in zip(tasks, back):
            assert a.task_id == b.task_id and a.corrupted == b.corrupted
            np.testing.assert_array_equal(a.train.X, b.train.X)
            np.testing.assert_array_equal(a.val.y, b.val.y)
