import itertools

import numpy as np
import pytest

from smtnav.autodiff import ParamStore, Tensor
from smtnav.embedding import EmbeddingConfig, Embedder, Observation, embed_observation
from smtnav.errors import ContractError
from smtnav.memory import (
    SceneMemory,
    covering_radius,
    fps_centers,
    fps_indices,
    static_centers,
    window_centers,
)

from test_embedding import make_embedder, make_obs, rigid


def fill(rng, emb, n, capacity=500):
    m = SceneMemory(capacity)
    obs = []
    for t in range(n):
        o = make_obs(rng, prev=3 if t == 0 else t % 3, t=t, pose=rng.normal(size=3) * 3)
        m.update(o, emb)
        obs.append(o)
    return m, obs


class TestUpdate:
    def test_first_update(self, rng):
        emb, _ = make_embedder(rng)
        assert len(fill(rng, emb, 1)[0]) == 1

    @pytest.mark.parametrize("n,cap", [(5, 10), (10, 10), (23, 10)])
    def test_size(self, rng, n, cap):
        emb, _ = make_embedder(rng)
        assert len(fill(rng, emb, n, cap)[0]) == min(n, cap)

    def test_fifo(self, rng):
        emb, _ = make_embedder(rng)
        m, _ = fill(rng, emb, 60, capacity=50)
        assert m.steps == list(range(10, 60))

    def test_out_of_order(self, rng):
        emb, _ = make_embedder(rng)
        m, _ = fill(rng, emb, 3)
        with pytest.raises(ContractError):
            m.update(make_obs(rng, t=2), emb)

    def test_capacity_positive(self):
        with pytest.raises(ContractError):
            SceneMemory(0)


class TestMaterialize:
    def test_matches_from_scratch(self, rng):
        emb, _ = make_embedder(rng)
        m, obs = fill(rng, emb, 12)
        frame = np.array([0.5, -1.0, 0.3])
        scratch = np.concatenate([embed_observation(o, frame, emb, now=20).value for o in obs])
        np.testing.assert_allclose(m.materialize(frame, emb, 20).value, scratch, atol=1e-12)

    def test_pure(self, rng):
        emb, _ = make_embedder(rng)
        m, _ = fill(rng, emb, 5)
        a = m.materialize([0, 0, 0], emb, 5).value
        assert np.array_equal(a, m.materialize([0, 0, 0], emb, 5).value)

    def test_rigid_invariance(self, rng):
        emb, _ = make_embedder(rng)
        m, obs = fill(rng, emb, 8)
        frame = np.array([1.0, 2.0, -0.4])
        a = m.materialize(frame, emb, 8).value
        moved = SceneMemory()
        for o in obs:
            moved.update(Observation(o.depth, o.valid, o.labels, rigid(o.pose, 1.3, 4.0, -2.0),
                                     o.prev_action, o.t), emb)
        b = moved.materialize(rigid(frame, 1.3, 4.0, -2.0), emb, 8).value
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_empty(self, rng):
        emb, _ = make_embedder(rng)
        with pytest.raises(ContractError):
            SceneMemory().materialize([0, 0, 0], emb, 0)


class TestCenters:
    def test_fps_all(self, rng):
        x = rng.normal(size=(6, 3))
        assert sorted(fps_indices(x, 6, 0)) == list(range(6))

    def test_fps_collinear(self):
        assert set(fps_indices(np.array([[0.0], [1.0], [10.0]]), 2, 0)) == {0, 2}

    def test_fps_default_seed_is_newest(self, rng):
        x = rng.normal(size=(9, 2))
        assert fps_centers(x, 3).indices[0] == 8

    def test_fps_tie_goes_to_lowest(self):
        x = np.array([[0.0], [1.0], [-1.0]])
        assert list(fps_indices(x, 2, 0)) == [0, 1]

    def test_fps_k_too_large(self, rng):
        with pytest.raises(ContractError):
            fps_indices(rng.normal(size=(3, 2)), 4, 0)

    def test_fps_distinct_and_spread_non_increasing(self, rng):
        x = rng.normal(size=(30, 4))
        prev = np.inf
        for k in range(2, 12):
            idx = fps_indices(x, k, 0)
            assert len(set(idx)) == k
            sel = x[idx]
            d = np.sqrt(((sel[:, None] - sel[None]) ** 2).sum(-1))
            spread = d[np.triu_indices(k, 1)].min()
            assert spread <= prev + 1e-12
            prev = spread

    @pytest.mark.parametrize("seed", range(20))
    def test_fps_two_approximation(self, seed):
        r = np.random.default_rng(seed)
        n, k = int(r.integers(3, 12)), int(r.integers(1, 4))
        x = r.normal(size=(n, 2))
        opt = min(covering_radius(x, list(c)) for c in itertools.combinations(range(n), k))
        assert covering_radius(x, fps_indices(x, k, int(r.integers(n)))) <= 2 * opt + 1e-12

    def test_window(self, rng):
        x = rng.normal(size=(10, 2))
        assert list(window_centers(x, 3).indices) == [7, 8, 9]
        assert list(window_centers(x[:2], 5).indices) == [0, 1]
        assert list(window_centers(x[:11], 3).indices) == list(window_centers(x, 3).indices)

    def test_window_shifts_by_one(self, rng):
        x = rng.normal(size=(11, 2))
        assert list(window_centers(x, 3).indices) == [8, 9, 10]
        assert list(window_centers(x[:10], 3).indices) == [7, 8, 9]

    def test_window_k_positive(self, rng):
        with pytest.raises(ContractError):
            window_centers(rng.normal(size=(3, 2)), 0)

    def test_static_stable(self, rng):
        store = ParamStore()
        store.add("centers.static", 0.1 * rng.normal(size=(4, 8)))
        a, b = static_centers(store), static_centers(store)
        assert a.rows is b.rows and len(a) == 4

    def test_fps_on_tensor_keeps_graph(self, rng):
        m = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        c = fps_centers(m, 2)
        assert c.rows.parents and c.rows.shape == (2, 3)
