import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jghm.model import (
    JghmModel,
    ModelError,
    ModelGenSpec,
    TreeTopology,
    effective_b_psi,
    leaf_index,
    make_pflip_model,
    model_from_json,
    model_to_json,
    validate_model,
)


def topo(depth=2, m_im=(2, 2), m_tx=(2, 2), S=3):
    return TreeTopology(depth=depth, m_im=m_im, m_tx=m_tx, n_states=S)


class TestTopology:
    def test_leaf_counts(self):
        t = topo(m_im=(2, 3), m_tx=(3, 1))
        assert t.d_im == 6 and t.d_tx == 3
        assert t.level_sizes("im") == (2, 6)
        assert t.level_sizes("tx") == (3, 3)
        assert t.total_nodes() == 1 + 8 + 6

    def test_invalid_topologies(self):
        with pytest.raises(ModelError):
            TreeTopology(depth=0, m_im=(), m_tx=(), n_states=3)
        with pytest.raises(ModelError):
            TreeTopology(depth=1, m_im=(2,), m_tx=(2,), n_states=1)
        with pytest.raises(ModelError):
            TreeTopology(depth=2, m_im=(2,), m_tx=(2, 2), n_states=3)
        with pytest.raises(ModelError):
            TreeTopology(depth=1, m_im=(0,), m_tx=(1,), n_states=2)


class TestLeafIndex:
    def test_first_and_last(self):
        t = topo()
        assert leaf_index(t, "im", (1, 1)) == 1
        assert leaf_index(t, "im", (2, 2)) == 4

    def test_numbering_formula(self):
        # direct evaluation: child rank + m * (parent rank - 1)
        t = topo(m_im=(3, 3), m_tx=(3, 3))
        assert leaf_index(t, "im", (2, 3)) == 3 + 3 * (2 - 1)

    def test_out_of_range(self):
        with pytest.raises(ModelError):
            leaf_index(topo(), "im", (3, 1))
        with pytest.raises(ModelError):
            leaf_index(topo(), "tx", (1,))

    @pytest.mark.parametrize("ms", [(2, 2), (3, 2), (1, 4), (2, 3, 2)])
    def test_bijection_exhaustive(self, ms):
        t = TreeTopology(depth=len(ms), m_im=ms, m_tx=ms, n_states=2)
        seen = [leaf_index(t, "im", path) for path in itertools.product(*[range(1, m + 1) for m in ms])]
        assert sorted(seen) == list(range(1, int(np.prod(ms)) + 1))

    @given(st.lists(st.integers(min_value=1, max_value=4), min_size=1, max_size=4), st.data())
    @settings(max_examples=50, deadline=None)
    def test_index_within_range(self, ms, data):
        t = TreeTopology(depth=len(ms), m_im=tuple(ms), m_tx=tuple(ms), n_states=2)
        path = [data.draw(st.integers(min_value=1, max_value=m)) for m in ms]
        idx = leaf_index(t, "im", path)
        assert 1 <= idx <= t.d_im


def uniform_model(S=3):
    t = topo(S=S)
    uni = np.full((S, S), 1.0 / S)
    return JghmModel(
        topology=t,
        root_prior=np.full(S, 1.0 / S),
        kernels_im=((uni, uni), (uni, uni)),
        kernels_tx=((uni, uni), (uni, uni)),
    )


class TestValidateModel:
    def test_uniform_model_ok(self):
        b = validate_model(uniform_model())
        assert b == pytest.approx(3.0)

    def test_permutation_model_warns_infinite_budget(self):
        m = make_pflip_model(ModelGenSpec(topology=topo(), p_flip=0.0, seed=4))
        with pytest.warns(UserWarning, match="B_psi = inf"):
            b = validate_model(m)
        assert np.isinf(b)

    def test_bad_row_sum_rejected(self):
        m = uniform_model()
        bad = np.full((3, 3), 0.3)  # rows sum to 0.9
        broken = JghmModel(
            topology=m.topology,
            root_prior=m.root_prior,
            kernels_im=((bad, m.kernels_im[0][1]), m.kernels_im[1]),
            kernels_tx=m.kernels_tx,
        )
        with pytest.raises(ModelError, match="row sums"):
            validate_model(broken)

    def test_negative_entry_rejected(self):
        m = uniform_model()
        bad = np.array([[1.2, -0.1, -0.1], [0.4, 0.3, 0.3], [0.4, 0.3, 0.3]])
        broken = JghmModel(
            topology=m.topology,
            root_prior=m.root_prior,
            kernels_im=m.kernels_im,
            kernels_tx=((bad, m.kernels_tx[0][1]), m.kernels_tx[1]),
        )
        with pytest.raises(ModelError, match="negative"):
            validate_model(broken)

    def test_shape_mismatch_rejected(self):
        m = uniform_model()
        broken = JghmModel(
            topology=m.topology,
            root_prior=m.root_prior,
            kernels_im=(m.kernels_im[0],),
            kernels_tx=m.kernels_tx,
        )
        with pytest.raises(ModelError, match="levels"):
            validate_model(broken)


class TestPflipFamily:
    def test_p_zero_rows_one_hot(self):
        m = make_pflip_model(ModelGenSpec(topology=topo(), p_flip=0.0, seed=9))
        for level in m.kernels_im + m.kernels_tx:
            for k in level:
                assert np.all(np.isin(k, (0.0, 1.0)))
                assert np.all(k.sum(axis=1) == 1.0)

    def test_p_one_strictly_positive(self):
        m = make_pflip_model(ModelGenSpec(topology=topo(), p_flip=1.0, seed=9))
        for level in m.kernels_im:
            for k in level:
                assert np.all(k > 0)

    def test_convex_combination_reconstructs(self):
        spec0 = ModelGenSpec(topology=topo(), p_flip=0.0, seed=13)
        spec1 = ModelGenSpec(topology=topo(), p_flip=1.0, seed=13)
        spec_half = ModelGenSpec(topology=topo(), p_flip=0.5, seed=13)
        m0, m1, mh = map(make_pflip_model, (spec0, spec1, spec_half))
        for lv in range(2):
            for r in range(2):
                expected = 0.5 * m0.kernels_im[lv][r] + 0.5 * m1.kernels_im[lv][r]
                assert np.allclose(mh.kernels_im[lv][r], expected, atol=1e-15)

    def test_referential_transparency(self):
        spec = ModelGenSpec(topology=topo(), p_flip=0.37, seed=99)
        a, b = make_pflip_model(spec), make_pflip_model(spec)
        assert np.array_equal(a.root_prior, b.root_prior)
        for la, lb in zip(a.kernels_tx, b.kernels_tx):
            for ka, kb in zip(la, lb):
                assert np.array_equal(ka, kb)

    def test_positive_floor_for_positive_p(self):
        p = 0.2
        m = make_pflip_model(ModelGenSpec(topology=topo(), p_flip=p, seed=3))
        b = validate_model(m)
        assert np.isfinite(b)
        smallest = min(k.min() for level in m.kernels_im + m.kernels_tx for k in level)
        assert smallest > 0

    def test_per_modality_mixing(self):
        spec = ModelGenSpec(topology=topo(), p_flip=0.3, p_flip_tx=0.05, seed=3)
        m = make_pflip_model(spec)
        ref = make_pflip_model(ModelGenSpec(topology=topo(), p_flip=0.3, seed=3))
        assert np.array_equal(m.kernels_im[0][0], ref.kernels_im[0][0])
        assert not np.array_equal(m.kernels_tx[0][0], ref.kernels_tx[0][0])
        assert m.metadata["p_flip_tx"] == 0.05

    def test_gaussian_scale_recorded(self):
        spec = ModelGenSpec(topology=topo(), p_flip=0.5, seed=3, gaussian_scale=2.5)
        assert make_pflip_model(spec).metadata["gaussian_scale"] == 2.5

    def test_invalid_p_flip(self):
        with pytest.raises(ModelError):
            ModelGenSpec(topology=topo(), p_flip=1.5, seed=0)

    @given(
        st.integers(min_value=1, max_value=2),
        st.integers(min_value=1, max_value=3),
        st.integers(min_value=2, max_value=4),
        st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
        st.integers(min_value=0, max_value=2**32),
    )
    @settings(max_examples=30, deadline=None)
    def test_generated_models_always_validate(self, depth, m, S, p, seed):
        t = TreeTopology(depth=depth, m_im=(m,) * depth, m_tx=(m,) * depth, n_states=S)
        model = make_pflip_model(ModelGenSpec(topology=t, p_flip=p, seed=seed))
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            b = validate_model(model)
        assert b >= S or np.isinf(b)


class TestSerialization:
    def test_round_trip_bit_exact(self):
        m = make_pflip_model(ModelGenSpec(topology=topo(), p_flip=0.31, seed=7))
        text = model_to_json(m)
        back = model_from_json(text)
        assert np.array_equal(back.root_prior, m.root_prior)
        for la, lb in zip(back.kernels_im, m.kernels_im):
            for ka, kb in zip(la, lb):
                assert np.array_equal(ka, kb)
        assert model_to_json(back) == text

    def test_same_spec_same_bytes(self):
        spec = ModelGenSpec(topology=topo(), p_flip=0.31, seed=7)
        assert model_to_json(make_pflip_model(spec)) == model_to_json(make_pflip_model(spec))

    def test_metadata_preserved(self):
        m = make_pflip_model(ModelGenSpec(topology=topo(), p_flip=0.2, seed=1))
        doc = json.loads(model_to_json(m))
        assert doc["metadata"]["p_flip"] == 0.2
        assert doc["schema_version"] == 1

    def test_bad_schema_rejected(self):
        with pytest.raises(ModelError):
            model_from_json('{"schema_version": 99}')


def test_effective_b_psi_uniform():
    assert effective_b_psi(uniform_model()) == pytest.approx(3.0)


def test_models_are_frozen(ref_model):
    with pytest.raises(ValueError):
        ref_model.root_prior[0] = 0.5
    with pytest.raises(ValueError):
        ref_model.kernels_im[0][0][0, 0] = 0.5
