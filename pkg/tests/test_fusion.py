import numpy as np
import pytest

from medtok import fusion, numcore as nc
from medtok.errors import DimensionError


def ones_params(d, d_t, d_g):
    return fusion.FusionParams(
        f_t=np.eye(d, d_t),
        f_g=np.eye(d, d_g),
        w_q_t=np.eye(d, d_t),
        w_k_t=np.eye(d, d_t),
        w_v_t=np.eye(d, d_t),
        w_q_g=np.eye(d, d_g),
        w_k_g=np.eye(d, d_g),
        w_v_g=np.eye(d, d_g),
        d=d,
    )


def random_params(d, d_t, d_g, seed=0):
    return fusion.init_fusion_params(d, d_t, d_g, np.random.default_rng(seed))


class TestProjectSpecific:
    def test_identity_projector(self):
        p = ones_params(3, 3, 3)
        x_t = np.array([[1.0, -2.0, 0.5]])
        e_t_s, _ = fusion.project_specific(nc.constant(x_t), nc.constant(np.zeros((1, 3))), p)
        np.testing.assert_array_equal(e_t_s.value, x_t)

    def test_zero_input(self):
        p = random_params(4, 5, 6)
        e_t_s, e_g_s = fusion.project_specific(
            nc.constant(np.zeros((1, 5))), nc.constant(np.zeros((1, 6))), p
        )
        np.testing.assert_array_equal(e_t_s.value, np.zeros((1, 4)))
        np.testing.assert_array_equal(e_g_s.value, np.zeros((1, 4)))

    def test_hand_case(self):
        p = ones_params(1, 2, 2)
        p.f_t = np.array([[1.0, 1.0]])
        e_t_s, _ = fusion.project_specific(
            nc.constant([[2.0, 3.0]]), nc.constant([[0.0, 0.0]]), p
        )
        np.testing.assert_array_equal(e_t_s.value, [[5.0]])

    def test_dimension_mismatch(self):
        p = random_params(4, 5, 6)
        with pytest.raises(DimensionError):
            fusion.project_specific(nc.constant(np.zeros((1, 7))), nc.constant(np.zeros((1, 6))), p)


class TestCrossAttend:
    def test_single_key_degeneracy(self):
        rng = np.random.default_rng(1)
        d, d_t, d_g = 4, 5, 6
        p = random_params(d, d_t, d_g)
        queries = rng.normal(size=(3, d_t))
        key = rng.normal(size=(1, d_g))
        out = fusion.cross_attend(queries, key, p.w_q_t, p.w_k_g, p.w_v_g, d)
        np.testing.assert_allclose(out.value, (p.w_v_g @ key[0]).reshape(1, d), rtol=0, atol=1e-12)

    def test_duplicate_keys_match_single_key(self):
        rng = np.random.default_rng(2)
        d, d_t, d_g = 4, 5, 6
        p = random_params(d, d_t, d_g)
        queries = rng.normal(size=(2, d_t))
        key = rng.normal(size=(1, d_g))
        doubled = np.vstack([key, key])
        single = fusion.cross_attend(queries, key, p.w_q_t, p.w_k_g, p.w_v_g, d)
        dup = fusion.cross_attend(queries, doubled, p.w_q_t, p.w_k_g, p.w_v_g, d)
        np.testing.assert_allclose(dup.value, single.value, rtol=0, atol=1e-12)

    def test_hand_softmax_case(self):
        # One query, two keys with scores (1, 0) at d=1, values 2 and 0:
        # output = softmax([1, 0])[0] * 2 = 0.731058... * 2
        d = 1
        w_q = np.array([[1.0]])
        w_k = np.array([[1.0]])
        queries = np.array([[1.0]])
        keys = np.array([[1.0], [0.0]])
        w_v = np.array([[2.0]])
        out = fusion.cross_attend(queries, keys, w_q, w_k, w_v, d)
        np.testing.assert_allclose(out.value, [[1.4621171572600098]], rtol=0, atol=1e-12)

    def test_weights_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        d, d_t, d_g = 4, 5, 6
        p = random_params(d, d_t, d_g)
        q = nc.constant(rng.normal(size=(3, d_t)))
        kv = nc.constant(rng.normal(size=(7, d_g)))
        qp = nc.matmul(q, nc.transpose(p.w_q_t))
        kp = nc.matmul(kv, nc.transpose(p.w_k_g))
        attn = nc.softmax_rows(nc.scale(nc.matmul(qp, nc.transpose(kp)), 1.0 / np.sqrt(d)))
        np.testing.assert_allclose(attn.value.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_key_permutation_invariance(self):
        rng = np.random.default_rng(4)
        d, d_t, d_g = 4, 5, 6
        p = random_params(d, d_t, d_g)
        queries = rng.normal(size=(2, d_t))
        keys = rng.normal(size=(5, d_g))
        perm = keys[[3, 1, 4, 0, 2]]
        a = fusion.cross_attend(queries, keys, p.w_q_t, p.w_k_g, p.w_v_g, d)
        b = fusion.cross_attend(queries, perm, p.w_q_t, p.w_k_g, p.w_v_g, d)
        np.testing.assert_allclose(a.value, b.value, rtol=0, atol=1e-12)


class TestFuse:
    def test_degenerate_single_states(self):
        rng = np.random.default_rng(5)
        d, d_t, d_g = 4, 5, 6
        p = random_params(d, d_t, d_g)
        x_t = rng.normal(size=(1, d_t))
        x_g = rng.normal(size=(1, d_g))
        out = fusion.fuse(x_t, x_g, x_t, x_g, p)
        np.testing.assert_allclose(out.e_t_c.value, (p.w_v_g @ x_g[0]).reshape(1, d), rtol=0, atol=1e-12)
        np.testing.assert_allclose(out.e_g_c.value, (p.w_v_t @ x_t[0]).reshape(1, d), rtol=0, atol=1e-12)

    def test_zero_weights_give_zero_embeddings(self):
        rng = np.random.default_rng(6)
        d, d_t, d_g = 4, 5, 6
        p = fusion.FusionParams(
            *(np.zeros((d, c)) for c in (d_t, d_g, d_t, d_t, d_t, d_g, d_g, d_g)), d=d
        )
        out = fusion.fuse(
            rng.normal(size=(2, d_t)),
            rng.normal(size=(3, d_g)),
            rng.normal(size=(1, d_t)),
            rng.normal(size=(1, d_g)),
            p,
        )
        for node in (out.e_t_s, out.e_g_s, out.e_t_c, out.e_g_c):
            np.testing.assert_array_equal(node.value, np.zeros((1, d)))

    def test_graph_state_permutation_leaves_e_t_c_unchanged(self):
        rng = np.random.default_rng(7)
        d, d_t, d_g = 4, 5, 6
        p = random_params(d, d_t, d_g)
        t_states = rng.normal(size=(3, d_t))
        n_states = rng.normal(size=(5, d_g))
        x_t, x_g = rng.normal(size=(1, d_t)), rng.normal(size=(1, d_g))
        a = fusion.fuse(t_states, n_states, x_t, x_g, p)
        b = fusion.fuse(t_states, n_states[[4, 2, 0, 1, 3]], x_t, x_g, p)
        np.testing.assert_allclose(a.e_t_c.value, b.e_t_c.value, rtol=0, atol=1e-12)

    def test_deterministic_bitwise(self):
        rng = np.random.default_rng(8)
        d, d_t, d_g = 4, 5, 6
        p = random_params(d, d_t, d_g)
        args = (
            rng.normal(size=(3, d_t)),
            rng.normal(size=(4, d_g)),
            rng.normal(size=(1, d_t)),
            rng.normal(size=(1, d_g)),
        )
        a = fusion.fuse(*args, p)
        b = fusion.fuse(*args, p)
        for ga, gb in zip(a.groups().values(), b.groups().values()):
            np.testing.assert_array_equal(ga.value, gb.value)

    def test_fusion_parameter_gradients(self):
        rng = np.random.default_rng(9)
        d, d_t, d_g = 3, 4, 5
        base = random_params(d, d_t, d_g)
        t_states = rng.normal(size=(2, d_t))
        n_states = rng.normal(size=(3, d_g))
        x_t, x_g = rng.normal(size=(1, d_t)), rng.normal(size=(1, d_g))
        probe = rng.normal(size=(1, d))

        fields = ["f_t", "f_g", "w_q_t", "w_k_t", "w_v_t", "w_q_g", "w_k_g", "w_v_g"]
        for name in fields:
            def f(n, name=name):
                kwargs = {k: getattr(base, k) for k in fields}
                kwargs[name] = n
                p = fusion.FusionParams(**kwargs, d=d)
                out = fusion.fuse(t_states, n_states, x_t, x_g, p)
                total = None
                for node in out.groups().values():
                    term = nc.sum_all(nc.mul(node, nc.constant(probe)))
                    total = term if total is None else nc.add(total, term)
                return total

            assert nc.grad_check(f, getattr(base, name)) < 1e-6, name

    def test_gradient_flows_to_graph_input(self):
        rng = np.random.default_rng(10)
        d, d_t, d_g = 3, 4, 5
        p = random_params(d, d_t, d_g)
        t_states = rng.normal(size=(2, d_t))
        x_t = rng.normal(size=(1, d_t))
        probe = rng.normal(size=(1, d))

        def f(n):
            out = fusion.fuse(t_states, n, x_t, nc.mean_rows(n), p)
            total = nc.sum_all(nc.mul(out.e_g_s, nc.constant(probe)))
            return nc.add(total, nc.sum_all(nc.mul(out.e_t_c, nc.constant(probe))))

        assert nc.grad_check(f, rng.normal(size=(3, d_g))) < 1e-6
