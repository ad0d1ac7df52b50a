import numpy as np
import pytest

from qumera import channel as ch
from qumera.tensnet import contract_many


def rand_matrix(rng, d):
    return rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))


def rand_hermitian(rng, d):
    a = rand_matrix(rng, d)
    return 0.5 * (a + a.conj().T)


def rand_density(rng, d):
    a = rand_matrix(rng, d)
    rho = a @ a.conj().T
    return rho / np.trace(rho)


def selector_ansatz(m=2):
    """Hand-checkable layer: identity disentangler, isometry |c> -> |c>|0>."""
    u = np.einsum("pr,qs->pqrs", np.eye(m), np.eye(m)).astype(complex)
    w = np.zeros((m, m, m), dtype=complex)
    for c in range(m):
        w[c, 0, c] = 1.0
    return ch.MeraAnsatz(m=m, disentangler=u, isometry=w)


def raw_network_apply(rho, ansatz):
    """Channel action evaluated directly on the defining networks."""
    m = ansatz.m
    rho6 = np.asarray(rho, dtype=complex).reshape((m,) * 6)
    out = None
    for side in ("left", "right"):
        tensors, subs, _ = ch._operands(ansatz, side, rho6=rho6)
        term = contract_many(tensors, subs, output=ch._OUT_FINE)
        out = term if out is None else out + term
    return 0.5 * out.reshape(m ** 3, m ** 3)


class TestAnsatz:
    def test_random_ansatz_valid(self):
        for m in (2, 3, 4):
            ch.random_ansatz(m, seed=m).validate()

    def test_validate_rejects_nonisometry(self):
        a = ch.random_ansatz(2, seed=0)
        bad = ch.MeraAnsatz(m=2, disentangler=a.disentangler,
                            isometry=1.1 * a.isometry)
        with pytest.raises(ch.ChannelError, match="isometry"):
            bad.validate()

    def test_validate_rejects_bad_blocking(self):
        a = ch.random_ansatz(3, seed=0)
        with pytest.raises(ch.ChannelError, match="blocking"):
            ch.MeraAnsatz(m=3, disentangler=a.disentangler,
                          isometry=a.isometry, b=1).validate()


class TestChannelProperties:
    @pytest.mark.parametrize("m", [2, 3])
    def test_trace_preserved_on_arbitrary_inputs(self, m):
        rng = np.random.default_rng(m)
        d = m ** 3
        for trial in range(25):
            ans = ch.random_ansatz(m, seed=100 * m + trial)
            rho = rand_matrix(rng, d)
            out = ch.channel_apply(rho, ans)
            assert abs(np.trace(out) - np.trace(rho)) <= 1e-12 * max(abs(np.trace(rho)), 1)

    @pytest.mark.parametrize("m", [2, 3])
    def test_hermiticity_preserved(self, m):
        rng = np.random.default_rng(m + 10)
        d = m ** 3
        ans = ch.random_ansatz(m, seed=m)
        for _ in range(10):
            rho = rand_hermitian(rng, d)
            out = ch.channel_apply(rho, ans)
            assert np.linalg.norm(out - out.conj().T) <= 1e-12 * np.linalg.norm(rho)

    @pytest.mark.parametrize("m", [2, 3])
    def test_adjoint_pairing(self, m):
        rng = np.random.default_rng(m + 20)
        d = m ** 3
        for trial in range(20):
            ans = ch.random_ansatz(m, seed=200 * m + trial)
            rho = rand_hermitian(rng, d)
            h = rand_hermitian(rng, d)
            lhs = np.trace(ch.channel_apply(rho, ans) @ h)
            rhs = np.trace(rho @ ch.adjoint_apply(h, ans))
            scale = np.linalg.norm(rho) * np.linalg.norm(h)
            assert abs(lhs - rhs) <= 1e-11 * max(scale, 1.0)

    @pytest.mark.parametrize("m", [2, 3])
    def test_unital_adjoint(self, m):
        d = m ** 3
        for trial in range(5):
            ans = ch.random_ansatz(m, seed=300 * m + trial)
            out = ch.adjoint_apply(np.eye(d), ans)
            assert np.linalg.norm(out - np.eye(d)) <= 1e-12 * d

    def test_ascend_hermitian_output(self):
        rng = np.random.default_rng(3)
        ans = ch.random_ansatz(2, seed=9)
        h = rand_hermitian(rng, 8)
        out = ch.ascend(h, ans)
        assert np.linalg.norm(out - out.conj().T) <= 1e-12 * np.linalg.norm(h)

    def test_compiled_path_matches_network(self):
        # m <= 3 uses cached dilation isometries; they must reproduce the
        # defining networks exactly
        rng = np.random.default_rng(4)
        for m in (2, 3):
            ans = ch.random_ansatz(m, seed=m + 40)
            rho = rand_matrix(rng, m ** 3)
            fast = ch.channel_apply(rho, ans)
            slow = raw_network_apply(rho, ans)
            assert np.abs(fast - slow).max() <= 1e-13 * np.abs(slow).max()

    def test_choi_positive_m2(self):
        for trial in range(10):
            ans = ch.random_ansatz(2, seed=500 + trial)
            choi = ch.choi_matrix(ans)
            assert np.linalg.norm(choi - choi.conj().T) <= 1e-11
            assert np.linalg.eigvalsh(choi).min() >= -1e-10


class TestHandOracle:
    """Pin the exact wiring: with the identity disentangler and the
    state-selector isometry the channel action is computable on paper."""

    def test_left_alignment(self):
        m = 2
        ans = selector_ansatz(m)
        rng = np.random.default_rng(7)
        rho = rand_density(rng, m ** 3)
        r6 = rho.reshape((m,) * 6)
        tensors, subs, _ = ch._operands(ans, "left", rho6=r6)
        got = contract_many(tensors, subs, output=ch._OUT_FINE).reshape(8, 8)
        mid = np.einsum("aceade->cd", r6)      # middle-site marginal
        e0 = np.zeros((m, m)); e0[0, 0] = 1.0
        want = np.einsum("ab,cd,ef->acebdf", e0, mid, e0).reshape(8, 8)
        np.testing.assert_allclose(got, want, atol=1e-14)

    def test_right_alignment(self):
        m = 2
        ans = selector_ansatz(m)
        rng = np.random.default_rng(8)
        rho = rand_density(rng, m ** 3)
        r6 = rho.reshape((m,) * 6)
        tensors, subs, _ = ch._operands(ans, "right", rho6=r6)
        got = contract_many(tensors, subs, output=ch._OUT_FINE).reshape(8, 8)
        rest = np.einsum("acdaef->cdef", r6)   # sites 2,3 after tracing site 1
        e0 = np.zeros((m, m)); e0[0, 0] = 1.0
        want = np.einsum("cdef,gh->cgdehf", rest, e0).reshape(8, 8)
        np.testing.assert_allclose(got, want, atol=1e-14)

    def test_average(self):
        m = 2
        ans = selector_ansatz(m)
        rng = np.random.default_rng(9)
        rho = rand_density(rng, m ** 3)
        got = ch.channel_apply(rho, ans)
        assert abs(np.trace(got) - 1.0) <= 1e-12

    def test_fixed_point_reached_from_random_guess(self):
        m = 2
        ans = selector_ansatz(m)
        rng = np.random.default_rng(10)
        guess = rand_density(rng, m ** 3)
        res = ch.fixed_point(ans, guess=guess, tol=1e-11)
        target = np.zeros((8, 8), dtype=complex)
        target[0, 0] = 1.0
        assert np.linalg.norm(res.rho - target) <= 1e-8


class TestMaterialize:
    def test_descend_matches_matrix_m2(self):
        rng = np.random.default_rng(11)
        ans = ch.random_ansatz(2, seed=21)
        mat = ch.materialize(ans)
        assert mat.dim == 64
        for _ in range(20):
            rho = rand_matrix(rng, 8)
            via_matrix = (mat.matrix @ rho.reshape(-1)).reshape(8, 8)
            direct = ch.channel_apply(rho, ans)
            assert np.abs(via_matrix - direct).max() <= 1e-11

    def test_columnwise_trace_preservation(self):
        ans = ch.random_ansatz(2, seed=22)
        mat = ch.materialize(ans).matrix
        d = 8
        for i in range(d):
            for j in range(d):
                col = mat[:, i * d + j].reshape(d, d)
                want = 1.0 if i == j else 0.0
                assert abs(np.trace(col) - want) <= 1e-12

    def test_leading_modulus_one(self):
        for trial in range(5):
            ans = ch.random_ansatz(2, seed=600 + trial)
            vals = np.linalg.eigvals(ch.materialize(ans).matrix)
            assert abs(np.abs(vals).max() - 1.0) <= 1e-10

    def test_cap(self):
        ans = ch.random_ansatz(6, seed=1)
        with pytest.raises(ch.MaterializeError, match="iterative"):
            ch.materialize(ans)


class TestFixedPoint:
    def test_matches_dense_eigensolver_m2(self):
        for trial in range(5):
            ans = ch.random_ansatz(2, seed=700 + trial)
            res = ch.fixed_point(ans, tol=1e-12, max_iter=20000)
            mat = ch.materialize(ans).matrix
            vals, vecs = np.linalg.eig(mat)
            lead = vecs[:, np.argmin(np.abs(vals - 1.0))].reshape(8, 8)
            lead = 0.5 * (lead + lead.conj().T)
            lead /= np.trace(lead).real
            assert np.linalg.norm(res.rho - lead) <= 1e-9

    def test_residual_definition(self):
        ans = ch.random_ansatz(3, seed=31)
        res = ch.fixed_point(ans, tol=1e-10)
        drift = np.linalg.norm(ch.channel_apply(res.rho, ans) - res.rho)
        assert drift <= 1e-10
        assert res.residual <= 1e-10

    def test_fixed_point_is_valid_density_matrix(self):
        for m in (2, 3):
            ans = ch.random_ansatz(m, seed=m + 70)
            rho = ch.fixed_point(ans, tol=1e-10).rho
            assert abs(np.trace(rho) - 1.0) <= 1e-10
            assert np.linalg.norm(rho - rho.conj().T) <= 1e-10
            assert np.linalg.eigvalsh(rho).min() >= -1e-9

    def test_nonconvergence_error_carries_residual(self):
        ans = ch.random_ansatz(2, seed=32)
        with pytest.raises(ch.FixedPointError) as err:
            ch.fixed_point(ans, tol=1e-15, max_iter=2)
        assert err.value.residual > 0

    def test_tol_must_be_positive(self):
        ans = ch.random_ansatz(2, seed=33)
        with pytest.raises(ch.ChannelError):
            ch.fixed_point(ans, tol=0.0)

    def test_degenerate_unit_eigenvalue_flagged(self):
        # isometry |c> -> |c>|c> makes every |ccc><ccc| a fixed point, so the
        # unit eigenvalue is m-fold degenerate; force the Krylov path
        m = 2
        u = np.einsum("pr,qs->pqrs", np.eye(m), np.eye(m)).astype(complex)
        w = np.zeros((m, m, m), dtype=complex)
        for c in range(m):
            w[c, c, c] = 1.0
        ans = ch.MeraAnsatz(m=m, disentangler=u, isometry=w).validate()
        res = ch.fixed_point(ans, tol=1e-9, stall_window=0)
        assert res.degenerate_leading
        assert res.method == "power+krylov"
        assert res.residual <= 1e-9

    def test_warm_start_uses_guess(self):
        ans = ch.random_ansatz(2, seed=34)
        cold = ch.fixed_point(ans, tol=1e-10)
        warm = ch.fixed_point(ans, guess=cold.rho, tol=1e-10)
        assert warm.iterations <= 1


class TestSpectrum:
    def test_leading_is_unit(self):
        ans = ch.random_ansatz(3, seed=41)
        vals = ch.spectrum(ansatz=ans, k=5)
        assert abs(abs(vals[0]) - 1.0) <= 1e-10
        mods = np.abs(vals)
        assert all(mods[i] >= mods[i + 1] - 1e-12 for i in range(len(mods) - 1))

    def test_arnoldi_matches_dense_m2(self):
        ans = ch.random_ansatz(2, seed=42)
        dense = ch.spectrum(ans, k=8, method="dense")
        arn = ch.spectrum(ans, k=8, method="arnoldi")
        np.testing.assert_allclose(np.abs(arn), np.abs(dense), atol=1e-8)

    def test_k_validation(self):
        ans = ch.random_ansatz(2, seed=43)
        with pytest.raises(ch.ChannelError):
            ch.spectrum(ans, k=0)
        with pytest.raises(ch.ChannelError):
            ch.spectrum(ans, k=65)


class TestEnergy:
    def test_identity_gives_one(self):
        ans = ch.random_ansatz(2, seed=51, b=1)
        rho = ch.fixed_point(ans, tol=1e-10).rho
        val = ch.energy(ans, rho, np.eye(8))
        assert abs(float(val) - 1.0) <= 1e-9
        assert abs(val.per_spin - 1.0) <= 1e-9

    def test_zero_h(self):
        ans = ch.random_ansatz(2, seed=52, b=1)
        rho = ch.fixed_point(ans, tol=1e-10).rho
        assert float(ch.energy(ans, rho, np.zeros((8, 8)))) == 0.0

    def test_imaginary_part_guard(self):
        ans = ch.random_ansatz(2, seed=53, b=1)
        rho = ch.fixed_point(ans, tol=1e-10).rho
        with pytest.raises(ch.ChannelError, match="imaginary"):
            ch.energy(ans, rho, 1j * np.eye(8))

    def test_per_spin_requires_blocking(self):
        ans = ch.random_ansatz(2, seed=54)
        rho = ch.fixed_point(ans, tol=1e-10).rho
        assert ch.energy(ans, rho, np.eye(8)).per_spin is None


class TestValidationPaths:
    def test_descend_rejects_unnormalized(self):
        ans = ch.random_ansatz(2, seed=61)
        with pytest.raises(ch.ChannelError, match="trace"):
            ch.descend(2.0 * np.eye(8) / 8, ans)

    def test_descend_rejects_nonhermitian(self):
        ans = ch.random_ansatz(2, seed=62)
        rho = np.eye(8, dtype=complex) / 8
        rho[0, 1] = 0.3
        with pytest.raises(ch.ChannelError, match="Hermitian"):
            ch.descend(rho, ans)

    def test_ascend_rejects_nonhermitian_when_flagged(self):
        ans = ch.random_ansatz(2, seed=63)
        with pytest.raises(ch.ChannelError):
            ch.ascend(1j * np.eye(8), ans, hermitian=True)

    def test_descend_accepts_valid(self):
        ans = ch.random_ansatz(2, seed=64)
        rng = np.random.default_rng(0)
        out = ch.descend(rand_density(rng, 8), ans)
        assert abs(np.trace(out) - 1.0) <= 1e-12


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        ans = ch.random_ansatz(3, seed=71)
        path = tmp_path / "a.mera"
        ch.save_ansatz(path, ans, seed=71, iterations=12)
        back, meta = ch.load_ansatz(path)
        np.testing.assert_array_equal(back.disentangler, ans.disentangler)
        np.testing.assert_array_equal(back.isometry, ans.isometry)
        assert meta == {"m": 3, "b": None, "seed": 71, "iterations": 12}

    def test_blocking_preserved(self, tmp_path):
        ans = ch.random_ansatz(4, seed=72, b=2)
        path = tmp_path / "a.mera"
        ch.save_ansatz(path, ans, seed=0, iterations=0)
        back, meta = ch.load_ansatz(path)
        assert back.b == 2 and meta["b"] == 2

    def test_corrupt_header(self, tmp_path):
        path = tmp_path / "bad.mera"
        path.write_bytes(b"not a checkpoint\n" + b"\x00" * 64)
        with pytest.raises(ch.ChannelError, match="header"):
            ch.load_ansatz(path)
