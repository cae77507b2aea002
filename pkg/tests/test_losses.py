"""Unit tests for the contrastive objectives, pinned to hand-derived values."""

import math

import numpy as np
import pytest
import torch

from localign.embeddings import (
    Axis,
    ContractViolation,
    LocalEmbeddings,
    Modality,
    ProbabilityMap,
    cross_attend,
)
from localign.losses import (
    LossConfig,
    Reduction,
    global_contrastive_loss,
    global_loss_from_similarity,
    intra_modal_target,
    local_contrastive_loss,
    total_loss,
)


def rand_locals(rng, n, d, n_valid=None):
    vectors = torch.tensor(rng.standard_normal((n, d)), dtype=torch.float32)
    mask = None
    if n_valid is not None:
        mask = torch.zeros(n, dtype=torch.bool)
        mask[:n_valid] = True
        vectors[~mask] = 0.0
    return LocalEmbeddings(modality=Modality.TEXT, vectors=vectors, validity_mask=mask)


class TestGlobalLoss:
    def test_identity_similarity_two_pairs(self):
        """Identity similarities at tau=1 give ln(1 + e^-1) per direction."""
        expected = math.log(1.0 + math.exp(-1.0))
        it, ti = global_loss_from_similarity(torch.eye(2), tau=1.0)
        assert float(it) == pytest.approx(expected, abs=1e-6)
        assert float(ti) == pytest.approx(expected, abs=1e-6)
        it64, ti64 = global_loss_from_similarity(torch.eye(2, dtype=torch.float64), tau=1.0)
        assert float(it64) == pytest.approx(expected, abs=1e-12)
        assert float(ti64) == pytest.approx(expected, abs=1e-12)

    def test_single_pair_is_exactly_zero(self):
        it, ti = global_loss_from_similarity(torch.tensor([[0.37]]), tau=0.3)
        assert float(it) == 0.0
        assert float(ti) == 0.0

    def test_single_pair_from_embeddings_exactly_zero(self):
        rng = np.random.default_rng(42)
        img = torch.tensor(rng.standard_normal((1, 8)), dtype=torch.float32)
        txt = torch.tensor(rng.standard_normal((1, 8)), dtype=torch.float32)
        it, ti = global_contrastive_loss(img, txt, tau=0.3)
        assert float(it) == 0.0 and float(ti) == 0.0

    def test_constant_similarities_give_ln_b(self):
        """All-equal similarities make the positive indistinguishable: ln B."""
        rng = np.random.default_rng(0)
        for _ in range(100):
            b = int(rng.integers(2, 9))
            c = float(rng.uniform(-1, 1))
            it, ti = global_loss_from_similarity(torch.full((b, b), c), tau=0.3)
            assert float(it) == pytest.approx(math.log(b), abs=1e-6)
            assert float(ti) == pytest.approx(math.log(b), abs=1e-6)

    def test_components_nonnegative_and_finite(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            b = int(rng.integers(1, 7))
            d = int(rng.integers(2, 10))
            img = torch.tensor(rng.standard_normal((b, d)), dtype=torch.float32)
            txt = torch.tensor(rng.standard_normal((b, d)), dtype=torch.float32)
            it, ti = global_contrastive_loss(img, txt, tau=0.3)
            assert float(it) >= 0.0 and float(ti) >= 0.0
            assert math.isfinite(float(it)) and math.isfinite(float(ti))

    def test_direction_asymmetry_transposes(self):
        """Swapping the matrix transpose swaps the two directions."""
        rng = np.random.default_rng(2)
        for _ in range(100):
            s = torch.tensor(rng.uniform(-1, 1, (4, 4)), dtype=torch.float64)
            it, ti = global_loss_from_similarity(s, tau=0.5)
            it_t, ti_t = global_loss_from_similarity(s.T, tau=0.5)
            assert float(it) == pytest.approx(float(ti_t), abs=1e-10)
            assert float(ti) == pytest.approx(float(it_t), abs=1e-10)

    def test_joint_pair_permutation_invariance(self):
        """Permuting pairs jointly leaves both directions unchanged."""
        rng = np.random.default_rng(3)
        for _ in range(100):
            img = torch.tensor(rng.standard_normal((5, 6)), dtype=torch.float64)
            txt = torch.tensor(rng.standard_normal((5, 6)), dtype=torch.float64)
            perm = torch.tensor(rng.permutation(5))
            a = global_contrastive_loss(img, txt, tau=0.3)
            b = global_contrastive_loss(img[perm], txt[perm], tau=0.3)
            assert float(a[0]) == pytest.approx(float(b[0]), abs=1e-9)
            assert float(a[1]) == pytest.approx(float(b[1]), abs=1e-9)

    def test_batch_mismatch_raises(self):
        with pytest.raises(ContractViolation):
            global_contrastive_loss(torch.ones(2, 4), torch.ones(3, 4), tau=0.3)

    def test_nan_rejected(self):
        s = torch.eye(2)
        s[0, 0] = float("nan")
        with pytest.raises(ContractViolation):
            global_loss_from_similarity(s, tau=0.3)


class TestIntraModalTarget:
    def test_orthonormal_two_positions(self):
        """Orthonormal rows at tau=0.1: diagonal weight e^10 / (e^10 + 1)."""
        e = LocalEmbeddings(Modality.TEXT, torch.eye(2))
        row, col = intra_modal_target(e, tau=0.1)
        expected = math.exp(10.0) / (math.exp(10.0) + 1.0)
        # The eps-guarded norms make the self-similarity fractionally below 1;
        # the effect on the softmax is far under the 1e-6 tolerance.
        np.testing.assert_allclose(row.values[0, 0].item(), expected, atol=1e-6)
        np.testing.assert_allclose(row.values[1, 1].item(), expected, atol=1e-6)
        np.testing.assert_allclose(col.values.numpy(), row.values.numpy().T, atol=1e-7)

    def test_rows_sum_to_one_masked_zero(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            n = int(rng.integers(2, 8))
            nv = int(rng.integers(1, n + 1))
            e = rand_locals(rng, n, 5, n_valid=nv)
            row, col = intra_modal_target(e, tau=0.2)
            sums = row.values.sum(dim=1).numpy()
            np.testing.assert_allclose(sums[:nv], np.ones(nv), atol=1e-6)
            np.testing.assert_allclose(sums[nv:], np.zeros(n - nv), atol=0)
            assert row.values.min() >= 0.0
            csums = col.values.sum(dim=0).numpy()
            np.testing.assert_allclose(csums[:nv], np.ones(nv), atol=1e-6)

    def test_gradient_blocked_by_default(self):
        v = torch.randn(3, 4, requires_grad=True)
        e = LocalEmbeddings(Modality.TEXT, v)
        row, _ = intra_modal_target(e, tau=0.1)
        assert not row.values.requires_grad

    def test_gradient_flows_when_unblocked(self):
        v = torch.randn(3, 4, requires_grad=True)
        e = LocalEmbeddings(Modality.TEXT, v)
        row, _ = intra_modal_target(e, tau=0.1, gradient_blocked=False)
        assert row.values.requires_grad

    def test_diagonal_masking(self):
        rng = np.random.default_rng(5)
        e = rand_locals(rng, 4, 5)
        row, col = intra_modal_target(e, tau=0.1, mask_diagonal=True)
        assert row.values.diagonal().abs().max() == 0.0
        assert col.values.diagonal().abs().max() == 0.0
        np.testing.assert_allclose(row.values.sum(dim=1).numpy(), np.ones(4), atol=1e-6)


class TestLocalLoss:
    def make_uniform_case(self, n=2, d=4):
        """Embeddings whose target and source distributions are all uniform."""
        v = torch.ones(n, d)
        e = LocalEmbeddings(Modality.TEXT, v)
        return e

    def test_uniform_two_positions_value(self):
        """Uniform p and q over N=2 give row 2 ln 2 + col 2 ln 2 = 4 ln 2."""
        e = self.make_uniform_case()
        cfg = LossConfig()
        row, col = intra_modal_target(e, cfg.tau_local_target)
        loss = local_contrastive_loss(e, e, row, col, cfg)
        assert float(loss) == pytest.approx(4.0 * math.log(2.0), abs=1e-6)

    def test_matches_against_explicit_loop(self):
        """The vectorized loss equals a plain-Python double loop."""
        rng = np.random.default_rng(6)
        cfg = LossConfig()
        for _ in range(50):
            n, d = int(rng.integers(2, 6)), 5
            z = rand_locals(rng, n, d)
            c = rand_locals(rng, n, d)
            row, col = intra_modal_target(z, cfg.tau_local_target)
            loss = float(local_contrastive_loss(z, c, row, col, cfg))

            def softmax(m, axis):
                m = m / cfg.tau_local_source
                m = np.exp(m - m.max(axis=axis, keepdims=True))
                return m / m.sum(axis=axis, keepdims=True)

            zs = z.vectors.numpy()
            cs = c.vectors.numpy()
            sims = np.zeros((n, n))
            for i in range(n):
                for j in range(n):
                    na = np.linalg.norm(zs[i]) + 1e-8
                    nb = np.linalg.norm(cs[j]) + 1e-8
                    sims[i, j] = np.clip(zs[i] @ cs[j] / (na * nb), -1, 1)
            qr = softmax(sims, 1)
            qc = softmax(sims, 0)
            pr = row.values.numpy()
            pc = col.values.numpy()
            expected = -(pr * np.log(qr + 1e-12)).sum() - (pc * np.log(qc + 1e-12)).sum()
            assert loss == pytest.approx(expected, abs=1e-5)

    def test_gibbs_inequality(self):
        """Cross-entropy is minimized when source matches target."""
        rng = np.random.default_rng(7)
        cfg = LossConfig(tau_local_source=0.1)  # same tau so q == p is reachable
        for _ in range(100):
            n = int(rng.integers(2, 6))
            z = rand_locals(rng, n, 4)
            row, col = intra_modal_target(z, cfg.tau_local_target)
            matched = float(local_contrastive_loss(z, z, row, col, cfg))
            other = rand_locals(rng, n, 4)
            mismatched = float(local_contrastive_loss(z, other, row, col, cfg))
            entropy = matched  # q == p at identical inputs and temperatures
            assert mismatched >= entropy - 1e-5

    def test_entropy_lower_bound_with_sum_reduction(self):
        """Loss >= H(p_row) + H(p_col) for any source distributions."""
        rng = np.random.default_rng(8)
        cfg = LossConfig()
        for _ in range(100):
            n = int(rng.integers(2, 6))
            z = rand_locals(rng, n, 4)
            c = rand_locals(rng, n, 4)
            row, col = intra_modal_target(z, cfg.tau_local_target)
            loss = float(local_contrastive_loss(z, c, row, col, cfg))
            pr = row.values.numpy()
            pc = col.values.numpy()
            with np.errstate(divide="ignore", invalid="ignore"):
                h = -(pr * np.where(pr > 0, np.log(pr), 0.0)).sum()
                h += -(pc * np.where(pc > 0, np.log(pc), 0.0)).sum()
            assert loss >= h - 1e-5

    def test_joint_permutation_invariance(self):
        """Permuting positions consistently everywhere leaves the loss fixed."""
        rng = np.random.default_rng(9)
        cfg = LossConfig()
        for _ in range(100):
            n = int(rng.integers(2, 7))
            z = rand_locals(rng, n, 5)
            c = rand_locals(rng, n, 5)
            row, col = intra_modal_target(z, cfg.tau_local_target)
            base = float(local_contrastive_loss(z, c, row, col, cfg))
            perm = torch.tensor(rng.permutation(n))
            zp = z.with_vectors(z.vectors[perm])
            cp = c.with_vectors(c.vectors[perm])
            rowp, colp = intra_modal_target(zp, cfg.tau_local_target)
            permuted = float(local_contrastive_loss(zp, cp, rowp, colp, cfg))
            assert permuted == pytest.approx(base, abs=1e-4)

    def test_mean_reduction_divides_by_valid_pairs(self):
        rng = np.random.default_rng(10)
        z = rand_locals(rng, 5, 4, n_valid=3)
        c = rand_locals(rng, 5, 4, n_valid=3)
        row, col = intra_modal_target(z, 0.1)
        cfg_sum = LossConfig(reduction=Reduction.SUM)
        cfg_mean = LossConfig(reduction=Reduction.MEAN)
        s = float(local_contrastive_loss(z, c, row, col, cfg_sum))
        m = float(local_contrastive_loss(z, c, row, col, cfg_mean))
        assert m == pytest.approx(s / 9.0, abs=1e-6)

    def test_masked_positions_contribute_nothing(self):
        """Adding padded positions never changes the loss."""
        rng = np.random.default_rng(11)
        cfg = LossConfig()
        for _ in range(100):
            n = int(rng.integers(2, 5))
            z = rand_locals(rng, n, 4)
            c = rand_locals(rng, n, 4)
            row, col = intra_modal_target(z, cfg.tau_local_target)
            base = float(local_contrastive_loss(z, c, row, col, cfg))
            pad = 2
            mask = torch.cat([torch.ones(n, dtype=torch.bool), torch.zeros(pad, dtype=torch.bool)])
            zp = LocalEmbeddings(
                Modality.TEXT, torch.cat([z.vectors, torch.zeros(pad, 4)]), validity_mask=mask
            )
            cp = LocalEmbeddings(
                Modality.TEXT, torch.cat([c.vectors, torch.zeros(pad, 4)]), validity_mask=mask
            )
            rowp, colp = intra_modal_target(zp, cfg.tau_local_target)
            padded = float(local_contrastive_loss(zp, cp, rowp, colp, cfg))
            assert padded == pytest.approx(base, abs=1e-5)

    def test_shape_mismatch_raises(self):
        rng = np.random.default_rng(12)
        z = rand_locals(rng, 3, 4)
        c = rand_locals(rng, 4, 4)
        row, col = intra_modal_target(z, 0.1)
        with pytest.raises(ContractViolation):
            local_contrastive_loss(z, c, row, col, LossConfig())


class TestTotalLoss:
    def test_default_lambdas_on_unit_components(self):
        cfg = LossConfig()
        out = total_loss([1.0, 1.0, 1.0, 1.0], cfg.lambdas)
        assert float(out) == pytest.approx(1.75, abs=1e-12)

    def test_exact_weighted_sum(self):
        """total == l1*c1 + l2*c2 + l3*c3 + l4*c4 bit-for-bit."""
        rng = np.random.default_rng(13)
        for _ in range(200):
            comps = [torch.tensor(float(rng.uniform(0, 5)), dtype=torch.float64) for _ in range(4)]
            lams = tuple(float(rng.uniform(0, 1)) for _ in range(4))
            out = total_loss(comps, lams)
            expected = lams[0] * comps[0] + lams[1] * comps[1] + lams[2] * comps[2] + lams[3] * comps[3]
            assert float(out) == float(expected)

    def test_zero_lambda_drops_component(self):
        out = total_loss([5.0, 1.0, 7.0, 9.0], (0.0, 1.0, 0.0, 0.0))
        assert float(out) == pytest.approx(1.0, abs=1e-12)

    def test_non_finite_component_rejected(self):
        with pytest.raises(ContractViolation):
            total_loss([float("nan"), 1.0, 1.0, 1.0], (0.25, 0.75, 0.375, 0.375))


class TestLossConfig:
    def test_defaults(self):
        cfg = LossConfig()
        cfg.validate()
        assert cfg.tau_global == 0.3
        assert cfg.tau_local_source == 0.3
        assert cfg.tau_local_target == 0.1
        assert cfg.lambdas == (0.25, 0.75, 0.375, 0.375)
        assert cfg.target_gradient_blocked is True
        assert cfg.reduction is Reduction.SUM

    def test_invalid_temperature_rejected(self):
        with pytest.raises(ContractViolation):
            LossConfig(tau_global=0.0).validate()

    def test_wrong_lambda_count_rejected(self):
        with pytest.raises(ContractViolation):
            LossConfig(lambdas=(1.0, 2.0)).validate()
