import os
import sys
import unittest

import numpy as np

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from equilibrium import Activation, BForm, solve_forward, solve_forward_hetero
from implicit_grad import (param_grads, param_grads_hetero, solve_backward,
                           solve_backward_hetero)
from linalg import (DimensionError, NonConvergenceError, SparseAdjacency, inf_norm,
                    kron_materialize, one_norm, unvec, vec)

SOLVE_TOL = 1e-13
STEP = 1e-5
KINK_RADIUS = 1e-3


def scaled_instance(rng, m, n, p, b_form, ratio=0.5, relations=1):
    """Random weights with both the forward and the adjoint map contractive."""
    As, Ws, omegas = [], [], []
    for _ in range(relations):
        A = SparseAdjacency(rng.uniform(0.0, 1.0, (n, n)) * (rng.random((n, n)) < 0.7))
        W = rng.normal(size=(m, m))
        a_scale = max(A.one_norm, A.inf_norm, 1e-12)
        w_scale = max(inf_norm(W), one_norm(W), 1e-12)
        As.append(A)
        Ws.append(W * ratio / (relations * a_scale * w_scale))
        omegas.append({name: rng.normal(size=shape)
                       for name, shape in b_form.init_shapes(m, p).items()})
    U = rng.normal(size=(p, n))
    return Ws, As, omegas, U


def equilibrium(Ws, As, omegas, U, b_form, phi):
    Bs = [b_form.evaluate(o, U, A) for o, A in zip(omegas, As)]
    return solve_forward_hetero(Ws, As, Bs, phi, tol=SOLVE_TOL, max_iter=1000)


def linear_loss(C, Ws, As, omegas, U, b_form, phi):
    return float(np.sum(C * equilibrium(Ws, As, omegas, U, b_form, phi).X))


def central_difference(f, M, i, j):
    original = M[i, j]
    M[i, j] = original + STEP
    plus = f()
    M[i, j] = original - STEP
    minus = f()
    M[i, j] = original
    return (plus - minus) / (2 * STEP)


class TestSolveBackward(unittest.TestCase):
    """The adjoint fixed point."""

    def test_zero_weights(self):
        rng = np.random.default_rng(0)
        D = rng.uniform(0.0, 1.0, (2, 3))
        grad_X = rng.normal(size=(2, 3))
        adjoint = solve_backward(np.zeros((2, 2)), SparseAdjacency.identity(3), D, grad_X)
        np.testing.assert_allclose(adjoint.grad_Z, D * grad_X)
        self.assertEqual(adjoint.iterations, 2)

    def test_matches_dense_linear_solve(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            Ws, As, _, _ = scaled_instance(rng, 3, 4, 2, BForm("OUA"))
            W, A = Ws[0], As[0]
            D = rng.uniform(0.0, 1.0, (3, 4))
            grad_X = rng.normal(size=(3, 4))
            adjoint = solve_backward(W, A, D, grad_X, tol=SOLVE_TOL)
            K = kron_materialize(A.toarray().T, W)
            d = vec(D)
            expected = np.linalg.solve(np.eye(12) - d[:, None] * K.T, d * vec(grad_X))
            np.testing.assert_allclose(adjoint.grad_Z, unvec(expected, 3, 4), atol=1e-11)

    def test_hetero_single_relation_matches_ordinary(self):
        rng = np.random.default_rng(2)
        Ws, As, _, _ = scaled_instance(rng, 3, 4, 2, BForm("OUA"))
        D = rng.uniform(0.0, 1.0, (3, 4))
        grad_X = rng.normal(size=(3, 4))
        ordinary = solve_backward(Ws[0], As[0], D, grad_X, tol=SOLVE_TOL)
        hetero = solve_backward_hetero(Ws, As, D, grad_X, tol=SOLVE_TOL)
        np.testing.assert_array_equal(ordinary.grad_Z, hetero.grad_Z)

    def test_derivative_recomputed_from_equilibrium(self):
        rng = np.random.default_rng(6)
        b_form = BForm("OUA")
        phi = Activation("tanh")
        for _ in range(5):
            Ws, As, omegas, U = scaled_instance(rng, 3, 4, 2, b_form, ratio=0.3)
            W, A = Ws[0], As[0]
            forward = equilibrium(Ws, As, omegas, U, b_form, phi)
            Z = W @ forward.X @ A.toarray() + b_form.evaluate(omegas[0], U, A)
            grad_X = rng.uniform(-1.0, 1.0, size=(3, 4))
            stored = solve_backward(W, A, forward.D, grad_X, tol=SOLVE_TOL)
            recomputed = solve_backward(W, A, phi.derivative(Z), grad_X, tol=SOLVE_TOL)
            np.testing.assert_allclose(recomputed.grad_Z, stored.grad_Z, rtol=0, atol=1e-12)
            first = param_grads(stored.grad_Z, forward.X, A, U, b_form, omegas[0])
            second = param_grads(recomputed.grad_Z, forward.X, A, U, b_form, omegas[0])
            np.testing.assert_allclose(second.grad_W, first.grad_W, rtol=0, atol=1e-12)
            np.testing.assert_allclose(second.grad_Omega["Omega"], first.grad_Omega["Omega"],
                                       rtol=0, atol=1e-12)
            np.testing.assert_allclose(second.grad_U, first.grad_U, rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            solve_backward(np.zeros((2, 2)), SparseAdjacency.identity(3), np.ones((2, 3)),
                           np.ones((2, 4)))

    def test_non_convergence_is_tagged_backward(self):
        with self.assertRaises(NonConvergenceError) as ctx:
            solve_backward(np.ones((1, 1)), SparseAdjacency.identity(1), np.ones((1, 1)),
                           np.ones((1, 1)), max_iter=20)
        self.assertEqual(ctx.exception.kind, "backward")


class TestParamGrads(unittest.TestCase):
    """Implicit gradients against central finite differences."""

    def check_case(self, rng, kind, tag, relations=1):
        b_form = BForm(tag)
        phi = Activation(kind)
        m, n, p = 3, 4, 2
        for _ in range(20):
            Ws, As, omegas, U = scaled_instance(rng, m, n, p, b_form, relations=relations)
            forward = equilibrium(Ws, As, omegas, U, b_form, phi)
            if not phi.kinks(forward.Z, KINK_RADIUS):
                break
        else:
            self.fail(f"no kink-free instance for {kind}")
        C = rng.normal(size=(m, n))
        adjoint = solve_backward_hetero(Ws, As, forward.D, C, tol=SOLVE_TOL)
        if relations == 1:
            bundle = param_grads(adjoint.grad_Z, forward.X, As[0], U, b_form, omegas[0])
            grad_Ws, grad_Omegas = [bundle.grad_W], [bundle.grad_Omega]
        else:
            bundle = param_grads_hetero(adjoint.grad_Z, forward.X, As, U, b_form, omegas)
            grad_Ws, grad_Omegas = bundle.grad_W, bundle.grad_Omega

        def loss():
            return linear_loss(C, Ws, As, omegas, U, b_form, phi)

        for r in range(relations):
            for i in range(m):
                for j in range(m):
                    numeric = central_difference(loss, Ws[r], i, j)
                    self.assertAlmostEqual(grad_Ws[r][i, j], numeric, delta=1e-6)
            for name, Omega in omegas[r].items():
                for i in range(m):
                    for j in range(p):
                        numeric = central_difference(loss, Omega, i, j)
                        self.assertAlmostEqual(grad_Omegas[r][name][i, j], numeric, delta=1e-6)
        for i in range(p):
            for j in range(n):
                numeric = central_difference(loss, U, i, j)
                self.assertAlmostEqual(bundle.grad_U[i, j], numeric, delta=1e-6)

    def test_all_activations_and_forms(self):
        rng = np.random.default_rng(3)
        for kind in ("relu", "leaky_relu", "tanh", "sigmoid", "identity"):
            for tag in BForm.TAGS:
                with self.subTest(activation=kind, b_form=tag):
                    self.check_case(rng, kind, tag)

    def test_heterogeneous_layer(self):
        rng = np.random.default_rng(4)
        for tag in BForm.TAGS:
            with self.subTest(b_form=tag):
                self.check_case(rng, "tanh", tag, relations=2)

    def test_closed_forms(self):
        rng = np.random.default_rng(5)
        G = rng.normal(size=(2, 3))
        X = rng.normal(size=(2, 3))
        U = rng.normal(size=(4, 3))
        A = SparseAdjacency(rng.uniform(0.0, 1.0, (3, 3)))
        omegas = {"Omega": rng.normal(size=(2, 4))}
        bundle = param_grads(G, X, A, U, BForm("OUA"), omegas)
        GA = G @ A.toarray().T
        np.testing.assert_allclose(bundle.grad_W, GA @ X.T)
        np.testing.assert_allclose(bundle.grad_Omega["Omega"], GA @ U.T)
        np.testing.assert_allclose(bundle.grad_U, omegas["Omega"].T @ GA)
        plain = param_grads(G, X, A, U, BForm("OU"), omegas)
        np.testing.assert_allclose(plain.grad_Omega["Omega"], G @ U.T)

    def test_node_count_mismatch(self):
        with self.assertRaises(DimensionError):
            param_grads(np.zeros((2, 3)), np.zeros((2, 3)), SparseAdjacency.identity(3),
                        np.zeros((4, 2)), BForm("OUA"), {"Omega": np.zeros((2, 4))})


class TestEndToEndScalar(unittest.TestCase):

    def test_scalar_chain_rule(self):
        # x = tanh(w x a + o u a); dx/dw from the implicit function theorem
        w, a, o, u = 0.3, 0.8, 1.1, 0.5
        A = SparseAdjacency(np.array([[a]]))
        forward = solve_forward(np.array([[w]]), A, np.array([[o * u * a]]), Activation("tanh"),
                                tol=SOLVE_TOL)
        x = forward.X[0, 0]
        d = 1.0 - np.tanh(w * x * a + o * u * a) ** 2
        expected = d * x * a / (1.0 - d * w * a)
        adjoint = solve_backward(np.array([[w]]), A, forward.D, np.ones((1, 1)), tol=SOLVE_TOL)
        bundle = param_grads(adjoint.grad_Z, forward.X, A, np.array([[u]]), BForm("OUA"),
                             {"Omega": np.array([[o]])})
        self.assertAlmostEqual(bundle.grad_W[0, 0], expected, places=10)


if __name__ == '__main__':
    unittest.main()
