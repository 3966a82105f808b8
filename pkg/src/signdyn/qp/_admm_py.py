"""Pure NumPy ADMM iteration loop; mirrors ``_admm_cy.pyx`` line for line."""
import numpy as np
from scipy.linalg import solve_triangular


def admm_run(L, P, q, A, l, u, rho, sigma, alpha, x, s, y, dy,
             max_iter, check_every, eps_prim, eps_dual):
    """Run up to ``max_iter`` iterations in place on ``x, s, y``.

    ``L`` is the lower Cholesky factor of ``P + sigma I + A^T diag(rho) A``.
    Returns ``(iterations, converged, prim_res, dual_res)``; ``dy`` receives
    the last dual increment (for infeasibility certificates).
    """
    rho_inv = 1.0 / rho
    prim = dual = np.inf
    At = A.T
    for it in range(1, max_iter + 1):
        rhs = sigma * x - q + At @ (rho * s - y)
        xt = solve_triangular(L.T, solve_triangular(L, rhs, lower=True, check_finite=False),
                              lower=False, check_finite=False)
        zt = A @ xt
        x[:] = alpha * xt + (1.0 - alpha) * x
        zh = alpha * zt + (1.0 - alpha) * s
        s_new = np.minimum(np.maximum(zh + rho_inv * y, l), u)
        dy[:] = rho * (zh - s_new)
        y += dy
        s[:] = s_new
        if it % check_every == 0 or it == max_iter:
            prim = np.max(np.abs(A @ x - s)) if A.shape[0] else 0.0
            dual = np.max(np.abs(P @ x + q + At @ y)) if x.size else 0.0
            if prim <= eps_prim and dual <= eps_dual:
                return it, True, prim, dual
    return max_iter, False, prim, dual
