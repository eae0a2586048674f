"""Numeric reference routines shared between the filter unit tests and the
acceptance suite."""

import numpy as np


def constraint_residual(p_rows, r_rows, m, k_tgt, l_tgt):
    k = float(np.sum(np.sum(p_rows**2, axis=1) / (2.0 * m)))
    ell = np.cross(r_rows, p_rows).sum(axis=0)
    return np.concatenate([[k - k_tgt], ell - l_tgt])


def constraint_jacobian(p_rows, r_rows, m):
    # rows: dK/dp, dL_x/dp, dL_y/dp, dL_z/dp with dL/dp_i = skew(r_i)
    n = len(m)
    jac = np.zeros((4, 3 * n))
    jac[0] = (p_rows / m[:, None]).reshape(-1)
    for i in range(n):
        rx, ry, rz = r_rows[i]
        jac[1:, 3 * i : 3 * i + 3] += np.array(
            [[0.0, -rz, ry], [rz, 0.0, -rx], [-ry, rx, 0.0]]
        )
    return jac


def min_change_momenta_numeric(p0_rows, r_rows, m, k_tgt, l_tgt):
    """Projected-gradient reference: minimize the mass-weighted momentum
    change subject to the kinetic and angular targets, starting from the
    uncorrected momenta.  Independent of the closed-form route."""
    m_slot = np.repeat(m, 3)

    def restore(p_flat):
        for _ in range(60):
            p_rows = p_flat.reshape(-1, 3)
            c = constraint_residual(p_rows, r_rows, m, k_tgt, l_tgt)
            if np.max(np.abs(c)) < 1e-13:
                break
            jac = constraint_jacobian(p_rows, r_rows, m)
            jw = jac * (1.0 / m_slot)[None, :]
            p_flat = p_flat - jw.T @ np.linalg.solve(jw @ jac.T, c)
        return p_flat

    def objective(p_flat):
        d = p_flat - p0_rows.reshape(-1)
        return float(np.sum(d * d / (2.0 * m_slot)))

    p = restore(p0_rows.reshape(-1).copy())
    for _ in range(500):
        g = (p - p0_rows.reshape(-1)) / m_slot
        jac = constraint_jacobian(p.reshape(-1, 3), r_rows, m)
        coef = np.linalg.solve(jac @ jac.T, jac @ g)
        g_tan = g - jac.T @ coef
        if np.linalg.norm(g_tan) < 1e-12 * max(1.0, np.linalg.norm(p)):
            break
        f_here = objective(p)
        step = 1.0
        while step > 1e-14:
            cand = restore(p - step * g_tan)
            if objective(cand) < f_here - 1e-4 * step * np.dot(g_tan, g_tan):
                p = cand
                break
            step *= 0.5
        else:
            break
    return restore(p).reshape(-1, 3)
