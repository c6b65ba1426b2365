"""Method of moving asymptotes with an explicit move limit.

The subproblem

    min  f0~(x) + a0 z + sum(c_i y_i + d_i y_i^2 / 2)
    s.t. fi~(x) - a_i z - y_i <= 0,  alpha <= x <= beta,  y, z >= 0

is solved with the usual primal-dual interior-point iteration. Only the
pieces needed by the density optimizer are kept: few constraints, box bounds
on every variable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ASY_INIT = 0.5
ASY_INCR = 1.2
ASY_DECR = 0.7
ALBEFA = 0.1
RAA0 = 1e-5
EPSI_MIN = 1e-9


class MmaError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (KKT residual {residual:.3e})")
        self.residual = residual


@dataclass
class MmaState:
    """Asymptotes and iterate history carried between MMA updates."""

    n: int
    m: int
    low: np.ndarray | None = None
    upp: np.ndarray | None = None
    x_old1: np.ndarray | None = None
    x_old2: np.ndarray | None = None
    iteration: int = 0
    lam: np.ndarray | None = None
    kkt_residual: float = np.inf
    a0: float = 1.0
    c: float = 1000.0
    d: float = 1.0


@dataclass
class Subproblem:
    low: np.ndarray
    upp: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    p0: np.ndarray
    q0: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    b: np.ndarray
    a0: float
    a: np.ndarray
    c: np.ndarray
    d: np.ndarray


def _asymptotes(state: MmaState, x, xmin, xmax):
    span = xmax - xmin
    if state.iteration < 2 or state.low is None:
        return x - ASY_INIT * span, x + ASY_INIT * span
    zzz = (x - state.x_old1) * (state.x_old1 - state.x_old2)
    factor = np.ones_like(x)
    factor[zzz > 0] = ASY_INCR
    factor[zzz < 0] = ASY_DECR
    low = x - factor * (state.x_old1 - state.low)
    upp = x + factor * (state.upp - state.x_old1)
    low = np.clip(low, x - 10.0 * span, x - 0.01 * span)
    upp = np.clip(upp, x + 0.01 * span, x + 10.0 * span)
    return low, upp


def build_subproblem(state: MmaState, x, f0_grad, g_val, g_grad, move,
                     xmin=0.0, xmax=1.0) -> Subproblem:
    n = x.size
    xmin = np.broadcast_to(np.asarray(xmin, dtype=float), (n,))
    xmax = np.broadcast_to(np.asarray(xmax, dtype=float), (n,))
    low, upp = _asymptotes(state, x, xmin, xmax)
    span = xmax - xmin
    alpha = np.maximum.reduce([low + ALBEFA * (x - low), x - move * span, xmin])
    beta = np.minimum.reduce([upp - ALBEFA * (upp - x), x + move * span, xmax])

    span_inv = 1.0 / np.maximum(span, 1e-5)
    ux2 = (upp - x) ** 2
    xl2 = (x - low) ** 2

    p0 = np.maximum(f0_grad, 0.0)
    q0 = np.maximum(-f0_grad, 0.0)
    pq0 = 0.001 * (p0 + q0) + RAA0 * span_inv
    p0 = (p0 + pq0) * ux2
    q0 = (q0 + pq0) * xl2

    P = np.maximum(g_grad, 0.0)
    Q = np.maximum(-g_grad, 0.0)
    PQ = 0.001 * (P + Q) + RAA0 * span_inv[None, :]
    P = (P + PQ) * ux2[None, :]
    Q = (Q + PQ) * xl2[None, :]
    b = P @ (1.0 / (upp - x)) + Q @ (1.0 / (x - low)) - g_val

    m = g_val.size
    return Subproblem(low, upp, alpha, beta, p0, q0, P, Q, b, state.a0,
                      np.zeros(m), np.full(m, state.c), np.full(m, state.d))


def _residual(sp: Subproblem, x, y, z, lam, xsi, eta, mu, zet, s, epsi):
    ux1 = sp.upp - x
    xl1 = x - sp.low
    plam = sp.p0 + sp.P.T @ lam
    qlam = sp.q0 + sp.Q.T @ lam
    gvec = sp.P @ (1.0 / ux1) + sp.Q @ (1.0 / xl1)
    dpsidx = plam / ux1**2 - qlam / xl1**2
    return np.concatenate([
        dpsidx - xsi + eta,
        sp.c + sp.d * y - mu - lam,
        [sp.a0 - zet - sp.a @ lam],
        gvec - sp.a * z - y + s - sp.b,
        xsi * (x - sp.alpha) - epsi,
        eta * (sp.beta - x) - epsi,
        mu * y - epsi,
        [zet * z - epsi],
        s * lam - epsi,
    ])


def solve_subproblem(sp: Subproblem, epsimin: float = EPSI_MIN):
    """Primal-dual Newton solve; returns ``(x, lam, kkt_residual)``.

    The returned residual is the max-norm of the unperturbed KKT system.
    """
    n, m = sp.p0.size, sp.b.size
    epsi = 1.0
    x = 0.5 * (sp.alpha + sp.beta)
    y = np.ones(m)
    z = 1.0
    lam = np.ones(m)
    xsi = np.maximum(1.0 / (x - sp.alpha), 1.0)
    eta = np.maximum(1.0 / (sp.beta - x), 1.0)
    mu = np.maximum(1.0, 0.5 * sp.c)
    zet = 1.0
    s = np.ones(m)

    while epsi > epsimin:
        res = _residual(sp, x, y, z, lam, xsi, eta, mu, zet, s, epsi)
        resnorm = np.linalg.norm(res)
        resmax = np.max(np.abs(res))
        inner = 0
        while resmax > 0.9 * epsi and inner < 200:
            inner += 1
            ux1 = sp.upp - x
            xl1 = x - sp.low
            ux2, xl2 = ux1**2, xl1**2
            plam = sp.p0 + sp.P.T @ lam
            qlam = sp.q0 + sp.Q.T @ lam
            gvec = sp.P @ (1.0 / ux1) + sp.Q @ (1.0 / xl1)
            GG = sp.P / ux2[None, :] - sp.Q / xl2[None, :]
            dpsidx = plam / ux2 - qlam / xl2
            delx = dpsidx - epsi / (x - sp.alpha) + epsi / (sp.beta - x)
            dely = sp.c + sp.d * y - lam - epsi / y
            delz = sp.a0 - sp.a @ lam - epsi / z
            dellam = gvec - sp.a * z - y - sp.b + epsi / lam
            diagx = 2.0 * (plam / (ux2 * ux1) + qlam / (xl2 * xl1))
            diagx += xsi / (x - sp.alpha) + eta / (sp.beta - x)
            diagy = sp.d + mu / y
            diaglamyi = s / lam + 1.0 / diagy

            if m < n:
                blam = dellam + dely / diagy - GG @ (delx / diagx)
                A = np.diag(diaglamyi) + (GG / diagx[None, :]) @ GG.T
                AA = np.block([[A, sp.a[:, None]],
                               [sp.a[None, :], np.array([[-zet / z]])]])
                sol = np.linalg.solve(AA, np.concatenate([blam, [delz]]))
                dlam, dz = sol[:m], sol[m]
                dx = -delx / diagx - (GG.T @ dlam) / diagx
            else:
                dellamyi = dellam + dely / diagy
                Axx = np.diag(diagx) + (GG.T / diaglamyi[None, :]) @ GG
                azz = zet / z + sp.a @ (sp.a / diaglamyi)
                axz = -GG.T @ (sp.a / diaglamyi)
                bx = delx + GG.T @ (dellamyi / diaglamyi)
                bz = delz - sp.a @ (dellamyi / diaglamyi)
                AA = np.block([[Axx, axz[:, None]], [axz[None, :], np.array([[azz]])]])
                sol = np.linalg.solve(AA, -np.concatenate([bx, [bz]]))
                dx, dz = sol[:n], sol[n]
                dlam = (GG @ dx) / diaglamyi - dz * (sp.a / diaglamyi) + dellamyi / diaglamyi

            dy = -dely / diagy + dlam / diagy
            dxsi = -xsi + epsi / (x - sp.alpha) - xsi * dx / (x - sp.alpha)
            deta = -eta + epsi / (sp.beta - x) + eta * dx / (sp.beta - x)
            dmu = -mu + epsi / y - mu * dy / y
            dzet = -zet + epsi / z - zet * dz / z
            ds = -s + epsi / lam - s * dlam / lam

            xx = np.concatenate([y, [z], lam, xsi, eta, mu, [zet], s])
            dxx = np.concatenate([dy, [dz], dlam, dxsi, deta, dmu, [dzet], ds])
            stmxx = np.max(-1.01 * dxx / xx)
            stmalfa = np.max(-1.01 * dx / (x - sp.alpha))
            stmbeta = np.max(1.01 * dx / (sp.beta - x))
            steg = 1.0 / max(stmxx, stmalfa, stmbeta, 1.0)

            old = (x, y, z, lam, xsi, eta, mu, zet, s)
            resinew = 2.0 * resnorm
            tries = 0
            while resinew > resnorm and tries < 50:
                tries += 1
                x = old[0] + steg * dx
                y = old[1] + steg * dy
                z = old[2] + steg * dz
                lam = old[3] + steg * dlam
                xsi = old[4] + steg * dxsi
                eta = old[5] + steg * deta
                mu = old[6] + steg * dmu
                zet = old[7] + steg * dzet
                s = old[8] + steg * ds
                res = _residual(sp, x, y, z, lam, xsi, eta, mu, zet, s, epsi)
                resinew = np.linalg.norm(res)
                steg /= 2.0
            resnorm = resinew
            resmax = np.max(np.abs(res))
        epsi *= 0.1

    kkt = np.max(np.abs(_residual(sp, x, y, z, lam, xsi, eta, mu, zet, s, 0.0)))
    if not np.isfinite(kkt):
        raise MmaError("MMA dual solver diverged", float(kkt))
    return np.clip(x, sp.alpha, sp.beta), lam, float(kkt)


def mma_update(state: MmaState, x, f0_grad, g_val, g_grad, move: float,
               xmin=0.0, xmax=1.0, kkt_tol: float = 1e-7) -> np.ndarray:
    """One MMA step. ``g_val`` has shape ``(m,)``, ``g_grad`` ``(m, n)``.

    Updates ``state`` in place and returns the new iterate.
    """
    x = np.asarray(x, dtype=float).ravel()
    f0_grad = np.asarray(f0_grad, dtype=float).ravel()
    g_val = np.atleast_1d(np.asarray(g_val, dtype=float))
    g_grad = np.atleast_2d(np.asarray(g_grad, dtype=float))
    if not (np.all(np.isfinite(f0_grad)) and np.all(np.isfinite(g_grad))):
        raise MmaError("non-finite sensitivities passed to MMA", np.inf)
    sp = build_subproblem(state, x, f0_grad, g_val, g_grad, move, xmin, xmax)
    x_new, lam, kkt = solve_subproblem(sp)
    if kkt > kkt_tol:
        raise MmaError("MMA subproblem did not reach KKT tolerance", kkt)
    state.x_old2 = state.x_old1 if state.x_old1 is not None else x.copy()
    state.x_old1 = x.copy()
    state.low, state.upp = sp.low, sp.upp
    state.lam = lam
    state.kkt_residual = kkt
    state.iteration += 1
    return x_new
