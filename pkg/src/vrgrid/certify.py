"""Certificate verification, feasibility search, and sampled stability checks.

Verification evaluates three conditions on a candidate certificate:

  1. P + sum_k Lambda_k positive definite        (sigma margin)
  2. Omega_0 + sum Upsilon_{0,k} + sum Omega_k
     + sum_{1<=s<l} Upsilon_{s,l} positive definite   (xi margin)
  3. Psi negative semidefinite (rederived layout)     (psi margin)

plus the sign-class constraints (nonnegative diagonals, P and Phi PSD).
A valid certificate yields the pointwise dissipation bound

    Vdot <= -varsigma * |x|^2 + alpha * |vg_err|^2

with varsigma = lambda_min(Omega_0) and alpha = lambda_max(Phi) / l_g^2,
because the dropped cross terms are nonnegative under the sector condition.
The disturbance-to-state gain slope is sqrt(alpha / varsigma).

The search is a projected supergradient ascent on the concave objective
min(sigma, xi, -psi, varsigma) over the certificate parameters, run from a
deterministic analytic warm start followed by seeded random restarts. All
margins are degree-1 homogeneous in the parameters, so any strictly
feasible point can reach the target margin by scaling; the returned
certificate is always re-verified independently of the search path.
"""

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import linalg
from .bank import bank_values, classify_bank
from .persidskii import (
    IssCertificate,
    VerifyReport,
    assemble_psi,
    assemble_psi_blocks,
    lyapunov_gradients,
)
from .plant import system_matrix


class CertificateError(ValueError):
    """Raised for unusable certificates (e.g. gain requested with varsigma <= 0)."""


def _class_ok(cert, tol):
    if np.any(cert.lam < 0.0) or np.any(cert.omega < 0.0) or np.any(cert.upsilon < 0.0):
        return False
    if linalg.lambda_min(cert.p_mat) < -tol:
        return False
    if linalg.lambda_min(cert.phi) < -tol:
        return False
    return True


def _xi_matrix(cert):
    m = cert.branch_count
    diag = cert.omega.sum(axis=0).astype(float)
    for s in range(m + 1):
        for l in range(s + 1, m + 1):
            diag = diag + cert.upsilon[s, l]
    return np.diag(diag)


def verify_certificate(p, bank, cert, tol=1e-9):
    """Evaluate all three conditions; never raises on an invalid certificate."""
    if cert.branch_count != bank.branch_count:
        raise ValueError(
            f"certificate sized for {cert.branch_count} branches, bank has {bank.branch_count}"
        )
    class_ok = _class_ok(cert, tol)

    lmi_p = cert.p_mat + np.diag(cert.lam.sum(axis=0)) if cert.branch_count else cert.p_mat
    sigma_ok, sigma_margin = linalg.is_pos_def(lmi_p, tol)
    xi_ok, xi_margin = linalg.is_pos_def(_xi_matrix(cert), tol)
    psi_ok, psi_margin = linalg.is_neg_semidef(assemble_psi(p, cert, mode="rederived"), tol)

    psi_margin_verbatim = None
    if cert.mode == "verbatim":
        # the layout warning (two or more branches) propagates to the caller
        psi_margin_verbatim = linalg.lambda_max(assemble_psi(p, cert, mode="verbatim"))

    return VerifyReport(
        valid=bool(class_ok and sigma_ok and xi_ok and psi_ok),
        sigma_margin=sigma_margin,
        xi_margin=xi_margin,
        psi_margin=psi_margin,
        varsigma=float(cert.omega[0].min()),
        alpha=float(linalg.lambda_max(cert.phi) / p.l_g ** 2),
        class_ok=class_ok,
        psi_margin_verbatim=psi_margin_verbatim,
    )


def iss_gain(cert_or_report):
    """Slope of the linear disturbance-to-state gain, sqrt(alpha / varsigma)."""
    report = getattr(cert_or_report, "report", cert_or_report)
    if report is None:
        raise CertificateError("certificate has no verification report attached")
    if report.varsigma <= 0.0:
        raise CertificateError(f"gain undefined: varsigma = {report.varsigma!r} <= 0")
    return math.sqrt(report.alpha / report.varsigma)


# --------------------------------------------------------------------------
# Feasibility search
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SearchConfig:
    starts: int = 32
    max_iters: int = 5000
    target: float = 1e-6
    seed: int = 0


@dataclass(frozen=True)
class SearchResult:
    certificate: Optional[IssCertificate]
    report: Optional[VerifyReport]
    feasible: bool
    best_objective: float
    starts_run: int


def _mat2(v3):
    return np.array([[v3[0], v3[2]], [v3[2], v3[1]]])


def _vec3(mat):
    return np.array([mat[0, 0], mat[1, 1], mat[0, 1]])


def _grad_pairs_to_vec3(pairs):
    # d(x' S y)/d[s11, s22, s12] summed over (x, y) pairs, S symmetric
    g = np.zeros(3)
    for x, y in pairs:
        g[0] += x[0] * y[0]
        g[1] += x[1] * y[1]
        g[2] += x[0] * y[1] + x[1] * y[0]
    return g


class _Problem:
    """Search workspace: scales, pair index, and margin/gradient evaluation."""

    def __init__(self, p, m):
        self.a = system_matrix(p)
        self.l_g = p.l_g
        self.inv_lg = 1.0 / p.l_g
        self.m = m
        self.pairs = [(s, l) for s in range(m + 1) for l in range(s + 1, m + 1)]
        # Block-wise natural scales keep the scaled parameters O(1).
        self.s_p = 1.0
        self.s_lam = p.l_g
        self.s_om = np.full((m + 1, 2), 1.0)
        self.s_om[0] = p.r_g / p.l_g
        if self.pairs:
            col = np.array([self.inv_lg if s == 0 else 1.0 for s, _l in self.pairs])
            self.s_ups = np.repeat(col[:, None], 2, axis=1)
        else:
            self.s_ups = np.zeros((0, 2))
        self.s_phi = p.l_g / p.r_g

    def to_actual(self, th):
        ups = np.zeros((self.m + 1, self.m + 1, 2))
        for i, (s, l) in enumerate(self.pairs):
            ups[s, l] = th["ups"][i] * self.s_ups[i]
        return {
            "p_mat": _mat2(th["p3"] * self.s_p),
            "lam": th["lam"] * self.s_lam,
            "omega": th["om"] * self.s_om,
            "ups": ups,
            "phi": _mat2(th["phi3"] * self.s_phi),
        }

    def to_cert(self, th, mode="rederived"):
        act = self.to_actual(th)
        return IssCertificate(
            p_mat=act["p_mat"],
            lam=act["lam"],
            omega=act["omega"],
            phi=act["phi"],
            upsilon=act["ups"],
            mode=mode,
        )

    def assemble(self, act):
        blocks = assemble_psi_blocks(
            self.a, self.l_g, act["p_mat"], act["lam"], act["omega"], act["ups"],
            rederived=True,
        )
        blocks[(self.m + 1, self.m + 1)] = -act["phi"]
        return linalg.block_assemble(blocks, self.m + 2)

    def margins(self, th):
        """(margins array [sigma, xi, -psi, varsigma], gradient closures by index)."""
        act = self.to_actual(th)
        m = self.m

        lmi_p = act["p_mat"] + np.diag(act["lam"].sum(axis=0)) if m else act["p_mat"]
        eig_p = linalg.sym_eig(lmi_p)
        sigma = float(eig_p.eigenvalues[0])
        v_sig = eig_p.eigenvectors[:, 0]

        xi_diag = act["omega"].sum(axis=0)
        for s, l in self.pairs:
            xi_diag = xi_diag + act["ups"][s, l]
        j_xi = int(np.argmin(xi_diag))
        xi = float(xi_diag[j_xi])

        psi = self.assemble(act)
        eig_psi = linalg.sym_eig(psi)
        psi_max = float(eig_psi.eigenvalues[-1])
        u = eig_psi.eigenvectors[:, -1]

        j_vs = int(np.argmin(act["omega"][0]))
        varsigma = float(act["omega"][0, j_vs])

        margins = np.array([sigma, xi, -psi_max, varsigma])
        grads = {
            0: lambda: self._grad_sigma(v_sig),
            1: lambda: self._grad_xi(j_xi),
            2: lambda: self._grad_neg_psi(u),
            3: lambda: self._grad_varsigma(j_vs),
        }
        return margins, grads

    def _zero_grad(self):
        return {
            "p3": np.zeros(3),
            "lam": np.zeros((self.m, 2)),
            "om": np.zeros((self.m + 1, 2)),
            "ups": np.zeros((len(self.pairs), 2)),
            "phi3": np.zeros(3),
        }

    def _scale_grad(self, g):
        g["p3"] *= self.s_p
        g["lam"] *= self.s_lam
        g["om"] *= self.s_om
        if len(self.pairs):
            g["ups"] *= self.s_ups
        g["phi3"] *= self.s_phi
        return g

    def _grad_sigma(self, v):
        g = self._zero_grad()
        g["p3"] = _grad_pairs_to_vec3([(v, v)])
        for k in range(self.m):
            g["lam"][k] = v * v
        return self._scale_grad(g)

    def _grad_xi(self, j):
        g = self._zero_grad()
        g["om"][:, j] = 1.0
        if len(self.pairs):
            g["ups"][:, j] = 1.0
        return self._scale_grad(g)

    def _grad_varsigma(self, j):
        g = self._zero_grad()
        g["om"][0, j] = 1.0
        return self._scale_grad(g)

    def _grad_neg_psi(self, u):
        """Gradient of -lambda_max(Psi) = -u' (dPsi/dtheta) u blockwise."""
        m = self.m
        blocks = [u[2 * i:2 * i + 2] for i in range(m + 2)]
        u0 = blocks[0]
        uw = blocks[m + 1]
        au0 = self.a @ u0
        g = self._zero_grad()

        p_pairs = [(2.0 * au0, u0), (2.0 * u0, uw)]
        for k in range(1, m + 1):
            p_pairs.append((-2.0 * self.inv_lg * u0, blocks[k]))
        g["p3"] = _grad_pairs_to_vec3(p_pairs)

        for k in range(1, m + 1):
            uk = blocks[k]
            g["lam"][k - 1] += 2.0 * au0 * uk
            g["lam"][k - 1] += -2.0 * self.inv_lg * uk * uk
            g["lam"][k - 1] += 2.0 * uk * uw
        for s, l in self.pairs:
            if s >= 1:
                us, ul = blocks[s], blocks[l]
                g["lam"][s - 1] += -2.0 * self.inv_lg * us * ul
                g["lam"][l - 1] += -2.0 * self.inv_lg * us * ul

        g["om"][0] = u0 * u0
        for k in range(1, m + 1):
            g["om"][k] = blocks[k] * blocks[k]
        for i, (s, l) in enumerate(self.pairs):
            g["ups"][i] = 2.0 * blocks[s] * blocks[l]

        g["phi3"] = -_grad_pairs_to_vec3([(uw, uw)])

        for key in g:
            g[key] = -g[key]
        return self._scale_grad(g)

    def project(self, th):
        th["lam"] = np.maximum(th["lam"], 0.0)
        th["om"] = np.maximum(th["om"], 0.0)
        th["ups"] = np.maximum(th["ups"], 0.0)
        for key in ("p3", "phi3"):
            eig = linalg.sym_eig(_mat2(th[key]))
            w = np.maximum(eig.eigenvalues, 0.0)
            th[key] = _vec3(eig.eigenvectors @ np.diag(w) @ eig.eigenvectors.T)
        return th

    def warm_theta(self):
        """Analytic strictly feasible candidate for a stable linear part.

        With P = I and Upsilon_{0,k} = (1/l_g) I the (0, k) cross blocks
        reduce to c A'; a Schur bound then keeps the whole matrix strictly
        negative whenever M c l_g |A|^2 <= (r_g / l_g) / 4, which fixes the
        branch weight c for any admissible parameters.
        """
        a_norm2 = self.a[0, 0] ** 2 + self.a[0, 1] ** 2   # |A|^2 (A is normal)
        r_g = -self.a[0, 0] * self.l_g
        c = min(0.01, 0.25 * r_g / (max(self.m, 1) * a_norm2 * self.l_g ** 2))
        th = {
            "p3": np.array([1.0, 1.0, 0.0]),
            "lam": np.full((self.m, 2), c / self.s_lam),   # Lambda_k = c I
            "om": np.zeros((self.m + 1, 2)),
            "ups": np.zeros((len(self.pairs), 2)),
            "phi3": np.array([4.0, 4.0, 0.0]),
        }
        th["om"][0] = 1.0                       # Omega_0 = (r_g / l_g) I
        th["om"][1:] = c * self.inv_lg          # Omega_k = (c / l_g) I
        for i, (s, l) in enumerate(self.pairs):
            if s == 0:
                th["ups"][i] = 1.0              # Upsilon_{0,k} = (1 / l_g) I
            else:
                th["ups"][i] = 2.0 * c * self.inv_lg
        return th

    def random_theta(self, rng):
        th = {
            "p3": np.array([rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(-0.3, 0.3)]),
            "lam": rng.uniform(0.0, 0.2, size=(self.m, 2)),
            "om": rng.uniform(0.1, 2.0, size=(self.m + 1, 2)),
            "ups": rng.uniform(0.0, 2.0, size=(len(self.pairs), 2)),
            "phi3": np.array([rng.uniform(1.0, 8.0), rng.uniform(1.0, 8.0), 0.0]),
        }
        return self.project(th)


def _theta_copy(th):
    return {k: v.copy() for k, v in th.items()}


def _ascend(problem, th, cfg):
    """Projected supergradient ascent on the min-margin objective.

    Infeasible iterates take Polyak steps toward the (known) target level;
    once any strictly positive margin appears, degree-1 homogeneity allows
    jumping straight to the target by rescaling the whole parameter vector.
    """
    th = problem.project(_theta_copy(th))
    best_th = _theta_copy(th)
    best_obj = -math.inf
    for it in range(cfg.max_iters):
        margins, grads = problem.margins(th)
        obj = float(margins.min())
        if obj > best_obj:
            best_obj = obj
            best_th = _theta_copy(th)
        if best_obj >= cfg.target:
            break
        if obj > 0.0:
            factor = 1.1 * cfg.target / obj
            if factor > 1.0:
                for key in th:
                    th[key] = th[key] * factor
                continue
        active = int(np.argmin(margins))
        g = grads[active]()
        norm2 = sum(float(np.sum(v * v)) for v in g.values())
        if norm2 == 0.0:
            break
        step = (max(cfg.target, 0.05 * abs(obj)) - obj) / norm2
        for key in th:
            th[key] = th[key] + step * g[key]
        th = problem.project(th)
    return best_th, best_obj


def search_certificate(p, bank, cfg=None):
    """Multi-start projected supergradient feasibility search.

    Start 0 is a deterministic analytic warm start; the remaining starts
    are seeded random initializations. The search stops early once a start
    reaches the target margin. The best candidate is re-verified with
    :func:`verify_certificate` before being returned; an infeasible result
    still carries the best margins found.
    """
    cfg = cfg or SearchConfig()
    m = bank.branch_count
    if m > 8:
        raise ValueError(f"search supports at most 8 branches, bank has {m}")
    classify_bank(bank)

    problem = _Problem(p, m)
    best_th = None
    best_obj = -math.inf
    starts_run = 0
    for start in range(max(1, cfg.starts)):
        if start == 0:
            th0 = problem.warm_theta()
        else:
            rng = np.random.default_rng([cfg.seed, start])
            th0 = problem.random_theta(rng)
        th, obj = _ascend(problem, th0, cfg)
        starts_run += 1
        if obj > best_obj:
            best_obj = obj
            best_th = th
        if best_obj >= cfg.target:
            break

    cert = problem.to_cert(best_th)
    report = verify_certificate(p, bank, cert)
    cert = replace(cert, report=report)
    return SearchResult(
        certificate=cert,
        report=report,
        feasible=report.valid,
        best_objective=best_obj,
        starts_run=starts_run,
    )


# --------------------------------------------------------------------------
# Sampled gradient-condition checker
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GradientCheckConfig:
    """Grid for the sampled gradient condition; origin must be a grid point."""

    epsilon: float
    grid_radius: float = 50.0
    grid_points: int = 201

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon > 0.0):
            raise ValueError(f"epsilon must be finite and > 0, got {self.epsilon!r}")
        if self.grid_radius <= 0.0:
            raise ValueError("grid_radius must be > 0")
        if self.grid_points < 11 or self.grid_points % 2 == 0:
            raise ValueError("grid_points must be an odd count >= 11 (grid must contain the origin)")


@dataclass(frozen=True)
class GradientCheckReport:
    passes: bool
    max_value: float
    max_point: tuple
    n_violations: int
    disturbance_bound_coeff: float   # 1 / (2 l_g epsilon) multiplying |vg_err|^2


def sampled_gradient_check(p, bank, v_spec, cfg):
    """Evaluate the pointwise gradient condition on a square grid.

    The left side

        gradV' A x - (1/l_g) gradV' r(x) + |x|^2 + (eps / 2 l_g) |gradV|^2

    must be <= 0 everywhere for the condition to hold; sampling makes this
    a falsification check, not a proof. ``v_spec`` is either a certificate
    (composite V) or a symmetric 2x2 array (plain quadratic V = x'Px).
    """
    axis = np.linspace(-cfg.grid_radius, cfg.grid_radius, cfg.grid_points)
    gd, gq = np.meshgrid(axis, axis, indexing="ij")
    pts = np.column_stack([gd.ravel(), gq.ravel()])

    if isinstance(v_spec, IssCertificate):
        grads = lyapunov_gradients(v_spec, bank, pts)
    else:
        p_quad = linalg.symmetrize(np.asarray(v_spec, dtype=float))
        grads = 2.0 * pts @ p_quad.T

    a = system_matrix(p)
    lhs = (
        np.einsum("ni,ni->n", grads, pts @ a.T)
        - np.einsum("ni,ni->n", grads, bank_values(bank, pts)) / p.l_g
        + np.einsum("ni,ni->n", pts, pts)
        + (cfg.epsilon / (2.0 * p.l_g)) * np.einsum("ni,ni->n", grads, grads)
    )
    worst = int(np.argmax(lhs))
    return GradientCheckReport(
        passes=bool(lhs[worst] <= 0.0),
        max_value=float(lhs[worst]),
        max_point=(float(pts[worst, 0]), float(pts[worst, 1])),
        n_violations=int(np.count_nonzero(lhs > 0.0)),
        disturbance_bound_coeff=1.0 / (2.0 * p.l_g * cfg.epsilon),
    )
