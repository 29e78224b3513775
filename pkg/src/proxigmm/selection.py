"""Data-driven choice of how many sieve moments to use.

The criterion scores each candidate moment count K by an estimate of the
finite-sample mean squared error of the causal-contrast coordinate of the
bridge fit: a squared higher-order bias term plus a variance term, both
built from the identity-weight fit at that K. The scan walks K from the
bridge dimension up to a cap and keeps the minimizer, preferring the
smallest K on ties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .bridges import OutcomeBridge
from .data import Dataset
from .errors import (
    AllCandidatesSingular,
    DimensionMismatch,
    RankDeficient,
    RankDeficientJacobian,
    SingularUpsilonBlock,
    SingularVariance,
)
from .gmm import DEFAULT_REL_THRESHOLD, GmmFit, fit_initial, fit_optimal
from .sieve import BasisMatrix, SieveSpec, build_basis, orthonormalize

_CANDIDATE_FAILURES = (
    SingularUpsilonBlock,
    RankDeficient,
    RankDeficientJacobian,
    SingularVariance,
)


@dataclass(frozen=True)
class SelectionDiagnostics:
    """Loss-curve record of a moment-count scan."""

    k_grid: tuple[int, ...]
    scores: np.ndarray
    bias_terms: np.ndarray
    variance_terms: np.ndarray
    k_star: int

    def rows(self) -> list[tuple[int, float, float, float, bool]]:
        """(K, bias_term, variance_term, score, chosen) per candidate."""
        return [
            (k, float(b), float(v), float(s), k == self.k_star)
            for k, b, v, s in zip(self.k_grid, self.bias_terms, self.variance_terms, self.scores)
        ]


def sgmm_components(
    u: np.ndarray,
    feat_grad: np.ndarray,
    resid: np.ndarray,
    target: np.ndarray,
) -> tuple[float, float, float]:
    """Criterion value from instrument matrix, bridge gradient, residuals.

    ``u`` is (n, K), ``feat_grad`` the (n, p) parameter gradient of the
    bridge at the identity-weight estimates, ``resid`` the (n,) outcome
    residuals there, and ``target`` the (p,) direction whose mean squared
    error the criterion estimates — for ATE work, the average gradient of
    the treatment contrast, so the score tracks the causal estimate itself
    rather than every bridge coefficient.

    The bias term squares a leverage-weighted covariance between the
    residuals and the part of the bridge gradient that the instruments
    cannot replicate (the sieve-approximation error that generates
    higher-order bias). The variance term is a leverage-weighted sum of
    squared influence contributions in the target direction, recentred by
    the first-order variance; leverage is measured through the unweighted
    instrument Gram matrix, which keeps observations in low-noise regions
    from dominating under heteroskedasticity.

    Returns (score, bias_term, variance_term) where the score is their
    sum; the variance term may be negative in sample and is used as
    computed. Raises :class:`SingularUpsilonBlock` when the
    residual-weighted instrument covariance (or the Gram or reduced-form
    matrix derived from it) cannot be factorized.
    """
    n, k = u.shape
    weighted = u * resid[:, None]
    upsilon = weighted.T @ weighted / n
    try:
        cho = scipy.linalg.cho_factor(upsilon)
    except scipy.linalg.LinAlgError as exc:
        raise SingularUpsilonBlock(
            f"residual-weighted moment covariance is singular at K={k}"
        ) from exc
    bmat = -(u.T @ feat_grad) / n
    ups_inv_ut = scipy.linalg.cho_solve(cho, u.T)
    omega = bmat.T @ scipy.linalg.cho_solve(cho, bmat)
    gram = u.T @ u / n
    try:
        omega_inv = scipy.linalg.inv(omega)
        gram_inv_ut = scipy.linalg.cho_solve(scipy.linalg.cho_factor(gram), u.T)
    except scipy.linalg.LinAlgError as exc:
        raise SingularUpsilonBlock(
            f"bridge-projection matrix is singular at K={k}"
        ) from exc
    leverage = np.einsum("ik,ki->i", u, gram_inv_ut) / n
    d_tilde = gram_inv_ut.T @ bmat
    eta = -feat_grad - d_tilde
    d_star = ups_inv_ut.T @ bmat
    t_dir = omega_inv @ target
    pi = float((leverage * resid) @ (eta @ t_dir))
    influence = (d_star * (resid**2)[:, None] - d_tilde) @ t_dir
    bias_term = pi * pi / n
    variance_term = float(leverage @ influence**2) - float(target @ t_dir)
    return bias_term + variance_term, bias_term, variance_term


def coefficientwise_components(
    u: np.ndarray,
    feat_grad: np.ndarray,
    resid: np.ndarray,
) -> tuple[float, float, float]:
    """Reference criterion summing estimated mean squared errors over all
    bridge coefficients.

    This variant adds one squared-bias and one variance contribution per
    coefficient direction, measures observation leverage through the
    residual-weighted moment covariance, and builds the variance bracket
    from the raw bridge gradient. It is retained as an independently
    checkable reference form of the coefficient-summed loss;
    :func:`sgmm_components` is the form that drives :func:`select_k`,
    differing in three deliberate ways: it scores only the causal-contrast
    direction instead of summing over coefficients, measures leverage
    through the unweighted instrument Gram matrix, and recentres the
    variance bracket by the instrument projection of the gradient.

    Returns (score, bias_term, variance_term); raises
    :class:`SingularUpsilonBlock` when a required matrix cannot be
    factorized.
    """
    n, k = u.shape
    weighted = u * resid[:, None]
    upsilon = weighted.T @ weighted / n
    try:
        cho = scipy.linalg.cho_factor(upsilon)
    except scipy.linalg.LinAlgError as exc:
        raise SingularUpsilonBlock(
            f"residual-weighted moment covariance is singular at K={k}"
        ) from exc
    bmat = -(u.T @ feat_grad) / n
    ups_inv_ut = scipy.linalg.cho_solve(cho, u.T)
    omega = bmat.T @ scipy.linalg.cho_solve(cho, bmat)
    gram = u.T @ u / n
    try:
        omega_inv = scipy.linalg.inv(omega)
        gram_inv_ut = scipy.linalg.cho_solve(scipy.linalg.cho_factor(gram), u.T)
    except scipy.linalg.LinAlgError as exc:
        raise SingularUpsilonBlock(
            f"bridge-projection matrix is singular at K={k}"
        ) from exc
    xi = np.einsum("ik,ki->i", u, ups_inv_ut) / n
    d_tilde = gram_inv_ut.T @ bmat
    eta = -feat_grad - d_tilde
    d_star = ups_inv_ut.T @ bmat
    pi_vec = (xi * resid) @ (eta @ omega_inv)
    inner = (d_star * (resid**2)[:, None] + feat_grad) @ omega_inv
    phi_vec = xi @ inner**2 - np.diag(omega_inv)
    bias_term = float(pi_vec @ pi_vec) / n
    variance_term = float(np.sum(phi_vec))
    return bias_term + variance_term, bias_term, variance_term


def _candidate_parts(
    ds: Dataset, bridge: OutcomeBridge, prefix: BasisMatrix
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    basis = orthonormalize(prefix)
    init = fit_initial(ds, basis, bridge)
    resid = ds.y - bridge.h(ds.w, ds.a, ds.x, init.gamma_hat)
    feat_grad = bridge.grad(ds.w, ds.a, ds.x, init.gamma_hat)
    target = bridge.contrast_grad(ds.w, ds.x, init.gamma_hat).mean(axis=0)
    return basis.u, feat_grad, resid, target


def _prefix(raw: BasisMatrix, k: int) -> BasisMatrix:
    return BasisMatrix(
        u=raw.u[:, :k],
        whitening=np.eye(k),
        term_names=raw.term_names[:k],
        spec=raw.spec,
        orthonormal=False,
    )


def sgmm_score(
    ds: Dataset, bridge: OutcomeBridge, spec: SieveSpec, k: int
) -> tuple[float, float, float]:
    """Criterion value for one candidate moment count."""
    raw = build_basis(ds, spec, k)
    return sgmm_components(*_candidate_parts(ds, bridge, raw))


def select_k(
    ds: Dataset, bridge: OutcomeBridge, spec: SieveSpec, k_bar: int
) -> SelectionDiagnostics:
    """Scan moment counts from the bridge dimension up to ``k_bar``.

    Candidates whose criterion is singular score infinity and are skipped;
    if every candidate is singular, raises :class:`AllCandidatesSingular`.
    Ties resolve to the smallest K.
    """
    p = bridge.n_params
    if k_bar < p:
        raise DimensionMismatch(
            f"k_bar={k_bar} is below the bridge dimension {p}"
        )
    raw = build_basis(ds, spec, k_bar)
    grid = tuple(range(p, k_bar + 1))
    scores = np.full(len(grid), np.inf)
    bias_terms = np.full(len(grid), np.nan)
    var_terms = np.full(len(grid), np.nan)
    for i, k in enumerate(grid):
        try:
            s, b, v = sgmm_components(*_candidate_parts(ds, bridge, _prefix(raw, k)))
        except _CANDIDATE_FAILURES:
            continue
        scores[i], bias_terms[i], var_terms[i] = s, b, v
    if not np.any(np.isfinite(scores)):
        raise AllCandidatesSingular(
            f"all candidate moment counts {grid[0]}..{grid[-1]} were singular"
        )
    k_star = grid[int(np.argmin(scores))]
    return SelectionDiagnostics(
        k_grid=grid, scores=scores, bias_terms=bias_terms,
        variance_terms=var_terms, k_star=k_star,
    )


def select_and_fit(
    ds: Dataset,
    bridge: OutcomeBridge,
    spec: SieveSpec,
    k_bar: int,
    rel_threshold: float = DEFAULT_REL_THRESHOLD,
) -> tuple[GmmFit, SelectionDiagnostics]:
    """Run the moment-count scan, then the optimally weighted fit at K*."""
    diag = select_k(ds, bridge, spec, k_bar)
    basis = orthonormalize(build_basis(ds, spec, diag.k_star))
    fit = fit_optimal(ds, basis, bridge, rel_threshold)
    return fit, diag
