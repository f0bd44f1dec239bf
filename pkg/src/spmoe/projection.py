"""Closed-form Euclidean projection onto the probability simplex with sparsity control.

The sparsegen-lin map sends a logit vector ``z`` to the simplex point closest (in
Euclidean distance) to ``z / (1 - lam)``.  ``lam < 1`` tunes sparsity: ``lam = 0``
is sparsemax, and ``lam -> 1`` drives the output toward a one-hot vector.  All
functions here are pure and operate on 1-D float64 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Entries this close to the threshold are zeroed so support sets are
# deterministic across platforms (no denormal probabilities).
SUPPORT_EPS = 1e-12

# Largest vector length the brute-force oracle accepts.
BRUTE_FORCE_MAX_K = 5


@dataclass(frozen=True)
class ProjectionSolution:
    """Result of a sparsegen-lin projection.

    Attributes:
        probs: simplex point, shape (K,); nonnegative, sums to 1.
        support: indices with probs > 0, ascending.
        tau: threshold subtracted from the scaled logits on the support.
        lam: sparsity parameter the projection was computed with.
    """

    probs: np.ndarray
    support: np.ndarray
    tau: float
    lam: float

    @property
    def distribution(self) -> np.ndarray:
        return self.probs

    @property
    def support_size(self) -> int:
        return int(self.support.size)


def _validate_logits(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size < 1:
        raise ValueError(f"logits must be a 1-D vector of length >= 1, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    return z


def _validate_lambda(lam: float) -> float:
    lam = float(lam)
    if not np.isfinite(lam) or lam >= 1.0:
        raise ValueError(f"sparsity parameter lambda must be a finite value < 1, got {lam}")
    return lam


def project_rows_scaled(u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project each row of ``u`` onto the probability simplex.

    Vectorized core shared by :func:`sparsegen_lin` and the training code.
    Rows are already scaled, i.e. ``u = z / (1 - lam)``.

    Returns:
        (probs, support_mask, tau) with shapes (B, K), (B, K) bool, (B,).
    """
    if u.ndim != 2:
        raise ValueError(f"expected a 2-D array of row vectors, got shape {u.shape}")
    k = u.shape[1]
    # Stable sort on the negated values keeps ties in original index order.
    srt = -np.sort(-u, axis=1, kind="stable")
    csum = np.cumsum(srt, axis=1)
    ranks = np.arange(1, k + 1, dtype=np.float64)
    # Support size: largest k with 1 + k * u_(k) > sum_{j<=k} u_(j).
    sizes = np.count_nonzero(1.0 + ranks * srt > csum, axis=1)
    tau = (np.take_along_axis(csum, sizes[:, None] - 1, axis=1)[:, 0] - 1.0) / sizes
    probs = np.maximum(u - tau[:, None], 0.0)
    probs[probs <= SUPPORT_EPS] = 0.0
    return probs, probs > 0.0, tau


def sparsegen_lin(z, lam: float = 0.0) -> ProjectionSolution:
    """Sparse simplex projection of ``z`` with sparsity parameter ``lam``.

    Solves argmin over the simplex of ||p - z/(1-lam)||^2 in closed form:
    scale, sort descending, find the support size, subtract the threshold,
    clip at zero.  Larger ``lam`` (closer to 1) gives sparser output.
    """
    z = _validate_logits(z)
    lam = _validate_lambda(lam)
    probs, mask, tau = project_rows_scaled(z[None, :] / (1.0 - lam))
    return ProjectionSolution(
        probs=probs[0],
        support=np.flatnonzero(mask[0]),
        tau=float(tau[0]),
        lam=lam,
    )


def sparsemax(z) -> ProjectionSolution:
    """Euclidean projection of ``z`` onto the probability simplex (lam = 0)."""
    return sparsegen_lin(z, 0.0)


def projection_jacobian(sol: ProjectionSolution) -> np.ndarray:
    """Derivative d(probs)/d(z) of sparsegen-lin at fixed support.

    For support indicator ``s`` the Jacobian is
    ``(Diag(s) - s s^T / |S|) / (1 - lam)``: symmetric, with zero rows and
    columns off the support.  At support-change boundaries (where the map is
    not differentiable) this is the one-sided derivative of the current
    support, the usual subgradient choice.
    """
    support = np.asarray(sol.support, dtype=np.intp)
    if support.size == 0:
        raise RuntimeError("projection solution has empty support")
    k = sol.probs.shape[0]
    scale = 1.0 / (1.0 - sol.lam)
    jac = np.zeros((k, k))
    jac[np.ix_(support, support)] = -scale / support.size
    jac[support, support] += scale
    return jac


def _grid_refine(u: np.ndarray, resolution: float) -> np.ndarray:
    """Minimize ||p - u||^2 over the simplex by iteratively refined grid search.

    The first K-1 coordinates parameterize the simplex; the window shrinks
    around the incumbent until the grid step drops below ``resolution``.  The
    quadratic objective guarantees the optimum stays within two grid steps of
    the incumbent, so a +/- 2-step window never loses it.
    """
    k = u.size
    npts = 33
    lo = np.zeros(k - 1)
    hi = np.ones(k - 1)
    best = np.full(k - 1, 1.0 / k)
    step = 1.0
    while step > resolution:
        axes = [np.linspace(lo[d], hi[d], npts) for d in range(k - 1)]
        mesh = np.meshgrid(*axes, indexing="ij")
        coords = np.stack([m.ravel() for m in mesh], axis=1)
        last = 1.0 - coords.sum(axis=1)
        feasible = last >= -1e-15
        coords = coords[feasible]
        p = np.column_stack([coords, np.clip(last[feasible], 0.0, None)])
        obj = ((p - u) ** 2).sum(axis=1)
        best = coords[np.argmin(obj)]
        step = float((hi - lo).max()) / (npts - 1)
        margin = 2.0 * step
        lo = np.maximum(best - margin, 0.0)
        hi = np.minimum(best + margin, 1.0)
    return np.append(best, max(0.0, 1.0 - best.sum()))


def _bisect_threshold(u: np.ndarray, resolution: float) -> np.ndarray:
    """Minimize ||p - u||^2 over the simplex by bisection on the threshold.

    Solves sum_i max(u_i - tau, 0) = 1 for tau; the left side is continuous
    and nonincreasing in tau, so bisection brackets the root.  No sorting or
    cumulative sums, hence an independent check on the closed form.
    """
    lo = float(u.min()) - 1.0  # sum of clipped gaps >= K >= 1 here
    hi = float(u.max())  # sum is 0 here
    tol = min(resolution, 1e-9)
    for _ in range(200):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if np.maximum(u - mid, 0.0).sum() >= 1.0:
            lo = mid
        else:
            hi = mid
    return np.maximum(u - 0.5 * (lo + hi), 0.0)


def brute_force_projection(z, lam: float = 0.0, resolution: float = 1e-7) -> np.ndarray:
    """Reference minimizer of ||p - z/(1-lam)||^2 over the simplex.

    Test oracle only: refined dense grid search for K <= 3, threshold
    bisection for K in {4, 5}.  Both routes avoid the sorted closed form.
    """
    z = _validate_logits(z)
    lam = _validate_lambda(lam)
    if z.size > BRUTE_FORCE_MAX_K:
        raise ValueError(
            f"brute-force projection supports K <= {BRUTE_FORCE_MAX_K}, got K = {z.size}"
        )
    if not resolution > 0.0:
        raise ValueError(f"resolution must be > 0, got {resolution}")
    u = z / (1.0 - lam)
    if z.size == 1:
        return np.ones(1)
    if z.size <= 3:
        return _grid_refine(u, resolution)
    return _bisect_threshold(u, resolution)
