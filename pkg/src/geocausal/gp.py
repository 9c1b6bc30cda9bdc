"""Sparse Gaussian-process machinery in standardized feature space.

The kernel is Matérn with smoothness 3/2 in closed form,

    k(r) = variance * (1 + sqrt(3) r / ell) * exp(-sqrt(3) r / ell),

with r the Euclidean distance between standardized feature vectors. The
variational family over inducing values is a Gaussian with low-rank plus
diagonal covariance, Sigma = L L^T + diag(delta).
"""

import dataclasses

import numpy as np

from .exceptions import ConditioningError, ValidationError
from .util import PURPOSE_INDUCING, stream

SQRT3 = np.sqrt(3.0)


@dataclasses.dataclass
class MaternHyper:
    """Kernel hyperparameters. ``jitter`` is the absolute value added to
    square gram diagonals; None means the default 1e-6 * variance."""

    variance: float
    length_scale: float
    jitter: float | None = None

    def __post_init__(self):
        if self.variance <= 0 or self.length_scale <= 0:
            raise ValidationError("variance and length_scale must be positive")
        if self.jitter is None:
            self.jitter = 1e-6 * self.variance
        if self.jitter <= 0:
            raise ValidationError("jitter must be positive")


def matern32_from_distance(r, hyper):
    s = SQRT3 * np.asarray(r, dtype=float) / hyper.length_scale
    return hyper.variance * (1.0 + s) * np.exp(-s)


def matern32(x, y, hyper):
    """Kernel value for two feature vectors."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValidationError("kernel inputs must have matching shape")
    r = np.sqrt(np.sum((x - y) ** 2))
    return float(matern32_from_distance(r, hyper))


def pairwise_distances(a, b):
    """Euclidean distance matrix between rows of a (m, d) and b (n, d)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValidationError("point sets must be 2-d with matching feature dim")
    sq = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * a @ b.T
    )
    return np.sqrt(np.maximum(sq, 0.0))


def gram(a, b, hyper, add_jitter=False):
    """Kernel matrix between two point sets; jitter only applies to square
    grams of a set against itself."""
    k = matern32_from_distance(pairwise_distances(a, b), hyper)
    if add_jitter:
        if k.shape[0] != k.shape[1]:
            raise ValidationError("jitter applies only to square grams")
        k = k + hyper.jitter * np.eye(k.shape[0])
    return k


def jittered_cholesky(points, hyper):
    """Gram of points against itself plus escalating jitter, factorized.

    Starts at hyper.jitter and doubles up to 8 times on Cholesky failure;
    raises ConditioningError (with a smallest-eigenvalue estimate) if the
    factorization still fails. Returns (K, L, jitter_used) where K includes
    the jitter that succeeded.
    """
    base = matern32_from_distance(pairwise_distances(points, points), hyper)
    jitter = hyper.jitter
    eye = np.eye(base.shape[0])
    for _ in range(9):
        k = base + jitter * eye
        try:
            return k, np.linalg.cholesky(k), jitter
        except np.linalg.LinAlgError:
            jitter *= 2.0
    min_eig = float(np.linalg.eigvalsh(base)[0])
    raise ConditioningError(
        f"Cholesky failed at jitter {jitter / 2.0:g} "
        f"(smallest eigenvalue about {min_eig:.3e})",
        min_eigenvalue=min_eig,
    )


@dataclasses.dataclass
class VariationalGaussian:
    """Gaussian with covariance L L^T + diag(delta), rank r <= n."""

    mean: np.ndarray
    low_rank: np.ndarray
    diag: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.low_rank = np.asarray(self.low_rank, dtype=float)
        self.diag = np.asarray(self.diag, dtype=float)
        n = self.mean.shape[0]
        if self.low_rank.ndim != 2 or self.low_rank.shape[0] != n:
            raise ValidationError("low_rank must be (n, r)")
        if self.low_rank.shape[1] > n:
            raise ValidationError("rank r must not exceed n")
        if self.diag.shape != (n,) or (self.diag <= 0).any():
            raise ValidationError("diag must be positive with shape (n,)")

    @property
    def n(self):
        return self.mean.shape[0]

    @property
    def rank(self):
        return self.low_rank.shape[1]

    def cov(self):
        return self.low_rank @ self.low_rank.T + np.diag(self.diag)


def sample_reparam(q, eps1, eps2):
    """Reparameterized draw(s) mean + L eps1 + sqrt(diag) * eps2.

    eps1 has shape (r,) or (r, s); eps2 has shape (n,) or (n, s). Returns
    (n,) or (n, s) to match.
    """
    eps1 = np.asarray(eps1, dtype=float)
    eps2 = np.asarray(eps2, dtype=float)
    if eps1.shape[0] != q.rank or eps2.shape[0] != q.n:
        raise ValidationError("noise shapes do not match the variational rank/dim")
    root = np.sqrt(q.diag)
    if eps1.ndim == 1:
        return q.mean + q.low_rank @ eps1 + root * eps2
    return q.mean[:, None] + q.low_rank @ eps1 + root[:, None] * eps2


def kl_gaussian(q, prior_mean, prior_cov):
    """KL(q || N(prior_mean, prior_cov)) for the low-rank family."""
    value, _ = _kl_core(q, prior_mean, prior_cov, want_grads=False)
    return value


def kl_gaussian_grads(q, prior_mean, prior_cov):
    """KL value plus gradients.

    Returns (value, grads) with grads a dict holding d_mean, d_low_rank,
    d_diag, d_prior_mean, and d_prior_cov (the dense matrix cotangent,
    useful for chaining into kernel hyperparameters).
    """
    return _kl_core(q, prior_mean, prior_cov, want_grads=True)


def _kl_core(q, prior_mean, prior_cov, want_grads):
    n = q.n
    prior_mean = np.asarray(prior_mean, dtype=float)
    prior_cov = np.asarray(prior_cov, dtype=float)
    if prior_mean.shape != (n,) or prior_cov.shape != (n, n):
        raise ValidationError("prior moments do not match the variational dim")

    sigma = q.cov()
    try:
        l_prior = np.linalg.cholesky(prior_cov)
        l_sigma = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(f"KL factorization failed: {exc}") from None

    k_inv = _chol_inverse(l_prior)
    d = q.mean - prior_mean
    k_inv_d = k_inv @ d
    trace = float(np.sum(k_inv * sigma))
    maha = float(d @ k_inv_d)
    logdet_k = 2.0 * float(np.sum(np.log(np.diag(l_prior))))
    logdet_s = 2.0 * float(np.sum(np.log(np.diag(l_sigma))))
    value = 0.5 * (trace + maha - n + logdet_k - logdet_s)

    if not want_grads:
        return value, None

    s_inv = _chol_inverse(l_sigma)
    d_sigma = 0.5 * (k_inv - s_inv)
    grads = {
        "d_mean": k_inv_d,
        "d_low_rank": 2.0 * d_sigma @ q.low_rank,
        "d_diag": np.diag(d_sigma).copy(),
        "d_prior_mean": -k_inv_d,
        "d_prior_cov": 0.5 * (k_inv - k_inv @ (sigma + np.outer(d, d)) @ k_inv),
    }
    return value, grads


def _chol_inverse(l):
    eye = np.eye(l.shape[0])
    inv_l = np.linalg.solve(l, eye)
    return inv_l.T @ inv_l


def kmeans_inducing(features, m, seed, iters=25):
    """Inducing-point placement by Lloyd iterations.

    Deterministic for a fixed seed: the first centroid is a seeded draw,
    the rest are greedy farthest-point picks (ties to the lowest row
    index), assignment ties go to the lowest centroid index, and an
    emptied centroid is reseeded to the point currently farthest from
    its assigned centroid.
    """
    features = np.asarray(features, dtype=float)
    n = features.shape[0]
    if n == 0:
        raise ValidationError("cannot place inducing points on an empty set")
    m = min(int(m), n)
    rng = stream(seed, PURPOSE_INDUCING)
    chosen = [int(rng.integers(n))]
    nearest = pairwise_distances(features, features[chosen]).ravel()
    for _ in range(m - 1):
        chosen.append(int(np.argmax(nearest)))
        d_new = pairwise_distances(features, features[chosen[-1:]]).ravel()
        nearest = np.minimum(nearest, d_new)
    centroids = features[chosen].copy()
    for _ in range(iters):
        d = pairwise_distances(features, centroids)
        assign = np.argmin(d, axis=1)
        dist_own = d[np.arange(n), assign]
        order = np.argsort(-dist_own, kind="stable")
        cursor = 0
        for j in range(m):
            members = features[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
            else:
                centroids[j] = features[order[cursor]]
                cursor += 1
    return centroids


@dataclasses.dataclass
class InducingSet:
    """Inducing locations in feature space plus the variational q(u)."""

    points: np.ndarray
    q_u: VariationalGaussian

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2:
            raise ValidationError("inducing points must be (m, d)")
        if self.points.shape[0] != self.q_u.n:
            raise ValidationError("q(u) dimension must match the point count")

    @property
    def count(self):
        return self.points.shape[0]


@dataclasses.dataclass
class ConditionalWorkspace:
    """Intermediates of the sparse conditional, kept for the backward pass."""

    mean: np.ndarray
    var: np.ndarray
    k_uu: np.ndarray
    chol_uu: np.ndarray
    k_ut: np.ndarray
    b: np.ndarray  # K_uu^{-1} K_ut, shape (m, n)
    r: np.ndarray  # K_uu^{-1} (mu_u - m_u), shape (m,)
    w: np.ndarray  # Sigma_u B, shape (m, n)
    c: np.ndarray  # K_uu^{-1} Sigma_u B, shape (m, n)
    dist_uu: np.ndarray
    dist_ut: np.ndarray
    var_clamped: np.ndarray


def sparse_conditional(
    inducing, hyper, target_features, prior_mean_u, prior_mean_t, workspace=False
):
    """Marginal mean/variance of the GP at targets given q(u).

    mean = m_t + K_tu K_uu^{-1} (mu_u - m_u)
    var  = k_tt - diag(K_tu K_uu^{-1} K_ut)
               + diag(K_tu K_uu^{-1} Sigma_u K_uu^{-1} K_ut)

    Negative variances from cancellation are clamped to zero. Returns
    (mean, var) or a ConditionalWorkspace when workspace=True.
    """
    target_features = np.asarray(target_features, dtype=float)
    if target_features.ndim != 2 or target_features.shape[1] != inducing.points.shape[1]:
        raise ValidationError("target features must be (n, d) with the inducing dim")
    prior_mean_u = np.asarray(prior_mean_u, dtype=float)
    prior_mean_t = np.asarray(prior_mean_t, dtype=float)
    if prior_mean_u.shape != (inducing.count,):
        raise ValidationError("prior_mean_u must have one entry per inducing point")
    if prior_mean_t.shape != (target_features.shape[0],):
        raise ValidationError("prior_mean_t must have one entry per target")

    dist_uu = pairwise_distances(inducing.points, inducing.points)
    base = matern32_from_distance(dist_uu, hyper)
    jitter = hyper.jitter
    eye = np.eye(base.shape[0])
    chol = None
    for _ in range(9):
        k_uu = base + jitter * eye
        try:
            chol = np.linalg.cholesky(k_uu)
            break
        except np.linalg.LinAlgError:
            jitter *= 2.0
    if chol is None:
        min_eig = float(np.linalg.eigvalsh(base)[0])
        raise ConditioningError(
            f"inducing gram not factorizable (smallest eigenvalue {min_eig:.3e})",
            min_eigenvalue=min_eig,
        )

    dist_ut = pairwise_distances(inducing.points, target_features)
    k_ut = matern32_from_distance(dist_ut, hyper)

    def solve(rhs):
        return np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))

    b = solve(k_ut)
    r = solve(inducing.q_u.mean - prior_mean_u)
    mean = prior_mean_t + k_ut.T @ r

    lr = inducing.q_u.low_rank
    w = lr @ (lr.T @ b) + inducing.q_u.diag[:, None] * b
    raw_var = hyper.variance - np.sum(k_ut * b, axis=0) + np.sum(b * w, axis=0)
    clamped = raw_var < 0.0
    var = np.where(clamped, 0.0, raw_var)

    if not workspace:
        return mean, var
    return ConditionalWorkspace(
        mean=mean,
        var=var,
        k_uu=k_uu,
        chol_uu=chol,
        k_ut=k_ut,
        b=b,
        r=r,
        w=w,
        c=solve(w),
        dist_uu=dist_uu,
        dist_ut=dist_ut,
        var_clamped=clamped,
    )
