"""Descriptor compression and Fisher-vector encoding.

Patch descriptors are first projected by PCA (default 96 dimensions), a
diagonal-covariance Gaussian mixture (default 128 components) is fitted on
the projected training descriptors, and each descriptor is then encoded as
the gradient of the mixture's log-likelihood with respect to the component
means and standard deviations.  With mean and variance blocks the code has
2 * K * D dimensions: 24576 at the default sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import InsufficientSamples

PCA_DIM = 96
GMM_COMPONENTS = 128
VARIANCE_FLOOR = 1e-6
EM_MAX_ITER = 100
EM_REL_TOL = 1e-5

_LOG_2PI = float(np.log(2.0 * np.pi))


def _read_only(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class DescriptorPCA:
    """Affine projection onto the top principal axes of training descriptors."""

    mean: np.ndarray   # (D,)
    basis: np.ndarray  # (out_dim, D), rows orthonormal, by descending variance
    eigenvalues: np.ndarray  # (out_dim,)

    def __post_init__(self):
        object.__setattr__(self, "mean", _read_only(self.mean))
        object.__setattr__(self, "basis", _read_only(self.basis))
        object.__setattr__(self, "eigenvalues", _read_only(self.eigenvalues))

    @property
    def input_dim(self) -> int:
        return self.basis.shape[1]

    @property
    def output_dim(self) -> int:
        return self.basis.shape[0]

    def project(self, X: np.ndarray) -> np.ndarray:
        """Project (N, D) rows (or one (D,) vector) to (N, out_dim)."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None]
        if X.shape[1] != self.input_dim:
            raise ValueError(
                f"descriptors have dim {X.shape[1]}, transform expects {self.input_dim}"
            )
        out = (X - self.mean) @ self.basis.T
        return out[0] if single else out


def fit_descriptor_pca(descriptors: np.ndarray, out_dim: int = PCA_DIM) -> DescriptorPCA:
    """Fit the descriptor PCA on an (N, D) training matrix.

    Eigenvectors come from the symmetric eigendecomposition of the
    population covariance, ordered by descending eigenvalue, with each
    direction's sign fixed so its largest-magnitude entry is positive.
    Requires at least ``out_dim`` samples and ``out_dim <= D``.
    """
    X = np.asarray(descriptors, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected an (N, D) matrix, got shape {X.shape}")
    n, d = X.shape
    if out_dim < 1 or out_dim > d:
        raise ValueError(f"out_dim {out_dim} must be in 1..{d}")
    if n < out_dim:
        raise InsufficientSamples(
            f"descriptor PCA with out_dim={out_dim} needs at least that many samples, got {n}"
        )
    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:out_dim]
    basis = evecs[:, order].T
    for k in range(basis.shape[0]):
        j = int(np.argmax(np.abs(basis[k])))
        if basis[k, j] < 0:
            basis[k] = -basis[k]
    return DescriptorPCA(mean=mean, basis=basis, eigenvalues=np.maximum(evals[order], 0.0))


@dataclass(frozen=True)
class GmmCodebook:
    """Diagonal-covariance Gaussian mixture used as the Fisher-vector codebook."""

    weights: np.ndarray    # (K,), positive, sums to 1
    means: np.ndarray      # (K, D)
    variances: np.ndarray  # (K, D), floored away from zero
    #: Per-iteration mean log-likelihood recorded during fitting (empty for
    #: hand-built codebooks); not part of the model proper.
    log_likelihoods: np.ndarray = field(default_factory=lambda: np.empty(0), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "weights", _read_only(self.weights))
        object.__setattr__(self, "means", _read_only(self.means))
        object.__setattr__(self, "variances", _read_only(self.variances))
        object.__setattr__(self, "log_likelihoods", _read_only(self.log_likelihoods))
        if self.means.shape != self.variances.shape or self.weights.shape != (self.means.shape[0],):
            raise ValueError("inconsistent mixture parameter shapes")

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def weighted_log_densities(self, X: np.ndarray) -> np.ndarray:
        """(N, K) matrix of log w_k + log N(x_n; mu_k, sigma_k)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        inv = 1.0 / self.variances                       # (K, D)
        quad = (
            X ** 2 @ inv.T
            - 2.0 * (X @ (self.means * inv).T)
            + (self.means ** 2 * inv).sum(axis=1)
        )
        log_det = np.log(self.variances).sum(axis=1)
        log_norm = -0.5 * (self.dim * _LOG_2PI + log_det)
        return np.log(self.weights) + log_norm - 0.5 * quad

    def posteriors(self, X: np.ndarray) -> np.ndarray:
        """(N, K) component responsibilities; each row sums to 1."""
        logp = self.weighted_log_densities(X)
        return np.exp(logp - logsumexp(logp, axis=1, keepdims=True))

    def mean_log_likelihood(self, X: np.ndarray) -> float:
        """Average per-sample log-likelihood of the data under the mixture."""
        logp = self.weighted_log_densities(X)
        return float(logsumexp(logp, axis=1).mean())


def _kmeanspp_centers(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++ centre selection with deterministic degeneracy breaking.

    If the D2-sampling picks a centre identical to an earlier one (possible
    with duplicated data points), the duplicate is nudged by a small seeded
    Gaussian so EM can still separate component responsibilities.
    """
    n, d = X.shape
    centers = np.empty((k, d))
    centers[0] = X[int(rng.integers(n))]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = X[idx]
        d2 = np.minimum(d2, ((X - centers[j]) ** 2).sum(axis=1))

    scale = float(X.std())
    jitter_sd = 0.01 * scale if scale > 0.0 else 0.01
    seen: set[bytes] = set()
    for j in range(k):
        key = centers[j].tobytes()
        if key in seen:
            centers[j] = centers[j] + rng.normal(0.0, jitter_sd, size=d)
            key = centers[j].tobytes()
        seen.add(key)
    return centers


def fit_gmm(
    X: np.ndarray,
    n_components: int = GMM_COMPONENTS,
    seed: int = 0,
    max_iter: int = EM_MAX_ITER,
    rel_tol: float = EM_REL_TOL,
    variance_floor: float = VARIANCE_FLOOR,
) -> GmmCodebook:
    """Fit the diagonal GMM with expectation-maximisation.

    Initialisation is seeded k-means++; the E-step works in log space and
    the M-step floors variances at ``variance_floor``.  Iteration stops at
    ``max_iter`` or when the mean log-likelihood improves by less than
    ``rel_tol`` in relative terms.  The recorded per-iteration
    log-likelihood sequence is non-decreasing.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected an (N, D) matrix, got shape {X.shape}")
    n, d = X.shape
    if n < n_components:
        raise InsufficientSamples(
            f"GMM with {n_components} components needs at least that many samples, got {n}"
        )

    rng = np.random.default_rng(seed)
    means = _kmeanspp_centers(X, n_components, rng)
    variances = np.maximum(X.var(axis=0), variance_floor)[None, :].repeat(n_components, axis=0)
    weights = np.full(n_components, 1.0 / n_components)

    model = GmmCodebook(weights, means, variances)
    trace: list[float] = []
    prev = -np.inf
    for _ in range(max_iter):
        logp = model.weighted_log_densities(X)
        per_sample = logsumexp(logp, axis=1)
        ll = float(per_sample.mean())
        trace.append(ll)

        if np.isfinite(prev) and abs(ll - prev) < rel_tol * max(1.0, abs(prev)):
            break
        prev = ll

        resp = np.exp(logp - per_sample[:, None])
        mass = resp.sum(axis=0)                      # (K,)
        alive = mass > 1e-10
        safe_mass = np.where(alive, mass, 1.0)

        new_means = (resp.T @ X) / safe_mass[:, None]
        second = (resp.T @ (X ** 2)) / safe_mass[:, None]
        new_vars = np.maximum(second - new_means ** 2, variance_floor)
        # Dead components keep their parameters so their (negligible)
        # weight cannot drag the likelihood down.
        new_means[~alive] = model.means[~alive]
        new_vars[~alive] = model.variances[~alive]

        new_weights = np.maximum(mass / n, 1e-12)
        new_weights = new_weights / new_weights.sum()
        model = GmmCodebook(new_weights, new_means, new_vars)

    return GmmCodebook(
        model.weights, model.means, model.variances, log_likelihoods=np.asarray(trace)
    )


def fisher_vector(
    descriptors: np.ndarray, gmm: GmmCodebook, normalize: bool = True
) -> np.ndarray:
    """Fisher vector of one descriptor set under ``gmm``.

    The code stacks the mean-gradient block and the standard-deviation
    gradient block, each (K, D) flattened component-major, for a total of
    2 * K * D entries:

        G_mu[k]    = 1 / (N sqrt(w_k))   * sum_n gamma_nk (x_n - mu_k) / sigma_k
        G_sigma[k] = 1 / (N sqrt(2 w_k)) * sum_n gamma_nk ((x_n - mu_k)^2 / sigma_k^2 - 1)

    With ``normalize`` the code is signed-square-rooted entrywise and then
    globally L2-normalised.  An empty descriptor set yields the zero
    vector (which normalisation leaves untouched).
    """
    X = np.asarray(descriptors, dtype=np.float64)
    if X.ndim == 1:
        X = X[None]
    k, d = gmm.n_components, gmm.dim
    if X.shape[0] == 0:
        return np.zeros(2 * k * d)
    if X.shape[1] != d:
        raise ValueError(f"descriptors have dim {X.shape[1]}, codebook expects {d}")

    gamma = gmm.posteriors(X)                         # (N, K)
    sigma = np.sqrt(gmm.variances)                    # (K, D)
    n = X.shape[0]

    gamma_sum = gamma.sum(axis=0)                     # (K,)
    gx = gamma.T @ X                                  # (K, D)
    gx2 = gamma.T @ (X ** 2)                          # (K, D)

    dev_sum = (gx - gamma_sum[:, None] * gmm.means) / sigma
    sq_sum = (
        gx2 - 2.0 * gmm.means * gx + gamma_sum[:, None] * gmm.means ** 2
    ) / gmm.variances - gamma_sum[:, None]

    g_mean = dev_sum / (n * np.sqrt(gmm.weights))[:, None]
    g_var = sq_sum / (n * np.sqrt(2.0 * gmm.weights))[:, None]
    fv = np.concatenate([g_mean.ravel(), g_var.ravel()])
    return _improved_normalization(fv[None])[0] if normalize else fv


def fisher_vectors_per_patch(
    X: np.ndarray,
    gmm: GmmCodebook,
    normalize: bool = True,
    chunk: int = 256,
    dtype=np.float64,
) -> np.ndarray:
    """Encode each row of (N, D) as its own singleton-set Fisher vector.

    Equivalent to stacking ``fisher_vector(X[i], gmm)`` but vectorised and
    chunked; returns (N, 2 * K * D) in ``dtype``.  Full-fidelity codes are
    wide (24576 entries), so callers with many patches typically ask for
    float32 storage; the arithmetic itself stays in float64.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    k, d = gmm.n_components, gmm.dim
    out = np.empty((X.shape[0], 2 * k * d), dtype=dtype)
    sigma = np.sqrt(gmm.variances)
    inv_sw = 1.0 / np.sqrt(gmm.weights)
    inv_s2w = 1.0 / np.sqrt(2.0 * gmm.weights)
    buf = np.empty((min(chunk, X.shape[0]), 2 * k * d))
    for start in range(0, X.shape[0], chunk):
        block = X[start : start + chunk]
        nblk = block.shape[0]
        gamma = gmm.posteriors(block)                         # (n, K)
        dev = (block[:, None, :] - gmm.means[None]) / sigma   # (n, K, D)
        g_mean = gamma[:, :, None] * dev * inv_sw[None, :, None]
        g_var = gamma[:, :, None] * (dev ** 2 - 1.0) * inv_s2w[None, :, None]
        fv = buf[:nblk]
        fv[:, : k * d] = g_mean.reshape(nblk, k * d)
        fv[:, k * d :] = g_var.reshape(nblk, k * d)
        out[start : start + nblk] = _improved_normalization(fv) if normalize else fv
    return out


def _improved_normalization(fv: np.ndarray) -> np.ndarray:
    """Signed square root followed by per-row L2 normalisation."""
    out = np.sign(fv) * np.sqrt(np.abs(fv))
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    np.divide(out, norms, out=out, where=norms > 0)
    return out
