"""Segmentation counts, PCA-based generation metrics and latent interpolation.

Conventions for the generation metrics:

* rows are observations (one flattened image per row);
* the "covariance" is the scatter matrix with no 1/N factor, so its
  trace equals the sum of squared entries;
* rows are centered by the training mean before any metric, and unit
  normalized only where realism is concerned.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, no_grad


def confusion(pred, truth, threshold=0.5):
    """(TP, TN, FP, FN) after thresholding both masks at ``threshold``."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    p = pred >= threshold
    t = truth >= threshold
    tp = int(np.count_nonzero(p & t))
    tn = int(np.count_nonzero(~p & ~t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return tp, tn, fp, fn


def accuracy(counts):
    tp, tn, fp, fn = counts
    total = tp + tn + fp + fn
    if total <= 0:
        raise ValueError("accuracy of an empty mask")
    return (tp + tn) / ((tp + fn) + (tn + fp))


def dice_from_counts(counts):
    tp, _, fp, fn = counts
    denom = (tp + fn) + (tp + fp)
    if denom == 0:
        raise ZeroDivisionError("both masks empty: Dice is 0/0")
    return 2 * tp / denom


# -- PCA ------------------------------------------------------------------------

@dataclass
class EigenBasis:
    mean: np.ndarray
    eigenvectors: np.ndarray  # (k, D), rows orthonormal
    eigenvalues: np.ndarray  # (k,), descending
    source_total_variation: float
    normalized: bool = True

    @property
    def k(self):
        return self.eigenvectors.shape[0]

    def prepare(self, images):
        """Center by the fitted mean and, if fitted that way, unit-normalize rows."""
        x = _as_matrix(images)
        if x.shape[1] != self.mean.size:
            raise ValueError(f"dimension mismatch: images have {x.shape[1]} features, basis {self.mean.size}")
        x = x - self.mean
        return unit_rows(x) if self.normalized else x


@dataclass
class GenEvalReport:
    rho: float
    sigma: float
    delta: int
    n_images: int
    wall_seconds: float = 0.0

    def csv_row(self, model_id):
        return f"{model_id},{self.rho:.6f},{self.sigma:.6f},{self.delta},{self.n_images},{self.wall_seconds:.3f}"


CSV_HEADER = "model_id,rho,sigma,delta,n_images,wall_seconds"


def _as_matrix(images):
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    return x.reshape(x.shape[0], -1)


def unit_rows(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def scatter_eigh(x):
    """Eigenvalues (descending) and unit eigenvectors (rows) of x^T x.

    Works on the smaller of x^T x (D x D) and the Gram matrix x x^T (N x N);
    in the Gram case eigenvectors are mapped back through x^T.
    """
    n, d = x.shape
    if d <= n:
        vals, vecs = np.linalg.eigh(x.T @ x)
        order = np.argsort(vals)[::-1]
        return np.clip(vals[order], 0.0, None), vecs[:, order].T
    vals, u = np.linalg.eigh(x @ x.T)
    order = np.argsort(vals)[::-1]
    vals, u = np.clip(vals[order], 0.0, None), u[:, order]
    vecs = (x.T @ u).T
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    vecs = np.divide(vecs, norms, out=np.zeros_like(vecs), where=norms > 0)
    return vals, vecs


def pca_fit(images, k=16, normalize=True, center=True):
    """Top-``k`` eigenpairs of the training scatter matrix."""
    x = _as_matrix(images)
    n, d = x.shape
    if n < k:
        raise ValueError(f"need at least k={k} images, got {n}")
    mean = x.mean(axis=0) if center else np.zeros(d)
    xc = x - mean
    if normalize:
        xc = unit_rows(xc)
    vals, vecs = scatter_eigh(xc)
    tol = max(vals[0], 1.0) * max(n, d) * np.finfo(np.float64).eps if vals.size else 0.0
    rank = int(np.count_nonzero(vals > tol))
    if rank < k:
        raise ValueError(f"data rank {rank} is below k={k}; achievable k <= {rank}")
    return EigenBasis(mean, vecs[:k], vals[:k], float(np.sum(xc * xc)), normalize)


def realism_rho(basis, generated):
    """Mean L2 norm of each prepared row's projection onto the basis."""
    g = basis.prepare(generated)
    proj = g @ basis.eigenvectors.T
    return float(np.mean(np.sqrt(np.sum(proj * proj, axis=1))))


def total_variation_sigma(images):
    """Tr(X X^T), computed as the sum of squared entries."""
    x = _as_matrix(images)
    if x.size == 0:
        raise ValueError("sigma of an empty matrix")
    return float(np.sum(x * x))


def diversity_delta(images):
    """Number of scatter-matrix eigenvalues strictly above sigma / 100."""
    x = _as_matrix(images)
    if x.size == 0:
        raise ValueError("delta of an empty matrix")
    sigma = total_variation_sigma(x)
    vals, _ = scatter_eigh(x)
    return int(np.count_nonzero(vals > sigma / 100.0))


def evaluate_generated(basis, generated, wall_seconds=0.0):
    """rho on prepared rows; sigma and delta on rows centered by the training mean."""
    g = _as_matrix(generated)
    centered = g - basis.mean
    return GenEvalReport(realism_rho(basis, g), total_variation_sigma(centered),
                         diversity_delta(centered), g.shape[0], wall_seconds)


# -- latent interpolation ---------------------------------------------------------------

def normalize_latent(z):
    """Project latents onto the unit hypersphere scaled by sqrt(dim)."""
    z = np.asarray(z, dtype=np.float64)
    flat = z.reshape(z.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return (flat / norms * np.sqrt(flat.shape[1])).reshape(z.shape)


def latent_interpolate(g, z0, z1, steps, renormalize=False):
    """Images g((1-t) z0 + t z1) for ``steps`` evenly spaced t in [0, 1].

    Each latent is generated on its own (batch of one, eval mode), so the
    endpoints are byte-identical to direct generation at z0 and z1.
    """
    if steps < 2:
        raise ValueError("interpolation needs at least 2 steps")
    z0 = np.asarray(z0, dtype=np.float32)
    z1 = np.asarray(z1, dtype=np.float32)
    if z0.shape != z1.shape:
        raise ValueError(f"latent shape mismatch: {z0.shape} vs {z1.shape}")
    out = []
    with no_grad():
        for i in range(steps):
            if i == 0:
                z = z0
            elif i == steps - 1:
                z = z1
            else:
                t = i / (steps - 1)
                z = ((1.0 - t) * z0 + t * z1).astype(np.float32)
                if renormalize:
                    z = normalize_latent(z[None])[0].astype(np.float32)
            out.append(g(Tensor(z[None]), train=False).data[0])
    return np.stack(out)
