"""3-D Gaussian mixture head: assembly from raw network outputs, density
evaluation, the mean negative log-likelihood loss, and mode-based prediction.

Covariances are carried as Cholesky factors L with a strictly positive
diagonal; the effective covariance is LL^T + jitter*I, so it is symmetric
positive-definite by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))
DEFAULT_JITTER = 1e-6
RAW_PER_COMPONENT = 10  # 1 weight logit + 3 means + 3 diagonal + 3 sub-diagonal
DIAG_CLAMP = 10.0  # raw diagonal logits clipped to [-10, 10] before exp


@dataclass
class Position3D:
    """A (longitude, latitude, altitude) triple in transformed space."""

    coords: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("position coordinates must be finite")


def _coords(x) -> np.ndarray:
    if isinstance(x, Position3D):
        return x.coords
    return np.asarray(x, dtype=np.float64).reshape(3)


@dataclass
class MixtureParams3D:
    """Mixture parameters, differentiable back to the raw head.

    alphas lie on the simplex by construction (softmax); log_alphas are the
    matching stable log-weights.  chol_diag holds exp-transformed diagonals,
    chol_sub the free sub-diagonal entries (L21, L31, L32) per component.
    """

    alphas: Tensor
    log_alphas: Tensor
    means: list  # N tensors of shape (3,)
    chol_diag: list  # N tensors of shape (3,), strictly positive
    chol_sub: list  # N tensors of shape (3,)
    jitter: float = DEFAULT_JITTER

    @property
    def n_components(self) -> int:
        return len(self.means)

    @property
    def chol(self) -> np.ndarray:
        """Lower-triangular factors as an (N, 3, 3) float array."""
        out = np.zeros((self.n_components, 3, 3))
        for k in range(self.n_components):
            d = self.chol_diag[k].data
            s = self.chol_sub[k].data
            out[k, 0, 0], out[k, 1, 1], out[k, 2, 2] = d
            out[k, 1, 0], out[k, 2, 0], out[k, 2, 1] = s
        return out

    def covariances(self) -> np.ndarray:
        """Effective covariances LL^T + jitter*I as an (N, 3, 3) array."""
        ls = self.chol
        return ls @ ls.transpose(0, 2, 1) + self.jitter * np.eye(3)

    def alphas_value(self) -> np.ndarray:
        return self.alphas.data.copy()

    def means_value(self) -> np.ndarray:
        return np.stack([m.data for m in self.means])

    def detach(self) -> "MixtureParams3D":
        """Copy with constant leaves; gradients no longer reach the head."""
        return MixtureParams3D(
            alphas=Tensor(self.alphas.data.copy()),
            log_alphas=Tensor(self.log_alphas.data.copy()),
            means=[Tensor(m.data.copy()) for m in self.means],
            chol_diag=[Tensor(d.data.copy()) for d in self.chol_diag],
            chol_sub=[Tensor(s.data.copy()) for s in self.chol_sub],
            jitter=self.jitter,
        )


def assemble_mixture(raw_head: Tensor, jitter: float = DEFAULT_JITTER) -> MixtureParams3D:
    """Interpret a flat head tensor of length N*10 as mixture parameters.

    Layout is component-major: per component [weight logit, mean(3),
    raw diagonal(3), raw sub-diagonal(3)].  Weights pass through a softmax,
    means stay raw (they may take any real value), the Cholesky diagonal is
    exp(clip(raw, -10, 10)) and the sub-diagonal stays raw.
    """
    raw_head = ad.as_tensor(raw_head)
    if raw_head.data.ndim != 1 or raw_head.data.size % RAW_PER_COMPONENT != 0 or raw_head.data.size == 0:
        raise ValueError(
            f"raw head must be 1-D with length a positive multiple of {RAW_PER_COMPONENT}, "
            f"got shape {raw_head.data.shape}"
        )
    n = raw_head.data.size // RAW_PER_COMPONENT

    logits = ad.concat([raw_head[k * RAW_PER_COMPONENT : k * RAW_PER_COMPONENT + 1] for k in range(n)])
    alphas = ad.softmax(logits)
    log_alphas = logits - ad.logsumexp(logits)

    means, diags, subs = [], [], []
    for k in range(n):
        base = k * RAW_PER_COMPONENT
        means.append(raw_head[base + 1 : base + 4])
        diags.append(ad.exp(ad.clamp(raw_head[base + 4 : base + 7], -DIAG_CLAMP, DIAG_CLAMP)))
        subs.append(raw_head[base + 7 : base + 10])
    return MixtureParams3D(alphas, log_alphas, means, diags, subs, jitter)


def _component_log_pdf(params: MixtureParams3D, k: int, x: Tensor) -> Tensor:
    """Log N(x | mu_k, L_k L_k^T + jitter*I) via an explicit 3x3 Cholesky."""
    d, s = params.chol_diag[k], params.chol_sub[k]
    d1, d2, d3 = d[0], d[1], d[2]
    s21, s31, s32 = s[0], s[1], s[2]
    eps = params.jitter

    # entries of Sigma = L L^T + eps I
    c11 = d1 * d1 + eps
    c21 = s21 * d1
    c31 = s31 * d1
    c22 = s21 * s21 + d2 * d2 + eps
    c32 = s31 * s21 + s32 * d2
    c33 = s31 * s31 + s32 * s32 + d3 * d3 + eps

    # Cholesky of Sigma (closed form, all pivots positive by construction)
    m11 = ad.sqrt(c11)
    m21 = c21 / m11
    m31 = c31 / m11
    m22 = ad.sqrt(c22 - m21 * m21)
    m32 = (c32 - m31 * m21) / m22
    m33 = ad.sqrt(c33 - m31 * m31 - m32 * m32)

    log_det = 2.0 * (ad.log(m11) + ad.log(m22) + ad.log(m33))

    r = x - params.means[k]
    z1 = r[0] / m11
    z2 = (r[1] - m21 * z1) / m22
    z3 = (r[2] - m31 * z1 - m32 * z2) / m33
    quad = z1 * z1 + z2 * z2 + z3 * z3

    return -1.5 * LOG_2PI - 0.5 * log_det - 0.5 * quad


def log_density(params: MixtureParams3D, x) -> Tensor:
    """Log mixture density at x, as a scalar tensor.

    Computed as logsumexp over per-component log terms, so it never
    underflows to -inf for finite inputs.
    """
    xt = x if isinstance(x, Tensor) else Tensor(_coords(x))
    terms = [
        ad.reshape(params.log_alphas[k] + _component_log_pdf(params, k, xt), (1,))
        for k in range(params.n_components)
    ]
    return ad.logsumexp(ad.concat(terms)) if len(terms) > 1 else ad.reshape(terms[0], ())


def nll_loss(params_batch, targets) -> Tensor:
    """Mean negative log-likelihood of the targets under their mixtures."""
    if len(params_batch) == 0:
        raise ValueError("nll_loss needs a non-empty batch")
    if len(params_batch) != len(targets):
        raise ValueError(f"batch size mismatch: {len(params_batch)} mixtures, {len(targets)} targets")
    total = log_density(params_batch[0], targets[0])
    for params, target in zip(params_batch[1:], targets[1:]):
        total = total + log_density(params, target)
    loss = -total / len(params_batch)
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite mixture loss")
    return loss


def predict_mode(
    params: MixtureParams3D,
    max_iter: int = 500,
    step_tol: float = 1e-8,
) -> Position3D:
    """Point forecast: the position of maximal mixture density.

    For a single component the mean coincides with the mode and is returned
    exactly.  Otherwise we run gradient ascent on the log density from every
    component mean (initial step 0.1 * the smallest Cholesky diagonal,
    backtracking halving) and keep the best endpoint.
    """
    if params.n_components == 1:
        return Position3D(params.means[0].data.copy())

    frozen = params.detach()
    step0 = 0.1 * min(float(d.data.min()) for d in frozen.chol_diag)

    def value_and_grad(x: np.ndarray):
        leaf = Tensor(x)
        out = log_density(frozen, leaf)
        ad.backward(out, parameters=[leaf])
        return float(out.data), leaf.grad.copy()

    best_x, best_f = None, -np.inf
    for k in range(frozen.n_components):
        x = frozen.means[k].data.copy()
        f, g = value_and_grad(x)
        for _ in range(max_iter):
            delta = step0 * g
            f_new, x_new = -np.inf, x
            while np.linalg.norm(delta) >= step_tol:
                x_new = x + delta
                f_new = float(log_density(frozen, x_new).data)
                if f_new > f:
                    break
                delta = 0.5 * delta
            if np.linalg.norm(delta) < step_tol or f_new <= f:
                break
            x, f = x_new, f_new
            _, g = value_and_grad(x)
        if f > best_f:
            best_x, best_f = x, f
    return Position3D(best_x)


def sample(params: MixtureParams3D, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw positions: pick component k ~ alphas, return mu_k + L_k z."""
    n = 1 if size is None else size
    alphas = params.alphas_value()
    means = params.means_value()
    chol = params.chol
    ks = rng.choice(params.n_components, size=n, p=alphas / alphas.sum())
    z = rng.standard_normal((n, 3))
    out = means[ks] + np.einsum("nij,nj->ni", chol[ks], z)
    return out[0] if size is None else out
