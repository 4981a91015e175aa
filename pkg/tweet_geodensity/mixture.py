"""
Bivariate Gaussian mixture mathematics

Raw projections theta (6 values per component, laid out as
pi-logit, mu_1, mu_2, sigma_1, sigma_2, rho) are converted with softmax,
identity, softplus and softsign. The conversion and the negative
log-likelihood are built on a diffcore Graph, so the training loss and the
numeric conversion share one code path.
"""

from dataclasses import dataclass
from typing import Iterable, List, NamedTuple, Optional, Sequence, Union
import json
import math

import numpy as np
from scipy.special import logsumexp

from .diffcore import Graph
from .exceptions import DataError

PARAMS_PER_COMPONENT = 6
SIGMA_FLOOR = 1e-6
RHO_LIMIT = 1.0 - 1e-6
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class Gmm2D:
    """K-component bivariate Gaussian mixture"""
    pi: np.ndarray     # (K,)
    mu: np.ndarray     # (K, 2)
    sigma: np.ndarray  # (K, 2)
    rho: np.ndarray    # (K,)

    def __post_init__(self):
        k = self.pi.shape[0]
        if self.mu.shape != (k, 2) or self.sigma.shape != (k, 2) or self.rho.shape != (k,):
            raise DataError(f"inconsistent mixture shapes: pi {self.pi.shape}, mu {self.mu.shape}, "
                            f"sigma {self.sigma.shape}, rho {self.rho.shape}")
        if abs(float(self.pi.sum()) - 1.0) > 1e-9 or np.any(self.pi < 0):
            raise DataError(f"mixture weights must be a distribution, sum={self.pi.sum()}")
        if np.any(self.sigma <= 0) or np.any(np.abs(self.rho) >= 1):
            raise DataError("mixture covariance must be positive definite")

    @property
    def k(self) -> int:
        return self.pi.shape[0]

    def covariances(self) -> np.ndarray:
        s1, s2 = self.sigma[:, 0], self.sigma[:, 1]
        off = self.rho * s1 * s2
        return np.stack([np.stack([s1 * s1, off], -1), np.stack([off, s2 * s2], -1)], -2)

    def affine(self, scale: Sequence[float], shift: Sequence[float]) -> "Gmm2D":
        """Distribution of a * y + b; densities divide by |a_1 a_2|"""
        scale = np.asarray(scale, dtype=np.float64)
        shift = np.asarray(shift, dtype=np.float64)
        return Gmm2D(
            pi=self.pi.copy(),
            mu=self.mu * scale + shift,
            sigma=self.sigma * np.abs(scale),
            rho=self.rho * np.sign(scale[0] * scale[1]),
        )

    @classmethod
    def single(cls, mu: Sequence[float], sigma: Sequence[float], rho: float = 0.0) -> "Gmm2D":
        return cls(np.ones(1), np.asarray([mu], float), np.asarray([sigma], float), np.asarray([rho], float))

    @classmethod
    def combine(cls, parts: Sequence["Gmm2D"], weights: Optional[Sequence[float]] = None) -> "Gmm2D":
        """Weighted mixture of mixtures (uniform weights by default)"""
        if not parts:
            raise DataError("cannot combine an empty list of mixtures")
        if weights is None:
            weights = np.full(len(parts), 1.0 / len(parts))
        weights = np.asarray(weights, dtype=np.float64)
        pi = np.concatenate([w * p.pi for w, p in zip(weights, parts)])
        return cls(
            pi=pi / pi.sum(),
            mu=np.concatenate([p.mu for p in parts]),
            sigma=np.concatenate([p.sigma for p in parts]),
            rho=np.concatenate([p.rho for p in parts]),
        )

    def to_dict(self) -> dict:
        return {
            'pi': self.pi.tolist(),
            'mu': self.mu.tolist(),
            'sigma': self.sigma.tolist(),
            'rho': self.rho.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "Gmm2D":
        try:
            return cls(
                pi=np.asarray(data['pi'], dtype=np.float64),
                mu=np.asarray(data['mu'], dtype=np.float64).reshape(-1, 2),
                sigma=np.asarray(data['sigma'], dtype=np.float64).reshape(-1, 2),
                rho=np.asarray(data['rho'], dtype=np.float64),
            )
        except KeyError as e:
            raise DataError(f"mixture description missing field {e}") from None


class MixtureNodes(NamedTuple):
    """Graph nodes of converted parameters, each (B, K)"""
    log_pi: int
    mu1: int
    mu2: int
    sigma1: int
    sigma2: int
    rho: int


def mixture_nodes(g: Graph, theta: int) -> MixtureNodes:
    """Decompose theta (B, 6K) per component and map each slot into its valid range"""
    batch, width = g.shape(theta)
    if width % PARAMS_PER_COMPONENT:
        raise DataError(f"theta width {width} is not a multiple of {PARAMS_PER_COMPONENT}")
    k = width // PARAMS_PER_COMPONENT
    slots = g.reshape(theta, (batch, k, PARAMS_PER_COMPONENT))

    logits = g.take(slots, 0)
    log_pi = g.sub(logits, g.logsumexp(logits, axis=-1, keepdims=True))
    sigma1 = g.clip(g.softplus(g.take(slots, 3)), SIGMA_FLOOR, np.inf)
    sigma2 = g.clip(g.softplus(g.take(slots, 4)), SIGMA_FLOOR, np.inf)
    rho = g.clip(g.softsign(g.take(slots, 5)), -RHO_LIMIT, RHO_LIMIT)
    return MixtureNodes(log_pi, g.take(slots, 1), g.take(slots, 2), sigma1, sigma2, rho)


def log_density_nodes(g: Graph, params: MixtureNodes, y: np.ndarray) -> int:
    """Per-record mixture log density ln sum_k pi_k N(y | mu_k, Sigma_k), shape (B,)"""
    y = np.asarray(y, dtype=np.float64)
    y1 = g.constant(y[:, 0:1])
    y2 = g.constant(y[:, 1:2])

    u1 = g.div(g.sub(y1, params.mu1), params.sigma1)
    u2 = g.div(g.sub(y2, params.mu2), params.sigma2)
    one_minus_r2 = g.sub(g.constant(1.0), g.square(params.rho))
    cross = g.scale(g.mul(g.mul(params.rho, u1), u2), 2.0)
    z = g.sub(g.add(g.square(u1), g.square(u2)), cross)

    log_norm = g.add(g.add(g.log(params.sigma1), g.log(params.sigma2)),
                     g.scale(g.log(one_minus_r2), 0.5))
    component = g.sub(g.sub(g.constant(-LOG_2PI), log_norm),
                      g.div(z, g.scale(one_minus_r2, 2.0)))
    return g.logsumexp(g.add(params.log_pi, component), axis=-1)


def nll_loss(g: Graph, theta: int, y: np.ndarray) -> int:
    """-sum_n ln sum_k pi_k N(y_n | mu_k, Sigma_k) as a scalar graph node"""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] == 0:
        raise DataError(f"nll_loss needs a non-empty (N, 2) target batch, got {y.shape}")
    if y.shape[0] != g.shape(theta)[0]:
        raise DataError(f"nll_loss: {y.shape[0]} targets for {g.shape(theta)[0]} predictions")
    log_density = log_density_nodes(g, mixture_nodes(g, theta), y)
    return g.scale(g.sum(log_density), -1.0)


def convert_params_batch(theta: np.ndarray) -> List[Gmm2D]:
    """Convert raw projections (B, 6K) into mixtures"""
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise DataError("theta contains non-finite values")
    g = Graph()
    nodes = mixture_nodes(g, g.constant(theta))
    log_pi, mu1, mu2, s1, s2, rho = (g.value(n) for n in nodes)
    return [
        Gmm2D(
            pi=np.exp(log_pi[b]),
            mu=np.stack([mu1[b], mu2[b]], axis=-1),
            sigma=np.stack([s1[b], s2[b]], axis=-1),
            rho=rho[b].copy(),
        )
        for b in range(theta.shape[0])
    ]


def convert_params(theta: np.ndarray) -> Gmm2D:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.size == 0 or theta.size % PARAMS_PER_COMPONENT:
        raise DataError(f"theta must be a flat vector of length 6K, got shape {theta.shape}")
    return convert_params_batch(theta[None, :])[0]


def component_log_density(y, mu, sigma1, sigma2, rho) -> np.ndarray:
    """Closed-form bivariate normal log density (broadcasts over leading axes)"""
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    u1 = (y[..., 0] - mu[..., 0]) / sigma1
    u2 = (y[..., 1] - mu[..., 1]) / sigma2
    one_minus_r2 = 1.0 - rho * rho
    z = u1 * u1 + u2 * u2 - 2.0 * rho * u1 * u2
    return -(LOG_2PI + np.log(sigma1) + np.log(sigma2) + 0.5 * np.log(one_minus_r2)) \
        - z / (2.0 * one_minus_r2)


def mixture_log_density(y, gmm: Gmm2D) -> Union[float, np.ndarray]:
    """ln sum_k pi_k N(y | mu_k, Sigma_k) for one point (2,) or many (N, 2)"""
    y = np.asarray(y, dtype=np.float64)
    per_component = component_log_density(
        y[..., None, :], gmm.mu, gmm.sigma[:, 0], gmm.sigma[:, 1], gmm.rho)
    result = logsumexp(np.log(gmm.pi) + per_component, axis=-1)
    return float(result) if y.ndim == 1 else result


def mixture_density(y, gmm: Gmm2D):
    return np.exp(mixture_log_density(y, gmm))


class ModeEstimate(NamedTuple):
    point: np.ndarray   # (2,)
    likelihood: float   # density at ``point``
    component: int


def mode_approx(gmm: Gmm2D) -> ModeEstimate:
    """Best component mean under the full mixture density; ties go to the lowest index"""
    log_at_means = mixture_log_density(gmm.mu, gmm)
    best = int(np.argmax(log_at_means))
    return ModeEstimate(gmm.mu[best].copy(), float(np.exp(log_at_means[best])), best)


def sample(gmm: Gmm2D, count: int, seed: Union[int, np.random.Generator, None] = None) -> np.ndarray:
    """Draw points: component by pi, then a correlated normal via the Cholesky factor"""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chosen = rng.choice(gmm.k, size=count, p=gmm.pi)
    z = rng.standard_normal((count, 2))
    s1, s2, rho = gmm.sigma[chosen, 0], gmm.sigma[chosen, 1], gmm.rho[chosen]
    first = s1 * z[:, 0]
    second = s2 * (rho * z[:, 0] + np.sqrt(1.0 - rho * rho) * z[:, 1])
    return gmm.mu[chosen] + np.stack([first, second], axis=-1)


def nll_of(points: np.ndarray, mixtures: Iterable[Gmm2D]) -> float:
    """Summed negative log density of each point under its own mixture"""
    return -float(sum(mixture_log_density(p, m) for p, m in zip(np.asarray(points), mixtures)))
