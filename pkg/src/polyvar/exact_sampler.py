"""
Exact-in-law samplers for the observed sequences at unit time step.

Stationary Gaussian sequences are drawn by circulant embedding (Davies-Harte);
the embedding size doubles until every eigenvalue is admissible, and otherwise
falls back to a dense Cholesky factor (moderate n) or to eigenvalue clipping
(large n). The OUFOU pair is drawn as a bivariate stationary sequence through
the 2x2 Hermitian spectral matrix at each Fourier frequency.

Non-stationary paths started at zero are the stationary paths minus their
exponentially vanishing corrections, e.g. X_k = Z_k - e^{-theta k} Z_0.

Every draw is keyed by (seed, stream, replication) through a Philox
counter-based generator, so replication r of an experiment is reproducible
independently of how replications are chunked or distributed.
"""

import logging
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, cholesky

from .cov_models import CovKernel, ProcessModel, oufou_kernels
from .errors import SimulationError, ValidationError

logger = logging.getLogger(__name__)

MAX_EMBEDDING = 2**16
CLIP_TOL = 1e-9
CHOLESKY_MAX_N = 8192
PAIR_CHOLESKY_MAX_N = 4096


def replication_rng(seed: int, replication: int = 0, stream: int = 0) -> np.random.Generator:
    """Philox generator for substream (stream, replication) of a master seed"""
    if seed < 0:
        raise ValidationError(f"seed must be nonnegative, got {seed}")
    sequence = np.random.SeedSequence(seed, spawn_key=(stream, replication))
    return np.random.Generator(np.random.Philox(sequence))


def _next_pow2(n: int) -> int:
    return 1 << max(int(n) - 1, 1).bit_length()


def _leading_minor(error: Exception) -> Optional[int]:
    match = re.search(r"(\d+)", str(error))
    return int(match.group(1)) if match else None


@dataclass
class SamplePath:
    values: np.ndarray
    model: Optional[ProcessModel]
    seed: int
    stationary: bool
    companion: Optional[np.ndarray] = None
    diff_order: int = 0
    parts: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise SimulationError("sample path contains non-finite values")

    def __len__(self):
        return self.values.size

    def to_csv(self, path: str) -> None:
        frame = pd.DataFrame({"index": np.arange(self.values.size), "value": self.values})
        if self.companion is not None:
            frame["sigma_value"] = self.companion
        frame.to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path: str, model: Optional[ProcessModel] = None) -> "SamplePath":
        frame = pd.read_csv(path)
        if "value" not in frame.columns:
            raise ValidationError(f"{path}: expected a 'value' column")
        if "index" in frame.columns:
            frame = frame.sort_values("index")
        companion = None
        if "sigma_value" in frame.columns:
            companion = frame["sigma_value"].to_numpy(dtype=float)
        return cls(
            values=frame["value"].to_numpy(dtype=float),
            model=model,
            seed=-1,
            stationary=model is None or model.stationary,
            companion=companion,
        )


class StationarySampler:
    """
    Exact sampler of n consecutive values of a stationary Gaussian sequence.

    Only arrays are stored, so instances can be shipped to worker processes.
    """

    def __init__(self, kernel: CovKernel, n: int):
        if n < 2:
            raise ValidationError(f"n must be at least 2, got {n}")
        self.n = n
        self.r0 = kernel.r0
        self.clipped = 0
        self.method = "circulant"
        self.chol: Optional[np.ndarray] = None
        self.scale: Optional[np.ndarray] = None
        self._build(kernel)

    def _build(self, kernel: CovKernel) -> None:
        half = _next_pow2(self.n)
        threshold = -CLIP_TOL * self.r0
        while True:
            r = kernel.values(half)
            row = np.concatenate([r, r[-2:0:-1]])
            eig = np.fft.fft(row).real
            if eig.min() >= threshold:
                break
            if 2 * half >= MAX_EMBEDDING:
                if self.n <= CHOLESKY_MAX_N:
                    self._build_cholesky(kernel)
                    return
                logger.warning(
                    f"{kernel.name}: embedding of size {2 * half} not PSD "
                    f"(min eigenvalue {eig.min():.3e}), clipping"
                )
                break
            half *= 2
        negative = eig < 0
        self.clipped = int(negative.sum())
        if self.clipped:
            logger.warning(f"{kernel.name}: clipped {self.clipped} negative embedding eigenvalues")
        eig = np.where(negative, 0.0, eig)
        self.scale = np.sqrt(eig / eig.size)
        logger.debug(f"{kernel.name}: circulant embedding of size {eig.size} for n={self.n}")

    def _build_cholesky(self, kernel: CovKernel) -> None:
        logger.info(f"{kernel.name}: falling back to dense Cholesky for n={self.n}")
        try:
            self.chol = cholesky(kernel.toeplitz(self.n), lower=True)
        except LinAlgError as e:
            raise SimulationError(
                f"{kernel.name}: covariance matrix is not positive definite",
                _leading_minor(e),
            )
        self.method = "cholesky"

    @property
    def embedding_size(self) -> int:
        return 0 if self.scale is None else self.scale.size

    def draw_batch(self, rngs: Sequence[np.random.Generator]) -> np.ndarray:
        """One path per generator, shape (len(rngs), n)"""
        if self.method == "cholesky":
            normals = np.stack([rng.standard_normal(self.n) for rng in rngs])
            return normals @ self.chol.T
        m = self.scale.size
        normals = np.stack([rng.standard_normal((2, m)) for rng in rngs])
        w = normals[:, 0, :] + 1j * normals[:, 1, :]
        y = np.fft.fft(self.scale * w, axis=-1)
        return y.real[:, : self.n]

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return self.draw_batch([rng])[0]


class PairSampler:
    """
    Exact sampler of the bivariate stationary pair (Z^theta_k, Z^rho_k).

    The 2x2 covariance blocks Gamma(k)[a, b] = E[Z^a_0 Z^b_k] are embedded in a
    block circulant; at each Fourier frequency the Hermitian spectral matrix
    f(l) = B_l B_l^* is factorized by an eigendecomposition.
    """

    def __init__(self, theta: float, rho: float, H: float, n: int):
        if n < 2:
            raise ValidationError(f"n must be at least 2, got {n}")
        self.n = n
        self.clipped = 0
        self.method = "spectral"
        self.factor: Optional[np.ndarray] = None
        self.chol: Optional[np.ndarray] = None
        self._build(oufou_kernels(theta, rho, H))

    def _build(self, kernels) -> None:
        half = _next_pow2(self.n)
        while True:
            gam = kernels.pair_matrices(half)
            scale = max(gam[half, 0, 0], gam[half, 1, 1])
            m = 2 * half
            # lags 0..half then -(half-1)..-1
            circ = np.concatenate([gam[half:], gam[1:half]])
            spec = m * np.fft.ifft(circ, axis=0)
            spec = 0.5 * (spec + np.conj(np.swapaxes(spec, 1, 2)))
            w, v = np.linalg.eigh(spec)
            if w.min() >= -CLIP_TOL * scale:
                break
            if 2 * half >= MAX_EMBEDDING:
                if self.n <= PAIR_CHOLESKY_MAX_N:
                    self._build_cholesky(kernels)
                    return
                logger.warning("OUFOU pair: block embedding not PSD, clipping")
                break
            half *= 2
        negative = w < 0
        self.clipped = int(negative.sum())
        if self.clipped:
            logger.warning(f"OUFOU pair: clipped {self.clipped} negative spectral eigenvalues")
        w = np.where(negative, 0.0, w)
        self.factor = v * np.sqrt(w)[:, None, :]

    def _build_cholesky(self, kernels) -> None:
        logger.info(f"OUFOU pair: falling back to dense block Cholesky for n={self.n}")
        n = self.n
        gam = kernels.pair_matrices(n - 1)
        lag = np.arange(n)[None, :] - np.arange(n)[:, None]
        blocks = gam[lag + n - 1]  # (s, u, a, b) = E[Z^a_s Z^b_u]
        cov = blocks.transpose(0, 2, 1, 3).reshape(2 * n, 2 * n)
        try:
            self.chol = cholesky(cov, lower=True)
        except LinAlgError as e:
            raise SimulationError("OUFOU pair covariance is not positive definite", _leading_minor(e))
        self.method = "cholesky"

    def draw_batch(self, rngs: Sequence[np.random.Generator]) -> np.ndarray:
        """Shape (len(rngs), n, 2): columns are Z^theta and Z^rho"""
        if self.method == "cholesky":
            normals = np.stack([rng.standard_normal(2 * self.n) for rng in rngs])
            return (normals @ self.chol.T).reshape(len(rngs), self.n, 2)
        m = self.factor.shape[0]
        normals = np.stack([rng.standard_normal((2, m, 2)) for rng in rngs])
        w = normals[:, 0] + 1j * normals[:, 1]
        coloured = np.einsum("lab,rlb->rla", self.factor, w)
        y = np.sqrt(m) * np.fft.ifft(coloured, axis=1)
        return y.real[:, : self.n, :]

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return self.draw_batch([rng])[0]


def decay_correction(values: np.ndarray, rate: float) -> np.ndarray:
    """Z_k - e^{-rate k} Z_0 along the last axis"""
    k = np.arange(values.shape[-1])
    return values - np.exp(-rate * k) * values[..., :1]


def oufou_paths(pair: np.ndarray, theta: float, rho: float, stationary: bool = False):
    """
    Form (X, Sigma) from draws of (Z^theta, Z^rho) with shape (..., n, 2).
    With stationary=True the stationary parts Z^{theta,rho}, Sigma^{theta,rho}
    are returned instead.
    """
    z_t = pair[..., 0]
    z_r = pair[..., 1]
    d = rho - theta
    z = (rho * z_r - theta * z_t) / d
    sigma = (z_t - z_r) / d
    if stationary:
        return z, sigma
    k = np.arange(pair.shape[-2])
    e_t = np.exp(-theta * k)
    e_r = np.exp(-rho * k)
    x = z - (rho * e_r * z_r[..., :1] - theta * e_t * z_t[..., :1]) / d
    s = sigma - (e_t * z_t[..., :1] - e_r * z_r[..., :1]) / d
    return x, s


def sample_stationary(
    kernel: CovKernel,
    n: int,
    seed: int,
    model: Optional[ProcessModel] = None,
    replication: int = 0,
) -> SamplePath:
    values = StationarySampler(kernel, n).draw(replication_rng(seed, replication))
    return SamplePath(values=values, model=model, seed=seed, stationary=True)


def sample_fou_nonstationary(
    theta: float, H: float, n: int, seed: int, replication: int = 0
) -> SamplePath:
    model = ProcessModel("fou", H=H, theta=theta)
    stationary = StationarySampler(model.kernel(), n).draw(replication_rng(seed, replication))
    return SamplePath(
        values=decay_correction(stationary, theta),
        model=model,
        seed=seed,
        stationary=False,
        parts={"stationary": stationary},
    )


def sample_oufou(
    theta: float, rho: float, H: float, n: int, seed: int, replication: int = 0
) -> SamplePath:
    model = ProcessModel("oufou", H=H, theta=theta, rho=rho)
    pair = PairSampler(theta, rho, H, n).draw(replication_rng(seed, replication))
    x, s = oufou_paths(pair, theta, rho)
    z, sigma = oufou_paths(pair, theta, rho, stationary=True)
    return SamplePath(
        values=x,
        model=model,
        seed=seed,
        stationary=False,
        companion=s,
        parts={"z": z, "sigma": sigma, "z_theta": pair[:, 0], "z_rho": pair[:, 1]},
    )


def sample_fou2(alpha: float, H: float, n: int, seed: int, replication: int = 0) -> SamplePath:
    model = ProcessModel("fou2", H=H, alpha=alpha)
    stationary = StationarySampler(model.kernel(), n).draw(replication_rng(seed, replication))
    return SamplePath(
        values=decay_correction(stationary, alpha),
        model=model,
        seed=seed,
        stationary=False,
        parts={"stationary": stationary},
    )


def sample_model(
    model: ProcessModel,
    n: int,
    seed: int,
    stationary: bool = False,
    replication: int = 0,
) -> SamplePath:
    """Dispatch on the model variant; stationary=True skips the start-at-zero correction"""
    if model.variant == "oufou":
        path = sample_oufou(model.theta, model.rho, model.H, n, seed, replication)
        if stationary:
            return SamplePath(
                values=path.parts["z"],
                model=model,
                seed=seed,
                stationary=True,
                companion=path.parts["sigma"],
                parts=path.parts,
            )
        return path
    if model.stationary or stationary:
        return sample_stationary(model.kernel(), n, seed, model=model, replication=replication)
    if model.variant == "fou":
        return sample_fou_nonstationary(model.theta, model.H, n, seed, replication)
    return sample_fou2(model.alpha, model.H, n, seed, replication)


def sample_many(
    model: ProcessModel, n: int, seed: int, replications: int, stationary: bool = False
) -> List[SamplePath]:
    return [sample_model(model, n, seed, stationary, r) for r in range(replications)]
