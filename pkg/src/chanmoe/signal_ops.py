"""Link-level operations: LS estimation, matched filtering, DFT codebooks, beam search."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .exceptions import ConfigurationError, DomainError, ShapeError


@dataclass(frozen=True)
class SeConfig:
    """Receiver noise for spectral-efficiency evaluation.

    The SNR is defined as ``1 / noise_power``; ``noise_power`` is derived
    from ``snr_db`` unless given explicitly.
    """

    snr_db: float = 10.0
    noise_power: Optional[float] = None

    def __post_init__(self):
        if self.noise_power is None:
            object.__setattr__(self, "noise_power", 10.0 ** (-self.snr_db / 10.0))
        if not self.noise_power > 0:
            raise ConfigurationError("noise_power must be strictly positive")


@dataclass(frozen=True, eq=False)
class Codebook:
    """Beam dictionary with unit-norm columns, shape ``[n_antennas, n_beams]``."""

    matrix: np.ndarray
    grid: np.ndarray

    @property
    def n_antennas(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_beams(self) -> int:
        return self.matrix.shape[1]


def ls_estimate(y_rx, x_pilot):
    """Least-squares channel estimate ``y / x`` (element-wise)."""
    x_pilot = np.asarray(x_pilot)
    if np.any(np.abs(x_pilot) == 0):
        raise ZeroDivisionError("pilot symbol with zero amplitude")
    return np.asarray(y_rx) / x_pilot


def matched_filter_precoder(h) -> np.ndarray:
    """Unit-norm beam ``h / ||h||`` along the last (antenna) axis."""
    h = np.asarray(h)
    norm = np.linalg.norm(h, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise DomainError("matched filter undefined for a zero channel")
    return h / norm


def beam_gains(H, w) -> np.ndarray:
    """``|h_k^H w_k|^2`` for each subcarrier row of ``H``."""
    H = np.asarray(H)
    w = np.asarray(w)
    if w.ndim == 1:
        w = np.broadcast_to(w, H.shape)
    if w.shape != H.shape:
        raise ShapeError(f"beam shape {w.shape} does not match channel {H.shape}")
    return np.abs(np.sum(H.conj() * w, axis=-1)) ** 2


def spectral_efficiency(H, w, cfg: SeConfig = SeConfig()) -> float:
    """Achievable rate summed over subcarriers, in bits/s/Hz.

    ``H`` is ``[K, Nt]``; ``w`` is one shared beam ``[Nt]`` or one beam per
    subcarrier ``[K, Nt]``.
    """
    H = np.atleast_2d(H)
    return float(np.sum(np.log2(1.0 + beam_gains(H, w) / cfg.noise_power)))


def dft_codebook(n_v: int, n_c: int, d_v: float = 0.5) -> Codebook:
    """Super-resolution DFT codebook gridded uniformly in ``sin(theta)`` over [-1, 1).

    Column ``i`` is the unit-norm ULA response toward ``sin(theta_i) = -1 +
    2 i / n_c`` under the same phase convention as
    :func:`chanmoe.channel_sim.steering_vector`, so it maximizes ``|h^H w|``
    for a path at that angle.
    """
    if n_v < 1 or n_c < n_v:
        raise ConfigurationError(f"need n_c >= n_v >= 1, got n_v={n_v}, n_c={n_c}")
    grid = -1.0 + 2.0 * np.arange(n_c) / n_c
    m = np.arange(n_v)[:, None]
    matrix = np.exp(1j * 2 * np.pi * d_v * m * grid[None, :]) / np.sqrt(n_v)
    return Codebook(matrix=matrix, grid=grid)


def codebook_se(H, cb: Codebook, cfg: SeConfig = SeConfig()) -> np.ndarray:
    """Spectral efficiency of every codeword on channel ``H [K, Nt]``."""
    H = np.atleast_2d(H)
    if H.shape[-1] != cb.n_antennas:
        raise ShapeError(f"channel has {H.shape[-1]} antennas, codebook {cb.n_antennas}")
    gains = np.abs(H.conj() @ cb.matrix) ** 2
    return np.sum(np.log2(1.0 + gains / cfg.noise_power), axis=0)


def best_beam(H, cb: Codebook, cfg: SeConfig = SeConfig()) -> Tuple[int, float]:
    """Exhaustive beam sweep; ties resolve to the lowest index."""
    se = codebook_se(H, cb, cfg)
    index = int(np.argmax(se))
    return index, float(se[index])


def codebook_baseline_bf(H_sub6, cb_sub6: Codebook, cb_mm: Codebook,
                         cfg: SeConfig = SeConfig()) -> int:
    """Pick the mmWave beam from a sub-6G beam sweep.

    The best sub-6G codeword's grid position is mapped proportionally onto
    the mmWave grid (nearest index); both codebooks cover the same
    ``sin(theta)`` range.
    """
    i_sub, _ = best_beam(H_sub6, cb_sub6, cfg)
    return int(round(i_sub * cb_mm.n_beams / cb_sub6.n_beams)) % cb_mm.n_beams
