"""Discretized probability models over integer symbol grids.

Everything the coder consumes lives here: bin-integrated Gaussian-mixture
probabilities with tail absorption, the learnable per-channel factorized
prior for the hyper-latent, the train/inference quantizers, parameter
determinization onto fixed lattices, and floor+repair fixed-point CDF
construction. All functions are pure over immutable inputs and safe to call
concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import ContractViolation, PrecisionError

CDF_PRECISION = 16
CDF_TOTAL = 1 << CDF_PRECISION

# Smallest scale the model may emit, in normalized units. Must sit well under
# one symbol step so a confident model can put >1/2 of the mass on one bin.
SCALE_FLOOR = 1e-3

# Determinization lattices: weights live on a 1/2^12 grid, means on a
# 1/2^10-of-one-step grid, scales on a 256-level geometric ladder.
WEIGHT_LATTICE = 1 << 12
MEAN_LATTICE = 1 << 10
SCALE_LEVELS = 256

# Training-time probability floor: keeps -log2(p) finite when a noisy sample
# lands far outside a near-delta component.
PMF_EPS = 1e-12


@dataclass(frozen=True)
class SymbolGrid:
    """Inclusive integer support [lo, hi] mapped onto the model's value axis.

    value(s) = lo_value + (s - lo) * step_norm; step_norm is the size of one
    integer step in normalized units.
    """

    lo: int
    hi: int
    step_norm: float
    lo_value: float

    def __post_init__(self):
        if self.lo >= self.hi:
            raise ContractViolation(f"grid lo {self.lo} must be < hi {self.hi}")
        if self.step_norm <= 0:
            raise ContractViolation("grid step_norm must be positive")

    @property
    def n_symbols(self) -> int:
        return self.hi - self.lo + 1

    @property
    def span(self) -> float:
        return (self.hi - self.lo) * self.step_norm

    def value(self, symbol):
        return self.lo_value + (np.asarray(symbol) - self.lo) * self.step_norm

    def edges(self) -> np.ndarray:
        """Bin edges value(lo)-step/2 ... value(hi)+step/2 (n_symbols+1 of them)."""
        s = np.arange(self.lo, self.hi + 2, dtype=np.float64)
        return self.lo_value + (s - self.lo) * self.step_norm - self.step_norm / 2.0


# Pixels: 0..255 mapped to [-1, 1]. Latents: plain integers -127..127.
PIXEL_GRID = SymbolGrid(lo=0, hi=255, step_norm=2.0 / 255.0, lo_value=-1.0)
LATENT_GRID = SymbolGrid(lo=-127, hi=127, step_norm=1.0, lo_value=-127.0)


# ---------------------------------------------------------------------------
# Gaussian mixture pmf
# ---------------------------------------------------------------------------


def gmm_pmf_table(weights, means, scales, grid: SymbolGrid) -> np.ndarray:
    """Discrete pmf over the full support for every leading-index location.

    weights/means/scales have shape [..., K]; the result has shape
    [..., n_symbols]. The mixture cumulative is evaluated at the bin edges
    and the first/last bins absorb the tails, so each row sums to one by
    construction (up to float addition).
    """
    w = np.asarray(weights, dtype=np.float64)
    mu = np.asarray(means, dtype=np.float64)
    sd = np.asarray(scales, dtype=np.float64)
    edges = grid.edges()
    z = (edges - mu[..., None]) / sd[..., None]  # [..., K, n+1]
    cdf = ndtr(z)
    cdf[..., 0] = 0.0
    cdf[..., -1] = 1.0
    pmf_k = np.diff(cdf, axis=-1)
    return np.einsum("...k,...ks->...s", w, pmf_k)


def gmm_pmf(symbol: int, weights, means, scales, grid: SymbolGrid) -> float:
    """Probability mass of one integer symbol under a per-location mixture."""
    if symbol < grid.lo or symbol > grid.hi:
        raise ContractViolation(f"symbol {symbol} outside grid [{grid.lo}, {grid.hi}]")
    w = np.asarray(weights, dtype=np.float64)
    mu = np.asarray(means, dtype=np.float64)
    sd = np.asarray(scales, dtype=np.float64)
    v = grid.value(symbol)
    half = grid.step_norm / 2.0
    upper = np.ones_like(mu) if symbol == grid.hi else ndtr((v + half - mu) / sd)
    lower = np.zeros_like(mu) if symbol == grid.lo else ndtr((v - half - mu) / sd)
    return float(np.sum(w * (upper - lower)))


# ---------------------------------------------------------------------------
# learnable factorized prior (hyper-latent)
# ---------------------------------------------------------------------------


class FactorizedPrior:
    """Per-channel monotone cumulative built from three gated affine layers.

    Each layer applies softplus(h)*u + b followed by u + tanh(a)*tanh(u);
    a final sigmoid bounds the result to (0, 1). Positive slopes and
    |tanh(a)| < 1 make the composition monotone nondecreasing with limits
    0 and 1, so differences of adjacent evaluations are valid probabilities.
    """

    N_LAYERS = 3

    def __init__(self, h_layers, b_layers, a_layers):
        # each a list of N_LAYERS arrays of shape [C]
        self.h_layers = [np.asarray(h, dtype=np.float64) for h in h_layers]
        self.b_layers = [np.asarray(b, dtype=np.float64) for b in b_layers]
        self.a_layers = [np.asarray(a, dtype=np.float64) for a in a_layers]
        self.channels = self.h_layers[0].shape[0]

    @classmethod
    def init(cls, channels: int, target_width: float = 10.0):
        # per-layer slope chosen so the composed cumulative is roughly a
        # sigmoid of width target_width at initialization
        slope = (1.0 / target_width) ** (1.0 / cls.N_LAYERS)
        raw = np.log(np.expm1(slope))
        h = [np.full(channels, raw) for _ in range(cls.N_LAYERS)]
        b = [np.zeros(channels) for _ in range(cls.N_LAYERS)]
        a = [np.zeros(channels) for _ in range(cls.N_LAYERS)]
        return cls(h, b, a)

    def cdf_values(self, v: np.ndarray) -> np.ndarray:
        """Cumulative at values v of shape [..., C] (channel-last)."""
        u = np.asarray(v, dtype=np.float64)
        for h, b, a in zip(self.h_layers, self.b_layers, self.a_layers):
            t = np.logaddexp(0.0, h) * u + b
            u = t + np.tanh(a) * np.tanh(t)
        out = np.empty_like(u)
        np.exp(-np.abs(u), out=out)
        pos = u >= 0
        out[pos] = 1.0 / (1.0 + out[pos])
        out[~pos] = out[~pos] / (1.0 + out[~pos])
        return out

    def pmf_table(self, grid: SymbolGrid) -> np.ndarray:
        """Per-channel pmf over the full support, tails absorbed. [C, n]"""
        edges = grid.edges()  # [n+1]
        v = np.broadcast_to(edges[:, None], (edges.size, self.channels))
        cdf = self.cdf_values(v)  # [n+1, C]
        cdf = cdf.T.copy()  # [C, n+1]
        cdf[:, 0] = 0.0
        cdf[:, -1] = 1.0
        return np.diff(cdf, axis=1)


def factorized_pmf(symbol: int, channel: int, prior: FactorizedPrior,
                   grid: SymbolGrid) -> float:
    """Probability mass of one symbol in one channel under the prior."""
    if symbol < grid.lo or symbol > grid.hi:
        raise ContractViolation(f"symbol {symbol} outside grid [{grid.lo}, {grid.hi}]")
    v = grid.value(symbol)
    half = grid.step_norm / 2.0
    vv = np.array([[v - half], [v + half]])  # [2, 1] channel-last
    cdf = prior.cdf_values(np.broadcast_to(vv, (2, prior.channels)))
    lower = 0.0 if symbol == grid.lo else cdf[0, channel]
    upper = 1.0 if symbol == grid.hi else cdf[1, channel]
    return float(upper - lower)


# ---------------------------------------------------------------------------
# quantizers
# ---------------------------------------------------------------------------


def noisy_quantize(values, rng: np.random.Generator):
    """Training-time relaxation: add iid uniform noise from the open
    interval (-1/2, 1/2) in integer-step units."""
    arr = np.asarray(values, dtype=np.float64)
    u = rng.uniform(-0.5, 0.5, size=arr.shape)
    u = np.where(u == -0.5, 0.0, u)  # keep the interval strictly open
    return arr + u


@dataclass
class QuantizeResult:
    symbols: np.ndarray  # int32
    clamp_count: int


def round_quantize(values, grid: SymbolGrid) -> QuantizeResult:
    """Round half away from zero, then clamp into the grid (counted)."""
    arr = np.asarray(values, dtype=np.float64)
    rounded = np.copysign(np.floor(np.abs(arr) + 0.5), arr)
    clamped = np.clip(rounded, grid.lo, grid.hi)
    clamp_count = int(np.count_nonzero(rounded != clamped))
    return QuantizeResult(symbols=clamped.astype(np.int32), clamp_count=clamp_count)


# ---------------------------------------------------------------------------
# rate accounting
# ---------------------------------------------------------------------------


def rate_bits(pmfs) -> float:
    """Sum of -log2(p): the theoretical codelength of the symbol stream."""
    p = np.asarray(pmfs, dtype=np.float64)
    if np.any(p <= 0) or np.any(p > 1):
        raise ContractViolation("rate_bits: probabilities must be in (0, 1]")
    return float(-np.sum(np.log2(p)))


# ---------------------------------------------------------------------------
# determinization
# ---------------------------------------------------------------------------


def _scale_lattice_round(scales: np.ndarray, grid: SymbolGrid) -> np.ndarray:
    lo = SCALE_FLOOR
    hi = grid.span
    s = np.clip(scales, lo, hi)
    ratio = np.log(s / lo) / np.log(hi / lo)  # in [0, 1]
    idx = np.round(ratio * (SCALE_LEVELS - 1))
    return lo * (hi / lo) ** (idx / (SCALE_LEVELS - 1))


def _weights_largest_remainder(weights: np.ndarray, axis: int) -> np.ndarray:
    """Round mixture weights to counts summing exactly to WEIGHT_LATTICE."""
    w = np.moveaxis(weights, axis, -1)
    shape = w.shape
    flat = w.reshape(-1, shape[-1])
    scaled = flat * WEIGHT_LATTICE
    base = np.floor(scaled)
    deficit = (WEIGHT_LATTICE - base.sum(axis=1)).astype(np.int64)
    rem = scaled - base
    # ties broken toward the lowest mixture index: sort by (-remainder, k)
    order = np.lexsort((np.broadcast_to(np.arange(shape[-1]), rem.shape), -rem), axis=1)
    ranks = np.argsort(order, axis=1)
    bump = ranks < deficit[:, None]
    counts = base + bump
    return np.moveaxis((counts / WEIGHT_LATTICE).reshape(shape), -1, axis)


def determinize(weights, means, scales, grid: SymbolGrid, k_axis: int = -1):
    """Round GMM parameters onto fixed lattices so encoder and decoder build
    identical CDF tables from independently computed float params.

    weights are renormalized by largest remainder on a 1/4096 grid (they
    still sum exactly to one), means snap to 1/1024 of a symbol step, scales
    to a 256-level geometric ladder between the scale floor and the grid
    span. Idempotent.
    """
    w = _weights_largest_remainder(np.asarray(weights, dtype=np.float64), k_axis)
    mean_step = grid.step_norm / MEAN_LATTICE
    m = np.round(np.asarray(means, dtype=np.float64) / mean_step) * mean_step
    s = _scale_lattice_round(np.asarray(scales, dtype=np.float64), grid)
    return w, m, s


# ---------------------------------------------------------------------------
# fixed-point CDF
# ---------------------------------------------------------------------------


def build_cdf(pmf: np.ndarray) -> np.ndarray:
    """Quantize a discrete pmf to a strictly increasing integer CDF.

    Floor-quantizes the cumulative onto 2^16 and then repairs empty bins by
    stealing from the currently largest bin (ties to the lowest symbol
    index). Returns cum[0..n] as uint32 with cum[0] = 0, cum[n] = 2^16;
    every symbol keeps probability >= 1/2^16.
    """
    p = np.asarray(pmf, dtype=np.float64)
    n = p.size
    if n > CDF_TOTAL // 2:
        raise PrecisionError(
            f"support size {n} exceeds {CDF_TOTAL // 2}; cannot give every symbol mass")
    cum = np.floor(np.concatenate(([0.0], np.cumsum(p))) * CDF_TOTAL).astype(np.int64)
    cum[0] = 0
    cum[-1] = CDF_TOTAL
    counts = np.diff(cum)  # nonnegative, sums to exactly CDF_TOTAL
    for i in np.flatnonzero(counts == 0):
        j = int(np.argmax(counts))  # argmax takes the lowest index on ties
        if counts[j] < 2:
            raise PrecisionError("cannot repair CDF: no bin has spare mass")
        counts[j] -= 1
        counts[i] += 1
    out = np.zeros(n + 1, dtype=np.uint32)
    np.cumsum(counts, out=out[1:])
    return out


def cdf_bits(cdf: np.ndarray, symbol_index: int) -> float:
    """Ideal codelength of one symbol under a quantized CDF table."""
    span = int(cdf[symbol_index + 1]) - int(cdf[symbol_index])
    return float(CDF_PRECISION - np.log2(span))
