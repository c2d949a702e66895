"""Quantizer and Gaussian-mixture entropy model.

The mixture assigns an integer value v the mass of the unit bin around it,

    p(v) = sum_k w_k * (Phi((v + 0.5 - mu_k)/s_k) - Phi((v - 0.5 - mu_k)/s_k))

floored at P_MIN so neither training nor the range coder sees a zero.
``arith_encode``/``arith_decode`` map per-element mixture parameters to
16-bit frequency tables over a finite support; integers outside the
support are escape-coded with 32 raw bits, keeping the round trip lossless
for arbitrary inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import ndtr

from .coder import RangeDecoder, RangeEncoder, cumulative, quantize_probabilities

SIGMA_FLOOR = 1e-2
P_MIN = 2.0 ** -16
SUPPORT_TAIL = 9.0
ESCAPE_BITS = 32
_ESCAPE_OFFSET = 1 << (ESCAPE_BITS - 1)


# --- quantizer ---


def quantize(x: torch.Tensor, mode: str, generator: torch.Generator | None = None) -> torch.Tensor:
    """Uniform-noise proxy in training, round half away from zero at inference."""
    if mode == "train":
        noise = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) - 0.5
        return x + noise
    if mode == "infer":
        return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)
    raise ValueError(f"unknown quantize mode {mode!r}")


def np_round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# --- mixture parameters ---


@dataclass
class GmmParams:
    """Mixture parameters, trailing axis indexes the k components.

    weights lie on the k-simplex per element; scales are at least
    SIGMA_FLOOR.
    """

    weights: np.ndarray
    means: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.scales = np.atleast_2d(np.asarray(self.scales, dtype=np.float64))
        if not (self.weights.shape == self.means.shape == self.scales.shape):
            raise ValueError("weights, means, scales must share a shape")
        self.validate()

    def validate(self) -> None:
        if not (
            np.isfinite(self.weights).all()
            and np.isfinite(self.means).all()
            and np.isfinite(self.scales).all()
        ):
            raise ValueError("mixture parameters must be finite")
        if (self.weights < 0).any():
            raise ValueError("mixture weights must be non-negative")
        totals = self.weights.sum(axis=-1)
        if np.abs(totals - 1.0).max() > 1e-6:
            raise ValueError("mixture weights must sum to 1 within 1e-6")
        if (self.scales < SIGMA_FLOOR - 1e-12).any():
            raise ValueError(f"mixture scales must be >= {SIGMA_FLOOR}")

    @property
    def num_elements(self) -> int:
        return self.weights.shape[0]

    def row(self, i: int) -> tuple:
        return (
            self.weights[i].tobytes(),
            self.means[i].tobytes(),
            self.scales[i].tobytes(),
        )


def gmm_likelihood(v, params: GmmParams) -> np.ndarray:
    """Probability of the unit bin around integer(s) v, floored at P_MIN."""
    v = np.asarray(v, dtype=np.float64)
    vv = v.reshape(-1, 1)
    upper = ndtr((vv + 0.5 - params.means) / params.scales)
    lower = ndtr((vv - 0.5 - params.means) / params.scales)
    p = (params.weights * (upper - lower)).sum(axis=-1)
    p = np.maximum(p, P_MIN)
    return p.reshape(v.shape) if v.shape else float(p[0])


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(x * (-(2.0 ** -0.5)))


def gmm_likelihood_torch(
    values: torch.Tensor,
    weights: torch.Tensor,
    means: torch.Tensor,
    scales: torch.Tensor,
) -> torch.Tensor:
    """Differentiable unit-bin mixture likelihood; component axis is dim 0.

    Evaluated in the left tail via |v - mu| for numerical symmetry.
    """
    centered = torch.abs(values.unsqueeze(0) - means)
    upper = _std_normal_cdf((0.5 - centered) / scales)
    lower = _std_normal_cdf((-0.5 - centered) / scales)
    p = (weights * (upper - lower)).sum(dim=0)
    return torch.clamp(p, min=P_MIN)


def rate_bits_torch(likelihood: torch.Tensor) -> torch.Tensor:
    return -torch.log2(likelihood).sum()


# --- coding against the mixture ---


def gmm_support(params: GmmParams, tail: float = SUPPORT_TAIL) -> tuple[int, int]:
    lo = int(np.floor((params.means - tail * params.scales).min())) - 1
    hi = int(np.ceil((params.means + tail * params.scales).max())) + 1
    return lo, hi


def _freq_table_for_row(params: GmmParams, i: int, lo: int, hi: int) -> np.ndarray:
    grid = np.arange(lo, hi + 1, dtype=np.float64).reshape(-1, 1)
    upper = ndtr((grid + 0.5 - params.means[i]) / params.scales[i])
    lower = ndtr((grid - 0.5 - params.means[i]) / params.scales[i])
    probs = (params.weights[i] * (upper - lower)).sum(axis=-1)
    probs = np.maximum(probs, P_MIN)
    # final slot is the escape symbol for out-of-support integers
    probs = np.append(probs, P_MIN)
    return cumulative(quantize_probabilities(probs))


class _TableCache:
    def __init__(self, params: GmmParams, lo: int, hi: int):
        self.params = params
        self.lo = lo
        self.hi = hi
        self._cache: dict = {}

    def get(self, i: int) -> np.ndarray:
        key = self.params.row(i)
        table = self._cache.get(key)
        if table is None:
            table = _freq_table_for_row(self.params, i, self.lo, self.hi)
            self._cache[key] = table
        return table


def _broadcast_params(params: GmmParams, count: int) -> GmmParams:
    if params.num_elements == count:
        return params
    if params.num_elements == 1:
        return GmmParams(
            weights=np.repeat(params.weights, count, axis=0),
            means=np.repeat(params.means, count, axis=0),
            scales=np.repeat(params.scales, count, axis=0),
        )
    raise ValueError(
        f"model has {params.num_elements} parameter rows for {count} symbols"
    )


def arith_encode(
    symbols,
    params: GmmParams,
    support: tuple[int, int] | None = None,
    encoder: RangeEncoder | None = None,
) -> tuple[bytes, int]:
    """Range-code integer symbols under per-symbol mixture models.

    Returns (bytes, exact bit length). When ``encoder`` is given, symbols
    are appended to that stream and the caller finishes it.
    """
    symbols = np.asarray(symbols, dtype=np.int64)
    params = _broadcast_params(params, symbols.size)
    lo, hi = support if support is not None else gmm_support(params)
    escape = hi - lo + 1
    cache = _TableCache(params, lo, hi)

    own = encoder is None
    enc = encoder if encoder is not None else RangeEncoder()
    flat = symbols.reshape(-1)
    for i, s in enumerate(flat):
        cumul = cache.get(i)
        s = int(s)
        if lo <= s <= hi:
            enc.encode(cumul, s - lo)
        else:
            if not -_ESCAPE_OFFSET <= s < _ESCAPE_OFFSET:
                raise ValueError(f"symbol {s} exceeds escape range")
            enc.encode(cumul, escape)
            enc.encode_raw_bits(s + _ESCAPE_OFFSET, ESCAPE_BITS)
    if own:
        return enc.getvalue()
    return b"", 0


def arith_decode(
    data,
    params: GmmParams,
    count: int,
    support: tuple[int, int] | None = None,
) -> np.ndarray:
    params = _broadcast_params(params, count)
    lo, hi = support if support is not None else gmm_support(params)
    escape = hi - lo + 1
    cache = _TableCache(params, lo, hi)

    dec = data if isinstance(data, RangeDecoder) else RangeDecoder(data)
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        cumul = cache.get(i)
        s = dec.decode(cumul)
        if s == escape:
            out[i] = dec.decode_raw_bits(ESCAPE_BITS) - _ESCAPE_OFFSET
        else:
            out[i] = s + lo
    return out


def model_cross_entropy_bits(symbols, params: GmmParams) -> float:
    """Ideal code length sum(-log2 p) under the unquantized mixture."""
    symbols = np.asarray(symbols, dtype=np.float64)
    params = _broadcast_params(params, symbols.size)
    p = gmm_likelihood(symbols.reshape(-1), params)
    return float(-np.log2(p).sum())
