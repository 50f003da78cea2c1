# app/core/periodic.py
"""
Periodic latent parameterization.

A latent curve of C channels x N samples over window_sec seconds is
reduced to one sinusoid per channel, a * sin(2pi (f * tau - s)) + b with
tau = t * window_sec:

  - amplitude, frequency and offset come from a DFT written as a matrix
    product (differentiable, no FFT library on this path);
  - the phase shift comes from a learned per-channel 2-output linear map
    followed by atan2.
"""
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from app.core import autodiff as ad
from app.core.autodiff import Tensor
from app.core.exceptions import ShapeMismatchError
from app.schemas.phase import PeriodicParams

Array = Union[np.ndarray, Tensor]

PHASE_DEAD_ZONE = 1e-8
ZERO_POWER = 1e-20


@dataclass
class Spectrum:
    """Per-channel DFT summary. Fields are Tensors when the input curve was one."""

    amplitude: Array      # (C,)
    frequency: Array      # (C,) Hz
    offset: Array         # (C,)
    power: Array          # (C, N/2), bins 1..N/2
    real: Array           # (C, N/2 + 1)
    imag: Array           # (C, N/2 + 1)
    bin_frequencies: np.ndarray  # (N/2,) Hz


def dft_matrices(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Real and imaginary DFT rows for bins 0..N/2: X_k = sum_n x_n e^{-2pi i k n / N}."""
    k = np.arange(n // 2 + 1)[:, None]
    idx = np.arange(n)[None, :]
    angle = 2.0 * np.pi * k * idx / n
    return np.cos(angle), -np.sin(angle)


def uniform_latent_grid(n: int) -> np.ndarray:
    """t_n = n / N: N samples covering one period of the window without repeating the endpoint."""
    return np.arange(n, dtype=np.float64) / n


def dft_decompose(curve: Array, window_sec: float) -> Spectrum:
    """
    Amplitude, power-weighted mean frequency and DC offset per channel.

    With p_k = |X_k|^2 for k = 1..N/2: b = X_0 / N, a = sqrt(4 sum p_k / N^2)
    (a pure on-bin tone of amplitude A gives a = A), f = sum f_k p_k / sum p_k.
    A channel with no spectral power gets a = 0 and f = 0.
    """
    is_tensor = isinstance(curve, Tensor)
    x = ad.as_tensor(curve)
    if x.ndim != 2:
        raise ShapeMismatchError("dft_decompose", x.shape, detail="expected (C, N)")
    n = x.shape[1]
    if n < 4 or n % 2:
        raise ShapeMismatchError("dft_decompose", x.shape, detail="N must be even and >= 4")
    cos_m, sin_m = dft_matrices(n)
    real = x @ Tensor(cos_m.T)
    imag = x @ Tensor(sin_m.T)
    offset = real[:, 0] * (1.0 / n)
    power = ad.square(real[:, 1:]) + ad.square(imag[:, 1:])
    bin_freq = np.arange(1, n // 2 + 1) / window_sec

    total = ad.sum_(power, axis=1)
    silent = total.data < ZERO_POWER
    safe_total = ad.where(silent, 1.0, total)
    amplitude = ad.where(silent, 0.0, ad.sqrt(safe_total * (4.0 / (n * n))))
    frequency = ad.where(silent, 0.0, ad.sum_(power * bin_freq, axis=1) / safe_total)

    spectrum = Spectrum(amplitude, frequency, offset, power, real, imag, bin_freq)
    if not is_tensor:
        for field in ("amplitude", "frequency", "offset", "power", "real", "imag"):
            setattr(spectrum, field, getattr(spectrum, field).data)
    return spectrum


def phase_regress(curve: Array, weight: Array, bias: Array) -> Array:
    """
    Phase shift s in [0, 1) per channel.

    (u, v) = sum_n curve[c, n] * weight[c, n, :] + bias[c]; s = atan2(v, u) / 2pi mod 1.
    Inside the dead zone |(u, v)| < 1e-8, s = 0 with zero gradient.
    """
    is_tensor = any(isinstance(a, Tensor) for a in (curve, weight, bias))
    x, w, b = ad.as_tensor(curve), ad.as_tensor(weight), ad.as_tensor(bias)
    c, n = x.shape
    if w.shape != (c, n, 2) or b.shape != (c, 2):
        raise ShapeMismatchError("phase_regress", x.shape, w.shape, b.shape)
    uv = ad.sum_(ad.reshape(x, (c, n, 1)) * w, axis=1) + b
    s = phase_from_uv(uv[:, 0], uv[:, 1])
    return s if is_tensor else s.data


def phase_from_uv(u: Array, v: Array) -> Tensor:
    """atan2(v, u) / 2pi wrapped into [0, 1)."""
    s = ad.atan2(v, u, dead_zone=PHASE_DEAD_ZONE) * (1.0 / (2.0 * np.pi))
    s = ad.where(s.data < 0.0, s + 1.0, s)
    # atan2 == pi exactly wraps to 0.5; -0.0 to 0; guard the closed upper end
    return ad.where(s.data >= 1.0, s - 1.0, s)


def sinusoid(s: Array, a: Array, f: Array, b: Array, times, window_sec: float) -> Array:
    """(C, len(times)) values of a * sin(2pi (f * t * window_sec - s)) + b."""
    is_tensor = any(isinstance(v, Tensor) for v in (s, a, f, b))
    s, a, f, b = (ad.reshape(ad.as_tensor(v), (-1, 1)) for v in (s, a, f, b))
    tau = np.asarray(times, dtype=np.float64).reshape(1, -1) * window_sec
    out = a * ad.sin((f * tau - s) * (2.0 * np.pi)) + b
    return out if is_tensor else out.data


def eval_latent(params: PeriodicParams, times) -> np.ndarray:
    """Evaluate the latent curve at arbitrary normalized times in [0, 1]."""
    return sinusoid(params.s, params.a, params.f, params.b, times, params.window_sec)


def phase_manifold(params) -> np.ndarray:
    """
    Phase-manifold point(s): pairs a_i * (sin 2pi s_i, cos 2pi s_i) interleaved.

    Accepts a PeriodicParams or (..., C, 4) arrays of (s, a, f, b); returns (..., 2C).
    """
    values = params.to_array() if isinstance(params, PeriodicParams) else np.asarray(params, dtype=np.float64)
    s, a = values[..., 0], values[..., 1]
    out = np.empty(values.shape[:-1] + (2 * values.shape[-2],))
    out[..., 0::2] = a * np.sin(2.0 * np.pi * s)
    out[..., 1::2] = a * np.cos(2.0 * np.pi * s)
    return out


def nyquist(n: int, window_sec: float) -> float:
    return n / (2.0 * window_sec)
