"""Feature-similarity index (FSIM) for small grey-level images in [0, 1].

The index compares two images through their phase-congruency maps (computed
with a log-Gabor filter bank) and their Scharr gradient magnitudes, and pools
the per-pixel similarity weighted by the larger phase congruency. Colour
inputs are reduced to luminance; the chromatic variant is not implemented.

The filter bank is deliberately small (2 scales x 4 orientations) so that it
still makes sense on 8x8 to 32x32 images.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

T1 = 0.85
T2 = 160.0 / 255.0**2

N_SCALES = 2
N_ORIENT = 4
MIN_WAVELENGTH = 3.0
MULT = 2.1
SIGMA_ONF = 0.55
D_THETA_ON_SIGMA = 1.2
NOISE_K = 2.0
_EPS = 1e-4

_SCHARR = np.array([[3.0, 0.0, -3.0], [10.0, 0.0, -10.0], [3.0, 0.0, -3.0]]) / 16.0


def _lowpass(rows: int, cols: int, cutoff: float = 0.45, order: int = 15) -> np.ndarray:
    radius = _radius(rows, cols)
    return 1.0 / (1.0 + (radius / cutoff) ** (2 * order))


def _freq_grid(rows: int, cols: int):
    # frequency coordinates in cycles/pixel with 0 at [0, 0] (unshifted FFT layout)
    fy = np.fft.fftfreq(rows)[:, None] * np.ones((1, cols))
    fx = np.ones((rows, 1)) * np.fft.fftfreq(cols)[None, :]
    return fx, fy


def _radius(rows, cols):
    fx, fy = _freq_grid(rows, cols)
    return np.sqrt(fx**2 + fy**2)


@lru_cache(maxsize=32)
def _filter_bank(rows: int, cols: int) -> np.ndarray:
    """Log-Gabor filters in the frequency domain, shape (orient, scale, rows, cols)."""
    fx, fy = _freq_grid(rows, cols)
    radius = np.sqrt(fx**2 + fy**2)
    radius[0, 0] = 1.0
    theta = np.arctan2(-fy, fx)
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    lp = _lowpass(rows, cols)
    radial = []
    for s in range(N_SCALES):
        f0 = 1.0 / (MIN_WAVELENGTH * MULT**s)
        g = np.exp(-(np.log(radius / f0) ** 2) / (2 * math.log(SIGMA_ONF) ** 2)) * lp
        g[0, 0] = 0.0
        radial.append(g)
    theta_sigma = math.pi / N_ORIENT / D_THETA_ON_SIGMA
    bank = np.empty((N_ORIENT, N_SCALES, rows, cols))
    for o in range(N_ORIENT):
        angle = o * math.pi / N_ORIENT
        ds = sin_t * math.cos(angle) - cos_t * math.sin(angle)
        dc = cos_t * math.cos(angle) + sin_t * math.sin(angle)
        dtheta = np.abs(np.arctan2(ds, dc))
        spread = np.exp(-(dtheta**2) / (2 * theta_sigma**2))
        for s in range(N_SCALES):
            bank[o, s] = radial[s] * spread
    bank.setflags(write=False)
    return bank


def phase_congruency(img: np.ndarray, noise_threshold: float | None = None) -> np.ndarray:
    """Phase congruency map (values in [0, 1]) of a 2-D image, summed over orientations.

    ``noise_threshold=None`` estimates the energy noise floor from the median
    filter response; a number uses that fixed floor for every orientation.
    """
    img = np.asarray(img, dtype=np.float64)
    rows, cols = img.shape
    bank = _filter_bank(rows, cols)
    spectrum = np.fft.fft2(img)
    eo = np.fft.ifft2(spectrum[None, None] * bank)  # (orient, scale, rows, cols), even=real odd=imag
    amp = np.abs(eo)
    even, odd = eo.real, eo.imag
    sum_e = even.sum(axis=1)
    sum_o = odd.sum(axis=1)
    x_energy = np.sqrt(sum_e**2 + sum_o**2) + 1e-12
    mean_e = (sum_e / x_energy)[:, None]
    mean_o = (sum_o / x_energy)[:, None]
    energy = (even * mean_e + odd * mean_o - np.abs(even * mean_o - odd * mean_e)).sum(axis=1)

    if noise_threshold is not None:
        energy = np.maximum(energy - noise_threshold, 0.0)
        pc = energy.sum(axis=0) / (amp.sum(axis=(0, 1)) + _EPS)
        return np.clip(pc, 0.0, 1.0)

    # noise compensation from the smallest-scale response (Rayleigh model)
    spatial = np.real(np.fft.ifft2(bank)) * math.sqrt(rows * cols)
    em_n = (bank[:, 0] ** 2).sum(axis=(-2, -1))
    median_e2n = np.median((amp[:, 0] ** 2).reshape(N_ORIENT, -1), axis=1)
    mean_e2n = -median_e2n / math.log(0.5)
    noise_power = mean_e2n / em_n
    sum_an2 = (spatial**2).sum(axis=(1, 2, 3))
    sum_ai_aj = np.zeros(N_ORIENT)
    for s in range(N_SCALES - 1):
        sum_ai_aj += (spatial[:, s:s + 1] * spatial[:, s + 1:]).sum(axis=(1, 2, 3))
    noise_energy2 = 2 * noise_power * sum_an2 + 4 * noise_power * sum_ai_aj
    tau = np.sqrt(noise_energy2 / 2)
    threshold = (tau * math.sqrt(math.pi / 2) + NOISE_K * np.sqrt((2 - math.pi / 2) * tau**2)) / 1.7
    energy = np.maximum(energy - threshold[:, None, None], 0.0)

    pc = energy.sum(axis=0) / (amp.sum(axis=(0, 1)) + _EPS)
    return np.clip(pc, 0.0, 1.0)


def gradient_magnitude(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    rows, cols = img.shape
    padded = np.pad(img, 1)
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    for i in range(3):
        for j in range(3):
            patch = padded[i:i + rows, j:j + cols]
            gx += _SCHARR[i, j] * patch
            gy += _SCHARR[j, i] * patch
    return np.sqrt(gx**2 + gy**2)


def _luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 1:
        return img[0]
    if img.ndim == 3 and img.shape[0] == 3:
        return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    raise ValueError(f"expected (H, W), (1, H, W) or (3, H, W) image, got shape {img.shape}")


def _similarity(a, b, c):
    return (2 * a * b + c) / (a**2 + b**2 + c)


def fsim_from_maps(pc_a, gm_a, pc_b, gm_b) -> float:
    s_l = _similarity(pc_a, pc_b, T1) * _similarity(gm_a, gm_b, T2)
    pc_m = np.maximum(pc_a, pc_b)
    weight = pc_m.sum()
    score = float((s_l * pc_m).sum() / weight) if weight > 0 else float(s_l.mean())
    return min(max(score, 0.0), 1.0)


def feature_maps(img: np.ndarray):
    lum = _luminance(img)
    return phase_congruency(lum), gradient_magnitude(lum)


def fsim(a: np.ndarray, b: np.ndarray) -> float:
    """FSIM between two images of equal shape with values in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return fsim_from_maps(*feature_maps(a), *feature_maps(b))


def fsim_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-sample FSIM for two batches ``(N, C, H, W)``."""
    if a.shape != b.shape:
        raise ValueError(f"batch shapes differ: {a.shape} vs {b.shape}")
    return np.array([fsim(x, y) for x, y in zip(a, b)])
