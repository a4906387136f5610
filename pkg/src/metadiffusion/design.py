"""Random periodic cellular unit cells.

A quarter cell is drawn from a spectral Gaussian random field, thresholded to
binary material/void pixels, accepted if one material domain reaches all four
sides, and mirrored twice into a periodic cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

FOUR_CONNECTIVITY = ndimage.generate_binary_structure(2, 1)


class RetryBudgetExhausted(RuntimeError):
    """No valid design was found within the allowed number of attempts."""


@dataclass(frozen=True)
class GrfSpec:
    grid_size: int = 48
    alpha: float = 3.0
    t_max: float = 0.6
    boundary_fraction: float = 0.10
    rng_seed: int = 0
    max_attempts: int = 1000

    def __post_init__(self):
        if self.grid_size < 4 or self.grid_size % 2:
            raise ValueError(f"grid_size must be even and >= 4, got {self.grid_size}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if not 0.0 <= self.t_max <= 1.0:
            raise ValueError(f"t_max must lie in [0, 1], got {self.t_max}")
        if not 0.0 < self.boundary_fraction < 1.0:
            raise ValueError("boundary_fraction must lie in (0, 1)")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be positive")


@dataclass
class UnitCell:
    """Binary design, 1 = material, 0 = void."""

    pixels: np.ndarray
    seed: int | None = None
    threshold: float | None = None
    rejections: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 2:
            raise ValueError("unit cell pixels must be a 2D array")

    @property
    def side(self) -> int:
        return self.pixels.shape[0]

    @property
    def fill_fraction(self) -> float:
        return float(self.pixels.mean())

    @property
    def quarter(self) -> np.ndarray:
        h, w = self.pixels.shape
        return self.pixels[: h // 2, : w // 2]

    def is_mirror_symmetric(self) -> bool:
        p = self.pixels
        return bool(np.array_equal(p, p[::-1, :]) and np.array_equal(p, p[:, ::-1]))


def centered_wavenumbers(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer wavenumber grids for -n/2 <= k < n/2, in centered (shifted) order."""
    if n % 2:
        raise ValueError(f"centered Fourier grid needs an even size, got {n}")
    k = np.arange(-n // 2, n // 2)
    return np.meshgrid(k, k, indexing="ij")


def power_spectrum(n: int, alpha: float) -> np.ndarray:
    """(k1^2 + k2^2)^(-alpha/2) on the centered grid; zero at the origin."""
    k1, k2 = centered_wavenumbers(n)
    k_sq = (k1**2 + k2**2).astype(float)
    power = np.zeros_like(k_sq)
    nz = k_sq > 0
    power[nz] = k_sq[nz] ** (-alpha / 2.0)
    return power


def _grf_from_rng(n: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    amplitude = np.sqrt(power_spectrum(n, alpha))
    noise = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    spectrum = np.fft.ifftshift(noise * amplitude)
    values = np.fft.ifft2(spectrum).real
    values = values - values.mean()
    return values / values.std()


def sample_grf(spec: GrfSpec) -> np.ndarray:
    """Standardized real Gaussian random field with a power-law spectrum.

    The returned ``grid_size x grid_size`` array has zero mean and unit
    (population) standard deviation and is fully determined by
    ``spec.rng_seed``.
    """
    rng = np.random.default_rng(spec.rng_seed)
    return _grf_from_rng(spec.grid_size, spec.alpha, rng)


def threshold_field(values: np.ndarray, t: float) -> np.ndarray:
    return (np.asarray(values) > t).astype(np.uint8)


def required_boundary_pixels(side_length: int, fraction: float) -> int:
    # a side must be touched at all, even when the rounded-down count is zero
    return max(int(np.floor(fraction * side_length + 1e-12)), 1)


def label_components(binary: np.ndarray, periodic_axes: tuple[int, ...] = ()) -> tuple[np.ndarray, int]:
    """4-connected component labels; optionally wrap around the given axes."""
    binary = np.asarray(binary).astype(bool)
    labels, count = ndimage.label(binary, structure=FOUR_CONNECTIVITY)
    if not periodic_axes or count == 0:
        return labels, count
    parent = np.arange(count + 1)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for axis in periodic_axes:
        first = np.take(labels, 0, axis=axis)
        last = np.take(labels, -1, axis=axis)
        for a, b in zip(first, last):
            if a and b:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(i) for i in range(count + 1)])
    uniq, relabel = np.unique(roots, return_inverse=True)
    return relabel[labels], len(uniq) - 1


def spanning_component(binary: np.ndarray, fraction: float) -> np.ndarray | None:
    """Mask of the largest 4-connected domain covering every side enough, if any."""
    binary = np.asarray(binary)
    if binary.size == 0:
        raise ValueError("empty array")
    labels, count = label_components(binary)
    if count == 0:
        return None
    n_rows, n_cols = binary.shape
    need_rows = required_boundary_pixels(n_cols, fraction)
    need_cols = required_boundary_pixels(n_rows, fraction)
    bins = np.arange(1, count + 2)
    top = np.histogram(labels[0], bins)[0]
    bottom = np.histogram(labels[-1], bins)[0]
    left = np.histogram(labels[:, 0], bins)[0]
    right = np.histogram(labels[:, -1], bins)[0]
    ok = (top >= need_rows) & (bottom >= need_rows) & (left >= need_cols) & (right >= need_cols)
    if not ok.any():
        return None
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    best = int(np.argmax(np.where(ok, sizes, -1))) + 1
    return labels == best


def check_connectivity(binary: np.ndarray, fraction: float = 0.10) -> bool:
    """True iff one 4-connected material domain touches each of the four
    sides with at least ``floor(fraction * side)`` pixels (and at least one)."""
    return spanning_component(binary, fraction) is not None


def mirror_quarter(quarter: np.ndarray) -> np.ndarray:
    """Reflect across the right edge, then across the bottom edge."""
    quarter = np.asarray(quarter)
    half = np.concatenate([quarter, quarter[:, ::-1]], axis=1)
    return np.concatenate([half, half[::-1, :]], axis=0)


def generate_unit_cell(spec: GrfSpec) -> UnitCell:
    """Rejection-sample a quarter design and mirror it into a periodic cell.

    Only the material domain that satisfies the boundary test is kept, so the
    mirrored cell is a single connected body.
    """
    rng = np.random.default_rng(spec.rng_seed)
    for attempt in range(spec.max_attempts):
        values = _grf_from_rng(spec.grid_size, spec.alpha, rng)
        t = rng.uniform(0.0, spec.t_max)
        body = spanning_component(threshold_field(values, t), spec.boundary_fraction)
        if body is not None:
            return UnitCell(
                mirror_quarter(body.astype(np.uint8)),
                seed=spec.rng_seed,
                threshold=float(t),
                rejections=attempt,
            )
    raise RetryBudgetExhausted(
        f"no valid design after {spec.max_attempts} attempts (seed={spec.rng_seed})"
    )


def radial_power_profile(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Angularly averaged power spectrum over integer |k| shells 1..n/2-1."""
    n = values.shape[0]
    power = np.abs(np.fft.fftshift(np.fft.fft2(values))) ** 2
    k1, k2 = centered_wavenumbers(n)
    shell = np.rint(np.sqrt(k1**2 + k2**2)).astype(int)
    radii = np.arange(1, n // 2)
    sums = np.bincount(shell.ravel(), weights=power.ravel(), minlength=n)
    counts = np.bincount(shell.ravel(), minlength=n)
    return radii.astype(float), sums[radii] / counts[radii]


def spectral_slope(spec: GrfSpec, n_seeds: int = 200) -> float:
    """Log-log slope of the seed-averaged radial power spectrum."""
    acc = None
    for s in range(n_seeds):
        radii, prof = radial_power_profile(sample_grf(GrfSpec(
            grid_size=spec.grid_size, alpha=spec.alpha, t_max=spec.t_max,
            boundary_fraction=spec.boundary_fraction, rng_seed=spec.rng_seed + s)))
        acc = prof if acc is None else acc + prof
    slope, _ = np.polyfit(np.log(radii), np.log(acc / n_seeds), 1)
    return float(slope)
