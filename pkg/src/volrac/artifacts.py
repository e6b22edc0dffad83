"""Eight-type stochastic corruption of volumes with exact replay.

Each artifact type fires independently (a Bernoulli coin per type) and is
applied sequentially to the running volume in a fixed order; the fired-count
is therefore binomially distributed. Every application is recorded in an
:class:`ArtifactRecipe` whose replay reproduces the corrupted volume
bit-exactly. K-space artifacts (motion, spiking, ghosting) run through the
transforms in :mod:`volrac.fourier`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import fourier
from .volume import Volume, _monomials

_SEED_MASK = 0x7FFFFFFFFFFFFFFF

ARTIFACT_ORDER = (
    "anisotropy",
    "gamma",
    "bias_field",
    "motion",
    "spiking",
    "blur",
    "noise",
    "ghosting",
)

BIAS_FIELD_TERMS = len(_monomials(3))  # order-<=3 monomial basis, 20 coefficients


@dataclass(frozen=True)
class ArtifactConfig:
    """Per-type firing probabilities, parameter ranges, and the master seed."""

    probabilities: tuple = (0.125,) * 8
    seed: int = 0
    gamma_log: tuple = (-0.3, 0.3)
    blur_sigma: tuple = (0.5, 1.5)
    noise_sigma: tuple = (0.01, 0.1)
    bias_coeff: tuple = (-0.3, 0.3)
    aniso_factors: tuple = (2, 4)
    ghost_intensity: tuple = (0.3, 1.0)
    spike_count: tuple = (1, 3)
    spike_magnitude: tuple = (0.05, 0.25)
    motion_count: tuple = (1, 3)

    def __post_init__(self):
        if len(self.probabilities) != len(ARTIFACT_ORDER):
            raise ValueError(f"need {len(ARTIFACT_ORDER)} probabilities")
        if any(not (0.0 <= p <= 1.0) for p in self.probabilities):
            raise ValueError("probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class RecipeEntry:
    kind: str
    fired: bool
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ArtifactRecipe:
    """Ordered, replayable record of one corruption run."""

    seed: int | None
    entries: tuple


@dataclass(frozen=True)
class KSpace:
    """3D Fourier coefficients of a volume, same axis convention."""

    side: int
    data: np.ndarray  # (S, S, S) complex128

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.complex128)
        if arr.shape != (self.side,) * 3:
            raise ValueError(f"k-space shape {arr.shape} does not match side {self.side}")
        object.__setattr__(self, "data", arr)


def dft3(v: Volume) -> KSpace:
    """Unnormalized forward transform of a volume."""
    return KSpace(v.side, fourier.dft3(v.data.astype(np.float64)))


def idft3(k: KSpace) -> Volume:
    """Normalized inverse transform; imaginary residue is discarded."""
    return Volume(k.side, fourier.idft3(k.data).real.astype(np.float32))


# -- individual generators (Volume -> Volume; float64 internally) -----------------------


def _as_f64(v: Volume) -> np.ndarray:
    return v.data.astype(np.float64)


def _wrap(v: Volume, x: np.ndarray) -> Volume:
    return Volume(v.side, x.astype(np.float32))


def _anisotropy(x: np.ndarray, axis: int, factor: int) -> np.ndarray:
    s = x.shape[0]
    if factor <= 0 or s % factor != 0:
        raise ValueError(f"anisotropy factor {factor} must divide side {s}")
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    if factor == 1:
        return x.copy()
    a = np.moveaxis(x, axis, 0)
    sp = s // factor
    pooled = a.reshape(sp, factor, *a.shape[1:]).mean(axis=1)
    # Linear interpolation back to S samples at the original voxel centers.
    pos = (np.arange(s) + 0.5) / factor - 0.5
    pos = np.clip(pos, 0.0, sp - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, sp - 1)
    t = (pos - i0).reshape((s,) + (1,) * (x.ndim - 1))
    up = pooled[i0] * (1.0 - t) + pooled[i1] * t
    return np.moveaxis(up, 0, axis)


def apply_anisotropy(v: Volume, axis: int, factor: int) -> Volume:
    """Average-pool along one axis by an integer factor, then linearly
    interpolate back to full resolution."""
    return _wrap(v, _anisotropy(_as_f64(v), axis, factor))


def _gamma(x: np.ndarray, gamma: float) -> np.ndarray:
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if x.min() < -1e-6 or x.max() > 1.0 + 1e-6:
        raise ValueError("gamma expansion expects intensities in [0, 1]")
    return np.clip(x, 0.0, 1.0) ** gamma


def apply_gamma(v: Volume, gamma: float) -> Volume:
    """Voxelwise contrast change v**gamma on [0, 1] data."""
    return _wrap(v, _gamma(_as_f64(v), gamma))


def _bias_field(x: np.ndarray, coefficients) -> np.ndarray:
    coeffs = np.asarray(coefficients, dtype=np.float64)
    if coeffs.shape != (BIAS_FIELD_TERMS,):
        raise ValueError(f"bias field needs {BIAS_FIELD_TERMS} coefficients, got {coeffs.shape}")
    s = x.shape[0]
    ax = np.linspace(-1.0, 1.0, s)
    zz, yy, xx = np.meshgrid(ax, ax, ax, indexing="ij")
    q = np.zeros_like(x)
    for c, (a, b, cc) in zip(coeffs, _monomials(3)):
        q += c * zz**a * yy**b * xx**cc
    return x * np.exp(q)


def apply_bias_field(v: Volume, coefficients) -> Volume:
    """Multiply by exp(Q) for a polynomial Q of total order <= 3 over
    axis coordinates normalized to [-1, 1]."""
    return _wrap(v, _bias_field(_as_f64(v), coefficients))


def _motion(x: np.ndarray, n_movements: int, shifts) -> np.ndarray:
    s = x.shape[0]
    shifts = [tuple(int(c) for c in sh) for sh in shifts]
    if n_movements < 0 or len(shifts) != n_movements:
        raise ValueError(f"need exactly n_movements={n_movements} shift triples, got {len(shifts)}")
    bound = s // 8
    for sh in shifts:
        if len(sh) != 3 or any(abs(c) > bound for c in sh):
            raise ValueError(f"movement shifts must be triples with |shift| <= S/8 = {bound}")
    if n_movements == 0:
        k = fourier.dft3(x)
    else:
        edges = [round(j * s / (n_movements + 1)) for j in range(n_movements + 2)]
        k = np.empty((s, s, s), dtype=np.complex128)
        for band in range(n_movements + 1):
            sh = (0, 0, 0) if band == 0 else shifts[band - 1]
            source = fourier.dft3(np.roll(x, sh, axis=(0, 1, 2)))
            k[edges[band] : edges[band + 1]] = source[edges[band] : edges[band + 1]]
    return fourier.idft3(k).real


def apply_motion(v: Volume, n_movements: int, shifts) -> Volume:
    """Patient-movement simulation: contiguous k-space bands along the first
    axis are taken from circularly shifted copies of the volume."""
    return _wrap(v, _motion(_as_f64(v), n_movements, shifts))


def _ghosting(x: np.ndarray, axis: int, period: int, intensity: float) -> np.ndarray:
    s = x.shape[0]
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    if not (2 <= period <= s // 2):
        raise ValueError(f"ghosting period must satisfy 2 <= g <= S/2, got g={period}, S={s}")
    if not (0.0 <= intensity <= 1.0):
        raise ValueError(f"ghosting intensity must lie in [0, 1], got {intensity}")
    k = fourier.dft3(x)
    sel = [slice(None)] * 3
    sel[axis] = np.arange(period, s, period)
    k[tuple(sel)] *= 1.0 - intensity
    return fourier.idft3(k).real


def apply_ghosting(v: Volume, axis: int, period: int, intensity: float) -> Volume:
    """Damp every period-th k-space plane along one axis (DC plane excluded)."""
    return _wrap(v, _ghosting(_as_f64(v), axis, period, intensity))


def _spike_coords(side: int, n_spikes: int, rng) -> list:
    """Random non-DC, non self-conjugate k-space coordinates."""
    special = {0, side // 2} if side % 2 == 0 else {0}
    coords = []
    while len(coords) < n_spikes:
        c = tuple(int(q) for q in rng.integers(0, side, size=3))
        if all(q in special for q in c):
            continue  # DC or self-conjugate under Hermitian pairing
        coords.append(c)
    return coords


def _spiking(x: np.ndarray, n_spikes: int, magnitude: float, rng) -> np.ndarray:
    if magnitude < 0:
        raise ValueError(f"spike magnitude must be >= 0, got {magnitude}")
    if n_spikes < 0:
        raise ValueError("n_spikes must be >= 0")
    s = x.shape[0]
    k = fourier.dft3(x)
    peak = np.abs(k).max()
    # Empty spectrum (zero volume) falls back to an absolute amplitude so a
    # spike still yields its single-mode stripe pattern.
    amp = magnitude * (peak if peak > 0.0 else 1.0)
    coords = _spike_coords(s, n_spikes, rng)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_spikes)
    for c, phi in zip(coords, phases):
        conj = tuple((-q) % s for q in c)
        k[c] += amp * np.exp(1j * phi)
        k[conj] += amp * np.exp(-1j * phi)
    return fourier.idft3(k).real


def apply_spiking(v: Volume, n_spikes: int, magnitude: float, rng) -> Volume:
    """Add Hermitian-paired complex spikes of modulus magnitude*max|k| at
    random non-DC coordinates."""
    return _wrap(v, _spiking(_as_f64(v), n_spikes, magnitude, rng))


def _blur(x: np.ndarray, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"blur sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return x.copy()
    return gaussian_filter(x, sigma=sigma, mode="reflect", truncate=3.0)


def apply_blur(v: Volume, sigma: float) -> Volume:
    """Separable Gaussian convolution truncated at 3 sigma, reflected borders."""
    return _wrap(v, _blur(_as_f64(v), sigma))


def _noise(x: np.ndarray, sigma: float, rng) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    return x + rng.normal(0.0, sigma, size=x.shape)


def apply_noise(v: Volume, sigma: float, rng) -> Volume:
    """Additive i.i.d. zero-mean Gaussian perturbation."""
    return _wrap(v, _noise(_as_f64(v), sigma, rng))


# -- the Bernoulli process ---------------------------------------------------------------


def _sample_params(kind: str, cfg: ArtifactConfig, side: int, rng) -> dict:
    if kind == "anisotropy":
        valid = [f for f in cfg.aniso_factors if side % f == 0]
        factor = int(valid[rng.integers(len(valid))]) if valid else 1
        return {"axis": int(rng.integers(3)), "factor": factor}
    if kind == "gamma":
        return {"gamma": float(np.exp(rng.uniform(*cfg.gamma_log)))}
    if kind == "bias_field":
        lo, hi = cfg.bias_coeff
        return {"coeffs": [float(c) for c in rng.uniform(lo, hi, BIAS_FIELD_TERMS)]}
    if kind == "motion":
        n = int(rng.integers(cfg.motion_count[0], cfg.motion_count[1] + 1))
        bound = max(1, side // 16)
        shifts = [[int(c) for c in rng.integers(-bound, bound + 1, size=3)] for _ in range(n)]
        return {"movements": n, "shifts": shifts}
    if kind == "spiking":
        return {
            "count": int(rng.integers(cfg.spike_count[0], cfg.spike_count[1] + 1)),
            "magnitude": float(rng.uniform(*cfg.spike_magnitude)),
            "seed": int(rng.integers(2**62)),
        }
    if kind == "blur":
        return {"sigma": float(rng.uniform(*cfg.blur_sigma))}
    if kind == "noise":
        return {
            "sigma": float(rng.uniform(*cfg.noise_sigma)),
            "seed": int(rng.integers(2**62)),
        }
    if kind == "ghosting":
        hi = max(2, side // 4)
        return {
            "axis": int(rng.integers(3)),
            "period": int(rng.integers(2, hi + 1)),
            "intensity": float(rng.uniform(*cfg.ghost_intensity)),
        }
    raise ValueError(f"unknown artifact kind {kind!r}")


def _apply_entry(x: np.ndarray, entry: RecipeEntry) -> np.ndarray:
    p = entry.params
    if entry.kind == "anisotropy":
        return _anisotropy(x, p["axis"], p["factor"])
    if entry.kind == "gamma":
        return _gamma(x, p["gamma"])
    if entry.kind == "bias_field":
        return _bias_field(x, p["coeffs"])
    if entry.kind == "motion":
        return _motion(x, p["movements"], p["shifts"])
    if entry.kind == "spiking":
        return _spiking(x, p["count"], p["magnitude"], np.random.default_rng(p["seed"]))
    if entry.kind == "blur":
        return _blur(x, p["sigma"])
    if entry.kind == "noise":
        return _noise(x, p["sigma"], np.random.default_rng(p["seed"]))
    if entry.kind == "ghosting":
        return _ghosting(x, p["axis"], p["period"], p["intensity"])
    raise ValueError(f"unknown artifact kind {entry.kind!r}")


def _run_entries(v: Volume, entries) -> Volume:
    x = _as_f64(v)
    for entry in entries:
        if entry.fired:
            x = _apply_entry(x, entry)
    lo, hi = x.min(), x.max()
    if hi - lo > 1e-12:
        x = (x - lo) / (hi - lo)
    else:
        x = x - lo
    return Volume(v.side, x.astype(np.float32))


def bernoulli_process(
    v: Volume, cfg: ArtifactConfig, rng=None, seed: int | None = None
) -> tuple[Volume, ArtifactRecipe]:
    """Corrupt a volume: each artifact type fires independently with its
    probability and transforms the running volume in the fixed order; output
    is min-max renormalized to [0, 1]. Returns the volume and a recipe whose
    replay is bit-exact."""
    if rng is None:
        if seed is None:
            seed = cfg.seed
        rng = np.random.default_rng(seed & _SEED_MASK)
    entries = []
    for kind, prob in zip(ARTIFACT_ORDER, cfg.probabilities):
        fired = bool(rng.random() < prob)
        params = _sample_params(kind, cfg, v.side, rng) if fired else {}
        entries.append(RecipeEntry(kind, fired, params))
    recipe = ArtifactRecipe(seed=seed, entries=tuple(entries))
    return _run_entries(v, entries), recipe


def replay(recipe: ArtifactRecipe, v: Volume) -> Volume:
    """Re-apply a recorded recipe; bit-exact against the original run."""
    return _run_entries(v, recipe.entries)


# -- recipe text format --------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def recipe_to_text(recipe: ArtifactRecipe) -> str:
    lines = [f"seed={recipe.seed if recipe.seed is not None else 'none'}"]
    for e in recipe.entries:
        parts = [e.kind, f"fired={int(e.fired)}"]
        for key, val in e.params.items():
            if key == "coeffs":
                parts.append("coeffs=" + ",".join(repr(float(c)) for c in val))
            elif key == "shifts":
                parts.append("shifts=" + ";".join(":".join(str(c) for c in sh) for sh in val))
            else:
                parts.append(f"{key}={_fmt(val)}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


_INT_KEYS = {"axis", "factor", "movements", "count", "seed", "period"}
_FLOAT_KEYS = {"gamma", "magnitude", "sigma", "intensity"}


def recipe_from_text(text: str) -> ArtifactRecipe:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.strip().startswith("#")]
    if not lines or not lines[0].startswith("seed="):
        raise ValueError("recipe must start with a seed= line")
    seed_val = lines[0].split("=", 1)[1]
    seed = None if seed_val == "none" else int(seed_val)
    entries = []
    for ln in lines[1:]:
        tokens = ln.split()
        kind = tokens[0]
        if kind not in ARTIFACT_ORDER:
            raise ValueError(f"unknown artifact kind {kind!r} in recipe")
        params: dict = {}
        fired = False
        for tok in tokens[1:]:
            key, _, val = tok.partition("=")
            if key == "fired":
                fired = bool(int(val))
            elif key == "coeffs":
                params[key] = [float(c) for c in val.split(",")]
            elif key == "shifts":
                params[key] = [
                    [int(c) for c in sh.split(":")] for sh in val.split(";") if sh
                ] if val else []
            elif key in _INT_KEYS:
                params[key] = int(val)
            elif key in _FLOAT_KEYS:
                params[key] = float(val)
            else:
                raise ValueError(f"unknown recipe key {key!r}")
        entries.append(RecipeEntry(kind, fired, params))
    if [e.kind for e in entries] != list(ARTIFACT_ORDER):
        raise ValueError("recipe must list all artifact types in canonical order")
    return ArtifactRecipe(seed=seed, entries=tuple(entries))


def write_recipe(recipe: ArtifactRecipe, path) -> None:
    Path(path).write_text(recipe_to_text(recipe))


def read_recipe(path) -> ArtifactRecipe:
    return recipe_from_text(Path(path).read_text())
