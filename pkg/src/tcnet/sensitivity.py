"""How much each anchor family moves under noise, rotation and circular shift."""
from __future__ import annotations

import csv
import io as _io
from dataclasses import dataclass

import numpy as np

from .anchors import ExtractorParams, extract_all, make_layout

PERTURBATIONS = ("gaussian-noise", "rotation", "temporal-shift")


@dataclass(frozen=True)
class PerturbationSpec:
    """``magnitude`` is sigma in units of the signal's standard deviation for
    noise, degrees for rotation and a fraction of the window for shifts."""

    kind: str
    magnitude: float

    def __post_init__(self):
        if self.kind not in PERTURBATIONS:
            raise ValueError(f"perturbation: unknown kind {self.kind!r}; expected one of {PERTURBATIONS}")
        m = self.magnitude
        if not np.isfinite(m):
            raise ValueError("perturbation: magnitude must be finite")
        if self.kind == "gaussian-noise" and m < 0:
            raise ValueError("perturbation: noise sigma must be >= 0")
        if self.kind == "rotation" and not 0 <= m < 360:
            raise ValueError("perturbation: rotation angle must lie in [0, 360) degrees")
        if self.kind == "temporal-shift" and not 0 <= m < 1:
            raise ValueError("perturbation: shift fraction must lie in [0, 1)")

    @property
    def label(self) -> str:
        return f"{self.kind}:{self.magnitude:g}"


def rotation_matrices(axes: np.ndarray, degrees: float) -> np.ndarray:
    """Rodrigues rotation about each unit row of ``axes``; returns (n, 3, 3)."""
    axes = np.asarray(axes, dtype=np.float64)
    axes = axes / np.linalg.norm(axes, axis=-1, keepdims=True)
    theta = np.deg2rad(degrees)
    k = np.zeros(axes.shape[:-1] + (3, 3))
    k[..., 0, 1], k[..., 0, 2] = -axes[..., 2], axes[..., 1]
    k[..., 1, 0], k[..., 1, 2] = axes[..., 2], -axes[..., 0]
    k[..., 2, 0], k[..., 2, 1] = -axes[..., 1], axes[..., 0]
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def rotate(windows: np.ndarray, degrees: float, axes: np.ndarray) -> np.ndarray:
    """Rotate every tri-axial channel group of window i about ``axes[i]``."""
    n, c, length = windows.shape
    if c % 3:
        raise ValueError(f"rotation: channel count {c} is not divisible by 3")
    r = rotation_matrices(axes, degrees)
    grouped = windows.reshape(n, c // 3, 3, length)
    return np.einsum("nij,ngjl->ngil", r, grouped).reshape(n, c, length)


def perturb(windows: np.ndarray, spec: PerturbationSpec, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(windows, dtype=np.float64)
    if spec.kind == "rotation" and x.shape[1] % 3:
        raise ValueError(f"rotation: channel count {x.shape[1]} is not divisible by 3")
    if spec.magnitude == 0:
        return x.copy()
    if spec.kind == "gaussian-noise":
        scale = spec.magnitude * x.std(axis=2, keepdims=True)
        return x + scale * rng.standard_normal(x.shape)
    if spec.kind == "rotation":
        axes = rng.standard_normal((len(x), 3))
        return rotate(x, spec.magnitude, axes)
    return np.roll(x, int(np.floor(spec.magnitude * x.shape[2])), axis=2)


def window_anchors(windows: np.ndarray, params: ExtractorParams, mode: str = "hard", batch: int = 256) -> np.ndarray:
    """Anchors with the whole window as one block: (n, C, D)."""
    from .model import unfold_blocks

    x = np.asarray(windows, dtype=np.float64)
    length = x.shape[2]
    out = [extract_all(unfold_blocks(x[i:i + batch], length, length), params, mode).values.data[:, 0]
           for i in range(0, len(x), batch)]
    return np.concatenate(out, axis=0)


@dataclass
class SensitivityReport:
    families: tuple[str, ...]
    feature_names: tuple[str, ...]
    specs: list[PerturbationSpec]
    family_change: np.ndarray   # (n_specs, n_families)
    feature_change: np.ndarray  # (n_specs, D)

    def change(self, spec: PerturbationSpec, family: str) -> float:
        return float(self.family_change[self.specs.index(spec), self.families.index(family)])

    def to_csv(self, per_feature: bool = False) -> str:
        buf = _io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        names = self.feature_names if per_feature else self.families
        table = self.feature_change if per_feature else self.family_change
        writer.writerow(["kind", "magnitude", "feature" if per_feature else "family", "relative_change"])
        for spec, row in zip(self.specs, table):
            for name, value in zip(names, row):
                writer.writerow([spec.kind, repr(float(spec.magnitude)), name, repr(float(value))])
        return buf.getvalue()


def sensitivity_scan(windows: np.ndarray, specs, params: ExtractorParams | None = None, mode: str = "hard",
                     seed: int = 0, eps: float = 1e-8) -> SensitivityReport:
    """Mean of |f(x') - f(x)| / (|f(x)| + eps) per feature and per family.

    Features are computed over the whole window.  Each perturbation draws from
    its own generator seeded by ``seed`` so results do not depend on the order
    of ``specs``.
    """
    x = np.asarray(windows, dtype=np.float64)
    if x.ndim != 3 or len(x) == 0:
        raise ValueError(f"sensitivity: expected a non-empty (n, C, L) array, got shape {x.shape}")
    specs = list(specs)
    if not specs:
        raise ValueError("sensitivity: no perturbations given")
    params = params or ExtractorParams.default()
    layout = make_layout(params, x.shape[2])
    base = window_anchors(x, params, mode)
    index = layout.family_index()
    counts = np.bincount(index, minlength=len(layout))
    feature_change = np.empty((len(specs), layout.width))
    for i, spec in enumerate(specs):
        moved = window_anchors(perturb(x, spec, np.random.default_rng(seed)), params, mode)
        rel = np.abs(moved - base) / (np.abs(base) + eps)
        feature_change[i] = rel.mean(axis=(0, 1))
    family_change = np.stack([np.bincount(index, weights=row, minlength=len(layout)) / counts
                              for row in feature_change])
    return SensitivityReport(layout.names, layout.feature_names, specs, family_change, feature_change)
