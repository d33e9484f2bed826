"""Extractor parameters, family layout and the anchor tensor record."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..tensor import Tensor, ops

FAMILIES = ("filterbank", "spectral", "statistics", "shape", "crossing", "quantiles", "autocorr")
MODES = ("soft", "hard")

STAT_NAMES = ("mean", "softmin", "softmax", "rms", "std")
SHAPE_NAMES = ("skew", "kurt")
CROSS_NAMES = ("zcr", "mcr", "diff_zcr", "regularity", "extrema")
SPECTRAL_SUMMARIES = ("centroid", "bandwidth", "entropy", "phase_diff")


def _logit(p):
    return np.log(p) - np.log1p(-p)


@dataclass
class ExtractorParams:
    """Learnable and fixed settings of the differentiable feature extractor.

    Band edges are stored as unconstrained logits: ``f_low = 0.5*sigmoid(a)``
    and ``f_high = f_low + (0.5 - f_low)*sigmoid(b)``, so
    ``0 < f_low < f_high < 0.5`` always holds.  The Gaussian analysis window
    width is ``softplus(w)`` times the frame length.
    """

    band_logits: Tensor
    window_logit: Tensor
    tau_stat: float = 0.1
    tau_cross: float = 0.1
    tau_quant: float = 0.1
    quantile_levels: tuple[float, ...] = (0.1, 0.25, 0.5, 0.75, 0.9)
    autocorr_lags: tuple[int, ...] = (1, 2, 3, 4, 5)
    eps: float = 1e-8
    kernel_length: int = 31
    max_frame: int = 32
    sampling_rate: float = 1.0
    newton_steps: int = 20

    @classmethod
    def default(cls, n_filters: int = 8, f_min: float = 0.01, f_max: float = 0.49,
                window_width: float = 0.25, **kwargs) -> "ExtractorParams":
        edges = np.geomspace(f_min, f_max, n_filters + 1)
        lo, hi = edges[:-1], edges[1:]
        a = _logit(lo / 0.5)
        b = _logit((hi - lo) / (0.5 - lo))
        band = Tensor(np.stack([a, b], axis=1), requires_grad=True, name="extractor.band_logits")
        win = Tensor(np.array(np.log(np.expm1(window_width))), requires_grad=True, name="extractor.window_logit")
        return cls(band_logits=band, window_logit=win, **kwargs)

    def __post_init__(self):
        for name in ("tau_stat", "tau_cross", "tau_quant", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"ExtractorParams: {name} must be positive")
        if any(not 0.0 < p < 1.0 for p in self.quantile_levels):
            raise ValueError("ExtractorParams: quantile levels must lie in (0, 1)")
        if any(int(k) < 1 for k in self.autocorr_lags):
            raise ValueError("ExtractorParams: autocorrelation lags must be positive")

    @property
    def n_filters(self) -> int:
        return self.band_logits.shape[0]

    def band_edges(self) -> tuple[Tensor, Tensor]:
        a, b = self.band_logits[:, 0], self.band_logits[:, 1]
        f_low = 0.5 * ops.sigmoid(a)
        f_high = f_low + (0.5 - f_low) * ops.sigmoid(b)
        return f_low, f_high

    def window_width(self) -> Tensor:
        return ops.softplus(self.window_logit)

    def learnable(self) -> dict[str, Tensor]:
        return {"extractor.band_logits": self.band_logits, "extractor.window_logit": self.window_logit}

    def with_temperature(self, tau: float) -> "ExtractorParams":
        """Copy with every soft temperature set to ``tau``."""
        from dataclasses import replace
        return replace(self, tau_stat=tau, tau_cross=tau, tau_quant=tau)


@dataclass(frozen=True)
class FamilyLayout:
    """Contiguous partition of the anchor axis into named families."""

    families: tuple[tuple[str, int, int], ...]
    feature_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        pos = 0
        for name, start, stop in self.families:
            if start != pos or stop <= start:
                raise ValueError(f"FamilyLayout: family {name!r} range [{start}, {stop}) is not contiguous")
            pos = stop
        if self.feature_names and len(self.feature_names) != pos:
            raise ValueError("FamilyLayout: feature name count does not match width")

    @property
    def width(self) -> int:
        return self.families[-1][2] if self.families else 0

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f[0] for f in self.families)

    def __len__(self) -> int:
        return len(self.families)

    def slice(self, family: str) -> slice:
        for name, start, stop in self.families:
            if name == family:
                return slice(start, stop)
        raise KeyError(family)

    def family_index(self) -> np.ndarray:
        """Family number of every feature column."""
        idx = np.empty(self.width, dtype=np.intp)
        for i, (_, start, stop) in enumerate(self.families):
            idx[start:stop] = i
        return idx

    def expansion_matrix(self) -> np.ndarray:
        """(n_families, D) 0/1 matrix that broadcasts family values to features."""
        e = np.zeros((len(self.families), self.width))
        e[self.family_index(), np.arange(self.width)] = 1.0
        return e

    def to_json(self) -> dict:
        return {"families": [list(f) for f in self.families], "feature_names": list(self.feature_names)}


def spectral_frame(block_size: int, max_frame: int = 32) -> int:
    return min(max_frame, block_size)


def make_layout(params: ExtractorParams, block_size: int) -> FamilyLayout:
    frame = spectral_frame(block_size, params.max_frame)
    n_bins = frame // 2 + 1
    named = [
        ("filterbank", [f"band{i}" for i in range(params.n_filters)]),
        ("spectral", [f"logmag{k}" for k in range(n_bins)] + list(SPECTRAL_SUMMARIES)),
        ("statistics", list(STAT_NAMES)),
        ("shape", list(SHAPE_NAMES)),
        ("crossing", list(CROSS_NAMES)),
        ("quantiles", [f"q{p:g}" for p in params.quantile_levels]),
        ("autocorr", [f"acf{k}" for k in params.autocorr_lags]),
    ]
    fams, names, pos = [], [], 0
    for fam, cols in named:
        fams.append((fam, pos, pos + len(cols)))
        names.extend(f"{fam}.{c}" for c in cols)
        pos += len(cols)
    return FamilyLayout(tuple(fams), tuple(names))


@dataclass
class AnchorTensor:
    """Per-block, per-channel anchors with shape (B, N, C, D)."""

    values: Tensor
    layout: FamilyLayout
    block_size: int
    sampling_rate: float

    def __post_init__(self):
        if self.values.shape[-1] != self.layout.width:
            raise ValueError(
                f"AnchorTensor: last axis {self.values.shape[-1]} != layout width {self.layout.width}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape
