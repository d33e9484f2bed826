"""Differentiable handcrafted feature anchors."""
from __future__ import annotations

from ..tensor import as_tensor, ops
from .families import (
    FAMILY_FUNCS,
    QUANTILE_FALLBACKS,
    extract_autocorr,
    extract_crossings,
    extract_filterbank,
    extract_quantiles,
    extract_shape,
    extract_spectral,
    extract_statistics,
    hard_quantiles,
    sinc_kernels,
    soft_quantiles,
)
from .params import FAMILIES, AnchorTensor, ExtractorParams, FamilyLayout, make_layout, spectral_frame


def extract_all(blocks, params: ExtractorParams, mode: str = "soft") -> AnchorTensor:
    """Concatenate all seven families in layout order.

    ``blocks`` is (B, N, m, C); the anchor values come back as (B, N, C, D).
    """
    x = as_tensor(blocks)
    layout = make_layout(params, x.shape[-2])
    parts = [FAMILY_FUNCS[name](x, params, mode) for name in FAMILIES]
    values = ops.concat(parts, axis=-1)
    return AnchorTensor(values=values, layout=layout, block_size=x.shape[-2], sampling_rate=params.sampling_rate)


__all__ = [
    "FAMILIES",
    "QUANTILE_FALLBACKS",
    "AnchorTensor",
    "ExtractorParams",
    "FamilyLayout",
    "extract_all",
    "extract_autocorr",
    "extract_crossings",
    "extract_filterbank",
    "extract_quantiles",
    "extract_shape",
    "extract_spectral",
    "extract_statistics",
    "hard_quantiles",
    "make_layout",
    "sinc_kernels",
    "soft_quantiles",
    "spectral_frame",
]
