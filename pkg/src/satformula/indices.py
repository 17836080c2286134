"""Ground-truth index oracles.

Band convention for 4-band scenes: B1 = blue, B2 = green, B3 = red,
B4 = near infrared. The height-driven tasks (``agb``, ``cs``) read a
single band ``H`` stored as B1.

Every oracle is stored as a parsed expression, so ``compute_index`` is
literally ``eval_expr`` of the reference tree.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .evaluate import eval_expr
from .expr import Expr, bands_used, parse

SPECTRAL_BAND_NAMES = ("B1", "B2", "B3", "B4")

# Approximate surface reflectance spans per band; keeps the EVI denominator positive.
SPECTRAL_RANGES = ((0.02, 0.12), (0.04, 0.20), (0.02, 0.25), (0.15, 0.60))
HEIGHT_RANGE = ((0.0, 40.0),)

CARBON_FRACTION = 0.47
AGB_QUADRATIC = 0.05
AGB_LINEAR = 2.0


class UnknownIndexError(KeyError):
    pass


@dataclass(frozen=True)
class IndexSpec:
    name: str
    formula: str
    band_names: tuple
    band_ranges: tuple
    value_range: Optional[tuple] = None

    @property
    def reference_expr(self) -> Expr:
        return parse(self.formula)

    @property
    def required_bands(self) -> tuple:
        return tuple(sorted(bands_used(self.reference_expr)))


_AGB = f"(({AGB_QUADRATIC} * (B1 * B1)) + ({AGB_LINEAR} * B1))"

REGISTRY: dict[str, IndexSpec] = {
    spec.name: spec
    for spec in [
        IndexSpec("ndvi", "(B4 - B3) / (B4 + B3)", SPECTRAL_BAND_NAMES, SPECTRAL_RANGES, (-1.0, 1.0)),
        IndexSpec("gndvi", "(B4 - B2) / (B4 + B2)", SPECTRAL_BAND_NAMES, SPECTRAL_RANGES, (-1.0, 1.0)),
        IndexSpec(
            "savi", "(1.5 * (B4 - B3)) / ((B4 + B3) + 0.5)", SPECTRAL_BAND_NAMES, SPECTRAL_RANGES, (-1.5, 1.5)
        ),
        IndexSpec(
            "evi",
            "(2.5 * (B4 - B3)) / (((B4 + (6.0 * B3)) - (7.5 * B1)) + 1.0)",
            SPECTRAL_BAND_NAMES,
            SPECTRAL_RANGES,
        ),
        IndexSpec("ndwi", "(B2 - B4) / (B2 + B4)", SPECTRAL_BAND_NAMES, SPECTRAL_RANGES, (-1.0, 1.0)),
        IndexSpec("agb", _AGB, ("H",), HEIGHT_RANGE, (0.0, None)),
        IndexSpec("cs", f"{CARBON_FRACTION} * {_AGB}", ("H",), HEIGHT_RANGE, (0.0, None)),
        # canopy height from the discovered multi-spectral formula
        IndexSpec("h", "((B2 - B1) + 0.76) * 76.58", SPECTRAL_BAND_NAMES, SPECTRAL_RANGES),
    ]
}

TASKS = tuple(REGISTRY)


def get_index(name: str) -> IndexSpec:
    try:
        return REGISTRY[name.lower()]
    except KeyError:
        raise UnknownIndexError(f"unknown index {name!r}; choose from {', '.join(TASKS)}") from None


def compute_index(name: str, raster) -> np.ndarray:
    spec = get_index(name)
    bands = raster.data.shape[0]
    missing = [b for b in spec.required_bands if b > bands]
    if missing:
        raise ValueError(f"{spec.name} needs band(s) {missing}; raster has {bands}")
    return eval_expr(spec.reference_expr, raster)


def agb_oracle(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    return AGB_QUADRATIC * h * h + AGB_LINEAR * h


def cs_oracle(h) -> np.ndarray:
    return CARBON_FRACTION * agb_oracle(h)
