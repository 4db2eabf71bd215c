"""Reference cell data: identified parameter table, OCV curves and published gains.

The cell is a 2.85 Ah 18650 NMC cell. ``TABLE1`` holds the pulse-test
identification at nine SoC breakpoints (mΩ / kF in the source table,
stored here in SI units).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .ecm import AH_TO_COULOMB, CellParams, OcvPolynomial, ParamIntervals

CAPACITY_AH = 2.85
Q_TOTAL = CAPACITY_AH * AH_TO_COULOMB
NOMINAL_VOLTAGE = 3.65

# soc: (Rint mΩ, Rs mΩ, Cs kF, Rf mΩ, Cf kF)
_TABLE1_RAW = {
    0.9: (32.00, 15.30, 1.935, 32.00, 16.78),
    0.8: (32.90, 23.00, 1.425, 20.40, 14.81),
    0.7: (30.20, 25.60, 1.401, 22.90, 10.86),
    0.6: (30.60, 25.60, 1.541, 71.10, 3.89),
    0.5: (30.60, 14.40, 2.031, 19.30, 16.43),
    0.4: (32.00, 15.10, 2.114, 25.20, 11.82),
    0.3: (30.80, 14.40, 2.419, 57.00, 65.54),
    0.2: (32.10, 14.90, 2.084, 23.10, 11.25),
    0.1: (35.50, 18.20, 1.601, 69.00, 1.36),
}

TABLE1 = {soc: CellParams.from_table_units(*row, capacity_ah=CAPACITY_AH) for soc, row in _TABLE1_RAW.items()}

# Printed to four significant digits; only trustworthy near z = 0.
PUBLISHED_OCV = OcvPolynomial(
    (1.937e3, -8.962e3, 1.745e4, -1.860e4, 1.177e4, -4.514e3, 1.028e3, -133.501, 10.0891, 3.043)
)

PUBLISHED_AESMO_GAIN = np.array([0.3645, -0.2364, 2.002e-8, 0.0217])
PUBLISHED_BASELINE_GAIN = np.array([0.0288, -0.0032, 3.282e-9, -9.556e-5])
PUBLISHED_SYNTHESIS = {"alpha": 2e7, "eps": 2e-8, "mu": 1e-10, "l_phi": 0.8}

PUBLISHED_UKF_P0 = np.diag([1e-12, 1e-8, 1.0])
PUBLISHED_UKF_Q = np.diag([1e-8, 1e-8, 1e-6])


def nominal_params() -> CellParams:
    """Fixed model parameters used by every estimator (the SoC = 0.1 row)."""
    return TABLE1[0.1]


def reference_ocv(z):
    """Smooth synthetic OCV curve, 3.0 V empty to 4.2 V full.

    Steep knee below ~10 % SoC, nearly linear above.
    """
    z = np.asarray(z, dtype=float)
    return 3.4 + 0.75 * z - 0.4 * np.exp(-18.0 * z) + 0.05 * z**2


@lru_cache(maxsize=1)
def default_ocv() -> OcvPolynomial:
    """Degree-9 least-squares fit of :func:`reference_ocv` on 200 points."""
    from .ident import fit_ocv_polynomial

    z = np.linspace(0.0, 1.0, 200)
    return fit_ocv_polynomial(z, reference_ocv(z), degree=9)


@dataclass(frozen=True)
class ParamTable:
    """SoC-indexed cell parameters, linearly interpolated and clamped at the ends."""

    socs: tuple
    cells: tuple

    def __call__(self, z) -> CellParams:
        z = float(np.clip(z, self.socs[0], self.socs[-1]))
        fields = {}
        for name in ("r_int", "r_s", "c_s", "r_f", "c_f"):
            fields[name] = float(np.interp(z, self.socs, [getattr(c, name) for c in self.cells]))
        return CellParams(q_total=self.cells[0].q_total, **fields)

    def scaled(self, **factors) -> "ParamTable":
        """Copy with selected fields multiplied by a constant factor."""
        cells = tuple(c.replace(**{k: getattr(c, k) * f for k, f in factors.items()}) for c in self.cells)
        return ParamTable(self.socs, cells)


def table1_params() -> ParamTable:
    socs = tuple(sorted(TABLE1))
    return ParamTable(socs, tuple(TABLE1[s] for s in socs))


def table1_intervals(nominal: CellParams | None = None) -> ParamIntervals:
    """Parameter box spanned by all reference-table rows around the nominal cell."""
    return ParamIntervals.from_cells(nominal or nominal_params(), TABLE1.values())
