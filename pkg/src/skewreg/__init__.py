"""Numerical companion for skew-symmetric elliptic systems on the unit disc.

Modules: ``grid`` (nodes, fields, quadrature), ``elliptic`` (Poisson and
Hodge solvers), ``gauge`` (rotation gauge by continuation), ``hardy``
(BMO, Hardy norm, Wente), ``systems`` (linear systems and H-surfaces),
``morrey`` (decay quantities and boundary probes) and ``cli``.
"""

__version__ = "0.1.0"
