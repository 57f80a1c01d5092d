"""Robust topology optimization of a rotating machine's iron layout.

Quasilinear magnetostatic FEM, topological-derivative sensitivities, a
level-set fixed-point driver, and a min-max loop against parameter
uncertainty. Submodules are imported lazily by the CLI so thread caps can
be applied before numerics libraries load; library users import the
submodules directly (rtopt.machine, rtopt.levelset, ...).
"""

__version__ = "0.1.0"
