"""
Choice packages and the factorial grid
======================================

Each respondent ranks 13 route alternatives described by cost, time and
the number of trucks on the road.  This script walks through the built-in
packages, the cost rescaling that produces a family of trade-off levels,
and the grid of travel contexts.
"""

from fractions import Fraction

from llmvot.design import (
    TRADEOFF_SCHEMES,
    FactorGrid,
    average_tradeoff_ratio,
    builtin_packages,
    choice_setting_packages,
    factorial_cells,
    scale_costs,
)

# The two hand-entered packages: the original 6.6 USD/h design and the
# modernised 29.1 USD/h one.  Costs are stored in cents.
original, base = builtin_packages()
for alt in base.choice_set(1).alternatives[:4]:
    print(f"alt {alt.id:2d}: ${alt.cost:6.2f}  {alt.time_min:3d} min  {alt.trucks} trucks")

# Which pairs of alternatives define "the" trade-off ratio is a modelling
# choice.  The default keeps only pairs where the faster route costs more.
for scheme in TRADEOFF_SCHEMES:
    print(f"{scheme:14s} original {average_tradeoff_ratio(original, scheme):6.2f}"
          f"   base {average_tradeoff_ratio(base, scheme):6.2f}")

# Scaling every cost by k scales the ratio by k, up to cent rounding.
half = scale_costs(base, Fraction(1, 2), label="half")
print("half-price ratio:", round(average_tradeoff_ratio(half), 2))

# The six choice settings used in the experiment.
for pkg in choice_setting_packages():
    print(f"{pkg.label:14s} declared {pkg.declared_ratio:5.1f}  computed {average_tradeoff_ratio(pkg):6.2f}")

# Travel contexts: package x purpose x income x sex x age x education.
grid = FactorGrid.full()
cells = factorial_cells(grid)
print(len(cells), "cells; first:", cells[0].key())
print(len(factorial_cells(FactorGrid.full(package_label=["ratio-29.1"]))), "cells for one package")
