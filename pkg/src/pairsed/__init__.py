"""Clouds of sedimenting rigid-sphere pairs in Stokes flow.

Modules: kernels (Oseen tensor, cutoff), pair_hydro (two-sphere mobility),
reflections (many-pair solver), micro (N-pair dynamics), meso (mean-field
solvers), metrics (W-inf, d_min, interaction sums), runner/cli (experiments).
"""
__version__ = '0.1.0'
