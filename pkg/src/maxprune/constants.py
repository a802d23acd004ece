"""Default numerical tolerances and solver parameters, collected in one place.

Every default below can be overridden per call; nothing else in the package
hardcodes a tolerance.
"""

# -- matrix kernel ----------------------------------------------------------
MAX_SVD_DIM = 16            # largest square matrix the SVD routines accept
HERMITIAN_TOL = 1e-10       # ||H - H*||_F allowed when a Hermitian input is required
UNITARY_TOL = 1e-9          # ||PP* - I||_F allowed for basis linear parts / targets
SVD_RECONSTRUCT_TOL = 1e-10

# -- Dykstra projection onto (spectral ball) ∩ (Frobenius ball) -------------
DYKSTRA_TOL = 1e-10         # must stay well below the bundle stop tolerance
DYKSTRA_MAX_SWEEPS = 500

# -- trust-region bundle solver ----------------------------------------------
BUNDLE_MU = 0.5             # trust radius (Frobenius)
BUNDLE_EPSILON = 1e-8       # stop tolerance on model gap
BUNDLE_GAMMA = 0.5          # serious-step descent fraction
BUNDLE_MAX_OUTER = 300
INNER_BETA_START = 10.0     # soft-min smoothing schedule: start, multiply, cap
INNER_BETA_FACTOR = 10.0
INNER_BETA_CAP = 1e8
INNER_GRAD_TOL = 1e-9
INNER_MAX_ITER = 4000       # total projected-gradient iterations across the schedule

# -- dual certificate --------------------------------------------------------
DUAL_GAP_TOL = 1e-5         # certification threshold for a converged metric
DUAL_MAX_ITER = 20000

# -- pruning ------------------------------------------------------------------
PRUNE_SAFETY_MARGIN = 1e-9  # drop a basis only when its metric < -margin

# -- oracles ------------------------------------------------------------------
ORACLE_GRID_PER_AXIS = 24
ORACLE_REFINE_ITERS = 14
ORACLE_REFINE_SHRINK = 3.0
