import math

# Solid phase
YOUNG_MODULUS = 1.0
POISSON_RATIO = 0.3

# Fluid phase
FLUID_COMPRESSIBILITY = 0.0
FLUID_VISCOSITY = 1.0

# Reference cross-and-sphere cell
CHANNEL_RADII = (0.15, 0.15, 0.15)
SPHERE_RADIUS = 0.25
CELL_RESOLUTION = 16
MIN_CELL_RESOLUTION = 8
SNAP_TOLERANCE = 0.3  # fraction of the cell width
SNAP_RELAXATION_STEPS = 8

# Spline box
SPLINE_DEGREES = (3, 3, 3)
SPLINE_SEGMENTS = (3, 3, 3)
INJECTIVITY_DELTA = 0.02
THETA_BOUNDS = (0.0, 0.5 * math.pi)

# Material design criteria
KAPPA0 = 2e-5
STIFFNESS_FRACTION_S0 = 0.9
STIFFNESS_FRACTION_S1 = 0.95
PROBLEM_KINDS = ["SP", "SP-bis", "SPX", "PS", "PS-bis", "PSX", "PSX'", "CS"]

# SLP
MOVE_LIMIT = 0.02
MIN_MOVE_LIMIT = 1e-6
MAX_MOVE_LIMIT = 0.08
MERIT_PENALTY = 10.0
SLP_MAX_ITER = 50
SLP_TOLERANCE = 1e-8
SLP_ACCEPT_RATIO = 0.1
SLP_EXPAND_RATIO = 0.75
SLP_SHRINK_RATIO = 0.25

# Gradient verification
FD_STEPS = (1e-3, 1e-4)
FD_COORDINATES = 10
SAMPLING_POINTS = 22  # 22**3 > 1e4 Jacobian samples

# Macroscopic problem
MACRO_SHAPE = (15, 10, 2)
MACRO_SIZE = (15.0, 10.0, 2.0)
PRESSURE_1 = 1.0
PRESSURE_2 = 0.5
TRACTION = (0.0, -1.0, 0.0)
TRACTION_STRIP = 3.0
LAMBDAS = [-1.0, -100.0, -1000.0, 1.0]
TARGET_FLUX = 0.0

# Run control
SEED = 0
WORKERS = 1
EXIT_SUCCESS = 0
EXIT_CONFIG_ERROR = 2
EXIT_SOLVER_FAILURE = 3
EXIT_INFEASIBLE_START = 4
