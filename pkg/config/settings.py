"""
Configuration settings for the nonlinear monotonicity imaging toolkit.
"""
import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Forward solver settings
SOLVER_TOL = float(os.getenv("MPM_SOLVER_TOL", 1e-10))
SOLVER_MAX_ITER = int(os.getenv("MPM_SOLVER_MAX_ITER", 200))
LINE_SEARCH_MAX_BACKTRACKS = int(os.getenv("MPM_LINE_SEARCH_MAX_BACKTRACKS", 40))
QUAD_TOL = float(os.getenv("MPM_QUAD_TOL", 1e-10))

# Admissibility sampling: s_max = factor * largest |grad u| of a calibration solve
ADMISSIBILITY_OVERSAMPLING = float(os.getenv("MPM_ADMISSIBILITY_OVERSAMPLING", 10.0))
ADMISSIBILITY_SAMPLES = int(os.getenv("MPM_ADMISSIBILITY_SAMPLES", 400))

# Default experiment geometry and families
DEFAULT_GRID_SIZE = int(os.getenv("MPM_DEFAULT_GRID_SIZE", 32))
DEFAULT_FOURIER_ORDER = int(os.getenv("MPM_DEFAULT_FOURIER_ORDER", 8))
DEFAULT_TEST_BLOCK = int(os.getenv("MPM_DEFAULT_TEST_BLOCK", 2))

# Instrument range L defaults to this factor times the largest background power product
RANGE_FACTOR = float(os.getenv("MPM_RANGE_FACTOR", 1.2))

# Oracle limits
ORACLE_MAX_DOFS = int(os.getenv("MPM_ORACLE_MAX_DOFS", 50))
ORACLE_ENERGY_TOL = float(os.getenv("MPM_ORACLE_ENERGY_TOL", 1e-12))

# Execution
THREADS = int(os.getenv("MPM_THREADS", 0))  # 0 = auto
OUTPUT_DIR = os.getenv("MPM_OUTPUT_DIR", "results")
LOG_LEVEL = os.getenv("MPM_LOG_LEVEL", "INFO")

# Run history
ENABLE_RUN_HISTORY = os.getenv("MPM_ENABLE_RUN_HISTORY", "true").lower() == "true"
MAX_HISTORY_ENTRIES = int(os.getenv("MPM_MAX_HISTORY_ENTRIES", 50))
RUN_HISTORY_FILE = os.getenv("MPM_RUN_HISTORY_FILE", "run_history.json")


def resolve_threads(requested: int = None) -> int:
    """Number of worker threads; 0 or None means one per CPU."""
    value = THREADS if requested is None else requested
    if value and value > 0:
        return value
    return os.cpu_count() or 1


def solver_settings() -> dict:
    """Resolved solver settings, embedded in every results document for replay."""
    return {
        "tol": SOLVER_TOL,
        "max_iter": SOLVER_MAX_ITER,
        "line_search_max_backtracks": LINE_SEARCH_MAX_BACKTRACKS,
        "quad_tol": QUAD_TOL,
        "range_factor": RANGE_FACTOR,
    }
