"""Constants for the gang-of-bandits simulation harness."""

# Environment variable keys
OUTPUT_DIR_KEY = "GOB_OUTPUT_DIR"
LOG_LEVEL_KEY = "GOB_LOG_LEVEL"
SEED_KEY = "GOB_SEED"
DATA_DIR_KEY = "GOB_DATA_DIR"
CG_REL_TOL_KEY = "GOB_CG_REL_TOL"

# Default environment values
DEFAULT_OUTPUT_DIR = "results"
DEFAULT_LOG_LEVEL = "INFO"
DEFAULT_SEED = 0
DEFAULT_DATA_DIR = "data"

# Experimental protocol
DEFAULT_ROUNDS = 50_000
DEFAULT_VALIDATION_PREFIX = 5_000
DEFAULT_SEED_COUNT = 3
DEFAULT_CANDIDATES = 25
DEFAULT_DIMENSION = 25

# Model hyperparameters
DEFAULT_LAMBDA = 0.01
DEFAULT_SIGMA = 1.0
DEFAULT_RESHAPE = 0.01
DEFAULT_UCB_ALPHA = 0.01
DEFAULT_EXPLORE_FRACTION = 0.10
DEFAULT_EPOCH_DELTA = 0.1
DEFAULT_CLUB_ALPHA2 = 1.0
DEFAULT_LAMBDA_GEN = 1.0

# Conjugate gradient
DEFAULT_CG_REL_TOL = 1e-6
DEFAULT_CG_MAX_ITERS = 200
DEFAULT_CG_WARM_MAX_ITERS = 20

# Gram block factors are kept for gram + jitter * I
GRAM_JITTER = 1e-10

# Graph generation
DEFAULT_KRONECKER_SEED = ((0.99, 0.75), (0.75, 0.5))
DEFAULT_KRONECKER_SPARSITY = 0.005
DENSE_TRACE_LIMIT = 2000
DENSE_EIGEN_LIMIT = 2000
CONNECTIVITY_TOL = 1e-8

# Graph learning schedule
DEFAULT_WARMUP_RECS_PER_USER = 10
DEFAULT_UPDATE_INTERVAL = 1_000
DEFAULT_MAX_EDGES = 100_000
DEFAULT_LEARN_SPARSITY = 0.05
DEFAULT_GLASSO_TOL = 1e-4
DEFAULT_GLASSO_MAX_SWEEPS = 100
DENSITY_BAND = 0.20
DEFAULT_BISECTION_STEPS = 60

# Timing sweep
DEFAULT_SWEEP_MAX_WARMUP = 200

# Dataset loading
HETREC_LAYOUTS = ("lastfm", "delicious")

# Output
CSV_SCHEMA_VERSION = 1
RUN_LOG_COLUMNS = (
    "schema_version", "policy", "seed", "round", "user", "item", "explored",
    "reward", "best_reward", "regret", "cum_regret", "random_regret",
    "cum_random_regret", "regret_ratio",
)
