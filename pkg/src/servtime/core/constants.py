from typing import Any

CHECKPOINT_FORMAT_VERSION = "1"

DEFAULT_LR = 1e-4
DEFAULT_MEMPOOL_LR = 1e-5
DEFAULT_TEST_FRACTION = 0.05
DEFAULT_BPTT = 64  # events per truncated unroll window
DEFAULT_MC_SAMPLES = 100
DEFAULT_SEED = 0

# closed-form RPP quadrature
QUAD_ABS_TOL = 1e-9
SURVIVAL_TRUNCATION = 1e-12
SMALL_SLOPE = 1e-6  # |w| below this uses the series limits

POSITIVE_FLOOR = 1e-6
PARETO_CAP_FRACTION = 0.9

# adversarial objective weights
LAMBDA_LIPSCHITZ = 10.0
LAMBDA_CENSOR = 1.0
LAMBDA_MATCH = 1.0
CRITIC_STEPS = 5
NOISE_DIM = 8
CRITIC_COLLAPSE = 1e3

# per-command defaults; user config sections and --config files may only
# override keys listed here. horizon = 0.0 means "latest time found in the file"
COMMAND_DEFAULTS: dict[str, dict[str, Any]] = {
    "simulate": {
        "family": "h-pt",
        "horizon": 1000.0,
        "seed": DEFAULT_SEED,
        "base_rate": 1.0,
        "alpha": 0.5,
        "beta": 1.0,
        "link_shift": 0.0,
        "link_scale": 1.0,
        "service_rate": 1.0,
        "phases": 2,
    },
    "simulate_mempool": {
        "rate": 2.0,
        "block_rate": 1.0,
        "horizon": 500.0,
        "drop_fraction": 0.5,
        "seed": DEFAULT_SEED,
    },
    "ingest": {
        "horizon": 0.0,
        "test_fraction": 0.0,
    },
    "train_rpp": {
        "horizon": 0.0,
        "hidden": 16,
        "cell": "gru",
        "epochs": 20,
        "lr": DEFAULT_LR,
        "bptt": DEFAULT_BPTT,
        "validation_fraction": DEFAULT_TEST_FRACTION,
        "include_tail": False,
        "seed": DEFAULT_SEED,
    },
    "train_ns": {
        "horizon": 0.0,
        "family": "gamma",
        "hidden": 256,
        "layers": 2,
        "epochs": 50,
        "lr": DEFAULT_LR,
        "batch_size": 256,
        "validation_fraction": DEFAULT_TEST_FRACTION,
        "seed": DEFAULT_SEED,
    },
    "train_adv": {
        "horizon": 0.0,
        "variant": "as",
        "hidden": 100,
        "layers": 3,
        "state_dim": 16,
        "noise_dim": NOISE_DIM,
        "epochs": 50,
        "lr": DEFAULT_LR,
        "batch_size": 256,
        "bptt": DEFAULT_BPTT,
        "critic_steps": CRITIC_STEPS,
        "lambda1": LAMBDA_LIPSCHITZ,
        "lambda2": LAMBDA_CENSOR,
        "lambda3": LAMBDA_MATCH,
        "seed": DEFAULT_SEED,
    },
    "train_mempool": {
        "variant": "nms-g",
        "epochs": 50,
        "lr": DEFAULT_MEMPOOL_LR,
        "bptt": DEFAULT_BPTT,
        "critic_steps": CRITIC_STEPS,
        "lambda1": LAMBDA_LIPSCHITZ,
        "lambda3": LAMBDA_MATCH,
        "noise_dim": NOISE_DIM,
        "seed": DEFAULT_SEED,
    },
    "sample_rpp": {
        "horizon": 100.0,
        "seed": DEFAULT_SEED,
    },
    "predict": {
        "horizon": 0.0,
        "n_samples": DEFAULT_MC_SAMPLES,
        "seed": DEFAULT_SEED,
    },
    "evaluate": {
        "horizon": 0.0,
        "n_samples": DEFAULT_MC_SAMPLES,
        "n_quantiles": 99,
        "test_fraction": DEFAULT_TEST_FRACTION,
        "seed": DEFAULT_SEED,
    },
}
