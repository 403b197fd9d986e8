"""Top-level package for Panotool."""

__author__ = """Panotool contributors"""
__version__ = '0.1.0'

import os
from typing import Union
import dotenv
import loguru
from .errors import (ConfigError, MismatchError, FormatError, UnusableQueryError,
                     EvaluationError, TrainingError)
from .windowing import (WindowConfig, WindowLayout, parse_window_token, compute_layout,
                        window_columns, extract_window, roll_pano)
from .encoder import (EncoderSpec, ProjectionHead, PanoDescriptor, gem_pool, l2_normalize,
                      raw_features, encode, encode_raw, encode_pano, encode_pano_resized)
from .retrieval import WindowMatch, RetrievalResult, window_distance, rank, top_n, rank_all
from .mining import (MiningConfig, LossConfig, TripletSet, geo_neighbors, mine_triplet,
                     triplet_loss, triplet_loss_grad, numerical_grad)
from .dataset import (GeoPoint, ImageRecord, Dataset, SynthParams, load_manifest, write_manifest,
                      read_embeddings, write_embeddings, synth_dataset, write_synth, resize_to_window,
                      split_places)
from .index import (IndexArtifact, build_index, build_index_from_embeddings, encode_queries,
                    save_index, load_index, check_compatible)
from .evaluation import RecallReport, SweepTable, recall_at_n, evaluate, ablation_sweep
from .training import TrainConfig, TrainReport, train
from .checkpoint import save_checkpoint, load_checkpoint

raw_env_text = f"""# Description: Env file for Panotool.
# Current version: {__version__}

# Sliding-window stride divisor N (stride = panorama width / N)
PANOTOOL_STRIDE_DIV=''

# Span divisor S (window length = panorama width / S)
PANOTOOL_SPAN_DIV=''

# Whether windows wrap around the panorama seam (true/false)
PANOTOOL_CYCLIC=''

# p of the window distance and of GeM pooling
PANOTOOL_NORM_P=''
PANOTOOL_GEM_P=''

# Ground-truth radius of Recall@N in meters
PANOTOOL_THRESHOLD_M=''

# Worker threads for encoding and querying
PANOTOOL_NPROC=''
"""

_defaults = {
    'PANOTOOL_STRIDE_DIV': 16,
    'PANOTOOL_SPAN_DIV': 8,
    'PANOTOOL_CYCLIC': True,
    'PANOTOOL_NORM_P': 2.0,
    'PANOTOOL_GEM_P': 3.0,
    'PANOTOOL_THRESHOLD_M': 25.0,
    'PANOTOOL_NPROC': 1,
}

def _getenv(key:str):
    default = _defaults[key]
    value = os.getenv(key)
    if value is None or value.strip() == '':
        return default
    try:
        if isinstance(default, bool):
            lowered = value.strip().lower()
            if lowered not in ('1', '0', 'true', 'false', 'yes', 'no'):
                raise ValueError(value)
            return lowered in ('1', 'true', 'yes')
        return type(default)(value)
    except ValueError:
        loguru.logger.warning(f"Invalid value {value!r} for {key}, using {default}")
        return default

def load_envs(env:Union[None, str, dict]=None):
    """Load the default settings from environment variables

    Args:
        env (Union[None, str, dict], optional): The environment file or the environment variables. Defaults to None.

    Returns:
        bool: True if the environment variables are loaded successfully.

    Examples:
        load_envs("envfile.env")
        load_envs({"PANOTOOL_STRIDE_DIV": "32"})
        load_envs() # load from the environment variables
    """
    global stride_div, span_div, cyclic, norm_p, gem_p, threshold_m, nproc
    # update the environment variables
    if isinstance(env, str) and not dotenv.load_dotenv(env, override=True):
        loguru.logger.warning(f"Failed to load the environment file: {env}")
        return False
    elif isinstance(env, dict):
        for key, value in env.items():
            os.environ[key] = str(value)
    # else: load from environment variables
    stride_div = _getenv('PANOTOOL_STRIDE_DIV')
    span_div = _getenv('PANOTOOL_SPAN_DIV')
    cyclic = _getenv('PANOTOOL_CYCLIC')
    norm_p = _getenv('PANOTOOL_NORM_P')
    gem_p = _getenv('PANOTOOL_GEM_P')
    threshold_m = _getenv('PANOTOOL_THRESHOLD_M')
    nproc = _getenv('PANOTOOL_NPROC')
    return True

def save_envs(env_file:str):
    """Save the current settings as an env file"""
    values = {
        'PANOTOOL_STRIDE_DIV': stride_div,
        'PANOTOOL_SPAN_DIV': span_div,
        'PANOTOOL_CYCLIC': 'true' if cyclic else 'false',
        'PANOTOOL_NORM_P': norm_p,
        'PANOTOOL_GEM_P': gem_p,
        'PANOTOOL_THRESHOLD_M': threshold_m,
        'PANOTOOL_NPROC': nproc,
    }
    with open(env_file, "w") as f:
        f.write(raw_env_text)
    for key, value in values.items():
        dotenv.set_key(env_file, key, str(value), quote_mode='never')
    return True

def default_config() -> WindowConfig:
    """Window configuration from the loaded settings"""
    return WindowConfig(stride_div, span_div, cyclic)

# load the environment variables
load_envs()
