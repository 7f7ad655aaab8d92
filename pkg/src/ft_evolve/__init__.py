"""Evolving feature-transformation sequences for tabular learning.

The pipeline seeds an experience library by exploration, refines it, and then
runs a closed generate-verify-write-back loop around a generation policy.
"""

from .errors import FTEvolveError
from .evaluation import EvaluationConfig, Score, cross_validated_score
from .explore import ExplorerConfig, explore, run_exploration
from .expr import (
    DEFAULT_OPERATORS,
    Combination,
    Feature,
    Op,
    OperatorSet,
    TransformationSequence,
    parse_sequence,
    render_sequence,
)
from .library import DatasetSignature, Experience, ExperienceLibrary, SelectionParams, greedy_select
from .loop import LoopConfig, RunReport, run, run_closed_loop, run_one_shot
from .policy import HTTPPolicy, MockPolicy, build_prompt, parse_response
from .refine import CheckThresholds, build_trajectory, check_sequence, enhance_trajectory
from .table import Dataset, execute_sequence, load_csv

__version__ = "0.1.0"

__all__ = [
    "CheckThresholds", "Combination", "DEFAULT_OPERATORS", "Dataset", "DatasetSignature",
    "EvaluationConfig", "Experience", "ExperienceLibrary", "ExplorerConfig", "FTEvolveError",
    "Feature", "HTTPPolicy", "LoopConfig", "MockPolicy", "Op", "OperatorSet", "RunReport",
    "Score", "SelectionParams", "TransformationSequence", "build_prompt", "build_trajectory",
    "check_sequence", "cross_validated_score", "enhance_trajectory", "execute_sequence", "explore",
    "greedy_select", "load_csv", "parse_response", "parse_sequence", "render_sequence", "run",
    "run_closed_loop", "run_exploration", "run_one_shot",
]
