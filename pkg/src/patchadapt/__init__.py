"""Easy-to-hard domain adaptation for patch-level segmentation.

Everything runs on a small numpy reverse-mode autodiff engine
(:mod:`patchadapt.diffcore`); :class:`CurriculumSegmenter` wraps the full
pipeline behind a scikit-learn style interface.
"""
__version__ = "0.1.0"

from .config import RunConfig, load_config, parse_config
from .curriculum import build_plan, evaluate, run_curriculum, run_stage
from .dataio import make_benchmark, read_benchmark, read_dataset, write_benchmark, write_dataset
from .estimator import CurriculumSegmenter
from .nets import ModelBundle, load_checkpoint, save_checkpoint

__all__ = [
    "CurriculumSegmenter", "ModelBundle", "RunConfig", "build_plan", "evaluate",
    "load_checkpoint", "load_config", "make_benchmark", "parse_config", "read_benchmark",
    "read_dataset", "run_curriculum", "run_stage", "save_checkpoint", "write_benchmark",
    "write_dataset",
]
