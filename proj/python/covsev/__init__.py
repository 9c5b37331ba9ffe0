"""CT-scan COVID-19 severity pipeline: core data, preprocessing and metrics.

The networks, training loop and pipeline are in the ``covsev`` command-line
tool; this module exposes the torch-free parts for analysis scripts.
"""

from ._core import (
    CLASS_NAMES,
    CacheError,
    ContractError,
    IoError,
    ManifestError,
    ParseError,
    ShapeError,
    class_distribution,
    confusion_matrix,
    ensemble,
    heuristic_lung_score,
    load_manifest,
    load_scan,
    lr_at_epoch,
    macro_f1,
    pack_volume,
    read_probabilities,
    read_report,
    read_volume,
    reference_schedule,
    report,
    select_slices,
    severity_name,
    stratified_kfold,
    synthetic_dataset,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
