"""Candidate fusion and FROC evaluation toolkit for lung nodule detection
pipelines. Neural detectors, classifiers and segmenters stay external; this
package fuses their scored outputs, evaluates them at the lesion level and
links them to report-derived findings.
"""

__version__ = "0.1.0"

from .domain import (  # noqa: F401
    CandidateDetection,
    PipelineConfig,
    ReferenceNodule,
    SemanticRatings,
    WorldPoint,
    is_hit,
    match_tolerance,
)
from .errors import ConfigError, InputError, InvariantError, ScorerError  # noqa: F401
from .froc import (  # noqa: F401
    FP_RATES,
    FrocCurve,
    FrocResult,
    LesionMatchResult,
    bootstrap_ci,
    cpm,
    detection_probability_summary,
    evaluate,
    froc_curve,
    match_lesions,
    stratified_eval,
)
from .fusion import (  # noqa: F401
    CadxScores,
    FusedCandidate,
    cross_detector_consensus,
    ensemble_cadx,
    fuse_scans,
    run_tri_stage,
)
from .readerstats import (  # noqa: F401
    cohens_d,
    consensus_category,
    detected_vs_missed_table,
    effect_size_label,
    mann_whitney_u,
    missed_overlap_table,
)
from .reportlink import extract_entities, lobe_of_candidate, match_entities  # noqa: F401
from .sweeps import sweep_cade, sweep_cadx  # noqa: F401
from .volume import Volume, centroid_in_lung, extract_patch, load_volume, save_volume  # noqa: F401
