"""Detect, track and evaluate expanding-ring roost signatures in radar
rasters, with per-annotator label-style correction."""

__version__ = "0.1.0"

from .core import (
    Annotation,
    Box,
    Channel,
    Circle,
    Detection,
    FormatError,
    Product,
    Provenance,
    RoostkitError,
    Scan,
    box_to_circle,
    circle_to_box,
    iou,
    iou_matrix,
    is_difficult,
)
from .detector import CandidateGrid, DetectorConfig, RingDetector
from .evalkit import (
    EvalReport,
    average_precision,
    bootstrap_map,
    evaluate,
    match_detections,
    precision_at_k,
    user_rescale,
)
from .postfilter import (
    FilterPolicy,
    HabitatRaster,
    Turbine,
    TurbineDb,
    box_pixel_slice,
    filter_tracks,
    habitat_class,
    is_rain,
    is_windfarm,
)
from .stylemodel import (
    EmResult,
    UserStyle,
    forward_logpdf,
    impute_labels,
    init_styles,
    raw_labels,
    refit_forward_model,
    reverse_map_radius,
    run_em,
    phi_objective,
    update_phi,
)
from .synth import AnnotatorSpec, SceneSpec, SynthCorpus, corpus_manifest, generate_corpus
from .tracker import (
    LdsParams,
    Rescorer,
    Track,
    TrackMember,
    TrackState,
    TrackerConfig,
    associate,
    fit_lds,
    radius_time_fit,
    rescore,
    retain_mature,
    smooth,
    track_features,
    train_rescorer,
)
