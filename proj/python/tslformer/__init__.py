from ._core import (
    Checkpoint,
    Error,
    FrameRecord,
    ModelConfig,
    csv_header,
    frame_displacement,
    impute_missing,
    infer,
    metrics,
    parse_landmark_csv,
    predict_topk,
    run_cli,
    sample_frames,
    segment_stream,
    standard_keypoints,
    stratified_kfold,
    stratified_split,
    write_landmark_csv,
)

__all__ = [
    "Checkpoint",
    "Error",
    "FrameRecord",
    "ModelConfig",
    "csv_header",
    "frame_displacement",
    "impute_missing",
    "infer",
    "metrics",
    "parse_landmark_csv",
    "predict_topk",
    "run_cli",
    "sample_frames",
    "segment_stream",
    "standard_keypoints",
    "stratified_kfold",
    "stratified_split",
    "write_landmark_csv",
]
