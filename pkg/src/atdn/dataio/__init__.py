from .formats import (
    FlowField,
    FormatError,
    Frame,
    PoseParseError,
    SizeLimitError,
    TruncatedError,
    area_resize,
    format_pose_line,
    parse_pose_file,
    read_flow,
    read_frame,
    write_flow,
    write_pgm,
    write_pose_file,
    write_raw_image,
)
from .synthetic import (
    DegenerateWorldError,
    PointBehindCameraError,
    SyntheticWorld,
    flow_at,
    flow_oracle,
    render,
    synth_sequence,
    world_trajectory,
)
