"""Segmentation-driven proportional control for vineyard row navigation,
with a deterministic simulator and evaluation harness."""

from .raster import (
    CtrlMap,
    CumSegMap,
    DepthMap,
    FrameBuffer,
    RasterConfig,
    SegMap,
    depth_binary_mask,
    fuse_segmentations,
    load_depth,
    load_manifest,
    load_mask,
    make_ctrl_map,
    preprocess_frame,
    save_depth,
    save_mask,
)
from .spc import (
    ColumnProfile,
    ControllerState,
    SpcConfig,
    VelocityCommand,
    ZeroCluster,
    column_histogram,
    control_function,
    ema_update,
    fault_fallback,
    fault_rate,
    find_zero_clusters,
    noise_reduction,
    select_cluster,
    spc_step,
)
from .simworld import (
    CameraModel,
    EpisodeLog,
    KinematicParams,
    Pose2D,
    VineRow,
    World,
    WorldParams,
    default_start_pose,
    flip_noise,
    generate_world,
    render_views,
    run_episode,
    step_kinematics,
)
from .evaluation import (
    ClassStats,
    CommandRecord,
    Metrics,
    Midline,
    compute_midline,
    orientation_stats,
    trajectory_mae,
)
from .scenario import EpisodeSpec, ScenarioSpec, load_scenario, save_scenario

__version__ = "0.1.0"
