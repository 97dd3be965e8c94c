"""Coarse-to-fine visual localization on precomputed features: global
retrieval, covisibility clustering, 2D-3D matching and PnP, plus map
construction, feature and localization metrics and a distillation loss."""
from .errors import HflocError
from .geometry import Camera, Pose
from .features import LocalFeatureSet
from .mapstore import SparseMap, build_map, load_map, map_stats, save_map
from .localizer import Localizer, LocalizerConfig, localize_query
from .pose import PoseEstimate, RansacConfig, pnp_ransac

__version__ = "0.1.0"
