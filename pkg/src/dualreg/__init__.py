"""Unsupervised rigid point-cloud registration with dual-neighbourhood matching."""
from .geometry import (PointCloud, RigidTransform, RegistrationMetrics, NeighborhoodIndex,
                       apply_transform, build_neighborhood_index, compose, compute_metrics,
                       one_nn_cloud)
from .params import ParamSet, ConfigError, load_params, save_params
from .features import ExtractorConfig, FeatureMatrix, extract_handcrafted
from .matching import MatchingMap, ReferenceCopy, build_matching_map
from .inlier import InlierConfig, InlierSet, select_inliers
from .solver import SolveResult, weighted_svd
from .registration import PipelineConfig, RegistrationResult, register
from .training import LossBreakdown, TrainConfig, grad_check, train, train_step
from .data import PairSpec, builtin_shapes, make_pair
from .io import read_point_cloud, write_point_cloud, read_transform, write_transform

__version__ = "0.1.0"
