"""Unsupervised part segmentation and part transfer for triangle-rigged Gaussian-splat avatars."""

__version__ = "0.1.0"

from .avatar import (Avatar, Gaussians, Mesh, TriangleFrame, global_to_local, local_to_global,  # noqa: E402
                     to_global_space, to_local_space, triangle_frame, triangle_frames)
from .clustering import DbscanConfig, Segmentation, dbscan, refine_segments, segmentation_metrics  # noqa: E402
from .errors import (DegenerateTriangle, EmptySelection, FormatError, NumericalOverflow,  # noqa: E402
                     SplatPartsError, TopologyMismatch, TrainingDiverged, ZeroScale)
from .faceswap import (MergeConfig, SegmentArchive, extract_segment, group_by_triangle, merge,  # noqa: E402
                       merge_overlap, merge_replacement)
from .hashgrid import HashGridConfig, HashGridState, encode, encode_backward, normalize_positions  # noqa: E402
from .network import DisentangleModel, NetConfig, forward, gumbel_softmax  # noqa: E402
from .synthetic import SyntheticSpec, make_disjoint_subparts_spec, make_synthetic_avatar  # noqa: E402
from .training import assign_segments, build_targets, train  # noqa: E402
