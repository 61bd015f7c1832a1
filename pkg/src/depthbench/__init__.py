"""depthbench: quantitative evaluation of depth-camera point clouds
against ground-truth surface meshes.

Pipeline: register the camera to the ground-truth frame (fiducial fit or
kinematic chain), compute per-pixel signed error fields, aggregate them
over static frames into depth-accuracy / time-variability /
shape-precision metrics, mask and pool them into tiles, and analyze the
pooled values with a nonparametric (aligned rank transform) factorial
ANOVA. A synthetic depth-sensor simulator with injectable error models
makes every stage verifiable end to end.
"""

from .geom import RigidTransform, apply, compose, inverse, svd3
from .meshio import (CorrespondenceSet, FormatError, FrameSequence,
                     OrganizedCloud, PoseLog, TriangleMesh, read_correspondences,
                     read_frames, read_ply, read_pose_log, write_correspondences,
                     write_frames, write_ply, write_pose_log)
from .registration import (KinematicChain, RegistrationResult, build_chain,
                           fit_rigid_svd, interpolate_pose, solve_kine)
from .errorfield import (ErrorField, MetricFields, VertexIndex3, aggregate,
                         shape_precision, signed_error_frame,
                         temporal_mean_cloud)
from .maskpool import (Footprint, TileGrid, content_mask, footprint_of, pool,
                       viewfield_mask)
from .sensorsim import (Blob, NoiseModel, PinholeCamera, SceneSpec,
                        generate_scene, render_depth, render_pin_observations)
from .stats import (AnovaTable, LongTable, align, art_anova, complete_cases,
                    f_cdf_upper, rank_midtie, rm_anova)

__version__ = "0.1.0"
