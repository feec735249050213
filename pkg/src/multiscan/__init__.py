"""Dense multi-scan point cloud adjustment and LiDAR-inertial odometry."""

from multiscan.geometry import Pose, PointCloud

__all__ = ["Pose", "PointCloud"]
