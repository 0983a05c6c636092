"""Global motion compensation by keypoint-based congealing."""
