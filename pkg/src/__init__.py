"""Keypoint skill distillation: keypoints from one demonstration video, a keypoint-conditioned trajectory denoiser and a reachability check."""
