"""Optional acceleration backends.

cv2 and numba speed up the hot paths by roughly an order of magnitude
but every consumer keeps a plain numpy/scipy fallback, so the package
works (slowly) without them. Import the names from here so the
availability check lives in one place.
"""

from __future__ import annotations

try:  # pragma: no cover - exercised indirectly
    import cv2
except ImportError:  # pragma: no cover
    cv2 = None

try:  # pragma: no cover - exercised indirectly
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None

__all__ = ["cv2", "njit"]
