"""Self-supervised keypoints for endoscopy-style image matching.

A small numpy-only research toolkit: a from-scratch autodiff core
(`tensor`), a detector/descriptor network (`network`), homographic
self-supervision with specularity-aware losses (`homography`, `data`,
`losses`, `train`), brute-force mutual matching (`matching`), robust
two-view geometry (`geometry`), matching-quality reports (`metrics`),
synthetic fixtures (`synthetic`), and a batch CLI (`config`, `cli`).
"""

__version__ = "0.1.0"
