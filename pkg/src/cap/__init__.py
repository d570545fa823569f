"""Contact-anchored manipulation stack.

Subpackages cover the full pipeline: geometry and anchors, episode
storage, hindsight contact labeling, a kinematic tabletop simulator
with a software ray-cast renderer, a residual k-means action codec,
the anchor-conditioned policy, pointing/verifier control loops, the
evaluation harness, and an HTTP session service.
"""

__version__ = "0.1.0"
