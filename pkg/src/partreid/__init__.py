"""Vehicle re-identification with weakly-supervised part localization.

Two cooperating networks: PANet localizes vehicle parts from channel
attention plus graph-cut foreground pseudo-labels, PMNet learns global and
part-level retrieval features with teacher-student streams and
uncertainty-weighted multi-task training. Runs on a self-contained numpy
autodiff stack, at desk scale by default.
"""

__version__ = "0.1.0"

from . import (autograd, checkpoint, config, evaluation, nn, panet,  # noqa: F401
               pmnet, synthetic, training, vision)
