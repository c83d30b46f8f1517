"""Token-budgeted history compression, action/visual codecs, and
preview-gated closed-loop execution on a deterministic toy manipulator."""

__version__ = "0.1.0"
