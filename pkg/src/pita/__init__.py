"""Physics-informed temporal alignment for auto-regressive neural operators."""
