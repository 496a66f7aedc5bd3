"""Tree-gated mixture density estimation."""
