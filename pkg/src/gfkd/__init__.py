"""Graph-free knowledge distillation for small dense GNNs."""
