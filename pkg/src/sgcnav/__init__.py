"""Scene-graph contrastive navigation: gridworld embodied RL with a
graph-contrastive auxiliary loss, evaluation metrics, and belief probing."""

__version__ = "0.1.0"
