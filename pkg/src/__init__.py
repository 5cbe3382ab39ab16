"""spowl-lab: safe model-based reinforcement learning package."""
