"""Multi-task training with an orthogonal task-gradient penalty."""

__version__ = "0.1.0"
