"""Two-stream contrastive pretraining and episodic meta-learning on synthetic videos."""

__version__ = "0.1.0"
