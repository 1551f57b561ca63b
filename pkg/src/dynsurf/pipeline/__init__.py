"""Training, checkpoints, mesh extraction, evaluation."""
