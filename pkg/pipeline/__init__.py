"""Training pipeline: errors and retry, learning-rate schedule, checkpoints, trainer"""
