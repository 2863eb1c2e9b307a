"""Experiment orchestration: config files, train/sweep commands, CSV reports, token maps."""
