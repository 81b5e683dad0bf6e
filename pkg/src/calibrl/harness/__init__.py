"""Experiment orchestration: config, pipeline, reports, plots, CLI."""
