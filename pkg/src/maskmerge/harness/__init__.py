"""Experiment orchestration: synthetic tasks, pipelines, persistence, CLI."""
