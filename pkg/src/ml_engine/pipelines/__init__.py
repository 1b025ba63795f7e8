"""Kedro pipelines: simulation, training, comparison, clustering, reproduction"""
