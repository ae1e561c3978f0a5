"""Benchmark geometries, analytic references and drivers."""
