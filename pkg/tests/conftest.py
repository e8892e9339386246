"""Shared expensive fixtures: end-to-end pipeline runs."""

import time

import pytest

from headliner import pipeline


@pytest.fixture(scope="session")
def tiny_pair(tmp_path_factory):
    """Two same-seed tiny pipeline runs for reproducibility checks."""
    out_a = tmp_path_factory.mktemp("tiny_a")
    out_b = tmp_path_factory.mktemp("tiny_b")
    report_a = pipeline.pipeline_demo(seed=7, scale="tiny", out_dir=out_a)
    report_b = pipeline.pipeline_demo(seed=7, scale="tiny", out_dir=out_b)
    return (report_a, out_a), (report_b, out_b)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """One full desk-scale run; the quality gate measures this."""
    out = tmp_path_factory.mktemp("desk")
    start = time.monotonic()
    report = pipeline.pipeline_demo(seed=0, scale="desk", out_dir=out)
    elapsed = time.monotonic() - start
    return report, out, elapsed
