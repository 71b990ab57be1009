"""Shared fixtures: one desk-scale pipeline run per test session.

The end-to-end acceptance tests all read artifacts of a single LOO run
(5 PPS + 2 control subjects, Proposed4).  Building it takes roughly
20 minutes on one desktop core, so it is produced once per session and
cached.  While iterating on assertions you can point EPG_ACCEPT_RUN at a
previously built run directory with the same configuration; the fixture
checks the config digest and refuses a mismatched reuse rather than
silently validating stale numbers.
"""

import json
import os
from pathlib import Path

import pytest

from epgstage import cli
from epgstage.config import config_digest, load_config

# Frozen desk-scale configuration, shared with scripts/run_desk_pipeline.py:
# 600 s per phase keeps the run inside the half-hour budget; 16 epochs is
# past the point where held-out class scores are confident, not merely
# correctly ranked.
DESK_CONFIG_PATH = Path(__file__).parent.parent / "scripts" / "desk_config.json"

STAGES = ("generate", "preprocess", "train", "evaluate", "cam", "report")


def _run_pipeline(run: Path, config_path: Path) -> None:
    # single-thread mode keeps BLAS reduction order fixed, so fold training
    # can be reproduced bitwise regardless of the host's core count
    saved_threads = os.environ.get("EPG_THREADS")
    os.environ["EPG_THREADS"] = "1"
    try:
        for stage in STAGES:
            argv = [stage, "--run", str(run), "--config", str(config_path)]
            code = cli.main(argv)
            assert code == 0, f"stage {stage!r} exited {code}"
    finally:
        if saved_threads is None:
            del os.environ["EPG_THREADS"]
        else:
            os.environ["EPG_THREADS"] = saved_threads


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory) -> Path:
    """Path of a completed desk-scale run directory."""
    saved_seed = os.environ.pop("EPG_SEED", None)
    try:
        want = config_digest(load_config(DESK_CONFIG_PATH))
        reuse = os.environ.get("EPG_ACCEPT_RUN")
        if reuse:
            run = Path(reuse)
            if not (run / "report" / "report.md").exists():
                pytest.fail(f"EPG_ACCEPT_RUN={reuse} is not a completed run")
            have = config_digest(load_config(run / "config.json"))
            if want != have:
                pytest.fail(
                    "EPG_ACCEPT_RUN config digest mismatch: "
                    f"{have[:12]} != expected {want[:12]}"
                )
            return run
        run = tmp_path_factory.mktemp("desk") / "run"
        _run_pipeline(run, DESK_CONFIG_PATH)
        return run
    finally:
        if saved_seed is not None:
            os.environ["EPG_SEED"] = saved_seed


def stage_elapsed(run: Path) -> dict[str, float]:
    """Wall-clock seconds per pipeline stage, read from the manifests."""
    out = {}
    for stage in STAGES:
        manifest = json.loads((run / "manifests" / f"{stage}.json").read_text())
        out[stage] = float(manifest["elapsed_s"])
    return out
