"""Shared fixtures for tests that need trained full-size models.

Everything expensive lands in <repo>/.cache and is reused across pytest
runs: the canonical dataset, six 1500-epoch training runs (3 seeds x
{sh, ufrnn}), and the evaluation sweeps the acceptance checks read.
A cold build takes a few hours of CPU (the ufrnn runs dominate); warm
runs reuse the cache and finish in minutes.  Delete .cache/ or a single
entry to force a rebuild.  .cache/build_models.sh pre-builds the same
layout outside pytest.
"""

import shutil
import subprocess
import sys
from pathlib import Path

import pytest

REPO = Path(__file__).resolve().parent.parent
CACHE = REPO / ".cache"
DATA_DIR = CACHE / "data"
SEEDS = (0, 1, 2)
FINAL_EPOCH = 1500


def run_cli(*args):
    cmd = [sys.executable, "-m", "foresight_rnn.cli", *map(str, args)]
    res = subprocess.run(cmd, capture_output=True, text=True)
    if res.returncode != 0:
        raise RuntimeError(
            f"cache build step failed ({' '.join(map(str, args))}):\n"
            f"{res.stdout}\n{res.stderr}")
    return res


def ensure_dataset() -> Path:
    if not (DATA_DIR / "manifest.json").exists():
        run_cli("gen-data", "--out", DATA_DIR, "--seed", 0)
    return DATA_DIR


def ensure_model(variant: str, seed: int) -> Path:
    """Train one 1500-epoch run into the cache (idempotent)."""
    run = CACHE / "models" / f"{variant}_seed{seed}"
    if final_checkpoint(run).exists():
        return run
    if run.exists():
        raise RuntimeError(
            f"{run} exists but lacks checkpoint_{FINAL_EPOCH:06d}.ckpt -- "
            "an earlier build was interrupted or is still running; delete "
            "the directory (or let the build finish) and rerun")
    ensure_dataset()
    run.parent.mkdir(parents=True, exist_ok=True)
    cfg = run.with_suffix(".cfg")
    cfg.write_text(f"variant = {variant}\nepochs = {FINAL_EPOCH}\n"
                   f"checkpoint_every = 500\nseed = {seed}\n")
    run_cli("train", "--config", cfg, "--data", DATA_DIR, "--out", run)
    return run


def final_checkpoint(run: Path) -> Path:
    return run / "checkpoints" / f"checkpoint_{FINAL_EPOCH:06d}.ckpt"


def ensure_eval(variant: str, seed: int, interference: str | None = None) -> Path:
    """Run the 30-trial success sweep for one cached model (idempotent)."""
    name = f"{variant}_seed{seed}" + ("_hold" if interference else "")
    out = CACHE / "evals" / name
    if (out / "success_table.csv").exists():
        return out
    if out.exists():
        shutil.rmtree(out)  # partial evals are cheap to redo
    ckpt = final_checkpoint(ensure_model(variant, seed))
    args = ["eval", "--checkpoint", ckpt, "--trials", 10, "--seed", 0,
            "--out", out]
    if interference:
        args += ["--interference", interference]
    run_cli(*args)
    return out


def success_row(eval_dir: Path) -> dict:
    """Parse the single data row of an eval success table."""
    header, row = (eval_dir / "success_table.csv").read_text().splitlines()
    return dict(zip(header.split(","), map(int, row.split(","))))


@pytest.fixture(scope="session")
def dataset():
    return ensure_dataset()


@pytest.fixture(scope="session")
def sh_runs():
    return {seed: ensure_model("sh", seed) for seed in SEEDS}


@pytest.fixture(scope="session")
def uf_runs():
    return {seed: ensure_model("ufrnn", seed) for seed in SEEDS}


@pytest.fixture(scope="session")
def sh_evals(sh_runs):
    return {seed: ensure_eval("sh", seed) for seed in SEEDS}


@pytest.fixture(scope="session")
def uf_evals(uf_runs):
    return {seed: ensure_eval("ufrnn", seed) for seed in SEEDS}


@pytest.fixture(scope="session")
def uf_hold_evals(uf_runs):
    return {seed: ensure_eval("ufrnn", seed, interference="20:60")
            for seed in SEEDS}
