import os
import time
from pathlib import Path

import pytest

from motionctl import experiments as ex
from motionctl.checkpoint import Checkpoint, load_checkpoint, save_checkpoint

ACCEPTANCE: list = []


def record(criterion: int, ok: bool, detail: str):
    ACCEPTANCE.append((criterion, ok, detail))
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {crit:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


class TrainedPair:
    """The MIM-conditioned and the MIM-less toy models trained on identical data and seeds."""

    def __init__(self, cache: Path | None):
        self.recipe = ex.ToyRecipe()
        self.train_seconds = 0.0
        self.cached = False
        self.models = {}
        paths = {f: cache / f"{f}.mjto" for f in ("token_concat", "none")} if cache else {}
        if paths and all(p.exists() for p in paths.values()):
            for fusion, p in paths.items():
                ck = load_checkpoint(p)
                self.models[fusion] = ck.model
                self.calibration = ck.calibration
            self.cached = True
            return
        t0 = time.perf_counter()
        self.dataset = ex.toy_dataset(self.recipe)
        self.calibration = self.dataset.calibration
        for fusion in ("token_concat", "none"):
            self.models[fusion] = ex.train_toy(fusion, self.recipe, self.dataset)
        self.train_seconds = time.perf_counter() - t0
        if cache:
            cache.mkdir(parents=True, exist_ok=True)
            for fusion, model in self.models.items():
                save_checkpoint(paths[fusion], Checkpoint(model, self.recipe.steps, self.calibration))


@pytest.fixture(scope="session")
def trained_pair():
    cache = os.environ.get("MOTIONCTL_ACCEPTANCE_CACHE")
    return TrainedPair(Path(cache) if cache else None)
