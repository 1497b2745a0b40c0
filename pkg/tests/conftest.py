import shutil
import subprocess
import sys

import numpy as np
import pytest

from kgrec.data import DatasetBundle, SyntheticSpec, make_synthetic_dataset


@pytest.fixture(scope="session")
def synth_bundle():
    """Default clustered dataset, seed 7 (the reference instance)."""
    store, graph, corpus = make_synthetic_dataset(SyntheticSpec(), seed=7)
    return DatasetBundle(store=store, graph=graph, corpus=corpus)


@pytest.fixture(scope="session")
def synth_dir(synth_bundle, tmp_path_factory):
    from kgrec.data import save_bundle

    path = tmp_path_factory.mktemp("dataset")
    save_bundle(synth_bundle, path)
    return path


def run_cli(*args, cwd=None):
    """Invoke the installed console script (module fallback)."""
    exe = shutil.which("kgrec")
    cmd = [exe] if exe else [sys.executable, "-m", "kgrec.cli"]
    return subprocess.run(
        cmd + [str(a) for a in args],
        capture_output=True,
        text=True,
        cwd=cwd,
    )


def rng_of(seed):
    return np.random.default_rng(seed)
