import numpy as np
import pytest

from icasvm.phantom import PhantomSpec, generate
from icasvm.volume import write_mask, write_volume


def write_cases(directory, seeds, **spec_kw):
    """Write phantom cases as DVOL files; return config ``cases`` entries."""
    cases = []
    for s in seeds:
        vol, truth, _ = generate(PhantomSpec(seed=int(s), **spec_kw))
        cid = f"c{s:03d}"
        write_volume(directory / cid, vol)
        write_mask(directory / f"{cid}_truth", truth)
        cases.append({"id": cid, "volume": cid, "truth": f"{cid}_truth"})
    return cases


@pytest.fixture(scope="session")
def small_cases(tmp_path_factory):
    d = tmp_path_factory.mktemp("cases")
    return d, write_cases(d, [10, 11, 12, 13])


def small_config(directory, cases, **kw):
    cfg = dict(cases=cases, base_dir=str(directory), n_benign_samples=1000, cv_folds=3,
               ica={"method": "ica", "p": 3, "seed": 0}, h_values=[1, 2, 3],
               svm={"kernels": [{"kind": "rbf", "gamma": "scale"}], "C": [1.0]},
               froc_points=50)
    cfg.update(kw)
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(0)
