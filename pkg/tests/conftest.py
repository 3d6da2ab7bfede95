import pytest
import torch

from polardeblur.dataset import build_dataset, load_dataset_config

TINY = {
    "scenes_train": "2",
    "scenes_test": "1",
    "traj_per_scene_train": "2",
    "traj_per_scene_test": "1",
    "crop_train": "64",
    "crop_test": "64",
    "scene_margin": "8",
    "latent_frames": "9",
    "traj.max_extent": "4",
}


@pytest.fixture(scope="session")
def tiny_overrides():
    return dict(TINY)


@pytest.fixture(scope="session")
def tiny_cfg():
    return load_dataset_config(overrides=TINY)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_cfg):
    root = tmp_path_factory.mktemp("tiny_ds")
    build_dataset(tiny_cfg, root)
    return root


@pytest.fixture(autouse=True)
def _restore_determinism():
    # train() switches deterministic algorithms on; keep tests independent
    yield
    torch.use_deterministic_algorithms(False)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
