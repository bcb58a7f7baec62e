import pytest

from fairfal.config import config_from_dict


TINY = {
    "data": {"num_classes": 4, "per_class": 40, "test_per_class": 10, "dim": 6, "separation": 4.0},
    "partition": {"num_clients": 3, "alpha": 1.0, "rho": 4.0},
    "model": {"hidden": 8},
    "training": {"comm_rounds": 3, "local_epochs": 1, "local_model_epochs": 4, "lr": 0.05,
                 "batch_size": 16, "lr_decay_round": 2},
    "al_cycles": 4,
    "seeds": [1, 2],
}


@pytest.fixture
def tiny_dict():
    import copy

    return copy.deepcopy(TINY)


@pytest.fixture
def tiny_cfg(tiny_dict):
    return config_from_dict(tiny_dict)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """``acceptance(label, ok, detail)`` records one criterion line for the summary."""
    log = request.config.stash[_ACCEPTANCE]

    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        log.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
