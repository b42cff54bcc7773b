import pytest

from radioloc.dataset import Scenario, build_rss_dataset, build_toa_dataset, simulate_all
from radioloc.scenes import desk_config, generate_scene_set


@pytest.fixture(scope="session")
def small_cfg():
    return desk_config(seed=3, n_maps=4, n_deployments=3, n_ue=10)


@pytest.fixture(scope="session")
def small_scenes(small_cfg):
    return generate_scene_set(small_cfg)


@pytest.fixture(scope="session")
def small_products(small_scenes):
    return simulate_all(small_scenes)


@pytest.fixture(scope="session")
def rss_nominal(small_scenes, small_products):
    return build_rss_dataset(small_scenes, Scenario.NOMINAL, products=small_products, seed=0)


@pytest.fixture(scope="session")
def rss_robust(rss_nominal):
    return rss_nominal.with_scenario(Scenario.ROBUSTNESS)


@pytest.fixture(scope="session")
def toa_clean(small_scenes, small_products):
    return build_toa_dataset(small_scenes, products=small_products, seed=0)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
