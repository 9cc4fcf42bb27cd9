import numpy as np
import pytest

from funnel.model import FunnelConfig, ModelParams, PatientRecord, possible_pathways
from funnel.simulate import SimulationSpec, simulate_accepted


@pytest.fixture(scope="session")
def config():
    return FunnelConfig.staged([3, 3, 0], observation_stage=2)


@pytest.fixture(scope="session")
def small_sim():
    """A validated 2000-patient synthetic dataset with its ground truth."""
    spec = SimulationSpec(n_patients=2000, seed=3)
    truth, data, counts, _ = simulate_accepted(spec)
    return spec, truth, data


def random_params(rng, config, t_scale=0.5):
    K = config.n_stages
    d = config.n_features
    t = np.sort(rng.uniform(0.02, 0.95, K - 1))
    t[0] = min(t[0], 0.5 * rng.uniform(0.1, 1.0))
    t = np.maximum.accumulate(t + np.arange(K - 1) * 1e-3)
    return ModelParams(rng.normal(0, 1), rng.normal(0, 1, d), t, rng.uniform(0.2, 2.0, K - 1))


def random_records(rng, config, n):
    """Records covering every pathway, with y observed whenever required."""
    K = config.n_stages
    paths = possible_pathways(K)
    first = config.first_stage_of_feature
    out = []
    for i in range(n):
        path = paths[rng.integers(len(paths))]
        deepest = 1
        for c in path:
            if c == 0:
                break
            deepest = c
        x = rng.normal(size=config.n_features)
        x[first > deepest] = np.nan
        y = int(rng.integers(2)) if deepest >= config.observation_stage else None
        out.append(PatientRecord(x, path, y, visit_id=str(i)))
    return out


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    """Store and print a criterion verdict; the terminal summary repeats them in order."""
    line = f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
