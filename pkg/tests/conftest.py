import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# filled by tests/test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class ToySweep:
    """Lazily trained, cached toy runs shared by the multi-seed tests.

    ``seconds`` accumulates wall time per key so a test can time exactly the
    runs it needed, even when another test trained some of them first.
    """

    SEEDS = range(10)
    NOISE = 0.3

    def __init__(self):
        self._experiments = {}
        self._reports = {}
        self.seconds = {}

    def config(self, seed, noisy=False, **overrides):
        from gracekit.harness.train import RunConfig

        return RunConfig(seed=seed, epochs=10, noise_fraction=self.NOISE if noisy else 0.0, **overrides)

    def experiment(self, cfg):
        import time

        from gracekit.harness.train import Experiment

        key = (cfg.seed, cfg.noise_fraction)
        if key not in self._experiments:
            t0 = time.perf_counter()
            self._experiments[key] = Experiment.build(cfg)
            self.seconds[("exp",) + key] = time.perf_counter() - t0
        return self._experiments[key]

    def run(self, seed, variant, noisy=False, **overrides):
        import time

        from gracekit.harness.train import train

        key = (seed, variant, noisy, tuple(sorted(overrides.items())))
        if key not in self._reports:
            cfg = self.config(seed, noisy, **overrides)
            exp = self.experiment(cfg)
            t0 = time.perf_counter()
            self._reports[key] = train(cfg, variant, exp)
            self.seconds[key] = time.perf_counter() - t0
        return self._reports[key]

    def cost(self, seed, variants, noisy=False):
        exp_key = ("exp", seed, self.NOISE if noisy else 0.0)
        return self.seconds.get(exp_key, 0.0) + sum(self.seconds[(seed, v, noisy, ())] for v in variants)


_SWEEP = ToySweep()


@pytest.fixture(scope="session")
def toy_sweep():
    return _SWEEP
