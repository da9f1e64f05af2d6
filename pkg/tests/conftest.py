import pytest
import torch

from blockprune.data import SyntheticSpec, synthetic_generate
from blockprune.netcore import GateMask, build_network, micro_spec

torch.set_num_threads(max(1, torch.get_num_threads()))


def pytest_runtest_logreport(report):
    # one visible pass/fail line per acceptance criterion
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        print(f"\n[acceptance] {name}: {'PASS' if report.passed else 'FAIL'}", flush=True)


@pytest.fixture
def micro():
    spec = micro_spec()
    net = build_network(spec, seed=0)
    return spec, net, GateMask.initial(spec)


@pytest.fixture
def blobs():
    return synthetic_generate(
        SyntheticSpec(num_classes=4, samples_per_class=32, image_size=16, seed=0)
    )
