import pytest

from jghm import enumerate_joint
from jghm.presets import (
    diffusion_model,
    micro_model,
    reference_model,
    zsc_reference_model,
)


@pytest.fixture(scope="session")
def ref_model():
    return reference_model()


@pytest.fixture(scope="session")
def ref_table(ref_model):
    return enumerate_joint(ref_model)


@pytest.fixture(scope="session")
def zsc_model():
    return zsc_reference_model()


@pytest.fixture(scope="session")
def zsc_table(zsc_model):
    return enumerate_joint(zsc_model)


@pytest.fixture(scope="session")
def perm_model():
    return reference_model(p_flip=0.0)


@pytest.fixture(scope="session")
def perm_table(perm_model):
    return enumerate_joint(perm_model)


@pytest.fixture(scope="session")
def micro():
    return micro_model()


@pytest.fixture(scope="session")
def diff_model():
    return diffusion_model()
