"""Shared fixtures: attestation root material and boundary spawning."""

import pytest

from cardiogrid.enclave import BoundaryProcess, EnclaveConfig, OverheadModel, PipelineConfig
from cardiogrid.secure import generate_attestation_root


@pytest.fixture(scope="session")
def attestation_root(tmp_path_factory):
    """(private_key_path, public_key_bytes) for the simulated root."""
    priv, pub = generate_attestation_root()
    key_dir = tmp_path_factory.mktemp("attestation")
    priv_path = key_dir / "root_key.hex"
    priv_path.write_text(priv.hex())
    pub_path = key_dir / "root_pub.hex"
    pub_path.write_text(pub.hex())
    return priv_path, pub, pub_path


@pytest.fixture(scope="session")
def pipeline():
    return PipelineConfig()


@pytest.fixture
def boundary_factory(attestation_root):
    """Spawn boundaries that are reliably torn down at test end."""
    root_key_path, _, _ = attestation_root
    spawned = []

    def factory(pipeline=None, overhead=None):
        proc = BoundaryProcess(EnclaveConfig(
            pipeline=pipeline or PipelineConfig(),
            overhead=overhead or OverheadModel(),
            root_key_path=str(root_key_path)))
        spawned.append(proc)
        return proc

    yield factory
    for proc in spawned:
        proc.terminate()
