import numpy as np
import pytest

from hierwave.geometry import DomainSpec, SigmaPartition
from hierwave.grid import Field, Mesh, Trace
from hierwave.coupled import FollowerConfig


@pytest.fixture(scope="session")
def mesh41():
    return Mesh.auto(DomainSpec(k=0.1, T=4.0), Ny=41)


@pytest.fixture(scope="session")
def overlap41(mesh41):
    return SigmaPartition.overlap(mesh41.Nt + 1)


@pytest.fixture(scope="session")
def utilde41(mesh41):
    Y, T = np.meshgrid(mesh41.y, mesh41.times, indexing="ij")
    return Field(0.3 * np.sin(np.pi * Y) * np.sin(T), mesh41)


@pytest.fixture(scope="session")
def cfg41(mesh41, overlap41, utilde41):
    return FollowerConfig(sigma=1.0, partition=overlap41, u_tilde2=utilde41)


@pytest.fixture(scope="session")
def cfg41_plain(mesh41, overlap41):
    """No tracked trajectory: the follower only penalizes its own effort."""
    return FollowerConfig(sigma=1.0, partition=overlap41)


@pytest.fixture(scope="session")
def w1_smooth(mesh41, overlap41):
    t = mesh41.times
    vals = np.sin(2 * np.pi * t / mesh41.domain.T) * np.exp(-0.5 * ((t - 2.0) / 0.8) ** 2)
    return Trace(vals, overlap41.mask1, mesh41)
