import os
import shutil
import tempfile

import pytest

from sharkle.pool import PoolConfig, create_pool


def _mem_dir():
    return "/dev/shm" if os.path.isdir("/dev/shm") and os.access("/dev/shm", os.W_OK) else None


@pytest.fixture
def shm_dir():
    d = tempfile.mkdtemp(prefix="sharkle-test-", dir=_mem_dir())
    yield d
    shutil.rmtree(d, ignore_errors=True)


@pytest.fixture
def make_pool(shm_dir):
    handles = []

    def make(name="pool", **kw):
        kw.setdefault("zone_count", 16)
        kw.setdefault("zone_size", 1 << 20)
        h = create_pool(PoolConfig(os.path.join(shm_dir, name), **kw))
        handles.append(h)
        return h

    yield make
    for h in handles:
        h.close()


@pytest.fixture
def pool(make_pool):
    return make_pool()
