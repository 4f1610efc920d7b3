import logging

import numpy as np
import pytest

from fairway.assets import data_path
from fairway.vessel import load_ship_config

# bump when generation changes enough to invalidate cached libraries
_LIB_CACHE_REV = 1


@pytest.fixture(scope="session")
def supply80():
    return load_ship_config(data_path("supply80.json"))


@pytest.fixture(scope="session")
def launch12():
    return load_ship_config(data_path("launch12.json"))


@pytest.fixture()
def rng():
    return np.random.default_rng(20260814)


@pytest.fixture(scope="session")
def supply_library(supply80, request):
    """Full 16-heading primitive library with a 300 m heuristic table.

    Building takes a few minutes of BVP solves, so the result is cached in
    the pytest cache directory keyed by the ship-config hash; subsequent
    runs load the artifact (the loader re-checks the hash).
    """
    from fairway.primitives import (
        LatticeSpec,
        PrimitiveLibrary,
        build_hlut,
        build_primitive_set,
        load_library,
        save_library,
    )

    cache_dir = request.config.cache.mkdir("fairway")
    path = cache_dir / (
        f"supply80-r{_LIB_CACHE_REV}-{supply80.config_hash[:12]}.fwpl"
    )
    if path.exists():
        try:
            return load_library(str(path), supply80)
        except Exception:
            logging.getLogger(__name__).warning("rebuilding stale library")
    spec = LatticeSpec()
    lib = build_primitive_set(supply80, spec)
    hlut = build_hlut(lib, radius=300.0)
    lib = PrimitiveLibrary(spec, supply80.config_hash, lib.primitives, hlut,
                           v_max=supply80.v_max)
    save_library(lib, str(path))
    return lib
