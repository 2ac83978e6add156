import os

import pytest

from xadmm.reference import CACHE_ENV_VAR


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    """Reference cache shared by the whole session.

    Honors XADMM_CACHE_DIR so repeated local runs skip the expensive
    reference solves; CI environments without it get a session-temporary
    directory.
    """
    preset = os.environ.get(CACHE_ENV_VAR)
    if preset:
        os.makedirs(preset, exist_ok=True)
        return preset
    return str(tmp_path_factory.mktemp("ref-cache"))
