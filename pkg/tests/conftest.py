import pytest

from mpd.harness import DEFAULT_FILES, REGRESSION_KEY


@pytest.fixture
def ftp_root(tmp_path):
    root = tmp_path / "files"
    root.mkdir()
    for name, data in DEFAULT_FILES.items():
        (root / name).write_bytes(data)
    return root


@pytest.fixture
def key():
    return REGRESSION_KEY
