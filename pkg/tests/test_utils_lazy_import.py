import importlib
import sys

import pytest


def test_utils_exports_resolve_lazily(monkeypatch: pytest.MonkeyPatch) -> None:
    for name in ['src.utils', 'src.utils.checkpoint']:
        monkeypatch.delitem(sys.modules, name, raising=False)

    utils = importlib.import_module('src.utils')
    assert 'src.utils.checkpoint' not in sys.modules

    checkpoint = utils.checkpoint

    assert checkpoint is sys.modules['src.utils.checkpoint']
    assert utils.metrics is importlib.import_module('src.utils.metrics')


def test_unknown_utils_attribute_raises() -> None:
    utils = importlib.import_module('src.utils')

    with pytest.raises(AttributeError, match='no attribute'):
        _ = utils.clouddrive
