from pathlib import Path

import pytest

from src import ablate
from src.core.errors import ConfigurationError
from src.utils.metrics import read_csv
from tests.conftest import tiny_config

GRID = """
base = "base.toml"
seeds = [0, 1]

[[runs]]
name = "global"
mode = "cce-global"
planner.d_plan = 1.0

[[runs]]
name = "local"
mode = "cce-local"

[runs.planner]
d_plan = 2.0
"""


def test_flatten_nested_tables() -> None:
    assert ablate.flatten({'a': 1, 'b': {'c': 2, 'd': {'e': 3}}}) == {'a': 1, 'b.c': 2, 'b.d.e': 3}


def test_load_grid_resolves_the_base_config(tmp_path: Path) -> None:
    (tmp_path / 'base.toml').write_text('seed = 3\n[model]\nhorizon = 1\n', encoding='utf-8')
    path = tmp_path / 'grid.toml'
    path.write_text(GRID, encoding='utf-8')

    grid, base = ablate.load_grid(path)

    assert grid.seeds == [0, 1]
    assert [run.name for run in grid.runs] == ['global', 'local']
    assert grid.runs[0].overrides == {'mode': 'cce-global', 'planner.d_plan': 1.0}
    assert grid.runs[1].overrides == {'mode': 'cce-local', 'planner.d_plan': 2.0}
    assert base.model.horizon == 1


@pytest.mark.parametrize(
    'data',
    [
        {'runs': []},
        {'runs': [{'name': 'a'}, {'name': 'a'}]},
        {'runs': [{'mode': 'spowl'}]},
        {'seeds': [], 'runs': [{'name': 'a'}]},
        {'runs': [{'name': 'a'}], 'extra': 1},
    ],
)
def test_invalid_grids(data: dict) -> None:
    with pytest.raises(ConfigurationError):
        ablate.parse_grid(data)


def test_missing_grid_file(tmp_path: Path) -> None:
    with pytest.raises(ConfigurationError, match='not found'):
        ablate.load_grid(tmp_path / 'absent.toml')


def test_run_grid_trains_every_run_and_seed(tmp_path: Path) -> None:
    base = tiny_config(tmp_path, {'total_steps': 20})
    grid = ablate.parse_grid({'seeds': [0, 1], 'runs': [{'name': 'spowl'}, {'name': 'policy', 'mode': 'policy-only'}]})
    out_dir = tmp_path / 'ablation'

    rows = ablate.run_grid(grid, base, out_dir)
    table = ablate.summary_rows(rows)

    assert len(rows) == 4
    assert len(read_csv(out_dir / 'ablation.csv')) == 4
    assert (out_dir / 'policy' / 'seed-1' / 'final.pt').is_file()
    assert [entry['name'] for entry in table] == ['spowl', 'policy']
    assert all(entry['seeds'] == 2 for entry in table)
    policy_entry = table[1]
    assert policy_entry['balance_mean'] == 0.0
