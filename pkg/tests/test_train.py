import json
from collections import defaultdict
from pathlib import Path

import pytest

from src import agent as agent_module
from src import evaluate, train
from src.core import logger
from src.core.config import RunConfig
from src.core.errors import TrainingError
from src.utils.metrics import audit_cost_rate, read_csv
from tests.conftest import tiny_config


def _costs_by_episode(steps: list[dict[str, str]]) -> dict[int, float]:
    totals: dict[int, float] = defaultdict(float)
    for row in steps:
        totals[int(row['episode'])] += float(row['cost'])
    return totals


def test_train_writes_the_run_files(tiny_cfg: RunConfig, tmp_path: Path) -> None:
    result = train.train(tiny_cfg, tmp_path / 'run', show_progress=False)

    manifest = json.loads((result.run_dir / 'manifest.json').read_text(encoding='utf-8'))
    episodes = read_csv(result.run_dir / 'metrics.csv')
    steps = read_csv(result.run_dir / 'steps.csv')
    assert manifest['seed'] == 0
    assert manifest['mode'] == 'spowl'
    assert manifest['config']['env']['kind'] == 'grid'
    assert len(episodes) == 4
    assert len(steps) == 40
    assert (result.run_dir / 'final.pt').is_file()
    assert result.metrics.episodes == 4
    assert 'finished 40 steps' in (result.run_dir / 'run.log').read_text(encoding='utf-8')


def test_episode_cost_and_cost_rate_match_the_step_log(tiny_cfg: RunConfig, tmp_path: Path) -> None:
    result = train.train(tiny_cfg, tmp_path / 'run', show_progress=False)

    episodes = read_csv(result.run_dir / 'metrics.csv')
    steps = read_csv(result.run_dir / 'steps.csv')
    per_episode = _costs_by_episode(steps)
    for row in episodes:
        assert float(row['episode_cost']) == per_episode[int(row['episode'])]
    audit = audit_cost_rate([float(row['cost']) for row in steps])
    for row in episodes:
        assert float(row['cost_rate']) == pytest.approx(audit[int(row['step']) - 1])


def test_seed_steps_are_random_and_later_steps_are_chosen(tiny_cfg: RunConfig, tmp_path: Path) -> None:
    result = train.train(tiny_cfg, tmp_path / 'run', show_progress=False)

    sources = [row['source'] for row in read_csv(result.run_dir / 'steps.csv')]
    assert set(sources[: tiny_cfg.seed_steps]) == {''}
    assert set(sources[tiny_cfg.seed_steps :]) <= {'plan', 'policy'}
    assert result.agent.updates == tiny_cfg.total_steps - tiny_cfg.seed_steps + 1


def test_identical_seeds_give_identical_logs(tmp_path: Path) -> None:
    cfg = tiny_config(tmp_path)

    first = train.train(cfg, tmp_path / 'a', show_progress=False).run_dir
    second = train.train(cfg, tmp_path / 'b', show_progress=False).run_dir

    for name in ('metrics.csv', 'steps.csv'):
        assert (first / name).read_text(encoding='utf-8') == (second / name).read_text(encoding='utf-8')


def test_policy_only_never_plans(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    def no_planning(*_args, **_kwargs):
        msg = 'planner must not run in policy-only mode'
        raise AssertionError(msg)

    monkeypatch.setattr(agent_module, 'plan', no_planning)
    cfg = tiny_config(tmp_path, {'mode': 'policy-only'})

    result = train.train(cfg, tmp_path / 'run', show_progress=False)

    assert all(float(row['balance']) == 0.0 for row in read_csv(result.run_dir / 'metrics.csv'))


def test_plan_only_always_plans(tmp_path: Path) -> None:
    cfg = tiny_config(tmp_path, {'mode': 'plan-only', 'seed_steps': 0})

    result = train.train(cfg, tmp_path / 'run', show_progress=False)

    assert all(float(row['balance']) == 1.0 for row in read_csv(result.run_dir / 'metrics.csv'))


@pytest.mark.parametrize('mode', ['cce-global', 'cce-local', 'unconstrained'])
def test_baseline_modes_train(tmp_path: Path, mode: str) -> None:
    cfg = tiny_config(tmp_path, {'mode': mode, 'total_steps': 20})

    result = train.train(cfg, tmp_path / 'run', show_progress=False)

    assert result.metrics.total_steps == 20
    if mode == 'unconstrained':
        assert result.agent.lagrangian.step == 0


def test_constrained_training_steps_the_lagrangian(tiny_cfg: RunConfig, tmp_path: Path) -> None:
    result = train.train(tiny_cfg, tmp_path / 'run', show_progress=False)

    assert result.agent.lagrangian.step == result.agent.updates
    assert result.agent.lagrangian.penalty >= 1.0


def test_eval_and_checkpoint_cadence(tmp_path: Path) -> None:
    cfg = tiny_config(tmp_path, {'eval_every': 20, 'checkpoint_every': 20})

    result = train.train(cfg, tmp_path / 'run', show_progress=False)

    assert [row['step'] for row in read_csv(result.run_dir / 'eval.csv')] == ['20', '40']
    assert (result.run_dir / 'step_20.pt').is_file()
    assert (result.run_dir / 'step_40.pt').is_file()


def test_divergence_leaves_a_crash_dump(tiny_cfg: RunConfig, tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    def diverge(self, _segment):
        msg = 'model loss is not finite'
        raise TrainingError(msg, {'update': self.updates})

    monkeypatch.setattr(agent_module.Agent, 'update', diverge)

    with pytest.raises(TrainingError):
        train.train(tiny_cfg, tmp_path / 'run', show_progress=False)

    report = json.loads((tmp_path / 'run' / 'crash.json').read_text(encoding='utf-8'))
    assert report['step'] == tiny_cfg.seed_steps
    assert report['context'] == {'update': 0}
    assert (tmp_path / 'run' / 'crash.pt').is_file()


def test_evaluate_a_saved_checkpoint(tiny_cfg: RunConfig, tmp_path: Path) -> None:
    run_dir = train.train(tiny_cfg, tmp_path / 'run', show_progress=False).run_dir

    summary = evaluate.main(run_dir / 'final.pt', 1)

    assert len(summary.episodes) == 1
    assert summary.episodes[0].record.length == tiny_cfg.env.grid_episode_length
    assert summary.episode_cost.std == 0.0


def test_evaluation_restores_the_warm_start(tiny_cfg: RunConfig, tmp_path: Path) -> None:
    agent = train.train(tiny_cfg, tmp_path / 'run', show_progress=False).agent
    before = agent.warm_start.clone()

    evaluate.evaluate_agent(agent, tiny_cfg.env, 2)

    assert agent.warm_start.equal(before)


def test_zero_action_baseline_stays_on_the_start_cell(tiny_cfg: RunConfig) -> None:
    summary = evaluate.zero_action_baseline(tiny_cfg.env, 2)

    assert summary.episode_return.mean == 0.0
    assert summary.episode_cost.mean == 0.0
    assert summary.balance.mean == 0.0


def test_episode_seeds_do_not_collide() -> None:
    training = {evaluate.episode_seed(seed, i) for seed in range(3) for i in range(100)}
    evaluation = {evaluate.episode_seed(seed, i, evaluation=True) for seed in range(3) for i in range(100)}

    assert len(training) == 300
    assert not training & evaluation


def test_main_applies_cli_overrides(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    config_path = tmp_path / 'config.toml'
    config_path.write_text(f'run_dir = "{(tmp_path / "runs").as_posix()}"\n', encoding='utf-8')
    seen: list[RunConfig] = []

    def fake_train(cfg: RunConfig) -> train.TrainResult:
        seen.append(cfg)
        return train.TrainResult(tmp_path / 'runs' / 'x', None, None)

    monkeypatch.setattr(train, 'train', fake_train)

    run_dir = train.main(config_path, seed=5, mode='cce-local')

    assert run_dir == tmp_path / 'runs' / 'x'
    assert (seen[0].seed, seen[0].mode) == (5, 'cce-local')


def test_dated_log_follows_the_configured_log_dir(tiny_cfg: RunConfig, tmp_path: Path) -> None:
    train.train(tiny_cfg, tmp_path / 'run', show_progress=False)

    dated = logger.dated_log_path()
    assert dated is not None
    assert dated.parent == tiny_cfg.log_dir
    assert 'finished 40 steps' in dated.read_text(encoding='utf-8')


def test_training_twice_into_one_directory_starts_fresh(tmp_path: Path) -> None:
    cfg = tiny_config(tmp_path, {'checkpoint_every': 20})
    run_dir = tmp_path / 'run'
    train.train(cfg, run_dir, show_progress=False)
    first_metrics = (run_dir / 'metrics.csv').read_text(encoding='utf-8')

    train.train(cfg.with_overrides({'checkpoint_every': 0}), run_dir, show_progress=False)

    assert len(read_csv(run_dir / 'steps.csv')) == 40
    assert (run_dir / 'metrics.csv').read_text(encoding='utf-8') == first_metrics
    assert not (run_dir / 'step_20.pt').exists()
    assert (run_dir / 'run.log').read_text(encoding='utf-8').count('finished 40 steps') == 1


def test_planner_diagnostics_are_logged(tiny_cfg: RunConfig, tmp_path: Path) -> None:
    result = train.train(tiny_cfg, tmp_path / 'run', show_progress=False)

    steps = read_csv(result.run_dir / 'steps.csv')
    seeded, chosen = steps[: tiny_cfg.seed_steps], steps[tiny_cfg.seed_steps :]
    assert all(row['plan_value'] == '' and row['fallback'] == '' for row in seeded)
    assert all(row['plan_cost'] != '' and row['threshold_cost'] != '' for row in chosen)
    assert {row['fallback'] for row in chosen} <= {'True', 'False'}
    last = read_csv(result.run_dir / 'metrics.csv')[-1]
    assert 0.0 <= float(last['fallback_rate']) <= 1.0


def test_fixed_threshold_modes_log_no_adaptive_thresholds(tmp_path: Path) -> None:
    cfg = tiny_config(tmp_path, {'mode': 'cce-local', 'total_steps': 20})

    result = train.train(cfg, tmp_path / 'run', show_progress=False)

    chosen = read_csv(result.run_dir / 'steps.csv')[cfg.seed_steps :]
    assert all(row['plan_cost'] != '' and row['threshold_value'] == '' for row in chosen)
