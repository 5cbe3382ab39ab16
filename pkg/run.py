import sys
from pathlib import Path

from tap import Tap

from src import ablate, evaluate, oracle_check, train
from src.core.config import RunMode
from src.core.errors import SpowlError

COMMANDS = ('train', 'eval', 'ablate', 'oracle-check')


class Args(Tap):
    command: str
    command_args: list[str]

    def configure(self) -> None:
        self.add_argument('command', choices=COMMANDS)
        self.add_argument('command_args', nargs='...')


class TrainArgs(Tap):
    config: Path | None = None
    seed: int | None = None
    mode: str | None = None

    def configure(self) -> None:
        self.add_argument('-c', '--config', type=Path, default=None, help='run config TOML (default: config.toml)')
        self.add_argument('-s', '--seed', type=int, default=None, help='override the run seed')
        self.add_argument('-m', '--mode', type=str, default=None, choices=[m.value for m in RunMode], help='override the run mode')


class EvalArgs(Tap):
    checkpoint: Path
    episodes: int = 10

    def configure(self) -> None:
        self.add_argument('--checkpoint', type=Path, required=True, help='checkpoint file written by train')
        self.add_argument('-n', '--episodes', type=int, help='number of evaluation episodes')


class AblateArgs(Tap):
    grid: Path

    def configure(self) -> None:
        self.add_argument('--grid', type=Path, required=True, help='ablation grid TOML')


def main() -> None:
    parser = Args()
    args = parser.parse_args()
    command_args = args.command_args or []
    try:
        if args.command == 'train':
            train_args = TrainArgs().parse_args(command_args)
            train.main(train_args.config, seed=train_args.seed, mode=train_args.mode)
        elif args.command == 'eval':
            eval_args = EvalArgs().parse_args(command_args)
            evaluate.main(eval_args.checkpoint, eval_args.episodes)
        elif args.command == 'ablate':
            ablate_args = AblateArgs().parse_args(command_args)
            ablate.main(ablate_args.grid)
        elif args.command == 'oracle-check':
            if command_args:
                parser.error('oracle-check does not accept arguments')
            if not oracle_check.main():
                sys.exit(1)
        else:
            parser.error(f'Unknown command: {args.command}')
    except SpowlError as exc:
        parser.exit(2, f'error: {exc}\n')


if __name__ == '__main__':
    main()
