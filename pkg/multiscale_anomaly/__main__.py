import asyncio
import sys

import multiscale_anomaly
from multiscale_anomaly.config import ConfigError
from multiscale_anomaly.dataset import DataError
from multiscale_anomaly.evaluation import EvaluationError


def exit_code(error: Exception) -> int:
    if isinstance(error, ConfigError):
        return 2
    if isinstance(error, DataError):
        return 3
    if isinstance(error, EvaluationError):
        return 4
    return 1


def _run(sub_command: str):
    if sub_command == 'gen-data':
        return multiscale_anomaly.DataGenerator.main()
    if sub_command == 'train':
        return multiscale_anomaly.Trainer.main()
    if sub_command == 'score':
        return multiscale_anomaly.Scorer.main()
    if sub_command == 'eval':
        return multiscale_anomaly.Evaluator.main()
    if sub_command == 'sweep':
        return asyncio.run(multiscale_anomaly.Sweeper.main())
    if sub_command == 'ablate':
        return asyncio.run(multiscale_anomaly.Ablation.main())
    raise ConfigError(f'Unknown command "{sub_command}"')


def main():
    args = sys.argv
    if len(args) < 2:
        print('Usage: multiscale-anomaly '
              '{gen-data,train,score,eval,sweep,ablate} ...')
        sys.exit(2)
    sub_command = args[1]
    del args[1]
    try:
        _run(sub_command)
    except (ConfigError, DataError, EvaluationError) as e:
        print(f'{type(e).__name__}: {e}', file=sys.stderr)
        sys.exit(exit_code(e))


if __name__ == '__main__':
    main()
