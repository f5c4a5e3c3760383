#!/usr/bin/env python3
"""Runs the full model and its ablations over several seeds."""
import argparse
import asyncio
import concurrent.futures
import logging
import pathlib
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence

import pandas as pd

from multiscale_anomaly.config import Config
from multiscale_anomaly.dataset import SYNTHETIC_DIMENSION
from multiscale_anomaly.dataset import DataGenerator
from multiscale_anomaly.dataset import config_from_args
from multiscale_anomaly.dataset import prepare_protocol
from multiscale_anomaly.scoring import Scorer
from multiscale_anomaly.scoring import ScoreRecord
from multiscale_anomaly.scoring import level_auroc
from multiscale_anomaly.trainer import Trainer
from multiscale_anomaly.utils import init_logging
from multiscale_anomaly.utils import run_coros

logger = logging.getLogger('ablate')

# Variant name and the config values it changes. "no_blockloss" only changes
# scoring, so it re-scores the full model instead of training again.
VARIANTS = (
    ('full', {}),
    ('no_noise', {'no_noise': True}),
    ('no_relrep', {'no_relrep': True}),
    ('no_blockloss', {'no_blockloss': True}),
)


def _aurocs(records: Sequence[ScoreRecord]) -> Dict[str, float]:
    return {
        'instance_auroc': level_auroc(records, 'instance'),
        'block_auroc': level_auroc(records, 'block'),
    }


def run_seed(config: Config,
             seed: int,
             variants: Sequence[str] = tuple(v for v, _ in VARIANTS)
             ) -> List[Dict[str, object]]:
    """Generates, trains and scores every variant on one seed."""
    config = config.with_seed(seed)
    instances = DataGenerator(config).generate()
    config = config.with_values(
        dimension=config.dimension or SYNTHETIC_DIMENSION,
        attribute_count=instances[0].attribute_count)
    train, test, _ = prepare_protocol(instances, config)
    overrides = dict(VARIANTS)
    rows = []
    full_scorer = None
    for variant in variants:
        variant_config = config.with_values(**overrides[variant])
        if variant == 'no_blockloss' and full_scorer is not None:
            scorer = Scorer(full_scorer.model, full_scorer.initial_memory,
                            variant_config, full_scorer.statistics)
        else:
            trainer = Trainer(variant_config)
            trainer.train_stream(train)
            scorer = Scorer(trainer.model, trainer.memory,
                            statistics=trainer.statistics)
            if variant == 'full':
                full_scorer = scorer
        row = {'variant': variant, 'seed': seed}
        row.update(_aurocs(scorer.score_stream(test)))
        logger.info('%s', row)
        rows.append(row)
    return rows


def summarize(runs: pd.DataFrame) -> pd.DataFrame:
    """Median AUROC per variant and its difference from the full model."""
    summary = runs.groupby('variant', sort=False)[[
        'instance_auroc', 'block_auroc'
    ]].median()
    if 'full' in summary.index:
        full = summary.loc['full']
        summary['instance_delta'] = summary['instance_auroc'] - full[
            'instance_auroc']
        summary['block_delta'] = summary['block_auroc'] - full['block_auroc']
    return summary.reset_index()


class Ablation(object):

    def __init__(self, config: Config, seeds: Sequence[int]):
        self.config = config
        self.seeds = tuple(seeds)

    async def run(self, jobs: int = 1) -> pd.DataFrame:
        """Seeds run in separate processes when `jobs` > 1."""
        if jobs <= 1:
            rows = [run_seed(self.config, seed) for seed in self.seeds]
        else:
            loop = asyncio.get_running_loop()
            with concurrent.futures.ProcessPoolExecutor(jobs) as executor:
                coros = (loop.run_in_executor(executor, run_seed, self.config,
                                              seed) for seed in self.seeds)
                rows = await run_coros(coros)
        return pd.DataFrame([row for seed_rows in rows for row in seed_rows],
                            columns=[
                                'variant', 'seed', 'instance_auroc',
                                'block_auroc'
                            ])

    @staticmethod
    async def main(argv: Optional[List[str]] = None):
        parser = argparse.ArgumentParser(prog='ablate')
        parser.add_argument('-c', '--config', help='config file')
        parser.add_argument('-o',
                            '--output',
                            type=pathlib.Path,
                            help='output directory')
        parser.add_argument('-n',
                            '--seeds',
                            type=int,
                            default=5,
                            help='number of seeds, starting at --seed')
        parser.add_argument('--seed', type=int)
        parser.add_argument('-j',
                            '--jobs',
                            type=int,
                            default=1,
                            help='number of parallel processes')
        parser.add_argument('--smoke',
                            action='store_true',
                            help='use small sizes for a quick run')
        parser.add_argument('--set',
                            action='append',
                            default=[],
                            help='override a config value, "key=value"')
        parser.add_argument('-v',
                            '--verbose',
                            help='increase output verbosity',
                            action='count',
                            default=0)
        args = parser.parse_args(argv)
        init_logging(args.verbose, main=logger)
        base = Config.default.for_smoke_testing() if args.smoke else None
        config = config_from_args(args, base=base)
        seeds = range(config.seed, config.seed + args.seeds)
        runs = await Ablation(config, seeds).run(args.jobs)
        summary = summarize(runs)
        output = pathlib.Path(config.output)
        output.mkdir(parents=True, exist_ok=True)
        runs.to_csv(output / 'ablation_runs.csv', index=False)
        summary.to_csv(output / 'ablation.csv', index=False)
        config.save(output)
        print(summary.to_string(index=False))
        return summary


if __name__ == '__main__':
    asyncio.run(Ablation.main())
