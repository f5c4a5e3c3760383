#!/usr/bin/env python3
import argparse
import logging
import math
import pathlib
from typing import Dict
from typing import Iterable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import rankdata

from multiscale_anomaly.utils import init_logging

logger = logging.getLogger('eval')


class EvaluationError(Exception):
    pass


def _as_arrays(scores: Sequence[float],
               labels: Sequence[bool]) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise EvaluationError(f'{len(scores)} scores for {len(labels)} labels')
    positives = int(labels.sum())
    if positives == 0 or positives == len(labels):
        raise EvaluationError(
            f'Both classes are needed, got {positives} anomalous and '
            f'{len(labels) - positives} normal')
    return scores, labels


def auroc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """The probability that an anomaly outscores a normal one, ties as 1/2.

    Computed from the rank sum of the anomalous scores."""
    scores, labels = _as_arrays(scores, labels)
    positives = int(labels.sum())
    negatives = len(labels) - positives
    ranks = rankdata(scores)
    u = ranks[labels].sum() - positives * (positives + 1) / 2.0
    return float(u / (positives * negatives))


def roc_curve(scores: Sequence[float],
              labels: Sequence[bool]) -> Tuple[np.ndarray, np.ndarray]:
    """False and true positive rates, from (0, 0) to (1, 1).

    One point per distinct score, predicting anomalous for `z >= score`."""
    scores, labels = _as_arrays(scores, labels)
    order = np.argsort(-scores, kind='mergesort')
    scores = scores[order]
    labels = labels[order]
    last_of_run = np.r_[np.diff(scores) != 0, True]
    tp = np.cumsum(labels)[last_of_run]
    fp = np.cumsum(~labels)[last_of_run]
    tpr = np.r_[0.0, tp / tp[-1]]
    fpr = np.r_[0.0, fp / fp[-1]]
    return fpr, tpr


def trapezoidal_auroc(scores: Sequence[float],
                      labels: Sequence[bool]) -> float:
    fpr, tpr = roc_curve(scores, labels)
    return float(trapezoid(tpr, fpr))


def threshold_candidates(scores: Sequence[float]) -> np.ndarray:
    """Midpoints between consecutive distinct scores, plus -inf and +inf."""
    distinct = np.unique(np.asarray(scores, dtype=np.float64))
    midpoints = (distinct[:-1] + distinct[1:]) / 2.0
    return np.r_[-np.inf, midpoints, np.inf]


def youden_j(scores: np.ndarray, labels: np.ndarray,
             threshold: float) -> float:
    predicted = scores > threshold
    sensitivity = (predicted & labels).sum() / labels.sum()
    specificity = (~predicted & ~labels).sum() / (~labels).sum()
    return float(sensitivity + specificity - 1.0)


def optimal_threshold(scores: Sequence[float],
                      labels: Sequence[bool]) -> Tuple[float, float]:
    """The threshold maximizing Youden's J, and J.

    Ties go to the larger threshold."""
    scores, labels = _as_arrays(scores, labels)
    candidates = threshold_candidates(scores)
    positives = np.sort(scores[labels])
    negatives = np.sort(scores[~labels])
    tp = len(positives) - np.searchsorted(positives, candidates, 'right')
    fp = len(negatives) - np.searchsorted(negatives, candidates, 'right')
    j = tp / len(positives) + (len(negatives) - fp) / len(negatives) - 1.0
    # Last index of the maximum, hence the largest threshold.
    best = len(j) - 1 - int(np.argmax(j[::-1]))
    return float(candidates[best]), float(j[best])


def _f1(tp: int, fp: int, fn: int, name: str) -> float:
    denominator = 2 * tp + fp + fn
    if denominator == 0:
        logger.warning('F1 of "%s" has no predicted and no true members; '
                       'defined as 0', name)
        return 0.0
    return 2.0 * tp / denominator


class EvalReport(object):

    def __init__(self,
                 auroc: float,
                 threshold: float,
                 tp: int,
                 fp: int,
                 tn: int,
                 fn: int,
                 youden_j: float = math.nan):
        self.auroc = auroc
        self.threshold = threshold
        self.youden_j = youden_j
        self.tp = tp
        self.fp = fp
        self.tn = tn
        self.fn = fn

    def __eq__(self, other):
        if not isinstance(other, EvalReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __str__(self):
        return (f'AUROC={self.auroc:.4f} accuracy={self.accuracy:.4f} '
                f'F1-macro={self.f1_macro:.4f} '
                f'threshold={self.threshold:.6g}')

    @property
    def count(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.count

    @property
    def f1_anomalous(self) -> float:
        return _f1(self.tp, self.fp, self.fn, 'anomalous')

    @property
    def f1_normal(self) -> float:
        return _f1(self.tn, self.fn, self.fp, 'normal')

    @property
    def f1_macro(self) -> float:
        return (self.f1_anomalous + self.f1_normal) / 2.0

    _int_keys = ('tp', 'fp', 'tn', 'fn')
    _float_keys = ('auroc', 'threshold', 'youden_j')

    def to_dict(self) -> Dict[str, Union[int, float]]:
        values = {key: getattr(self, key) for key in self._float_keys}
        values.update({key: getattr(self, key) for key in self._int_keys})
        values['accuracy'] = self.accuracy
        values['f1_macro'] = self.f1_macro
        values['count'] = self.count
        return values

    def format_lines(self, prefix: str = '') -> Iterable[str]:
        for key, value in sorted(self.to_dict().items()):
            yield f'{prefix}{key}={value!r}'

    @staticmethod
    def parse(values: Dict[str, str], prefix: str = '') -> 'EvalReport':
        try:
            return EvalReport(
                **{
                    key: float(values[prefix + key])
                    for key in EvalReport._float_keys
                }, **{
                    key: int(values[prefix + key])
                    for key in EvalReport._int_keys
                })
        except KeyError as e:
            raise EvaluationError(f'Report is missing {e}') from None


def classify_and_report(scores: Sequence[float],
                        labels: Sequence[bool],
                        threshold: float,
                        auroc_value: float = math.nan,
                        youden: float = math.nan) -> EvalReport:
    """Predicts anomalous iff `z > threshold` and counts the outcomes."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    predicted = scores > threshold
    return EvalReport(auroc_value,
                      threshold,
                      tp=int((predicted & labels).sum()),
                      fp=int((predicted & ~labels).sum()),
                      tn=int((~predicted & ~labels).sum()),
                      fn=int((~predicted & labels).sum()),
                      youden_j=youden)


def evaluate(scores: Sequence[float], labels: Sequence[bool]) -> EvalReport:
    """AUROC, then the optimal threshold, then accuracy and F1 at it."""
    auroc_value = auroc(scores, labels)
    threshold, j = optimal_threshold(scores, labels)
    report = classify_and_report(scores, labels, threshold, auroc_value, j)
    logger.info('%s', report)
    return report


class Evaluator(object):
    """Evaluates a score file at the instance and block levels."""

    def __init__(self, levels: Sequence[str] = ('instance', 'block')):
        self.levels = tuple(levels)

    def evaluate_records(self, records) -> Dict[str, EvalReport]:
        reports = {}
        for level in self.levels:
            scores = [r.z for r in records if r.level == level and r.is_labeled]
            labels = [
                r.is_anomalous for r in records
                if r.level == level and r.is_labeled
            ]
            try:
                reports[level] = evaluate(scores, labels)
            except EvaluationError as e:
                raise EvaluationError(f'{level}: {e}') from None
        return reports

    @staticmethod
    def save(reports: Dict[str, EvalReport],
             path: Union[pathlib.Path, str]) -> pathlib.Path:
        path = pathlib.Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open('w') as file:
            for level, report in reports.items():
                for line in report.format_lines(f'{level}.'):
                    file.write(line + '\n')
        return path

    @staticmethod
    def load(path: Union[pathlib.Path, str]) -> Dict[str, EvalReport]:
        path = pathlib.Path(path)
        values = {}
        for line in path.read_text().splitlines():
            key, sep, value = line.partition('=')
            if sep:
                values[key.strip()] = value.strip()
        levels = sorted({key.split('.', 1)[0] for key in values})
        return {
            level: EvalReport.parse(values, f'{level}.')
            for level in levels
        }

    @staticmethod
    def main(argv: Optional[List[str]] = None):
        # Imported here; scoring imports this module.
        from multiscale_anomaly.scoring import load_scores

        parser = argparse.ArgumentParser(prog='eval')
        parser.add_argument('scores', type=pathlib.Path, help='score file')
        parser.add_argument('-l',
                            '--level',
                            action='append',
                            choices=['instance', 'block'],
                            help='levels to evaluate, default both')
        parser.add_argument('-o',
                            '--output',
                            type=pathlib.Path,
                            help='report file')
        parser.add_argument('-v',
                            '--verbose',
                            help='increase output verbosity',
                            action='count',
                            default=0)
        args = parser.parse_args(argv)
        init_logging(args.verbose, main=logger)
        evaluator = Evaluator(args.level or ('instance', 'block'))
        reports = evaluator.evaluate_records(load_scores(args.scores))
        output = args.output or args.scores.with_name('eval.txt')
        Evaluator.save(reports, output)
        for level, report in reports.items():
            print(f'{level}: {report}')
        return reports


if __name__ == '__main__':
    Evaluator.main()
