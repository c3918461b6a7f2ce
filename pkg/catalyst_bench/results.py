import json
import logging
import os

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ['method', 'seed', 'epoch', 'objective', 'gap', 'grad_evals', 'diverged']
SUMMARY_COLUMNS = ['method', 'epoch', 'mean_gap', 'std_gap', 'seeds']


def curves_frame(records):
    """
    Build the canonical curve table from CurveRecord dicts.

    Rows are sorted by (method, seed, epoch) so that the output never depends
    on the order in which runs finished.
    """
    frame = pd.DataFrame(list(records), columns=CURVE_COLUMNS)
    frame = frame.astype({'seed': 'int64', 'grad_evals': 'int64', 'diverged': 'bool'})
    return frame.sort_values(['method', 'seed', 'epoch'], kind='mergesort').reset_index(drop=True)


def summarize(curves, expected_seeds=None):
    """
    Mean and population standard deviation of the gap across seeds, per (method, epoch).

    Groups whose seed count differs from expected_seeds (diverged or truncated
    runs) are kept but logged.
    """
    grouped = curves.groupby(['method', 'epoch'], sort=True)['gap']
    summary = grouped.agg(mean_gap='mean', std_gap=lambda g: g.std(ddof=0), seeds='count').reset_index()
    if expected_seeds is not None:
        short = summary[summary['seeds'] != expected_seeds]
        if not short.empty:
            logger.warning(f"{len(short)} summary rows aggregate a seed count different from {expected_seeds}")
    return summary[SUMMARY_COLUMNS]


class ResultsWriter:
    """Writes the curve CSV and the JSON summary of one experiment into out_dir."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        try:
            os.makedirs(out_dir, exist_ok=True)
        except OSError as e:
            logger.error(f"Cannot create output directory {out_dir}: {str(e)}")
            raise

    def write_curves(self, curves, name='curves.csv'):
        path = os.path.join(self.out_dir, name)
        try:
            curves.to_csv(path, index=False, float_format='%.17g', lineterminator='\n')
            logger.info(f"Wrote {len(curves)} curve records to {path}")
            return path
        except OSError as e:
            logger.error(f"Error writing curves to {path}: {str(e)}")
            raise

    def write_summary(self, summary, provenance, runs, name='summary.json'):
        """
        Write {"provenance": ..., "summary": [...], "runs": [...]} as JSON.

        Args:
            summary: Frame with SUMMARY_COLUMNS
            provenance: Dict with the run configuration, seeds, version and F* estimates
            runs: List of {method, seed, diverged, final_gap}
        """
        path = os.path.join(self.out_dir, name)
        payload = {
            'provenance': provenance,
            'summary': summary.to_dict(orient='records'),
            'runs': runs,
        }
        try:
            with open(path, 'w') as handle:
                json.dump(payload, handle, indent=2, sort_keys=True, default=_jsonable)
                handle.write('\n')
            logger.info(f"Wrote summary of {len(summary)} rows to {path}")
            return path
        except OSError as e:
            logger.error(f"Error writing summary to {path}: {str(e)}")
            raise


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def load_curves(path):
    return pd.read_csv(path)
