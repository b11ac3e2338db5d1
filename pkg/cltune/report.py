"""Tables derived from the metrics files of an output directory.

Nothing here looks at anything but ``<run>/metrics.jsonl``, and the rows
come out in a fixed order, so a report is a pure function of the metrics.
"""

from csv import DictWriter
from logging import getLogger
from os import fspath, listdir, makedirs, replace
from os.path import isdir, isfile, join
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .errors import CLTuneMismatchError, CLTuneMissingError
from .metrics import MetricsRecord, Phase, read_metrics

__all__ = ('LOSS_FIELDS', 'SUMMARY_FIELDS', 'FORGETTING_FIELDS',
           'collect_runs', 'check_digests', 'loss_rows', 'summary_rows',
           'forgetting_rows', 'write_csv', 'write_report')

logger = getLogger(__name__)

LOSS_FIELDS = ('step', 'strategy', 'source_val_loss', 'target_val_loss')
SUMMARY_FIELDS = ('strategy', 'task', 'train_fraction', 'accuracy',
                  'mi_gap', 'n')
FORGETTING_FIELDS = ('strategy', 'source_first', 'source_last',
                     'source_delta', 'target_first', 'target_last',
                     'target_delta')

Runs = Dict[str, List[MetricsRecord]]
Row = Dict[str, str]


def _cell(value) -> str:
	if value is None:
		return ''
	if isinstance(value, float):
		return repr(value)
	return str(value)


def collect_runs(root) -> Runs:
	"""Metrics of every run directory under ``root``, keyed by name."""
	root = fspath(root)
	names = sorted(listdir(root)) if isdir(root) else []
	runs = {}
	for name in names:
		path = join(root, name, 'metrics.jsonl')
		if isfile(path):
			runs[name] = read_metrics(path)
	if not runs:
		raise CLTuneMissingError('runs', root, 'no runs found')
	return runs


def check_digests(runs: Runs) -> Optional[str]:
	seen: Optional[Tuple[str, str]] = None
	for name, records in runs.items():
		for record in records:
			if seen is None:
				seen = (record.digest, name)
			elif record.digest != seen[0]:
				raise CLTuneMismatchError('config digests differ: {} in {} '
				                          'vs {} in {}'
				                          .format(seen[0], seen[1],
				                                  record.digest, name))
	return seen[0] if seen is not None else None


def loss_rows(runs: Runs) -> List[Row]:
	"""One row per eval event."""
	rows = []
	for records in runs.values():
		for record in records:
			if not record.is_eval:
				continue
			losses = record.eval_losses or {}
			rows.append({'step': _cell(record.step),
			             'strategy': record.strategy,
			             'source_val_loss': _cell(losses.get('source')),
			             'target_val_loss': _cell(losses.get('target'))})
	return rows


def summary_rows(runs: Runs) -> List[Row]:
	"""Probe outcomes; a probe rerun supersedes earlier records of the
	   same strategy, task and fraction."""
	latest: Dict[Tuple[str, str, float], MetricsRecord] = {}
	for records in runs.values():
		for record in records:
			if record.phase is not Phase.PROBE:
				continue
			fraction = record.train_fraction
			key = (record.strategy, record.probe_task or '',
			       fraction if fraction is not None else 1.0)
			latest[key] = record
	rows = []
	for key in sorted(latest):
		record = latest[key]
		rows.append({'strategy': key[0], 'task': key[1],
		             'train_fraction': _cell(record.train_fraction),
		             'accuracy': _cell(record.accuracy),
		             'mi_gap': _cell(record.mi_gap),
		             'n': _cell(record.n_test)})
	return rows


def _first_last(values: Sequence[float]) -> Tuple[str, str, str]:
	if not values:
		return '', '', ''
	return (_cell(values[0]), _cell(values[-1]),
	        _cell(values[-1] - values[0]))


def forgetting_rows(runs: Runs) -> List[Row]:
	"""Change of both validation losses over each domain-tuning run."""
	rows = []
	for records in runs.values():
		evals = [r for r in records
		         if r.is_eval and r.phase is Phase.DOMAIN_TUNE]
		if not evals:
			continue
		row = {'strategy': evals[0].strategy}
		for name in ('source', 'target'):
			values = [r.eval_losses[name] for r in evals
			          if name in (r.eval_losses or {})]
			first, last, delta = _first_last(values)
			row.update({name + '_first': first, name + '_last': last,
			            name + '_delta': delta})
		rows.append(row)
	return rows


def write_csv(path, fields: Sequence[str], rows: Iterable[Row]) -> None:
	path = fspath(path)
	with open(path + '.tmp', 'w', encoding='utf-8', newline='') as file:
		writer = DictWriter(file, fieldnames=fields, lineterminator='\n')
		writer.writeheader()
		for row in rows:
			writer.writerow({k: row.get(k, '') for k in fields})
	replace(path + '.tmp', path)


def write_report(root, out=None) -> List[str]:
	"""Write the loss, summary and forgetting tables; returns their
	   paths."""
	runs = collect_runs(root)
	check_digests(runs)
	out = fspath(out) if out is not None else join(fspath(root), 'report')
	makedirs(out, exist_ok=True)
	tables = (('losses.csv', LOSS_FIELDS, loss_rows(runs)),
	          ('summary.csv', SUMMARY_FIELDS, summary_rows(runs)),
	          ('forgetting.csv', FORGETTING_FIELDS, forgetting_rows(runs)))
	paths = []
	for name, fields, rows in tables:
		path = join(out, name)
		write_csv(path, fields, rows)
		logger.info('wrote %d rows to %s', len(rows), path)
		paths.append(path)
	return paths
