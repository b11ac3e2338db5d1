from json import JSONDecodeError, dumps, loads
from os import fspath
from typing import Dict, List, Optional

from .errors import CLTuneDecodeError, CLTuneMissingError
from .typing import Choice, Object, member, optionalmember

__all__ = ('Phase', 'MetricsRecord', 'MetricsLog', 'read_metrics')


class Phase(Choice):
	PRETRAIN    = 'pretrain'
	DOMAIN_TUNE = 'domain-tune'
	PROBE       = 'probe'


class MetricsRecord(Object):
	# pylint: disable=line-too-long
	step:           member[int]   = member('step')
	phase:          member[Phase] = member('phase')
	strategy:       member[str]   = member('strategy')
	seed:           member[int]   = member('seed')
	wall_ms:        member[float] = member('wall_ms')
	digest:         member[str]   = member('digest')
	target_loss:    optionalmember[float] = optionalmember('target_loss')
	source_loss:    optionalmember[float] = optionalmember('source_loss')
	penalty:        optionalmember[float] = optionalmember('penalty')
	gem_flag:       optionalmember[bool]  = optionalmember('gem_flag')
	gem_dot:        optionalmember[float] = optionalmember('gem_dot')
	eval_losses:    optionalmember[Dict[str, float]] = optionalmember('eval_losses')
	lambda_:        optionalmember[float] = optionalmember('lambda')
	probe_task:     optionalmember[str]   = optionalmember('probe_task')
	accuracy:       optionalmember[float] = optionalmember('accuracy')
	mi_gap:         optionalmember[float] = optionalmember('mi_gap')
	train_fraction: optionalmember[float] = optionalmember('train_fraction')
	n_test:         optionalmember[int]   = optionalmember('n_test')

	@property
	def is_eval(self) -> bool:
		return self.eval_losses is not None


class MetricsLog(object):
	"""Records of one run, kept in memory and appended to a JSONL file
	   when ``path`` is given."""

	__slots__ = ('path', 'records')

	def __init__(self, path=None, truncate: bool = False) -> None:
		self.path: Optional[str] = fspath(path) if path is not None else None
		self.records: List[MetricsRecord] = []
		if self.path is not None and truncate:
			with open(self.path, 'w', encoding='utf-8'):
				pass

	def append(self, record: MetricsRecord) -> None:
		self.records.append(record)
		if self.path is None:
			return
		with open(self.path, 'a', encoding='utf-8') as file:
			file.write(dumps(record.for_json(), ensure_ascii=False))
			file.write('\n')


def read_metrics(path) -> List[MetricsRecord]:
	records = []
	try:
		with open(path, 'r', encoding='utf-8') as file:
			for number, line in enumerate(file, 1):
				if not line.strip():
					continue
				try:
					records.append(MetricsRecord.json_to(loads(line)))
				except (JSONDecodeError, CLTuneDecodeError) as e:
					raise CLTuneDecodeError('{}:{}: {}'
					                        .format(fspath(path),
					                                number, e))
	except FileNotFoundError:
		raise CLTuneMissingError('metrics', path)
	return records
