"""
The work-dir ledger: an append-only JSONL event log and its fold.

Event kinds:
    header      first line; config hash, seed, template hashes and the full config
    session     one per run/resume invocation
    ingest      per-file line accounting
    rejection   an input line that never became a record
    status      a record moved to a new status, with the data that stage produced
    stage       a stage finished for every record that could reach it

A record's current state is the fold of its status events. Lines that do not
parse, or status events that break the status machine, are quarantined.
"""
import fcntl
import json
import logging
import os
import threading
from collections import Counter, defaultdict
from dataclasses import dataclass, field, fields
from pathlib import Path

from django.utils import timezone

from .exceptions import LedgerError, WorkDirLockedError
from .hashing import sha256_hex
from .models import (
    ACCEPTED_STATUSES, STATUS_TRANSITIONS, TERMINAL_STATUSES, ClassifiedRecord, EditCategory,
    InstructionRecord, RecordStatus, VqaRecord,
)


logger = logging.getLogger('forge_app')


LEDGER_NAME = 'ledger.jsonl'
QUARANTINE_NAME = 'ledger.quarantine.jsonl'
LOCK_NAME = '.lock'

# Never part of the canonical manifest: they differ between equivalent runs
VOLATILE_KEYS = frozenset({'ts', 'seq', 'session', 'latency_ms'})


class WorkDirLock:
    """Exclusive advisory lock on a work dir, one process at a time"""

    def __init__(self, work_dir):
        self.path = Path(work_dir) / LOCK_NAME
        self._handle = None

    def acquire(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        handle = open(self.path, 'a+')
        try:
            fcntl.flock(handle.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            handle.close()
            raise WorkDirLockedError(f"Work dir {self.path.parent} is locked by another process")
        handle.seek(0)
        handle.truncate()
        handle.write(str(os.getpid()))
        handle.flush()
        self._handle = handle
        return self

    def release(self):
        if self._handle is not None:
            fcntl.flock(self._handle.fileno(), fcntl.LOCK_UN)
            self._handle.close()
            self._handle = None

    def __enter__(self):
        return self.acquire()

    def __exit__(self, *exc):
        self.release()


@dataclass
class RecordState:
    """Fold of one record's status events"""
    id: str
    status: str = None
    data: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    reasons: list = field(default_factory=list)

    @property
    def task_category(self):
        return self.data.get('task_category')

    @property
    def variant(self):
        return self.data.get('variant')

    @property
    def quality_score(self):
        return (self.data.get('verdict') or {}).get('quality_score')

    @property
    def if_answer(self):
        return (self.data.get('verdict') or {}).get('if_answer')

    @property
    def is_terminal(self):
        return self.status in TERMINAL_STATUSES

    @property
    def is_accepted(self):
        return self.status in ACCEPTED_STATUSES

    @property
    def is_knowledge(self):
        return self.task_category == EditCategory.KNOWLEDGE

    def _fields(self, record_class):
        names = [f.name for f in fields(record_class)]
        return record_class(**{name: self.data[name] for name in names if name in self.data})

    def vqa_record(self):
        return self._fields(VqaRecord)

    def classified_record(self):
        return self._fields(ClassifiedRecord)

    def instruction_record(self):
        return self._fields(InstructionRecord)

    def apply(self, event):
        self.status = event['status']
        self.history.append(event['status'])
        self.data.update(event.get('data') or {})
        if event.get('reason'):
            self.reasons.append(event['reason'])


def transition_allowed(current, new):
    return new in STATUS_TRANSITIONS.get(current, set())


def _strip_volatile(value):
    if isinstance(value, dict):
        return {k: _strip_volatile(v) for k, v in value.items() if k not in VOLATILE_KEYS}
    if isinstance(value, list):
        return [_strip_volatile(v) for v in value]
    return value


def _rejection_order(item):
    source, line_number, record_id = item[0]
    return source, line_number or 0, record_id or ''


class DatasetManifest:
    """Everything the ledger knows: header, per-record state and ingest accounting"""

    def __init__(self, header=None):
        self.header = header or {}
        self.records = {}
        self.rejections = {}
        self.ingest = {}
        self.sessions = 0
        self.last_seq = 0
        self.completed_stages = set()

    @property
    def config_hash(self):
        return self.header.get('config_hash')

    @property
    def seed(self):
        return self.header.get('seed')

    def apply(self, event):
        """
        Fold one event in.

        Raises:
            LedgerError: a status event breaks the status machine
        """
        kind = event.get('type')
        self.last_seq = max(self.last_seq, event.get('seq') or 0)
        if kind == 'header':
            self.header = event
        elif kind == 'session':
            self.sessions = max(self.sessions, event.get('session', 0))
        elif kind == 'ingest':
            self.ingest[event['source']] = {
                'lines_read': event['lines_read'],
                'records': event['records'],
                'rejections': event['rejections'],
            }
        elif kind == 'rejection':
            self.rejections[(event['source'], event.get('line_number'), event.get('record_id'))] = event
        elif kind == 'stage':
            self.completed_stages.add(event['stage'])
        elif kind == 'status':
            record_id = event['record_id']
            state = self.records.get(record_id)
            current = state.status if state else None
            if not transition_allowed(current, event['status']):
                raise LedgerError(f"Record {record_id}: {current} -> {event['status']} is not allowed")
            if state is None:
                state = self.records[record_id] = RecordState(record_id)
            state.apply(event)
        else:
            raise LedgerError(f"Unknown event type {kind!r}")

    # --- Counts ------------------------------------------------------------

    def status_counts(self):
        return Counter(state.status for state in self.records.values())

    def category_status_counts(self):
        counts = defaultdict(Counter)
        for state in self.records.values():
            counts[state.task_category or 'unclassified'][state.status] += 1
        return counts

    def stage_reach_counts(self):
        """Per category, how many records ever held each status"""
        counts = defaultdict(Counter)
        for state in self.records.values():
            for status in set(state.history):
                counts[state.task_category or 'unclassified'][status] += 1
        return counts

    def variant_counts(self):
        return Counter(state.variant for state in self.records.values() if state.variant)

    def in_flight(self):
        return [state for state in self.records.values() if not state.is_terminal]

    def is_conserved(self):
        """
        Every line read is exactly one record or one rejection, every ingested
        record holds a status, and every history is a legal path from ingested.
        """
        for source, counts in self.ingest.items():
            if counts['lines_read'] != counts['records'] + counts['rejections']:
                return False
            if counts['rejections'] != sum(1 for key in self.rejections if key[0] == source):
                return False
        if sum(counts['records'] for counts in self.ingest.values()) != len(self.records):
            return False
        for state in self.records.values():
            if not state.history or state.history[0] != RecordStatus.INGESTED:
                return False
            previous = None
            for status in state.history:
                if not transition_allowed(previous, status):
                    return False
                previous = status
        return True

    # --- Canonical form ------------------------------------------------------

    def canonical(self):
        """Order- and timing-independent view used to compare runs"""
        return {
            'config_hash': self.config_hash,
            'seed': self.seed,
            'template_hashes': self.header.get('template_hashes', {}),
            'records': [
                {
                    'id': state.id,
                    'status': state.status,
                    'history': state.history,
                    'reasons': state.reasons,
                    'data': _strip_volatile(state.data),
                }
                for state in sorted(self.records.values(), key=lambda s: s.id)
            ],
            'rejections': [
                _strip_volatile({k: v for k, v in event.items() if k != 'type'})
                for _, event in sorted(self.rejections.items(), key=_rejection_order)
            ],
        }

    def fingerprint(self):
        return sha256_hex(json.dumps(self.canonical(), sort_keys=True, ensure_ascii=False))

    def summary(self):
        return {
            'config_hash': self.config_hash,
            'seed': self.seed,
            'template_hashes': self.header.get('template_hashes', {}),
            'created': self.header.get('ts'),
            'records': len(self.records),
            'status_counts': dict(sorted(self.status_counts().items())),
            'category_status_counts': {
                category: dict(sorted(counts.items()))
                for category, counts in sorted(self.category_status_counts().items())
            },
            'variant_counts': dict(sorted(self.variant_counts().items())),
            'ingest': self.ingest,
            'fingerprint': self.fingerprint(),
            'conserved': self.is_conserved(),
        }


def read_ledger(work_dir, quarantine=True):
    """
    Fold the ledger in a work dir into a DatasetManifest.

    Corrupt lines are moved to the quarantine file (and the ledger rewritten
    without them) when quarantine is set; the affected record keeps its last
    valid status and restarts from there.

    Raises:
        LedgerError: no ledger, or no header line
    """
    path = Path(work_dir) / LEDGER_NAME
    if not path.exists():
        raise LedgerError(f"No ledger at {path}")

    manifest = DatasetManifest()
    kept = []
    corrupt = []
    with open(path, 'r', encoding='utf-8', errors='replace') as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                if not line.endswith('\n'):
                    raise ValueError("truncated line")
                event = json.loads(line)
                if not isinstance(event, dict):
                    raise ValueError("not an object")
                manifest.apply(event)
            except (ValueError, KeyError, TypeError, LedgerError) as e:
                logger.warning(f"Ledger line {line_number} quarantined: {e}")
                corrupt.append(line if line.endswith('\n') else line + '\n')
                continue
            kept.append(line)

    if not manifest.header:
        raise LedgerError(f"Ledger {path} has no header")

    if corrupt and quarantine:
        with open(Path(work_dir) / QUARANTINE_NAME, 'a', encoding='utf-8') as f:
            f.writelines(corrupt)
        temporary = path.with_suffix('.jsonl.tmp')
        with open(temporary, 'w', encoding='utf-8') as f:
            f.writelines(kept)
            f.flush()
            os.fsync(f.fileno())
        os.replace(temporary, path)
    return manifest


class LedgerWriter:
    """
    Single writer for the ledger. Every event is flushed to the OS as it is
    written and fsynced every `flush_every` events.
    """

    def __init__(self, work_dir, manifest=None, flush_every=100):
        self.path = Path(work_dir) / LEDGER_NAME
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.manifest = manifest or DatasetManifest()
        self.flush_every = flush_every
        self._lock = threading.Lock()
        self._seq = self.manifest.last_seq
        self._unsynced = 0
        self._file = open(self.path, 'a', encoding='utf-8')

    def append(self, event):
        """
        Validate, fold and persist one event.

        Raises:
            LedgerError: the event breaks the status machine (nothing is written)
        """
        with self._lock:
            event = {'seq': self._seq + 1, 'ts': timezone.now().isoformat(), **event}
            self.manifest.apply(event)
            self._seq += 1
            try:
                self._file.write(json.dumps(event, ensure_ascii=False) + '\n')
                self._file.flush()
                self._unsynced += 1
                if self._unsynced >= self.flush_every:
                    os.fsync(self._file.fileno())
                    self._unsynced = 0
            except OSError as e:
                raise LedgerError(f"Could not append to {self.path}: {e}")
        return event

    def status(self, record_id, status, stage, data=None, reason=None):
        event = {'type': 'status', 'record_id': record_id, 'status': str(status), 'stage': str(stage)}
        if data:
            event['data'] = data
        if reason:
            event['reason'] = reason
        return self.append(event)

    def sync(self):
        with self._lock:
            self._file.flush()
            os.fsync(self._file.fileno())
            self._unsynced = 0

    def close(self):
        if not self._file.closed:
            self.sync()
            self._file.close()
