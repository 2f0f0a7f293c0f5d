import json
import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from forge_app.exceptions import LedgerError, WorkDirLockedError
from forge_app.ledger import (
    LEDGER_NAME, QUARANTINE_NAME, DatasetManifest, LedgerWriter, WorkDirLock, read_ledger, transition_allowed,
)
from forge_app.models import RecordStatus, Stage


HAPPY_PATH = (
    (RecordStatus.INGESTED, Stage.INGEST),
    (RecordStatus.CLASSIFIED, Stage.CLASSIFY),
    (RecordStatus.TRANSFORMED, Stage.TRANSFORM),
    (RecordStatus.GENERATED, Stage.GENERATE),
    (RecordStatus.FILTERED_ACCEPTED, Stage.FILTER),
)


class LedgerTestCase(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.work_dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def writer(self, manifest=None):
        writer = LedgerWriter(self.work_dir, manifest=manifest, flush_every=2)
        self.addCleanup(writer.close)
        return writer

    def started(self):
        writer = self.writer()
        writer.append({'type': 'header', 'config_hash': 'abc', 'seed': 7, 'template_hashes': {}})
        writer.append({'type': 'session', 'session': 1})
        return writer

    def ledger_lines(self):
        return (self.work_dir / LEDGER_NAME).read_text(encoding='utf-8').splitlines()


class WorkDirLockTests(LedgerTestCase):

    def test_second_holder_is_refused(self):
        with WorkDirLock(self.work_dir):
            with self.assertRaises(WorkDirLockedError):
                WorkDirLock(self.work_dir).acquire()

    def test_released_lock_can_be_taken_again(self):
        with WorkDirLock(self.work_dir):
            pass
        lock = WorkDirLock(self.work_dir).acquire()
        lock.release()


class StatusMachineTests(SimpleTestCase):

    def test_legal_and_illegal_moves(self):
        self.assertTrue(transition_allowed(None, RecordStatus.INGESTED))
        self.assertTrue(transition_allowed(RecordStatus.INGESTED, RecordStatus.TRANSFORMED))
        self.assertTrue(transition_allowed(RecordStatus.FILTERED_ACCEPTED, RecordStatus.CURATED))
        self.assertFalse(transition_allowed(RecordStatus.INGESTED, RecordStatus.GENERATED))
        self.assertFalse(transition_allowed(RecordStatus.FILTERED_REJECTED, RecordStatus.CURATED))
        self.assertFalse(transition_allowed(RecordStatus.DROPPED_OTHERS, RecordStatus.CLASSIFIED))


class LedgerWriterTests(LedgerTestCase):

    def test_status_events_fold_into_record_state(self):
        writer = self.started()
        writer.status('r1', RecordStatus.INGESTED, Stage.INGEST, data={'original_question': 'q'})
        writer.status('r1', RecordStatus.CLASSIFIED, Stage.CLASSIFY, data={'task_category': 'shape'})
        state = writer.manifest.records['r1']
        self.assertEqual(state.status, RecordStatus.CLASSIFIED)
        self.assertEqual(state.task_category, 'shape')
        self.assertEqual(state.history, ['ingested', 'classified'])

    def test_illegal_move_writes_nothing(self):
        writer = self.started()
        writer.status('r1', RecordStatus.INGESTED, Stage.INGEST)
        with self.assertRaises(LedgerError):
            writer.status('r1', RecordStatus.CURATED, Stage.ASSEMBLE)
        writer.close()
        self.assertEqual(len(self.ledger_lines()), 3)
        self.assertEqual(read_ledger(self.work_dir).records['r1'].status, RecordStatus.INGESTED)

    def test_sequence_continues_after_reopening(self):
        writer = self.started()
        writer.status('r1', RecordStatus.INGESTED, Stage.INGEST)
        writer.close()
        manifest = read_ledger(self.work_dir)
        self.assertEqual(manifest.last_seq, 3)
        reopened = self.writer(manifest)
        event = reopened.append({'type': 'session', 'session': 2})
        self.assertEqual(event['seq'], 4)
        reopened.close()
        self.assertEqual([json.loads(line)['seq'] for line in self.ledger_lines()], [1, 2, 3, 4])


class ReadLedgerTests(LedgerTestCase):

    def test_missing_ledger(self):
        with self.assertRaises(LedgerError):
            read_ledger(self.work_dir)

    def test_ledger_without_header(self):
        (self.work_dir / LEDGER_NAME).write_text('{"type": "session", "session": 1}\n', encoding='utf-8')
        with self.assertRaises(LedgerError):
            read_ledger(self.work_dir)

    def test_truncated_final_line_is_quarantined(self):
        writer = self.started()
        for status, stage in HAPPY_PATH[:3]:
            writer.status('r1', status, stage)
        writer.close()
        content = (self.work_dir / LEDGER_NAME).read_text(encoding='utf-8')
        # Cut the last event in half, as a crash mid-write would
        (self.work_dir / LEDGER_NAME).write_text(content[:-20], encoding='utf-8')

        manifest = read_ledger(self.work_dir)
        self.assertEqual(manifest.records['r1'].status, RecordStatus.CLASSIFIED)
        quarantined = (self.work_dir / QUARANTINE_NAME).read_text(encoding='utf-8').splitlines()
        self.assertEqual(len(quarantined), 1)
        self.assertTrue(all(line.endswith('}') for line in self.ledger_lines()))
        self.assertEqual(len(self.ledger_lines()), 4)

    def test_read_only_fold_leaves_the_files_alone(self):
        writer = self.started()
        writer.close()
        with open(self.work_dir / LEDGER_NAME, 'a', encoding='utf-8') as f:
            f.write('not json\n')
        read_ledger(self.work_dir, quarantine=False)
        self.assertFalse((self.work_dir / QUARANTINE_NAME).exists())
        self.assertEqual(self.ledger_lines()[-1], 'not json')


class DatasetManifestTests(SimpleTestCase):

    def build(self, order, seqs=None):
        manifest = DatasetManifest({'type': 'header', 'config_hash': 'abc', 'seed': 1, 'ts': 'now'})
        for index, (record_id, status, data) in enumerate(order):
            manifest.apply({
                'type': 'status', 'record_id': record_id, 'status': status, 'data': data,
                'seq': (seqs or {}).get(index, index), 'ts': f't{index}',
            })
        return manifest

    def events(self):
        return [
            ('a', 'ingested', {'original_question': 'q'}),
            ('b', 'ingested', {'original_question': 'p'}),
            ('a', 'classified', {'task_category': 'shape', 'classifier_reply': '{}'}),
            ('b', 'dropped-others', {'task_category': 'others'}),
        ]

    def test_fingerprint_ignores_interleaving_and_timing(self):
        events = self.events()
        interleaved = [events[1], events[0], events[3], events[2]]
        first = self.build(events)
        second = self.build(interleaved, seqs={0: 40, 1: 41})
        self.assertEqual(first.fingerprint(), second.fingerprint())

    def test_fingerprint_sees_data_changes(self):
        changed = self.events()
        changed[2] = ('a', 'classified', {'task_category': 'color', 'classifier_reply': '{}'})
        self.assertNotEqual(self.build(self.events()).fingerprint(), self.build(changed).fingerprint())

    def test_latency_is_not_canonical(self):
        fast = [('a', 'ingested', {'backend_meta': {'model_id': 'm', 'latency_ms': 3}})]
        slow = [('a', 'ingested', {'backend_meta': {'model_id': 'm', 'latency_ms': 900}})]
        self.assertEqual(self.build(fast).fingerprint(), self.build(slow).fingerprint())

    def test_conservation(self):
        manifest = self.build(self.events())
        manifest.apply({'type': 'ingest', 'source': 'input', 'lines_read': 2, 'records': 2, 'rejections': 0})
        self.assertTrue(manifest.is_conserved())
        self.assertEqual(len(manifest.in_flight()), 1)
        self.assertEqual(manifest.status_counts()['dropped-others'], 1)

    def test_conservation_counts_against_ingest(self):
        manifest = self.build(self.events())
        manifest.apply({'type': 'ingest', 'source': 'input', 'lines_read': 4, 'records': 3, 'rejections': 1})
        # One ingested record never got a status and the rejection event is missing
        self.assertFalse(manifest.is_conserved())
        manifest.apply({'type': 'rejection', 'source': 'input', 'line_number': 4, 'reason': 'duplicate-id'})
        self.assertFalse(manifest.is_conserved())
        manifest.apply({'type': 'status', 'record_id': 'c', 'status': 'ingested', 'seq': 9})
        self.assertTrue(manifest.is_conserved())

    def test_lines_read_must_balance(self):
        manifest = self.build(self.events())
        manifest.apply({'type': 'ingest', 'source': 'input', 'lines_read': 5, 'records': 2, 'rejections': 0})
        self.assertFalse(manifest.is_conserved())

    def test_stage_reach_counts(self):
        manifest = self.build(self.events())
        reach = manifest.stage_reach_counts()
        self.assertEqual(reach['shape']['ingested'], 1)
        self.assertEqual(reach['others']['dropped-others'], 1)

    def test_rejections_with_the_same_line_stay_distinct(self):
        manifest = DatasetManifest({'type': 'header'})
        manifest.apply({'type': 'rejection', 'source': 'knowledge', 'line_number': None,
                        'record_id': 'kn-1', 'reason': 'duplicate-id'})
        manifest.apply({'type': 'rejection', 'source': 'knowledge', 'line_number': None,
                        'record_id': 'kn-2', 'reason': 'duplicate-id'})
        self.assertEqual(len(manifest.canonical()['rejections']), 2)

    def test_unknown_event(self):
        with self.assertRaises(LedgerError):
            DatasetManifest().apply({'type': 'gossip'})
