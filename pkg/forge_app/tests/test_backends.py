import base64
import json
import random
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from unittest import mock

import requests
from django.test import SimpleTestCase

from forge_app.backends import (
    AdmissionGate, HttpEditBackend, MockChatBackend, MockEditBackend, MockTranscript, OpenAIChatBackend,
    RetryPolicy, build_backends, call_with_backoff, image_part, read_transcript, synthetic_image,
    text_part, to_wire_messages,
)
from forge_app.config import ChatBackendConfig, EditBackendConfig, MockScript
from forge_app.exceptions import ConfigurationError, PermanentBackendError, TransientBackendError
from forge_app.hashing import seeded_fraction
from forge_app.services.generate import GenerationRequest

from .fixtures import make_config, png_bytes


def no_sleep(seconds):
    pass


def user(text):
    return [{'role': 'user', 'content': text}]


def chat_backend(script=None, replies=None, transcript=None, gate=None):
    config = ChatBackendConfig(mock=script or MockScript())
    return MockChatBackend('classifier', config, gate or AdmissionGate(8), RetryPolicy(3, 0, 0),
                           transcript=transcript, replies=replies, sleep=no_sleep)


def fake_response(status_code, body):
    response = mock.Mock()
    response.status_code = status_code
    response.text = json.dumps(body)
    response.json.return_value = body
    return response


class CallWithBackoffTests(SimpleTestCase):

    def test_retries_transient_errors_then_succeeds(self):
        calls = []

        def flaky():
            calls.append(1)
            if len(calls) < 3:
                raise TransientBackendError("busy", 503)
            return 'ok'

        waits = []
        result, attempts = call_with_backoff(flaky, RetryPolicy(3, 1.0, 60.0), sleep=waits.append,
                                             rng=random.Random(0))
        self.assertEqual((result, attempts), ('ok', 3))
        self.assertEqual(len(waits), 2)
        self.assertTrue(0 <= waits[0] <= 1.0 and 0 <= waits[1] <= 2.0)

    def test_permanent_error_is_not_retried(self):
        func = mock.Mock(side_effect=PermanentBackendError("bad request", 400))
        with self.assertRaises(PermanentBackendError) as caught:
            call_with_backoff(func, RetryPolicy(5, 0, 0), sleep=no_sleep)
        self.assertEqual(func.call_count, 1)
        self.assertEqual(caught.exception.attempts, 1)

    def test_delay_is_capped(self):
        policy = RetryPolicy(10, 1.0, 4.0)
        rng = random.Random(3)
        self.assertTrue(all(policy.delay(attempt, rng) <= 4.0 for attempt in range(1, 10)))
        self.assertEqual(RetryPolicy(3, 0, 0).delay(2), 0.0)


class AdmissionGateTests(SimpleTestCase):

    def test_high_water_never_exceeds_the_cap(self):
        for repetition in range(20):
            gate = AdmissionGate(8)
            backend = chat_backend(gate=gate, replies={'': '{}'})
            pause = random.Random(repetition)

            def call(index):
                with gate.admit():
                    time.sleep(pause.random() / 2000)
                return backend.chat_complete(user(f'call {index}'), record_id=f'r{index}')

            with ThreadPoolExecutor(max_workers=32) as executor:
                list(executor.map(call, range(100)))
            self.assertLessEqual(gate.high_water, 8)
            self.assertGreaterEqual(gate.high_water, 1)
            self.assertEqual(gate.in_flight, 0)

    def test_invalid_limit(self):
        with self.assertRaises(ConfigurationError):
            AdmissionGate(0)


class MockChatBackendTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.transcript_path = Path(self.tmp.name) / 'transcript.jsonl'

    def tearDown(self):
        self.tmp.cleanup()

    def test_scripted_reply_by_marker(self):
        backend = chat_backend(replies={'MARKER-42': '{"answer": "scripted"}'})
        reply = backend.chat_complete(user('prefix MARKER-42 suffix'), record_id='x')
        self.assertEqual(reply, '{"answer": "scripted"}')

    def test_fail_n_then_succeed_is_counted_per_record(self):
        transcript = MockTranscript(self.transcript_path, session=2)
        backend = chat_backend(MockScript(mode='fail-n-then-succeed', n=2), replies={'': 'ok'},
                               transcript=transcript)
        self.assertEqual(backend.chat_complete(user('hi'), record_id='a'), 'ok')
        self.assertEqual(backend.chat_complete(user('hi'), record_id='b'), 'ok')
        outcomes = [(e['record_id'], e['outcome']) for e in read_transcript(self.transcript_path)]
        self.assertEqual(outcomes, [
            ('a', 'transient-failure'), ('a', 'transient-failure'), ('a', 'ok'),
            ('b', 'transient-failure'), ('b', 'transient-failure'), ('b', 'ok'),
        ])
        self.assertTrue(all(e['session'] == 2 for e in read_transcript(self.transcript_path)))

    def test_always_fail_exhausts_the_budget(self):
        backend = chat_backend(MockScript(mode='always-fail'))
        with self.assertRaises(TransientBackendError) as caught:
            backend.chat_complete(user('hi'), record_id='a')
        self.assertEqual(caught.exception.attempts, 3)

    def test_attachments_are_recorded_in_order(self):
        transcript = MockTranscript(self.transcript_path)
        backend = chat_backend(replies={'': '{}'}, transcript=transcript)
        first, second = png_bytes((1, 1, 1)), png_bytes((2, 2, 2))
        backend.chat_complete([{'role': 'user', 'content': [
            text_part('compare'), image_part(first), image_part(second),
        ]}], record_id='a')
        entry = read_transcript(self.transcript_path)[0]
        self.assertEqual(len(entry['attachments']), 2)
        self.assertNotEqual(entry['attachments'][0], entry['attachments'][1])


class MockEditBackendTests(SimpleTestCase):

    def request(self, record_id):
        return GenerationRequest(record_id, 'Paint it.', 'q', 'a', png_bytes(), 'image/png')

    def backend(self, script):
        config = EditBackendConfig(mock=script)
        return MockEditBackend('generator', config, AdmissionGate(4), RetryPolicy(3, 0, 0), sleep=no_sleep)

    def test_image_is_a_function_of_the_record_id(self):
        backend = self.backend(MockScript())
        self.assertEqual(backend.edit_image(self.request('a')).image, synthetic_image('a'))
        self.assertNotEqual(synthetic_image('a'), synthetic_image('b'))

    def test_reject_fraction_is_exact_over_the_admitted_population(self):
        backend = self.backend(MockScript(mode='reject-fraction', p=0.1, seed=5))
        record_ids = [f'r{index}' for index in range(500)]
        backend.admit_population(record_ids)
        rejected = set()
        for record_id in record_ids:
            try:
                backend.edit_image(self.request(record_id))
            except PermanentBackendError:
                rejected.add(record_id)
        ranked = sorted(record_ids, key=lambda record_id: (seeded_fraction(5, record_id), record_id))
        self.assertEqual(len(rejected), 50)
        self.assertEqual(rejected, set(ranked[:50]))

    def test_reject_fraction_outside_a_population_uses_the_threshold(self):
        backend = self.backend(MockScript(mode='reject-fraction', p=0.1, seed=5))
        backend.admit_population(['r0', 'r1'])
        for index in range(2, 200):
            record_id = f'r{index}'
            expected = seeded_fraction(5, record_id) < 0.1
            try:
                backend.edit_image(self.request(record_id))
                rejected = False
            except PermanentBackendError:
                rejected = True
            self.assertEqual(rejected, expected, record_id)


class LiveBackendTests(SimpleTestCase):

    def test_missing_api_key_fails_before_any_call(self):
        config = ChatBackendConfig(endpoint='https://llm.example.com/v1/chat/completions',
                                   model='gpt-4o', api_key_env='FORGE_TEST_UNSET_KEY')
        with mock.patch('forge_app.backends.requests.post') as post:
            with self.assertRaises(ConfigurationError):
                OpenAIChatBackend('classifier', config, AdmissionGate(1), RetryPolicy())
            post.assert_not_called()

    def test_chat_wire_format(self):
        config = ChatBackendConfig(endpoint='https://llm.example.com/v1/chat/completions', model='gpt-4o',
                                   temperature=0.2, params={'max_tokens': 256})
        backend = OpenAIChatBackend('judge_quality', config, AdmissionGate(1), RetryPolicy(3, 0, 0),
                                    sleep=no_sleep)
        body = {'choices': [{'message': {'content': '{"score": 4}'}}]}
        with mock.patch('forge_app.backends.requests.post',
                        side_effect=[fake_response(429, {}), fake_response(200, body)]) as post:
            reply = backend.chat_complete([{'role': 'user', 'content': [text_part('rate'), image_part(png_bytes())]}])
        self.assertEqual(reply, '{"score": 4}')
        self.assertEqual(post.call_count, 2)
        payload = post.call_args.kwargs['json']
        self.assertEqual(payload['model'], 'gpt-4o')
        self.assertEqual(payload['temperature'], 0.2)
        self.assertEqual(payload['max_tokens'], 256)
        image = payload['messages'][0]['content'][1]
        self.assertTrue(image['image_url']['url'].startswith('data:image/png;base64,'))

    def test_client_error_is_permanent(self):
        config = ChatBackendConfig(endpoint='https://llm.example.com/v1/chat/completions', model='gpt-4o')
        backend = OpenAIChatBackend('classifier', config, AdmissionGate(1), RetryPolicy(3, 0, 0), sleep=no_sleep)
        with mock.patch('forge_app.backends.requests.post', return_value=fake_response(401, {})) as post:
            with self.assertRaises(PermanentBackendError):
                backend.chat_complete(user('hi'))
        self.assertEqual(post.call_count, 1)

    def test_any_transport_error_is_transient(self):
        config = ChatBackendConfig(endpoint='https://llm.example.com/v1/chat/completions', model='gpt-4o')
        backend = OpenAIChatBackend('classifier', config, AdmissionGate(1), RetryPolicy(3, 0, 0), sleep=no_sleep)
        body = {'choices': [{'message': {'content': 'ok'}}]}
        failures = [requests.exceptions.ChunkedEncodingError('peer closed'), requests.exceptions.SSLError('bad')]
        with mock.patch('forge_app.backends.requests.post',
                        side_effect=failures + [fake_response(200, body)]) as post:
            self.assertEqual(backend.chat_complete(user('hi')), 'ok')
        self.assertEqual(post.call_count, 3)

    def test_edit_transport_error_exhausts_the_budget(self):
        config = EditBackendConfig(endpoint='https://edit.example.com/v1/edit', model='editor-1')
        backend = HttpEditBackend('generator', config, AdmissionGate(1), RetryPolicy(2, 0, 0), sleep=no_sleep)
        request = GenerationRequest('r1', 'Paint it.', 'q', 'a', png_bytes(), 'image/png')
        with mock.patch('forge_app.backends.requests.post',
                        side_effect=requests.exceptions.ChunkedEncodingError('peer closed')):
            with self.assertRaises(TransientBackendError) as caught:
                backend.edit_image(request)
        self.assertEqual(caught.exception.attempts, 2)

    def test_edit_wire_contract(self):
        config = EditBackendConfig(endpoint='https://edit.example.com/v1/edit', model='editor-1')
        backend = HttpEditBackend('generator', config, AdmissionGate(1), RetryPolicy(3, 0, 0), sleep=no_sleep)
        target = png_bytes((9, 9, 9))
        body = {'image_b64': base64.b64encode(target).decode(), 'media_type': 'image/png'}
        request = GenerationRequest('r1', 'Paint it.', 'What color?', 'red', png_bytes(), 'image/png')
        with mock.patch('forge_app.backends.requests.post', return_value=fake_response(200, body)) as post:
            result = backend.edit_image(request)
        self.assertEqual(result.image, target)
        self.assertEqual(result.model_id, 'editor-1')
        payload = post.call_args.kwargs['json']
        self.assertEqual(payload['instruction'], 'Paint it.')
        self.assertEqual(payload['context'], {'question': 'What color?', 'answer': 'red'})

    def test_wire_messages_keep_text_and_images(self):
        wire = to_wire_messages([
            {'role': 'system', 'content': 'sys'},
            {'role': 'user', 'content': [text_part('a'), image_part(png_bytes())]},
        ])
        self.assertEqual(wire[0], {'role': 'system', 'content': 'sys'})
        self.assertEqual(wire[1]['content'][0], {'type': 'text', 'text': 'a'})
        self.assertEqual(wire[1]['content'][1]['type'], 'image_url')


class BuildBackendsTests(SimpleTestCase):

    def test_mock_roles_share_one_gate_at_the_lowest_cap(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        config = make_config(tmp.name, backends={'judge_quality': {'max_concurrency': 3}})
        backends = build_backends(config)
        self.assertEqual(len(backends.gates), 1)
        self.assertEqual(backends['classifier'].gate.limit, 3)
        self.assertIs(backends['classifier'].gate, backends['generator'].gate)

    def test_live_roles_need_endpoints(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        config = make_config(tmp.name, flags={'mock': False})
        with self.assertRaises(ConfigurationError):
            build_backends(config)
