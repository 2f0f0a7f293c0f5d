"""
Clients for the chat-completions and image-edit services, plus offline mocks.

Every backend call goes through the backend's AdmissionGate and is retried with
exponential backoff on transient failures. Backends whose (endpoint, model,
api_key_env) match share one gate, so the cap holds across pipeline roles.
"""
import base64
import json
import logging
import random
import re
import threading
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass
from fractions import Fraction
from io import BytesIO

import requests
from decouple import UndefinedValueError, config as env_config
from PIL import Image as PILImage

from .exceptions import (
    ConfigurationError, ImageLoadError, PermanentBackendError, RetriableError, TransientBackendError,
)
from .hashing import seeded_fraction, sha256_hex
from .images import sniff_media_type
from .prompts import prompt_kind


logger = logging.getLogger('forge_app')


# --- Message helpers --------------------------------------------------------

def image_part(data, media_type='image/png'):
    """An image attachment inside a message's content list"""
    return {'type': 'image', 'data': data, 'media_type': media_type}


def text_part(text):
    return {'type': 'text', 'text': text}


def message_texts(messages):
    """All text carried by a message list, attachments skipped"""
    texts = []
    for message in messages:
        content = message['content']
        if isinstance(content, str):
            texts.append(content)
            continue
        texts.extend(part['text'] for part in content if part.get('type') == 'text')
    return texts


def message_images(messages):
    """Image attachments in the order they appear"""
    images = []
    for message in messages:
        if isinstance(message['content'], list):
            images.extend(part for part in message['content'] if part.get('type') == 'image')
    return images


def to_wire_messages(messages):
    """Internal message list -> chat-completions JSON, images as data URIs"""
    wire = []
    for message in messages:
        content = message['content']
        if isinstance(content, list):
            parts = []
            for part in content:
                if part['type'] == 'image':
                    encoded = base64.b64encode(part['data']).decode('utf-8')
                    parts.append({
                        'type': 'image_url',
                        'image_url': {'url': f"data:{part['media_type']};base64,{encoded}"},
                    })
                else:
                    parts.append({'type': 'text', 'text': part['text']})
            content = parts
        wire.append({'role': message['role'], 'content': content})
    return wire


# --- Admission and retry ----------------------------------------------------

class AdmissionGate:
    """Counting gate capping in-flight calls; remembers the high-water mark"""

    def __init__(self, limit):
        if limit < 1:
            raise ConfigurationError("max_concurrency must be at least 1")
        self.limit = limit
        self._semaphore = threading.BoundedSemaphore(limit)
        self._lock = threading.Lock()
        self.in_flight = 0
        self.high_water = 0

    @contextmanager
    def admit(self):
        self._semaphore.acquire()
        with self._lock:
            self.in_flight += 1
            self.high_water = max(self.high_water, self.in_flight)
        try:
            yield
        finally:
            with self._lock:
                self.in_flight -= 1
            self._semaphore.release()


@dataclass(frozen=True)
class RetryPolicy:
    budget: int = 3
    base: float = 1.0
    cap: float = 60.0

    def delay(self, attempt, rng=random):
        """Full jitter: uniform in [0, min(cap, base * 2^(attempt-1))]"""
        ceiling = min(self.cap, self.base * (2 ** (attempt - 1)))
        return rng.uniform(0, ceiling) if ceiling > 0 else 0.0


def call_with_backoff(func, policy, label='', sleep=time.sleep, rng=random):
    """
    Call func until it succeeds, a non-retriable error occurs or the budget runs out.

    Returns:
        tuple: (result, attempts)

    Raises:
        The last error, with an `attempts` attribute set.
    """
    attempt = 0
    while True:
        attempt += 1
        try:
            return func(), attempt
        except RetriableError as e:
            e.attempts = attempt
            if attempt >= policy.budget:
                logger.warning(f"{label} giving up after {attempt} attempts: {e}")
                raise
            wait = policy.delay(attempt, rng)
            logger.debug(f"{label} attempt {attempt} failed ({e}); retrying in {wait:.2f}s")
            sleep(wait)
        except PermanentBackendError as e:
            e.attempts = attempt
            raise


def _classify_status(response, label):
    if response.status_code == 200:
        return
    message = f"{label} error: {response.status_code} - {response.text[:500]}"
    if response.status_code == 429 or response.status_code >= 500:
        raise TransientBackendError(message, response.status_code)
    raise PermanentBackendError(message, response.status_code)


def resolve_api_key(api_key_env, role):
    """Read the key from the environment (or .env); never from the config file"""
    if not api_key_env:
        return None
    try:
        value = env_config(api_key_env)
    except UndefinedValueError:
        value = None
    if not value:
        raise ConfigurationError(f"{role}: environment variable {api_key_env} is not set")
    return value


# --- Results ----------------------------------------------------------------

@dataclass(frozen=True)
class EditResult:
    image: bytes
    media_type: str
    model_id: str
    latency_ms: int
    attempts: int


# --- Base classes -----------------------------------------------------------

class ChatBackend:
    """chat_complete(messages, record_id=None) -> reply text"""

    def __init__(self, role, config, gate, policy, sleep=time.sleep):
        self.role = role
        self.config = config
        self.gate = gate
        self.policy = policy
        self.sleep = sleep

    def chat_complete(self, messages, record_id=None):
        def attempt():
            with self.gate.admit():
                return self._send(messages, record_id)

        reply, _ = call_with_backoff(
            attempt, self.policy, label=f"{self.role}[{record_id}]", sleep=self.sleep
        )
        return reply

    def admit_population(self, record_ids):
        """The records this backend will see over the run; only mocks use it"""

    def _send(self, messages, record_id):
        raise NotImplementedError


class EditBackend:
    """edit_image(request) -> EditResult"""

    def __init__(self, role, config, gate, policy, sleep=time.sleep):
        self.role = role
        self.config = config
        self.gate = gate
        self.policy = policy
        self.sleep = sleep

    def edit_image(self, request):
        def attempt():
            with self.gate.admit():
                started = time.monotonic()
                image, media_type = self._send(request)
                try:
                    media_type = sniff_media_type(image)
                except ImageLoadError as e:
                    raise TransientBackendError(f"{self.role} returned an undecodable image: {e}")
                return image, media_type, int((time.monotonic() - started) * 1000)

        (image, media_type, latency_ms), attempts = call_with_backoff(
            attempt, self.policy, label=f"{self.role}[{request.record_id}]", sleep=self.sleep
        )
        return EditResult(image, media_type, self.config.model, latency_ms, attempts)

    def admit_population(self, record_ids):
        """The records this backend will see over the run; only mocks use it"""

    def _send(self, request):
        raise NotImplementedError


# --- Live HTTP clients ------------------------------------------------------

class OpenAIChatBackend(ChatBackend):
    """Chat-completions over HTTP with a bearer token"""

    def __init__(self, role, config, gate, policy, sleep=time.sleep):
        super().__init__(role, config, gate, policy, sleep)
        if not config.endpoint:
            raise ConfigurationError(f"{role}: endpoint is required outside mock mode")
        self.api_key = resolve_api_key(config.api_key_env, role)

    def _send(self, messages, record_id):
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": self.config.model,
            "messages": to_wire_messages(messages),
            "temperature": self.config.temperature,
            **self.config.params,
        }
        try:
            response = requests.post(
                self.config.endpoint, headers=headers, json=payload, timeout=self.config.timeout
            )
        except requests.RequestException as e:
            raise TransientBackendError(f"{self.role} transport error: {e}")
        _classify_status(response, self.role)

        try:
            result = response.json()
            content = result['choices'][0]['message']['content']
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise TransientBackendError(f"{self.role} returned an unexpected body: {e}")
        if not content or not str(content).strip():
            raise TransientBackendError(f"{self.role} returned empty content")
        return content


class HttpEditBackend(EditBackend):
    """
    Image-edit wire contract:
        request  {model, instruction, context: {question, answer}, image_b64, media_type, **params}
        response {image_b64, media_type}
    """

    def __init__(self, role, config, gate, policy, sleep=time.sleep):
        super().__init__(role, config, gate, policy, sleep)
        if not config.endpoint:
            raise ConfigurationError(f"{role}: endpoint is required outside mock mode")
        self.api_key = resolve_api_key(config.api_key_env, role)

    def _send(self, request):
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": self.config.model,
            "instruction": request.edit_instruction,
            "context": {"question": request.context_question, "answer": request.context_answer},
            "image_b64": base64.b64encode(request.source_image).decode('utf-8'),
            "media_type": request.media_type,
            **self.config.params,
        }
        try:
            response = requests.post(
                self.config.endpoint, headers=headers, json=payload, timeout=self.config.timeout
            )
        except requests.RequestException as e:
            raise TransientBackendError(f"{self.role} transport error: {e}")
        _classify_status(response, self.role)

        try:
            result = response.json()
            image = base64.b64decode(result['image_b64'], validate=True)
            media_type = result.get('media_type') or 'image/png'
        except (ValueError, KeyError, TypeError) as e:
            raise TransientBackendError(f"{self.role} returned an unexpected body: {e}")
        if not image:
            raise TransientBackendError(f"{self.role} returned an empty image")
        return image, media_type


# --- Mocks ------------------------------------------------------------------

class MockTranscript:
    """Line-delimited JSON record of every mock call, shared by all mock backends"""

    def __init__(self, path, session=1):
        self.path = path
        self.session = session
        self._lock = threading.Lock()

    def record(self, backend, prompt, record_id, outcome, attachments=()):
        entry = {
            'session': self.session,
            'backend': backend,
            'prompt': prompt,
            'record_id': record_id,
            'outcome': outcome,
        }
        if attachments:
            entry['attachments'] = list(attachments)
        line = json.dumps(entry, ensure_ascii=False)
        with self._lock:
            with open(self.path, 'a', encoding='utf-8') as f:
                f.write(line + '\n')


def read_transcript(path):
    entries = []
    try:
        with open(path, 'r', encoding='utf-8') as f:
            for line in f:
                if line.strip():
                    entries.append(json.loads(line))
    except FileNotFoundError:
        pass
    return entries


class MockScriptRunner:
    """
    Applies a MockScript to calls keyed by record id.

    Under reject-fraction(p) exactly round(p * N) of an admitted population of N
    records are rejected: the ones with the lowest seeded fraction, ties broken
    by id. Calls for ids outside any admitted population fall back to the
    per-id threshold seeded_fraction(seed, id) < p.
    """

    def __init__(self, script):
        self.script = script
        self._calls = defaultdict(int)
        self._lock = threading.Lock()
        self._population = None
        self._rejected = frozenset()

    def admit(self, record_ids):
        if self.script.mode != 'reject-fraction':
            return
        seed = self.script.seed
        ranked = sorted(set(record_ids), key=lambda record_id: (seeded_fraction(seed, record_id), record_id))
        count = round(Fraction(str(self.script.p)) * len(ranked))
        with self._lock:
            self._population = frozenset(ranked)
            self._rejected = frozenset(ranked[:count])

    def is_rejected(self, record_id):
        if self.script.mode != 'reject-fraction':
            return False
        with self._lock:
            if self._population is not None and record_id in self._population:
                return record_id in self._rejected
        return seeded_fraction(self.script.seed, record_id) < self.script.p

    def before_call(self, record_id):
        """Raise the scripted transient failure, if any, for this call"""
        with self._lock:
            self._calls[record_id] += 1
            count = self._calls[record_id]
        if self.script.mode == 'always-fail':
            raise TransientBackendError("mock: scripted failure")
        if self.script.mode == 'fail-n-then-succeed' and count <= self.script.n:
            raise TransientBackendError(f"mock: scripted failure {count} of {self.script.n}")


_CLASSIFICATION_INPUT = re.compile(
    r"original question: (?P<question>.*)\noriginal answer: (?P<answer>.*)\nimage_path: (?P<image>.*)$",
    re.DOTALL,
)

_CATEGORY_RULES = [
    ('multi-choice', re.compile(r'options\s*:', re.IGNORECASE)),
    ('count', re.compile(r'\bhow many\b', re.IGNORECASE)),
    ('shape', re.compile(r'\bwhat shape\b', re.IGNORECASE)),
    ('color', re.compile(r'\bwhat colou?r\b', re.IGNORECASE)),
    ('location', re.compile(r'region coordinates|bounding box coordinates', re.IGNORECASE)),
    ('ocr', re.compile(r'\b(read|extract) the text\b', re.IGNORECASE)),
    ('caption', re.compile(r'\bdescribe\b', re.IGNORECASE)),
    ('math', re.compile(r'\b(compute|calculate|solve)\b', re.IGNORECASE)),
    ('bool', re.compile(r'^\s*(is|are|does|do|can)\b', re.IGNORECASE)),
]

_SYNTHETIC_INSTRUCTIONS = {
    'attribute-bool': (
        "Identify the attribute the question asks about in the original scene. If it is {answer}, "
        "change it into a different one. If not, Do NOT change the object. "
        "Refine the image with visual appealing effect."
    ),
    'attribute-generation': (
        "Identify the attribute the question asks about in the original scene. Adding a ring with "
        "the same attribute into the original scene. Refine the image with visual appealing effect."
    ),
    'count-bool': (
        "Identify the objects the question asks about. Check if the count is {answer}. If yes, remove "
        "those objects. If not, do not change the objects. Refine the image to enhance its aesthetic appeal."
    ),
    'count-generation': (
        "Analyze the original image to count the objects the question asks about. Then, synthesize "
        "glowing orbs matching that count. Refine the image to enhance its aesthetic appeal."
    ),
    'location-replacement': (
        "Locate the region the question refers to in the original image. Transform the object in that "
        "region into decorative golden bowls. Enhance the visual aesthetics of the image."
    ),
    'blackboard-caption-ocr': (
        "Analyze the original image to answer the question. Then, generate the close-up of the "
        "blackboard and write the result using the 'Chalk-style' font."
    ),
    'blackboard-math': (
        "Analyze the original image and the problem it poses. Solving this problem with [detailed "
        "process] and [final answer], then write it onto the blackboard with the 'Chalk-style' font."
    ),
    'blackboard-multichoice': (
        "Analyze the original image, solve the question based on image and write the answer (If the "
        "options are labeled, output only the label; otherwise, output only the option text) onto the "
        "blackboard with the 'Chalk-style' font."
    ),
}


def _synthetic_process_answer(category, answer):
    text = answer.strip()
    if category == 'count':
        match = re.search(r'-?\d+', text)
        return match.group(0) if match else text
    if category == 'bool':
        return 'no' if re.search(r'\bno\b', text, re.IGNORECASE) else 'yes'
    if category in ('shape', 'color'):
        words = re.findall(r'[A-Za-z]+', text)
        return words[-1].lower() if words else text
    if category == 'location':
        match = re.search(r'\[[^\]]*\]', text)
        return match.group(0) if match else text
    return text


def synthetic_reply(kind, messages, rejected=False):
    """
    Deterministic stand-in for a model reply, chosen by system prompt kind.

    A rejected record gets an unusable classification or instruction, a quality
    score of 2 or a "no" from the following judge.
    """
    if kind == 'classification':
        if rejected:
            return "I cannot classify this sample."
        match = _CLASSIFICATION_INPUT.search(message_texts(messages)[-1])
        if not match:
            return "{}"
        question, answer, image = match.group('question', 'answer', 'image')
        category = next((name for name, rule in _CATEGORY_RULES if rule.search(question)), 'others')
        return json.dumps({
            'task_category': category,
            'original_question': question,
            'original_answer': answer,
            'process_answer': _synthetic_process_answer(category, answer),
            'image_path': image,
        }, ensure_ascii=False)

    if kind and kind.startswith('transform/'):
        if rejected:
            return json.dumps({'edit_instruction': ''})
        variant = kind.split('/', 1)[1]
        match = re.search(r"process_answer: '(.*)'\}$", message_texts(messages)[-1], re.DOTALL)
        answer = match.group(1) if match else ''
        return json.dumps({'edit_instruction': _SYNTHETIC_INSTRUCTIONS[variant].format(answer=answer)})

    if kind == 'image-quality':
        score = 2 if rejected else 4
        return json.dumps({'analysis': 'Synthetic quality review.', 'score': score})

    if kind == 'instruction-following':
        answer = 'no' if rejected else 'yes'
        return json.dumps({'reasoning': 'Synthetic instruction-following review.', 'answer': answer})

    return "{}"


class MockChatBackend(ChatBackend):
    """
    Offline chat backend.

    A scripted reply table ({marker substring: reply}) takes precedence;
    otherwise replies come from synthetic_reply() by system prompt kind.
    """

    def __init__(self, role, config, gate, policy, transcript=None, replies=None, sleep=time.sleep):
        super().__init__(role, config, gate, policy, sleep)
        self.transcript = transcript
        self.replies = dict(replies or {})
        self.runner = MockScriptRunner(config.mock)

    def admit_population(self, record_ids):
        self.runner.admit(record_ids)

    def _send(self, messages, record_id):
        texts = message_texts(messages)
        kind = prompt_kind(texts[0]) if texts else None
        attachments = [sha256_hex(part['data'])[:16] for part in message_images(messages)]
        try:
            self.runner.before_call(record_id)
        except TransientBackendError:
            self._record(kind, record_id, 'transient-failure', attachments)
            raise

        reply = None
        for marker, scripted in self.replies.items():
            if any(marker in text for text in texts):
                reply = scripted
                break
        rejected = self.runner.is_rejected(record_id)
        if reply is None:
            reply = synthetic_reply(kind, messages, rejected=rejected)
        self._record(kind, record_id, 'rejected' if rejected else 'ok', attachments)
        return reply

    def _record(self, kind, record_id, outcome, attachments):
        if self.transcript:
            self.transcript.record(self.role, kind, record_id, outcome, attachments)


def synthetic_image(record_id):
    """A 4x4 PNG whose pixels are the SHA-256 chain of the record id"""
    digest = bytes.fromhex(sha256_hex(record_id))
    pixels = digest + bytes.fromhex(sha256_hex(digest))[:16]
    image = PILImage.frombytes('RGB', (4, 4), pixels[:48])
    buffer = BytesIO()
    image.save(buffer, format='PNG')
    return buffer.getvalue()


class MockEditBackend(EditBackend):
    """Offline edit backend; output is a pure function of the record id"""

    def __init__(self, role, config, gate, policy, transcript=None, sleep=time.sleep):
        super().__init__(role, config, gate, policy, sleep)
        self.transcript = transcript
        self.runner = MockScriptRunner(config.mock)

    def admit_population(self, record_ids):
        self.runner.admit(record_ids)

    def _send(self, request):
        attachments = [sha256_hex(request.source_image)[:16]]
        try:
            self.runner.before_call(request.record_id)
        except TransientBackendError:
            self._record(request.record_id, 'transient-failure', attachments)
            raise
        if self.runner.is_rejected(request.record_id):
            self._record(request.record_id, 'rejected', attachments)
            raise PermanentBackendError("mock: request rejected", 400)
        self._record(request.record_id, 'ok', attachments)
        return synthetic_image(request.record_id), 'image/png'

    def _record(self, record_id, outcome, attachments):
        if self.transcript:
            self.transcript.record(self.role, 'edit', record_id, outcome, attachments)


# --- Factory ----------------------------------------------------------------

CHAT_ROLES = ('classifier', 'transformer', 'judge_quality', 'judge_following')
EDIT_ROLE = 'generator'


class BackendSet:
    """One backend per pipeline role; roles with equal share keys share a gate"""

    def __init__(self, backends, gates, transcript=None):
        self.backends = backends
        self.gates = gates
        self.transcript = transcript

    def __getitem__(self, role):
        return self.backends[role]

    def high_water_marks(self):
        return {role: backend.gate.high_water for role, backend in self.backends.items()}


def build_backends(config, transcript=None, sleep=time.sleep, replies=None):
    """
    Build the five role backends from a PipelineConfig.

    Mock backends are used when config.flags.mock is set; otherwise the live
    clients, which fail fast on a missing endpoint or API key.
    """
    policy = RetryPolicy(config.retry_budget, config.backoff_base, config.backoff_cap)
    role_configs = {role: getattr(config, role) for role in CHAT_ROLES + (EDIT_ROLE,)}

    limits = {}
    for role_config in role_configs.values():
        key = role_config.share_key()
        limits[key] = min(limits.get(key, role_config.max_concurrency), role_config.max_concurrency)
    gates = {key: AdmissionGate(limit) for key, limit in limits.items()}

    backends = {}
    for role, role_config in role_configs.items():
        gate = gates[role_config.share_key()]
        if config.flags.mock:
            if role == EDIT_ROLE:
                backends[role] = MockEditBackend(role, role_config, gate, policy, transcript, sleep=sleep)
            else:
                backends[role] = MockChatBackend(
                    role, role_config, gate, policy, transcript, replies=replies, sleep=sleep
                )
        elif role == EDIT_ROLE:
            backends[role] = HttpEditBackend(role, role_config, gate, policy, sleep=sleep)
        else:
            backends[role] = OpenAIChatBackend(role, role_config, gate, policy, sleep=sleep)
    return BackendSet(backends, gates, transcript)
