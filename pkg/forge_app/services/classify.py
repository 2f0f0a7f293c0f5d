import logging
from dataclasses import replace

from ..exceptions import PreconditionError, ReplyParseError
from ..models import EXACT_COPY_CATEGORIES, ClassifiedRecord
from ..prompts import CLASSIFICATION_SYSTEM_PROMPT, render_layout
from ..replies import extract_json_object, format_errors
from ..serializers import ClassificationReplySerializer


logger = logging.getLogger('forge_app')


def render_classification_prompt(record):
    """
    Build the classifier chat messages for one record.

    Args:
        record (VqaRecord): source sample

    Returns:
        list: system message (verbatim prompt) followed by the "Input:" user message

    Raises:
        PreconditionError: question or answer is blank
    """
    for name in ('original_question', 'original_answer'):
        value = getattr(record, name, '')
        if not isinstance(value, str) or not value.strip():
            raise PreconditionError(f"Record {record.id} has an empty {name}")

    user_message = render_layout('classification', {
        'original_question': record.original_question,
        'original_answer': record.original_answer,
        'image_path': record.image_path,
    })
    return [
        {'role': 'system', 'content': CLASSIFICATION_SYSTEM_PROMPT},
        {'role': 'user', 'content': user_message},
    ]


def parse_classification_response(text, record):
    """
    Turn a classifier reply into a ClassifiedRecord.

    Only task_category and process_answer are taken from the reply; the echoed
    question, answer and image path must be present but the local values win.

    Raises:
        ReplyParseError: no JSON object, a missing key or an unknown category
    """
    payload = extract_json_object(text)
    serializer = ClassificationReplySerializer(data=payload)
    if not serializer.is_valid():
        raise ReplyParseError(f"Invalid classification reply: {format_errors(serializer.errors)}")
    data = serializer.validated_data

    category = data['task_category']
    if category not in EXACT_COPY_CATEGORIES and not data['process_answer'].strip():
        raise ReplyParseError(f"Empty process_answer for category {category}")

    return ClassifiedRecord(
        id=record.id,
        original_question=record.original_question,
        original_answer=record.original_answer,
        image_path=record.image_path,
        source_dataset=record.source_dataset,
        task_category=category,
        process_answer=data['process_answer'],
    )


def normalize_process_answer(classified):
    """Exact-copy categories get original_answer back verbatim; the rest are trimmed"""
    if classified.task_category in EXACT_COPY_CATEGORIES:
        answer = classified.original_answer
    else:
        answer = classified.process_answer.strip()
    if answer == classified.process_answer:
        return classified
    return replace(classified, process_answer=answer)


class ClassificationService:
    """Classify records through a chat backend, re-asking on unparseable replies"""

    def __init__(self, backend, retry_budget=3):
        self.backend = backend
        self.retry_budget = retry_budget

    def classify(self, record):
        """
        Returns:
            tuple: (ClassifiedRecord, raw reply text, attempts used)

        Raises:
            ReplyParseError: the budget ran out on unparseable replies
            BackendError: the backend failed for good
        """
        messages = render_classification_prompt(record)
        last_error = None
        for attempt in range(1, self.retry_budget + 1):
            reply = self.backend.chat_complete(messages, record_id=record.id)
            try:
                classified = parse_classification_response(reply, record)
            except ReplyParseError as e:
                logger.warning(f"Classification reply for {record.id} unparseable (attempt {attempt}): {e}")
                last_error = e
                continue
            return normalize_process_answer(classified), reply, attempt
        raise last_error
