import logging
from dataclasses import dataclass
from typing import Optional

from ..backends import image_part, text_part
from ..exceptions import ImageLoadError, PreconditionError, ReplyParseError
from ..images import sniff_media_type
from ..prompts import IMAGE_QUALITY_PROMPT, INSTRUCTION_FOLLOWING_PROMPT, render_layout
from ..replies import extract_json_object, format_errors
from ..serializers import FollowingReplySerializer, QualityReplySerializer


logger = logging.getLogger('forge_app')


REASON_QUALITY = 'quality'
REASON_FOLLOWING = 'instruction-following'


@dataclass(frozen=True)
class FilterVerdict:
    quality_analysis: str
    quality_score: int
    if_reasoning: str = ''
    # None only when the following judge was short-circuited
    if_answer: Optional[str] = None
    quality_reply: str = ''
    following_reply: str = ''

    def to_dict(self):
        return {
            'quality_analysis': self.quality_analysis,
            'quality_score': self.quality_score,
            'if_reasoning': self.if_reasoning,
            'if_answer': self.if_answer,
            'quality_reply': self.quality_reply,
            'following_reply': self.following_reply,
        }


@dataclass(frozen=True)
class Decision:
    reasons: tuple = ()

    @property
    def accepted(self):
        return not self.reasons

    def __bool__(self):
        return self.accepted


def _checked_media_type(data, what):
    try:
        return sniff_media_type(data)
    except ImageLoadError as e:
        raise PreconditionError(f"{what} image is not decodable: {e}")


def render_quality_prompt(sample):
    """
    Quality-judge messages: the verbatim rubric plus the edited image alone.

    Raises:
        PreconditionError: the target image does not decode
    """
    media_type = _checked_media_type(sample.target_image, 'Edited')
    return [
        {'role': 'system', 'content': IMAGE_QUALITY_PROMPT},
        {'role': 'user', 'content': [image_part(sample.target_image, media_type)]},
    ]


def render_following_prompt(sample, source_image):
    """
    Following-judge messages: context text, then the original image, then the edited one.

    Args:
        sample (EditedSample): judged sample
        source_image (bytes): the original image the edit started from

    Raises:
        PreconditionError: either image does not decode
    """
    source_media_type = _checked_media_type(source_image, 'Original')
    target_media_type = _checked_media_type(sample.target_image, 'Edited')
    context = render_layout('instruction-following', {
        'edit_instruction': sample.edit_instruction,
        'original_question': sample.original_question,
        'process_answer': sample.process_answer,
    })
    return [
        {'role': 'system', 'content': INSTRUCTION_FOLLOWING_PROMPT},
        {'role': 'user', 'content': [
            text_part(context),
            image_part(source_image, source_media_type),
            image_part(sample.target_image, target_media_type),
        ]},
    ]


def parse_quality_reply(text):
    serializer = QualityReplySerializer(data=extract_json_object(text))
    if not serializer.is_valid():
        raise ReplyParseError(f"Invalid quality verdict: {format_errors(serializer.errors)}")
    return serializer.validated_data


def parse_following_reply(text):
    serializer = FollowingReplySerializer(data=extract_json_object(text))
    if not serializer.is_valid():
        raise ReplyParseError(f"Invalid instruction-following verdict: {format_errors(serializer.errors)}")
    return serializer.validated_data


def parse_verdicts(quality_reply, following_reply):
    """
    Raises:
        ReplyParseError: score outside 1..5, answer not yes/no, or no JSON at all
    """
    quality = parse_quality_reply(quality_reply)
    following = parse_following_reply(following_reply)
    return FilterVerdict(
        quality_analysis=quality['analysis'],
        quality_score=quality['score'],
        if_reasoning=following['reasoning'],
        if_answer=following['answer'],
        quality_reply=quality_reply,
        following_reply=following_reply,
    )


def decide(verdict, min_quality=3):
    """Accept iff the score reaches min_quality and the following judge said yes"""
    if not 1 <= min_quality <= 5:
        raise PreconditionError(f"min_quality must be within 1..5, got {min_quality}")
    reasons = []
    if verdict.quality_score < min_quality:
        reasons.append(REASON_QUALITY)
    if verdict.if_answer != 'yes':
        reasons.append(REASON_FOLLOWING)
    return Decision(tuple(reasons))


class FilterService:
    """Ask both judges about a sample and decide on it"""

    def __init__(self, quality_backend, following_backend, retry_budget=3, min_quality=3,
                 short_circuit=False):
        self.quality_backend = quality_backend
        self.following_backend = following_backend
        self.retry_budget = retry_budget
        self.min_quality = min_quality
        self.short_circuit = short_circuit

    def _ask(self, backend, messages, parse, record_id):
        last_error = None
        for attempt in range(1, self.retry_budget + 1):
            reply = backend.chat_complete(messages, record_id=record_id)
            try:
                return reply, parse(reply)
            except ReplyParseError as e:
                logger.warning(f"{backend.role} reply for {record_id} unparseable (attempt {attempt}): {e}")
                last_error = e
        raise last_error

    def judge(self, sample, source_image):
        """
        Returns:
            tuple: (FilterVerdict, Decision)

        Raises:
            ReplyParseError: a judge stayed unparseable for the whole budget
        """
        quality_reply, quality = self._ask(
            self.quality_backend, render_quality_prompt(sample), parse_quality_reply, sample.id
        )
        verdict = FilterVerdict(
            quality_analysis=quality['analysis'],
            quality_score=quality['score'],
            quality_reply=quality_reply,
        )
        if self.short_circuit and verdict.quality_score < self.min_quality:
            return verdict, Decision((REASON_QUALITY,))

        following_reply, following = self._ask(
            self.following_backend, render_following_prompt(sample, source_image),
            parse_following_reply, sample.id,
        )
        verdict = FilterVerdict(
            quality_analysis=verdict.quality_analysis,
            quality_score=verdict.quality_score,
            if_reasoning=following['reasoning'],
            if_answer=following['answer'],
            quality_reply=quality_reply,
            following_reply=following_reply,
        )
        return verdict, decide(verdict, self.min_quality)
