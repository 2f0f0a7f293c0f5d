import logging
from dataclasses import dataclass

from ..exceptions import InstructionRejectedError, PreconditionError, ReplyParseError, RoutingError
from ..hashing import content_hash, seeded_fraction
from ..models import (
    AESTHETIC_VARIANTS, BLACKBOARD_VARIANTS, CONDITIONAL_VARIANTS, KNOWLEDGE_PLACEHOLDER,
    EditCategory, InstructionRecord, InstructionVariant, Rejection,
)
from ..prompts import TRANSFORM_PROMPTS, render_layout
from ..replies import extract_json_object, format_errors
from ..serializers import InstructionReplySerializer, KnowledgeRecordSerializer
from .ingest import IngestResult, image_problem, iter_jsonl


logger = logging.getLogger('forge_app')


DEFAULT_AESTHETIC_MARKERS = ('Refine the image', 'enhance', 'aesthetic')

CHALK_STYLE = 'Chalk-style'

FINAL_ANSWER_ANCHOR = 'final answer is'

# Templates whose input block lists process_answer; the others must never see it
PROCESS_ANSWER_VARIANTS = frozenset({
    InstructionVariant.ATTRIBUTE_BOOL,
    InstructionVariant.ATTRIBUTE_GENERATION,
    InstructionVariant.COUNT_BOOL,
    InstructionVariant.COUNT_GENERATION,
    InstructionVariant.LOCATION_REPLACEMENT,
    InstructionVariant.BLACKBOARD_MATH,
})

LEAKAGE_EXEMPT_VARIANTS = CONDITIONAL_VARIANTS | {InstructionVariant.KNOWLEDGE_PASSTHROUGH}

# category -> (variant when the draw is below bool_fraction, variant otherwise)
VARIANT_ROUTES = {
    EditCategory.SHAPE: (InstructionVariant.ATTRIBUTE_BOOL, InstructionVariant.ATTRIBUTE_GENERATION),
    EditCategory.COLOR: (InstructionVariant.ATTRIBUTE_BOOL, InstructionVariant.ATTRIBUTE_GENERATION),
    EditCategory.COUNT: (InstructionVariant.COUNT_BOOL, InstructionVariant.COUNT_GENERATION),
    EditCategory.LOCATION: (InstructionVariant.LOCATION_REPLACEMENT,) * 2,
    EditCategory.CAPTION: (InstructionVariant.BLACKBOARD_CAPTION_OCR,) * 2,
    EditCategory.OCR: (InstructionVariant.BLACKBOARD_CAPTION_OCR,) * 2,
    EditCategory.MATH: (InstructionVariant.BLACKBOARD_MATH,) * 2,
    EditCategory.MULTI_CHOICE: (InstructionVariant.BLACKBOARD_MULTICHOICE,) * 2,
    EditCategory.BOOL: (InstructionVariant.BLACKBOARD_MULTICHOICE,) * 2,
}


@dataclass(frozen=True)
class CheckResult:
    """Outcome of an instruction check; falsy when it failed"""
    reasons: tuple = ()
    warnings: tuple = ()

    @property
    def passed(self):
        return not self.reasons

    def __bool__(self):
        return self.passed


def select_variant(category, seed, record_id, bool_fraction=0.5):
    """
    Pick the instruction variant for a record.

    Deterministic in (seed, record_id). Shape, color and count split between
    their conditional and generation variants at bool_fraction.

    Raises:
        RoutingError: others and knowledge have no variant
    """
    try:
        conditional, generation = VARIANT_ROUTES[EditCategory(category)]
    except (KeyError, ValueError):
        raise RoutingError(f"No instruction variant for category {category!r}")
    if conditional == generation:
        return conditional
    return conditional if seeded_fraction(seed, record_id) < bool_fraction else generation


def variant_accepts(category, variant):
    routes = VARIANT_ROUTES.get(category, ())
    return variant in routes


def render_transform_prompt(record, variant):
    """
    Build the instruction-writer chat messages for one classified record.

    Raises:
        PreconditionError: the variant cannot serve the record's category
    """
    variant = InstructionVariant(variant)
    if not variant_accepts(record.task_category, variant):
        raise PreconditionError(
            f"Variant {variant} does not serve category {record.task_category} (record {record.id})"
        )
    context = {
        'task_category': record.task_category,
        'original_question': record.original_question,
        'process_answer': record.process_answer if variant in PROCESS_ANSWER_VARIANTS else None,
    }
    return [
        {'role': 'system', 'content': TRANSFORM_PROMPTS[variant]},
        {'role': 'user', 'content': render_layout('transform', context)},
    ]


def parse_instruction_response(text):
    """
    Raises:
        ReplyParseError: no JSON object or an empty/missing edit_instruction
    """
    payload = extract_json_object(text)
    serializer = InstructionReplySerializer(data=payload)
    if not serializer.is_valid():
        raise ReplyParseError(f"Invalid instruction reply: {format_errors(serializer.errors)}")
    return serializer.validated_data['edit_instruction']


def final_answer_token(record):
    """The part of process_answer an instruction must not reveal"""
    answer = record.process_answer.strip()
    if record.task_category == EditCategory.MATH:
        position = answer.lower().rfind(FINAL_ANSWER_ANCHOR)
        if position != -1:
            answer = answer[position + len(FINAL_ANSWER_ANCHOR):]
        answer = answer.strip().rstrip('.,;:!?').strip()
    return answer


def _occurrences(token, text):
    return text.casefold().count(token.casefold())


def check_leakage(instruction, record, variant):
    """
    Fail when the instruction reveals the record's final answer.

    Conditional variants (and knowledge rows) are exempt because their
    templates state the reference answer as a hypothesis. Multi-choice
    instructions must repeat the options, so only occurrences beyond those
    already in the question count.
    """
    if variant in LEAKAGE_EXEMPT_VARIANTS or record.task_category == EditCategory.KNOWLEDGE:
        return CheckResult()
    token = final_answer_token(record)
    if not token or token == KNOWLEDGE_PLACEHOLDER:
        return CheckResult()

    found = _occurrences(token, instruction)
    allowed = 0
    if variant == InstructionVariant.BLACKBOARD_MULTICHOICE:
        allowed = _occurrences(token, record.original_question)
    if found > allowed:
        return CheckResult(reasons=('answer-leakage',))
    return CheckResult()


def validate_instruction(instruction, variant, aesthetic_markers=DEFAULT_AESTHETIC_MARKERS):
    """
    Format rules per variant.

    Reason codes: empty-instruction, missing-chalk-style, missing-aesthetics.
    Blackboard variants only get a missing-aesthetics warning.
    """
    if variant == InstructionVariant.KNOWLEDGE_PASSTHROUGH:
        return CheckResult()
    if not instruction or not instruction.strip():
        return CheckResult(reasons=('empty-instruction',))

    lowered = instruction.lower()
    has_aesthetics = any(marker.lower() in lowered for marker in aesthetic_markers)
    reasons = []
    warnings = []
    if variant in BLACKBOARD_VARIANTS:
        if CHALK_STYLE not in instruction:
            reasons.append('missing-chalk-style')
        if not has_aesthetics:
            warnings.append('missing-aesthetics')
    elif variant in AESTHETIC_VARIANTS and not has_aesthetics:
        reasons.append('missing-aesthetics')
    return CheckResult(reasons=tuple(reasons), warnings=tuple(warnings))


def merge_knowledge_subset(path, image_root, target_root=None):
    """
    Load externally sourced knowledge rows as already-transformed records.

    Args:
        path (str|Path): JSONL of {edit_instruction, image_path, target_image_path?}
        image_root (str|Path): root for image_path
        target_root (str|Path): root for target_image_path, defaults to image_root

    Returns:
        IngestResult: InstructionRecords with variant knowledge-passthrough
    """
    target_root = target_root or image_root
    result = IngestResult()
    seen_keys = set()
    seen_ids = set()

    for line_number, payload, error in iter_jsonl(path):
        result.lines_read += 1
        if error:
            result.rejections.append(Rejection(line_number, error))
            continue
        serializer = KnowledgeRecordSerializer(data=payload)
        if not serializer.is_valid():
            result.rejections.append(
                Rejection(line_number, f"invalid-record: {format_errors(serializer.errors)}")
            )
            continue
        data = serializer.validated_data

        target = data['target_image_path']
        key = content_hash(data['edit_instruction'], data['image_path'], target or '')
        record_id = data.get('id') or f"kn-{key[:16]}"
        if key in seen_keys:
            result.rejections.append(Rejection(line_number, 'duplicate', record_id))
            continue
        if record_id in seen_ids:
            result.rejections.append(Rejection(line_number, 'duplicate-id', record_id))
            continue
        problem = image_problem(image_root, data['image_path'])
        if problem:
            result.rejections.append(Rejection(line_number, f"{problem}: {data['image_path']}", record_id))
            continue
        problem = target and image_problem(target_root, target)
        if problem:
            result.rejections.append(Rejection(line_number, f"target-{problem}: {target}", record_id))
            continue

        seen_keys.add(key)
        seen_ids.add(record_id)
        result.records.append(InstructionRecord(
            id=record_id,
            original_question=KNOWLEDGE_PLACEHOLDER,
            original_answer=KNOWLEDGE_PLACEHOLDER,
            image_path=data['image_path'],
            source_dataset=data.get('source_dataset') or 'knowledge',
            task_category=EditCategory.KNOWLEDGE.value,
            process_answer=KNOWLEDGE_PLACEHOLDER,
            edit_instruction=data['edit_instruction'],
            variant=InstructionVariant.KNOWLEDGE_PASSTHROUGH.value,
            target_image_path=target,
        ))

    logger.info(
        f"Merged {len(result.records)} knowledge records from {path} "
        f"({len(result.rejections)} rejected)"
    )
    return result


class TransformService:
    """Write and vet edit instructions through a chat backend"""

    def __init__(self, backend, seed=0, retry_budget=3, bool_fraction=0.5,
                 aesthetic_markers=DEFAULT_AESTHETIC_MARKERS):
        self.backend = backend
        self.seed = seed
        self.retry_budget = retry_budget
        self.bool_fraction = bool_fraction
        self.aesthetic_markers = tuple(aesthetic_markers)

    def transform(self, record):
        """
        Returns:
            tuple: (InstructionRecord, raw reply, attempts, warnings)

        Raises:
            RoutingError: the category has no variant
            InstructionRejectedError: every attempt failed parsing or checks
            BackendError: the backend failed for good
        """
        variant = select_variant(record.task_category, self.seed, record.id, self.bool_fraction)
        messages = render_transform_prompt(record, variant)
        reasons = []
        for attempt in range(1, self.retry_budget + 1):
            reply = self.backend.chat_complete(messages, record_id=record.id)
            try:
                instruction = parse_instruction_response(reply)
            except ReplyParseError as e:
                logger.warning(f"Instruction reply for {record.id} unparseable (attempt {attempt}): {e}")
                reasons = ['unparseable-reply']
                continue

            leakage = check_leakage(instruction, record, variant)
            validation = validate_instruction(instruction, variant, self.aesthetic_markers)
            reasons = list(leakage.reasons + validation.reasons)
            if reasons:
                logger.warning(f"Instruction for {record.id} failed checks (attempt {attempt}): {reasons}")
                continue

            transformed = InstructionRecord(
                **record.to_dict(), edit_instruction=instruction, variant=variant.value,
            )
            return transformed, reply, attempt, list(validation.warnings)

        raise InstructionRejectedError(
            f"Instruction for {record.id} rejected after {self.retry_budget} attempts",
            reasons=reasons, attempts=self.retry_budget,
        )
