"""
Record types flowing through the pipeline.

Nothing here is persisted through the ORM: records live in the work-dir ledger.
The enumerations use Django's TextChoices so labels and values stay together.
"""
from dataclasses import dataclass, field, asdict
from typing import Optional

from django.db import models


class EditCategory(models.TextChoices):
    SHAPE = 'shape', 'Shape'
    COUNT = 'count', 'Count'
    BOOL = 'bool', 'Yes/No'
    COLOR = 'color', 'Color'
    LOCATION = 'location', 'Location'
    CAPTION = 'caption', 'Caption'
    OCR = 'ocr', 'OCR'
    MATH = 'math', 'Math'
    MULTI_CHOICE = 'multi-choice', 'Multi-choice'
    OTHERS = 'others', 'Others'
    KNOWLEDGE = 'knowledge', 'Knowledge'


# Categories whose process_answer must be an exact copy of original_answer
EXACT_COPY_CATEGORIES = frozenset({
    EditCategory.CAPTION, EditCategory.MATH, EditCategory.MULTI_CHOICE, EditCategory.OTHERS,
})

# The classifier never emits knowledge; it only enters through the knowledge merge
CLASSIFIER_CATEGORIES = frozenset(c for c in EditCategory if c != EditCategory.KNOWLEDGE)


class InstructionVariant(models.TextChoices):
    ATTRIBUTE_BOOL = 'attribute-bool', 'Attribute bool'
    ATTRIBUTE_GENERATION = 'attribute-generation', 'Attribute generation'
    COUNT_BOOL = 'count-bool', 'Count bool'
    COUNT_GENERATION = 'count-generation', 'Count generation'
    LOCATION_REPLACEMENT = 'location-replacement', 'Location replacement'
    BLACKBOARD_CAPTION_OCR = 'blackboard-caption-ocr', 'Blackboard caption/OCR'
    BLACKBOARD_MATH = 'blackboard-math', 'Blackboard math'
    BLACKBOARD_MULTICHOICE = 'blackboard-multichoice', 'Blackboard multi-choice'
    KNOWLEDGE_PASSTHROUGH = 'knowledge-passthrough', 'Knowledge passthrough'


BLACKBOARD_VARIANTS = frozenset({
    InstructionVariant.BLACKBOARD_CAPTION_OCR,
    InstructionVariant.BLACKBOARD_MATH,
    InstructionVariant.BLACKBOARD_MULTICHOICE,
})

# These templates embed the reference answer as a hypothesis to verify
CONDITIONAL_VARIANTS = frozenset({
    InstructionVariant.ATTRIBUTE_BOOL,
    InstructionVariant.COUNT_BOOL,
})

AESTHETIC_VARIANTS = frozenset({
    InstructionVariant.ATTRIBUTE_BOOL,
    InstructionVariant.ATTRIBUTE_GENERATION,
    InstructionVariant.COUNT_BOOL,
    InstructionVariant.COUNT_GENERATION,
    InstructionVariant.LOCATION_REPLACEMENT,
})


class RecordStatus(models.TextChoices):
    INGESTED = 'ingested', 'Ingested'
    DROPPED_OTHERS = 'dropped-others', 'Dropped (others)'
    REJECTED_CLASSIFICATION = 'rejected-classification', 'Rejected at classification'
    CLASSIFIED = 'classified', 'Classified'
    TRANSFORMED = 'transformed', 'Transformed'
    REJECTED_VALIDATION = 'rejected-validation', 'Rejected at validation'
    GENERATED = 'generated', 'Generated'
    REJECTED_GENERATION = 'rejected-generation', 'Rejected at generation'
    FILTERED_ACCEPTED = 'filtered-accepted', 'Accepted by filter'
    FILTERED_REJECTED = 'filtered-rejected', 'Rejected by filter'
    CURATED = 'curated', 'Curated'


TERMINAL_STATUSES = frozenset({
    RecordStatus.DROPPED_OTHERS,
    RecordStatus.REJECTED_CLASSIFICATION,
    RecordStatus.REJECTED_VALIDATION,
    RecordStatus.REJECTED_GENERATION,
    RecordStatus.FILTERED_ACCEPTED,
    RecordStatus.FILTERED_REJECTED,
    RecordStatus.CURATED,
})

ACCEPTED_STATUSES = frozenset({RecordStatus.FILTERED_ACCEPTED, RecordStatus.CURATED})

# None is the state of a record the ledger has never seen
STATUS_TRANSITIONS = {
    None: {RecordStatus.INGESTED},
    RecordStatus.INGESTED: {
        RecordStatus.CLASSIFIED, RecordStatus.DROPPED_OTHERS,
        RecordStatus.REJECTED_CLASSIFICATION, RecordStatus.TRANSFORMED,
    },
    RecordStatus.CLASSIFIED: {RecordStatus.TRANSFORMED, RecordStatus.REJECTED_VALIDATION},
    RecordStatus.TRANSFORMED: {RecordStatus.GENERATED, RecordStatus.REJECTED_GENERATION},
    RecordStatus.GENERATED: {
        RecordStatus.FILTERED_ACCEPTED, RecordStatus.FILTERED_REJECTED,
        RecordStatus.GENERATED, RecordStatus.REJECTED_GENERATION,
    },
    RecordStatus.FILTERED_ACCEPTED: {RecordStatus.CURATED},
}


class Stage(models.TextChoices):
    INGEST = 'ingest', 'Ingest'
    CLASSIFY = 'classify', 'Classify'
    TRANSFORM = 'transform', 'Transform'
    GENERATE = 'generate', 'Generate'
    FILTER = 'filter', 'Filter'
    ASSEMBLE = 'assemble', 'Assemble'

    @classmethod
    def ordered(cls):
        return [cls.INGEST, cls.CLASSIFY, cls.TRANSFORM, cls.GENERATE, cls.FILTER, cls.ASSEMBLE]

    def index(self):
        return Stage.ordered().index(self)


KNOWLEDGE_PLACEHOLDER = '-'


@dataclass(frozen=True, kw_only=True)
class VqaRecord:
    """One source understanding sample"""
    id: str
    original_question: str
    original_answer: str
    image_path: str
    source_dataset: str = ''

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, kw_only=True)
class ClassifiedRecord(VqaRecord):
    task_category: str
    process_answer: str


@dataclass(frozen=True, kw_only=True)
class InstructionRecord(ClassifiedRecord):
    edit_instruction: str
    variant: str
    # Knowledge rows may ship a ready-made target image
    target_image_path: Optional[str] = None


@dataclass(frozen=True)
class BackendMeta:
    model_id: str
    latency_ms: int
    attempt_count: int


@dataclass(frozen=True, kw_only=True)
class EditedSample(InstructionRecord):
    target_image: bytes = field(repr=False)
    target_media_type: str = 'image/png'
    backend_meta: BackendMeta


@dataclass(frozen=True)
class Rejection:
    """A per-line or per-record rejection, reported rather than dropped silently"""
    line_number: Optional[int]
    reason: str
    record_id: Optional[str] = None

    def to_dict(self):
        data = {'line_number': self.line_number, 'reason': self.reason}
        if self.record_id:
            data['record_id'] = self.record_id
        return data
