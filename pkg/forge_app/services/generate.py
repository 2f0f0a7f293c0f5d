import logging
from dataclasses import dataclass, field
from pathlib import Path

from ..models import KNOWLEDGE_PLACEHOLDER, BackendMeta, EditCategory, EditedSample
from ..images import read_image


logger = logging.getLogger('forge_app')


@dataclass(frozen=True)
class GenerationRequest:
    """What the edit backend receives: instruction, QA context and the source image"""
    record_id: str
    edit_instruction: str
    context_question: str
    context_answer: str
    source_image: bytes = field(repr=False)
    media_type: str = 'image/png'


def build_generation_request(record, image_root):
    """
    Args:
        record (InstructionRecord): a record that passed transform
        image_root (str|Path): directory the record's image_path is relative to

    Returns:
        GenerationRequest, or None for knowledge rows that ship their own target

    Raises:
        ImageLoadError: the source image is missing or undecodable
    """
    if record.task_category == EditCategory.KNOWLEDGE and record.target_image_path:
        return None
    data, media_type = read_image(Path(image_root) / record.image_path)
    is_knowledge = record.task_category == EditCategory.KNOWLEDGE
    return GenerationRequest(
        record_id=record.id,
        edit_instruction=record.edit_instruction,
        context_question=KNOWLEDGE_PLACEHOLDER if is_knowledge else record.original_question,
        context_answer=KNOWLEDGE_PLACEHOLDER if is_knowledge else record.process_answer,
        source_image=data,
        media_type=media_type,
    )


def submit_edit(request, record, backend):
    """
    Run one edit through the backend (retries and admission live in the backend).

    Returns:
        EditedSample

    Raises:
        TransientBackendError: retry budget exhausted; carries `attempts`
        PermanentBackendError: the backend refused the request
    """
    result = backend.edit_image(request)
    logger.debug(f"Generated {record.id} in {result.latency_ms}ms after {result.attempts} attempt(s)")
    return EditedSample(
        **record.to_dict(),
        target_image=result.image,
        target_media_type=result.media_type,
        backend_meta=BackendMeta(result.model_id, result.latency_ms, result.attempts),
    )
