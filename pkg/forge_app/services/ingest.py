import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from ..exceptions import IngestError
from ..hashing import content_hash
from ..models import Rejection, VqaRecord
from ..replies import format_errors
from ..serializers import VqaRecordSerializer


logger = logging.getLogger('forge_app')


@dataclass
class IngestResult:
    """Records in input order plus everything that was turned away"""
    records: list = field(default_factory=list)
    rejections: list = field(default_factory=list)
    lines_read: int = 0

    def is_conserved(self):
        return self.lines_read == len(self.records) + len(self.rejections)


def dedup_key(record):
    """Stable key over the trimmed (question, answer, image_path) triple"""
    return content_hash(record.original_question, record.original_answer, record.image_path)


def image_problem(image_root, relative_path):
    """
    None for a readable file under image_root, otherwise the rejection reason:
    image-outside-root or missing-image.
    """
    root = Path(image_root).resolve()
    path = (root / relative_path).resolve()
    if not path.is_relative_to(root):
        return 'image-outside-root'
    if not (path.is_file() and os.access(path, os.R_OK)):
        return 'missing-image'
    return None


def iter_jsonl(path):
    """
    Yield (line_number, payload_or_None, error) for every non-blank line.

    Raises:
        IngestError: the file itself cannot be opened or decoded
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            for line_number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    payload = json.loads(line)
                except json.JSONDecodeError as e:
                    yield line_number, None, f"malformed-json: {e.msg}"
                    continue
                if not isinstance(payload, dict):
                    yield line_number, None, "not-an-object"
                    continue
                yield line_number, payload, None
    except (OSError, UnicodeDecodeError) as e:
        raise IngestError(f"Cannot read {path}: {e}")


def load_vqa_dataset(path, image_root):
    """
    Load, validate and deduplicate source VQA records from a JSONL file.

    Args:
        path (str|Path): line-delimited JSON file
        image_root (str|Path): directory the image paths are relative to

    Returns:
        IngestResult: records in input order; one rejection per refused line
    """
    result = IngestResult()
    seen_keys = set()
    seen_ids = set()

    for line_number, payload, error in iter_jsonl(path):
        result.lines_read += 1
        if error:
            result.rejections.append(Rejection(line_number, error))
            continue

        serializer = VqaRecordSerializer(data=payload)
        if not serializer.is_valid():
            result.rejections.append(
                Rejection(line_number, f"invalid-record: {format_errors(serializer.errors)}")
            )
            continue
        data = serializer.validated_data

        key = content_hash(data['original_question'], data['original_answer'], data['image_path'])
        record_id = data.get('id') or key[:16]
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

        seen_keys.add(key)
        seen_ids.add(record_id)
        result.records.append(VqaRecord(
            id=record_id,
            original_question=data['original_question'],
            original_answer=data['original_answer'],
            image_path=data['image_path'],
            source_dataset=data.get('source_dataset') or '',
        ))

    logger.info(
        f"Ingested {len(result.records)} records from {path} "
        f"({len(result.rejections)} rejected of {result.lines_read} lines)"
    )
    return result


def write_rejection_report(rejections, path):
    """Write rejections as {line_number, reason} JSONL, replacing any earlier report"""
    with open(path, 'w', encoding='utf-8') as f:
        for rejection in rejections:
            f.write(json.dumps(rejection.to_dict(), ensure_ascii=False) + '\n')
