import json
import logging
import math
import os
import random
import shutil
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from ..exceptions import ConfigurationError, InfeasibleBalanceError, OutputError
from ..hashing import sha256_hex
from ..images import extension_for, sniff_media_type
from ..models import EditCategory
from ..serializers import ShardRowSerializer


logger = logging.getLogger('forge_app')


UNIFORM_ABLATION = 'uniform-ablation'
CURATED_MINIMAL_TEXT = 'curated-minimal-text'

# Blackboard categories kept to a small share of the curated subset
CURATED_MINIMAL_TEXT_WEIGHTS = {
    EditCategory.SHAPE: Fraction('0.2'),
    EditCategory.COLOR: Fraction('0.2'),
    EditCategory.COUNT: Fraction('0.2'),
    EditCategory.LOCATION: Fraction('0.15'),
    EditCategory.KNOWLEDGE: Fraction('0.15'),
    EditCategory.OCR: Fraction('0.0334'),
    EditCategory.CAPTION: Fraction('0.0333'),
    EditCategory.MATH: Fraction('0.0333'),
}

WEIGHT_TOLERANCE = Fraction(1, 10 ** 9)

SUMMARY_NAME = 'dataset_summary.json'
IMAGES_DIR = 'images'


@dataclass(frozen=True)
class BalanceTargets:
    total: int
    proportions: dict

    def __post_init__(self):
        if self.total < 1:
            raise ConfigurationError("Balance total must be positive")
        weights = {str(category): Fraction(weight) for category, weight in self.proportions.items()}
        if any(weight < 0 for weight in weights.values()):
            raise ConfigurationError("Balance proportions must be non-negative")
        if abs(sum(weights.values()) - 1) > WEIGHT_TOLERANCE:
            raise ConfigurationError(f"Balance proportions sum to {float(sum(weights.values()))}, not 1")
        object.__setattr__(self, 'proportions', weights)

    @classmethod
    def uniform(cls, categories, per_category=6000):
        categories = sorted(set(categories))
        if not categories:
            raise ConfigurationError("The uniform-ablation preset needs at least one category")
        share = Fraction(1, len(categories))
        return cls(per_category * len(categories), {category: share for category in categories})

    @classmethod
    def from_config(cls, balance, pool_categories=()):
        """
        Build targets from the config's balance section.

        Args:
            balance (dict): preset / total / proportions / categories / per_category
            pool_categories: categories present in the accepted pool, used when a
                uniform preset names none
        """
        preset = balance.get('preset')
        if preset == UNIFORM_ABLATION:
            categories = balance.get('categories') or pool_categories
            return cls.uniform(categories, balance.get('per_category') or 6000)
        if preset == CURATED_MINIMAL_TEXT:
            return cls(balance['total'], dict(CURATED_MINIMAL_TEXT_WEIGHTS))
        try:
            proportions = {category: Fraction(str(weight)) for category, weight in balance['proportions'].items()}
        except (ValueError, ZeroDivisionError) as e:
            raise ConfigurationError(f"Invalid balance proportion: {e}")
        return cls(balance['total'], proportions)


@dataclass
class BalanceResult:
    records: list
    quotas: dict
    shortfall: dict = field(default_factory=dict)


def largest_remainder(total, weights):
    """
    Hamilton apportionment of `total` seats over `weights`.

    Every category gets the floor of its exact share; the seats left over go
    to the largest fractional remainders, ties broken by category name.
    """
    weights = {category: Fraction(weight) for category, weight in weights.items()}
    weight_sum = sum(weights.values())
    quotas = {category: 0 for category in weights}
    if total <= 0 or weight_sum <= 0:
        return quotas

    remainders = []
    for category, weight in weights.items():
        share = total * weight / weight_sum
        quotas[category] = math.floor(share)
        remainders.append((share - quotas[category], category))

    leftover = total - sum(quotas.values())
    remainders.sort(key=lambda item: (-item[0], str(item[1])))
    for _, category in remainders[:leftover]:
        quotas[category] += 1
    return quotas


def compute_distribution(manifest):
    """Accepted records per category; every category present, zero when empty"""
    distribution = {category.value: 0 for category in EditCategory}
    for state in manifest.records.values():
        if state.is_accepted and state.task_category in distribution:
            distribution[state.task_category] += 1
    return distribution


def _select(pool, quota, seed, category, mode):
    if mode == 'score-descending':
        ranked = sorted(pool, key=lambda r: (
            -(getattr(r, 'quality_score', None) or 0),
            0 if getattr(r, 'if_answer', None) == 'yes' else 1,
            r.id,
        ))
        return ranked[:quota]
    by_id = {record.id: record for record in pool}
    chosen = random.Random(f"{seed}:{category}").sample(sorted(by_id), quota)
    return [by_id[record_id] for record_id in chosen]


def balance_sample(accepted, targets, seed, mode='uniform'):
    """
    Draw the curated subset.

    Quotas are largest-remainder shares of targets.total; a category whose pool
    is smaller than its quota gives the difference back, and it is apportioned
    again over the categories that still have room until nothing is left.

    Args:
        accepted: records with `id` and `task_category` (and optionally
            `quality_score` / `if_answer` for score-descending mode)
        targets (BalanceTargets): total and proportions
        seed (int): draw seed
        mode (str): 'uniform' or 'score-descending'

    Returns:
        BalanceResult: records sorted by id, final quotas and any shortfall moved

    Raises:
        InfeasibleBalanceError: total exceeds the pool, or a weighted category has no records
    """
    pools = {}
    for record in accepted:
        pools.setdefault(record.task_category, []).append(record)
    weights = {category: weight for category, weight in targets.proportions.items() if weight > 0}

    empty = sorted(str(category) for category in weights if not pools.get(category))
    if empty:
        raise InfeasibleBalanceError(
            f"No accepted records for weighted categories: {', '.join(empty)}",
            shortfall={category: None for category in empty},
        )
    available = sum(len(pools[category]) for category in weights)
    if targets.total > available:
        raise InfeasibleBalanceError(
            f"Balance total {targets.total} exceeds the {available} accepted records in weighted categories",
            shortfall={'total': targets.total - available},
        )

    quotas = largest_remainder(targets.total, weights)
    shortfall = {}
    while True:
        deficit = 0
        for category, quota in quotas.items():
            room = len(pools[category])
            if quota > room:
                shortfall[category] = shortfall.get(category, 0) + quota - room
                deficit += quota - room
                quotas[category] = room
        if not deficit:
            break
        open_weights = {c: weights[c] for c in quotas if quotas[c] < len(pools[c])}
        for category, extra in largest_remainder(deficit, open_weights).items():
            quotas[category] += extra

    if shortfall:
        logger.warning(f"Balance shortfall redistributed: {shortfall}")

    curated = []
    for category in sorted(quotas, key=str):
        curated.extend(_select(pools[category], quotas[category], seed, category, mode))
    curated.sort(key=lambda record: record.id)
    return BalanceResult(curated, {str(k): v for k, v in quotas.items()}, {str(k): v for k, v in shortfall.items()})


@dataclass(frozen=True)
class OutputRecord:
    id: str
    task_category: str
    variant: str
    original_question: str
    original_answer: str
    process_answer: str
    edit_instruction: str
    source_path: Path
    target_path: Path


def _place_image(source, images_dir):
    """Hard-link (or copy) an image under its content hash; returns the relative name"""
    data = Path(source).read_bytes()
    name = f"{sha256_hex(data)}{extension_for(sniff_media_type(data))}"
    destination = images_dir / name
    if not destination.exists():
        try:
            os.link(source, destination)
        except OSError:
            shutil.copyfile(source, destination)
    return f"{IMAGES_DIR}/{name}"


def write_outputs(curated, out_dir, shard_size, extra=None):
    """
    Write curated records as JSONL shards plus images and a summary.

    Shards are named shard-00000.jsonl onward, hold at most shard_size rows
    and are ordered by record id. Stale shards from an earlier write are removed.

    Returns:
        dict: the summary also written to dataset_summary.json

    Raises:
        OutputError: the output directory cannot be written
    """
    if shard_size < 1:
        raise ConfigurationError("shard_size must be positive")
    out_dir = Path(out_dir)
    records = sorted(curated, key=lambda record: record.id)
    try:
        images_dir = out_dir / IMAGES_DIR
        images_dir.mkdir(parents=True, exist_ok=True)
        for stale in out_dir.glob('shard-*.jsonl'):
            stale.unlink()

        shards = []
        placed = set()
        category_counts = {}
        variant_counts = {}
        for index in range(0, len(records), shard_size):
            chunk = records[index:index + shard_size]
            lines = []
            for record in chunk:
                source_image = _place_image(record.source_path, images_dir)
                target_image = _place_image(record.target_path, images_dir)
                placed.update((source_image, target_image))
                row = ShardRowSerializer({
                    'id': record.id,
                    'task_category': record.task_category,
                    'variant': record.variant,
                    'original_question': record.original_question,
                    'original_answer': record.original_answer,
                    'process_answer': record.process_answer,
                    'edit_instruction': record.edit_instruction,
                    'source_image': source_image,
                    'target_image': target_image,
                }).data
                lines.append(json.dumps(row, ensure_ascii=False) + '\n')
                category_counts[record.task_category] = category_counts.get(record.task_category, 0) + 1
                variant_counts[record.variant] = variant_counts.get(record.variant, 0) + 1

            name = f"shard-{len(shards):05d}.jsonl"
            content = ''.join(lines).encode('utf-8')
            (out_dir / name).write_bytes(content)
            shards.append({'name': name, 'records': len(chunk), 'sha256': sha256_hex(content)})

        summary = {
            'records': len(records),
            'shard_size': shard_size,
            'shards': shards,
            'category_counts': dict(sorted(category_counts.items())),
            'variant_counts': dict(sorted(variant_counts.items())),
            'images': len(placed),
            **(extra or {}),
        }
        (out_dir / SUMMARY_NAME).write_text(
            json.dumps(summary, indent=2, sort_keys=True, ensure_ascii=False) + '\n', encoding='utf-8'
        )
    except OSError as e:
        raise OutputError(f"Cannot write outputs to {out_dir}: {e}")

    logger.info(f"Wrote {len(records)} records in {len(shards)} shard(s) to {out_dir}")
    return summary
