"""
Stage orchestration over the work-dir ledger.

Stages run in order; within a stage records run concurrently on a bounded
thread pool. Every status change is a ledger event, so an interrupted run picks
up where each record left off.
"""
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict
from pathlib import Path

from tqdm import tqdm

from .backends import MockTranscript, build_backends
from .config import build_config
from .exceptions import (
    BackendError, ImageLoadError, InstructionRejectedError, LedgerError, PreconditionError,
    ReplyParseError, ResumeRefusedError, RoutingError, StorageError,
)
from .images import ImageStore, read_image
from .ledger import LEDGER_NAME, DatasetManifest, LedgerWriter, WorkDirLock, read_ledger
from .models import BackendMeta, EditCategory, EditedSample, RecordStatus, Rejection, Stage
from .prompts import template_hashes
from .services.assemble import (
    BalanceTargets, OutputRecord, balance_sample, compute_distribution, write_outputs,
)
from .services.classify import ClassificationService
from .services.filtering import FilterService
from .services.generate import build_generation_request, submit_edit
from .services.ingest import load_vqa_dataset, write_rejection_report
from .services.transform import TransformService, merge_knowledge_subset


logger = logging.getLogger('forge_app')


MANIFEST_NAME = 'manifest.json'
TRANSCRIPT_NAME = 'mock_transcript.jsonl'
IMAGES_DIR = 'images'

# The stage that moves a record on from its current status
NEXT_STAGE = {
    RecordStatus.INGESTED: Stage.CLASSIFY,
    RecordStatus.CLASSIFIED: Stage.TRANSFORM,
    RecordStatus.TRANSFORMED: Stage.GENERATE,
    RecordStatus.GENERATED: Stage.FILTER,
}

REJECTED_AT = {
    Stage.CLASSIFY: RecordStatus.REJECTED_CLASSIFICATION,
    Stage.TRANSFORM: RecordStatus.REJECTED_VALIDATION,
    Stage.GENERATE: RecordStatus.REJECTED_GENERATION,
    Stage.FILTER: RecordStatus.FILTERED_REJECTED,
}

STAGE_ROLES = {
    Stage.CLASSIFY: ('classifier',),
    Stage.TRANSFORM: ('transformer',),
    Stage.GENERATE: ('generator',),
    Stage.FILTER: ('judge_quality', 'judge_following'),
}

# Work-dir failures stop the whole run; anything else only costs one record
FATAL_ERRORS = (LedgerError, StorageError)


class Pipeline:
    """
    One run over one work dir.

    Args:
        config (PipelineConfig): validated run configuration
        sleep (callable): used between retries; tests pass a no-op
        replies (dict): scripted mock replies keyed by marker substring
    """

    def __init__(self, config, sleep=time.sleep, replies=None):
        self.config = config
        self.work_dir = Path(config.work_dir)
        self.sleep = sleep
        self.replies = replies
        self.manifest = None
        self.writer = None
        self.backends = None

    # --- Entry points --------------------------------------------------------

    def run(self, until=Stage.ASSEMBLE):
        """
        Take every record as far as `until`, then assemble when asked to.

        An existing ledger in the work dir is continued, provided it was
        written under the same config hash.

        Returns:
            DatasetManifest
        """
        until = Stage(until)
        with WorkDirLock(self.work_dir):
            self._open(until)
            try:
                if Stage.INGEST not in self.manifest.completed_stages:
                    self._ingest()
                if until.index() > Stage.INGEST.index():
                    self._advance_all(until)
                if until == Stage.ASSEMBLE:
                    self._assemble()
            finally:
                self.writer.close()
            self._write_manifest()
        logger.info(
            f"Run finished at {until}: {len(self.manifest.records)} records, "
            f"{dict(sorted(self.manifest.status_counts().items()))}"
        )
        return self.manifest

    def assemble_only(self):
        """
        Redraw the curated subset and rewrite outputs from a filtered ledger.

        Raises:
            PreconditionError: some records have not finished filtering
        """
        with WorkDirLock(self.work_dir):
            self._open(Stage.ASSEMBLE)
            try:
                waiting = self.manifest.in_flight()
                if waiting or Stage.INGEST not in self.manifest.completed_stages:
                    raise PreconditionError(
                        f"{len(waiting)} records have not finished filtering; run the filter stage first"
                    )
                self._assemble()
            finally:
                self.writer.close()
            self._write_manifest()
        return self.manifest

    # --- Setup ---------------------------------------------------------------

    def _open(self, until):
        self.work_dir.mkdir(parents=True, exist_ok=True)
        config_hash = self.config.config_hash()
        if (self.work_dir / LEDGER_NAME).exists():
            manifest = read_ledger(self.work_dir)
            if manifest.config_hash != config_hash:
                raise ResumeRefusedError(
                    f"Work dir {self.work_dir} was written under config hash {manifest.config_hash}, "
                    f"not {config_hash}"
                )
        else:
            manifest = DatasetManifest()

        self.manifest = manifest
        self.writer = LedgerWriter(self.work_dir, manifest, self.config.ledger_flush_every)
        if not manifest.header:
            self.writer.append({
                'type': 'header',
                'config_hash': config_hash,
                'seed': self.config.seed,
                'template_hashes': template_hashes(),
                'config': self.config.to_document(),
            })
        session = manifest.sessions + 1
        self.writer.append({'type': 'session', 'session': session, 'until': str(until)})

        self.store = ImageStore(self.work_dir / IMAGES_DIR)
        transcript = None
        if self.config.flags.mock:
            transcript = MockTranscript(self.work_dir / TRANSCRIPT_NAME, session)
        self.backends = build_backends(self.config, transcript, sleep=self.sleep, replies=self.replies)

        config = self.config
        self.classifier = ClassificationService(self.backends['classifier'], config.retry_budget)
        self.transformer = TransformService(
            self.backends['transformer'], seed=config.seed, retry_budget=config.retry_budget,
            bool_fraction=config.variant_bool_fraction, aesthetic_markers=config.aesthetic_markers,
        )
        self.judges = FilterService(
            self.backends['judge_quality'], self.backends['judge_following'],
            retry_budget=config.retry_budget, min_quality=config.min_quality,
            short_circuit=config.flags.short_circuit_judges,
        )
        logger.info(f"Session {session} on {self.work_dir} (config {config_hash[:12]}, seed {config.seed})")

    # --- Ingest --------------------------------------------------------------

    def _log_ingest(self, source, result):
        for rejection in result.rejections:
            self.writer.append({'type': 'rejection', 'source': source, **rejection.to_dict()})
        self.writer.append({
            'type': 'ingest', 'source': source, 'lines_read': result.lines_read,
            'records': len(result.records), 'rejections': len(result.rejections),
        })
        write_rejection_report(result.rejections, self.work_dir / f"rejections.{source}.jsonl")

    def _ingest(self):
        result = load_vqa_dataset(self.config.input_path, self.config.image_root)
        self._log_ingest('input', result)
        for record in result.records:
            if record.id not in self.manifest.records:
                self.writer.status(record.id, RecordStatus.INGESTED, Stage.INGEST, data=record.to_dict())

        if self.config.knowledge_path:
            knowledge = merge_knowledge_subset(
                self.config.knowledge_path, self.config.knowledge_image_root, self.config.knowledge_image_root
            )
            input_ids = {record.id for record in result.records}
            kept = []
            for record in knowledge.records:
                if record.id in input_ids:
                    knowledge.rejections.append(Rejection(None, 'duplicate-id', record.id))
                else:
                    kept.append(record)
            knowledge.records = kept
            self._log_ingest('knowledge', knowledge)
            for record in kept:
                if record.id not in self.manifest.records:
                    self.writer.status(record.id, RecordStatus.INGESTED, Stage.INGEST, data=record.to_dict())
                self._admit_knowledge(self.manifest.records[record.id])

        self.writer.append({'type': 'stage', 'stage': str(Stage.INGEST)})

    def _admit_knowledge(self, state):
        """Knowledge rows skip classify/transform, and generation when a target ships with them"""
        if state.status == RecordStatus.INGESTED:
            self.writer.status(state.id, RecordStatus.TRANSFORMED, Stage.TRANSFORM, reason='knowledge-passthrough')
        if state.status != RecordStatus.TRANSFORMED or not state.data.get('target_image_path'):
            return
        try:
            data, media_type = read_image(Path(self.config.knowledge_image_root) / state.data['target_image_path'])
        except ImageLoadError as e:
            self._reject(state, Stage.GENERATE, f"image-load: {e}")
            return
        self.writer.status(state.id, RecordStatus.GENERATED, Stage.GENERATE, data={
            'target_image': self.store.put(data, media_type),
            'target_media_type': media_type,
            'backend_meta': asdict(BackendMeta('knowledge-subset', 0, 0)),
        })

    # --- Per-record stages ---------------------------------------------------

    def _advance_all(self, until):
        """Stage by stage; within a stage, records run concurrently on the pool"""
        for stage in Stage.ordered()[1:until.index() + 1]:
            if stage == Stage.ASSEMBLE:
                break
            self._run_stage(stage)
            if stage not in self.manifest.completed_stages:
                self.writer.append({'type': 'stage', 'stage': str(stage)})

    def _run_stage(self, stage):
        population = self._population(stage)
        for role in STAGE_ROLES[stage]:
            self.backends[role].admit_population(population)
        while True:
            pending = sorted(state.id for state in self.manifest.in_flight() if self._next_stage(state) == stage)
            if not pending:
                return
            logger.info(f"{stage}: {len(pending)} records pending")
            with ThreadPoolExecutor(max_workers=self.config.max_workers) as executor:
                futures = [executor.submit(self._step, record_id, stage) for record_id in pending]
                for future in tqdm(as_completed(futures), total=len(futures), desc=f"forge {stage}", disable=None):
                    future.result()
            # Only a regeneration sends a record back through the same stage
            if stage != Stage.FILTER:
                return

    def _population(self, stage):
        """
        Every record that calls this stage's backends over the whole run.

        Taken from status histories, so it is the same after a resume as in an
        uninterrupted run.
        """
        states = self.manifest.records.values()
        if stage == Stage.CLASSIFY:
            return [state.id for state in states if not state.is_knowledge]
        if stage == Stage.TRANSFORM:
            return [state.id for state in states
                    if not state.is_knowledge and RecordStatus.CLASSIFIED in state.history]
        if stage == Stage.GENERATE:
            return [state.id for state in states
                    if RecordStatus.TRANSFORMED in state.history
                    and not (state.is_knowledge and state.data.get('target_image_path'))]
        return [state.id for state in states
                if RecordStatus.GENERATED in state.history
                and (self.config.flags.filter_knowledge or not state.is_knowledge)]

    @staticmethod
    def _next_stage(state):
        stage = NEXT_STAGE[state.status]
        if state.is_knowledge and stage == Stage.CLASSIFY:
            return Stage.TRANSFORM
        return stage

    def _step(self, record_id, stage):
        steps = {
            Stage.CLASSIFY: self._classify,
            Stage.TRANSFORM: self._transform,
            Stage.GENERATE: self._generate,
            Stage.FILTER: self._filter,
        }
        state = self.manifest.records[record_id]
        try:
            steps[stage](state)
        except FATAL_ERRORS:
            raise
        except Exception as e:
            logger.exception(f"Unexpected error on {record_id} at {stage}")
            self._reject(state, stage, f"internal-error: {type(e).__name__}: {e}")

    def _reject(self, state, stage, reason, data=None):
        logger.warning(f"Record {state.id} rejected at {stage}: {reason}")
        self.writer.status(state.id, REJECTED_AT[stage], stage, data=data, reason=reason)

    def _image_root(self, state):
        if state.is_knowledge:
            return self.config.knowledge_image_root
        return self.config.image_root

    def _classify(self, state):
        try:
            classified, reply, attempts = self.classifier.classify(state.vqa_record())
        except (ReplyParseError, BackendError, PreconditionError) as e:
            self._reject(state, Stage.CLASSIFY, f"classification-failed: {e}")
            return
        data = {
            'task_category': classified.task_category,
            'process_answer': classified.process_answer,
            'classifier_reply': reply,
            'classifier_attempts': attempts,
        }
        if classified.task_category == EditCategory.OTHERS:
            self.writer.status(state.id, RecordStatus.DROPPED_OTHERS, Stage.CLASSIFY, data=data, reason='others')
        else:
            self.writer.status(state.id, RecordStatus.CLASSIFIED, Stage.CLASSIFY, data=data)

    def _transform(self, state):
        if state.is_knowledge:
            self._admit_knowledge(state)
            return
        try:
            record, reply, attempts, warnings = self.transformer.transform(state.classified_record())
        except InstructionRejectedError as e:
            self._reject(state, Stage.TRANSFORM, ','.join(e.reasons) or str(e),
                         data={'validation_reasons': e.reasons, 'transform_attempts': e.attempts})
            return
        except (ReplyParseError, RoutingError, BackendError, PreconditionError) as e:
            self._reject(state, Stage.TRANSFORM, f"transform-failed: {e}")
            return
        if warnings:
            logger.info(f"Instruction for {state.id} accepted with warnings: {warnings}")
        self.writer.status(state.id, RecordStatus.TRANSFORMED, Stage.TRANSFORM, data={
            'edit_instruction': record.edit_instruction,
            'variant': record.variant,
            'transformer_reply': reply,
            'transform_attempts': attempts,
            'validation_warnings': warnings,
        })

    def _generate(self, state, extra=None):
        record = state.instruction_record()
        try:
            request = build_generation_request(record, self._image_root(state))
        except ImageLoadError as e:
            self._reject(state, Stage.GENERATE, f"image-load: {e}")
            return
        if request is None:
            self._admit_knowledge(state)
            return
        try:
            sample = submit_edit(request, record, self.backends['generator'])
        except BackendError as e:
            self._reject(state, Stage.GENERATE, f"generation-failed: {e}",
                         data={'generation_attempts': getattr(e, 'attempts', None)})
            return
        self.writer.status(state.id, RecordStatus.GENERATED, Stage.GENERATE, data={
            'target_image': self.store.put(sample.target_image, sample.target_media_type),
            'target_media_type': sample.target_media_type,
            'backend_meta': asdict(sample.backend_meta),
            **(extra or {}),
        })

    def _edited_sample(self, state):
        data = state.data
        return EditedSample(
            **asdict(state.instruction_record()),
            target_image=self.store.get(data['target_image']),
            target_media_type=data.get('target_media_type') or 'image/png',
            backend_meta=BackendMeta(**data['backend_meta']),
        )

    def _filter(self, state):
        if state.is_knowledge and not self.config.flags.filter_knowledge:
            self.writer.status(state.id, RecordStatus.FILTERED_ACCEPTED, Stage.FILTER, reason='knowledge-bypass')
            return
        try:
            sample = self._edited_sample(state)
            source, _ = read_image(Path(self._image_root(state)) / state.data['image_path'])
            verdict, decision = self.judges.judge(sample, source)
        except (ImageLoadError, ReplyParseError, BackendError, PreconditionError) as e:
            self._reject(state, Stage.FILTER, f"judge-failed: {e}")
            return

        if decision.accepted:
            self.writer.status(state.id, RecordStatus.FILTERED_ACCEPTED, Stage.FILTER,
                               data={'verdict': verdict.to_dict()})
            return

        regenerations = state.data.get('regenerations', 0)
        can_regenerate = not (state.is_knowledge and state.data.get('target_image_path'))
        if can_regenerate and regenerations < self.config.filter_regeneration_retries:
            logger.info(f"Regenerating {state.id} after filter rejection ({','.join(decision.reasons)})")
            self._generate(state, extra={'regenerations': regenerations + 1, 'verdict': verdict.to_dict()})
            return
        self.writer.status(state.id, RecordStatus.FILTERED_REJECTED, Stage.FILTER,
                           data={'verdict': verdict.to_dict()}, reason=','.join(decision.reasons))

    # --- Assemble ------------------------------------------------------------

    def _assemble(self):
        accepted = [state for state in self.manifest.records.values() if state.is_accepted]
        quotas = shortfall = None
        if self.config.balance:
            targets = BalanceTargets.from_config(
                self.config.balance, pool_categories=sorted({state.task_category for state in accepted})
            )
            result = balance_sample(accepted, targets, self.config.seed, self.config.selection_mode)
            curated, quotas, shortfall = result.records, result.quotas, result.shortfall
        else:
            curated = sorted(accepted, key=lambda state: state.id)

        for state in curated:
            if state.status == RecordStatus.FILTERED_ACCEPTED:
                self.writer.status(state.id, RecordStatus.CURATED, Stage.ASSEMBLE)

        outputs = [
            OutputRecord(
                id=state.id,
                task_category=state.task_category,
                variant=state.variant,
                original_question=state.data['original_question'],
                original_answer=state.data['original_answer'],
                process_answer=state.data['process_answer'],
                edit_instruction=state.data['edit_instruction'],
                source_path=Path(self._image_root(state)) / state.data['image_path'],
                target_path=self.store.path(state.data['target_image']),
            )
            for state in curated
        ]
        write_outputs(outputs, self.config.output_dir, self.config.shard_size, extra={
            'config_hash': self.manifest.config_hash,
            'seed': self.config.seed,
            'quotas': quotas,
            'shortfall': shortfall,
            'accepted_distribution': compute_distribution(self.manifest),
        })
        self.writer.append({'type': 'stage', 'stage': str(Stage.ASSEMBLE)})

    def _write_manifest(self):
        path = self.work_dir / MANIFEST_NAME
        path.write_text(json.dumps(self.manifest.summary(), indent=2, sort_keys=True) + '\n', encoding='utf-8')


def resume(work_dir, config=None, sleep=time.sleep, replies=None):
    """
    Continue a run from its ledger.

    Without a config the one stored in the ledger header is used. With one,
    its hash must match the ledger's.

    Raises:
        LedgerError: no ledger in work_dir
        ResumeRefusedError: the config hash differs
    """
    work_dir = Path(work_dir).resolve()
    if config is None:
        header = read_ledger(work_dir, quarantine=False).header
        config = build_config(header['config'], base_dir=work_dir)
    config = config.with_overrides(work_dir=work_dir)
    return Pipeline(config, sleep=sleep, replies=replies).run(Stage.ASSEMBLE)


def stats(work_dir):
    """
    Distribution report for a work dir.

    Returns:
        tuple: (human-readable text, JSON-ready dict)
    """
    manifest = read_ledger(work_dir, quarantine=False)
    reached = manifest.stage_reach_counts()
    current = manifest.category_status_counts()
    distribution = compute_distribution(manifest)

    categories = {}
    for category in sorted(set(reached) | set(current)):
        generated = reached[category].get(RecordStatus.GENERATED, 0)
        accepted = sum(current[category].get(status, 0) for status in
                       (RecordStatus.FILTERED_ACCEPTED, RecordStatus.CURATED))
        categories[category] = {
            'statuses': dict(sorted(current[category].items())),
            'reached': dict(sorted(reached[category].items())),
            'accepted': accepted,
            'acceptance_rate': round(accepted / generated, 4) if generated else None,
        }

    total_generated = sum(c['reached'].get(RecordStatus.GENERATED, 0) for c in categories.values())
    total_accepted = sum(c['accepted'] for c in categories.values())
    report = {
        'config_hash': manifest.config_hash,
        'seed': manifest.seed,
        'records': len(manifest.records),
        'status_counts': dict(sorted(manifest.status_counts().items())),
        'categories': categories,
        'variants': dict(sorted(manifest.variant_counts().items())),
        'accepted_distribution': distribution,
        'acceptance_rate': round(total_accepted / total_generated, 4) if total_generated else None,
        'conserved': manifest.is_conserved(),
    }

    lines = [
        f"Config hash: {manifest.config_hash}",
        f"Seed: {manifest.seed}",
        f"Records: {len(manifest.records)}",
        "",
        f"{'category':<14}{'ingested':>10}{'generated':>11}{'accepted':>10}{'rate':>8}",
    ]
    for category, row in categories.items():
        rate = row['acceptance_rate']
        lines.append(
            f"{category:<14}{row['reached'].get(RecordStatus.INGESTED, 0):>10}"
            f"{row['reached'].get(RecordStatus.GENERATED, 0):>11}{row['accepted']:>10}"
            f"{'-' if rate is None else f'{rate:.2%}':>8}"
        )
    lines.append("")
    lines.append("Statuses: " + ', '.join(f"{k}={v}" for k, v in report['status_counts'].items()))
    lines.append("Variants: " + (', '.join(f"{k}={v}" for k, v in report['variants'].items()) or '-'))
    return '\n'.join(lines), report
