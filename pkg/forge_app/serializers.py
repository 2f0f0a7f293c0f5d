from pathlib import Path

from django.conf import settings
from rest_framework import serializers

from .models import CLASSIFIER_CATEGORIES, EditCategory


class StrictCharField(serializers.CharField):
    """CharField that keeps the text verbatim but still refuses whitespace-only values"""

    def __init__(self, **kwargs):
        kwargs.setdefault('trim_whitespace', False)
        super().__init__(**kwargs)

    def to_internal_value(self, data):
        if not isinstance(data, str):
            raise serializers.ValidationError("Must be a string.")
        value = super().to_internal_value(data)
        if not self.allow_blank and not value.strip():
            raise serializers.ValidationError("May not be blank.")
        return value


# --- Input rows -------------------------------------------------------------

class VqaRecordSerializer(serializers.Serializer):
    """One line of the source VQA corpus"""
    id = serializers.CharField(required=False, allow_blank=False, max_length=255)
    original_question = StrictCharField()
    original_answer = StrictCharField()
    image_path = StrictCharField(max_length=1024)
    source_dataset = serializers.CharField(required=False, allow_blank=True, default='')

    def validate_image_path(self, value):
        if Path(value).is_absolute():
            raise serializers.ValidationError("Must be relative to the image root.")
        return value.strip()


class KnowledgeRecordSerializer(serializers.Serializer):
    """One line of an externally sourced knowledge subset"""
    id = serializers.CharField(required=False, allow_blank=False, max_length=255)
    edit_instruction = StrictCharField()
    image_path = StrictCharField(max_length=1024)
    target_image_path = serializers.CharField(required=False, allow_null=True, allow_blank=True, default=None)
    source_dataset = serializers.CharField(required=False, allow_blank=True, default='knowledge')

    def validate(self, attrs):
        for key in ('image_path', 'target_image_path'):
            if attrs.get(key) and Path(attrs[key]).is_absolute():
                raise serializers.ValidationError({key: "Must be relative to the image root."})
        if not attrs.get('target_image_path'):
            attrs['target_image_path'] = None
        return attrs


# --- Model replies ----------------------------------------------------------

class ClassificationReplySerializer(serializers.Serializer):
    """Keys of the classifier's JSON reply. Echoed question/answer are checked for presence only."""
    task_category = serializers.ChoiceField(choices=sorted(CLASSIFIER_CATEGORIES))
    original_question = serializers.CharField(allow_blank=True, trim_whitespace=False)
    original_answer = serializers.CharField(allow_blank=True, trim_whitespace=False)
    process_answer = serializers.CharField(allow_blank=True, trim_whitespace=False)
    image_path = serializers.CharField(allow_blank=True)


class InstructionReplySerializer(serializers.Serializer):
    edit_instruction = StrictCharField()


class QualityReplySerializer(serializers.Serializer):
    analysis = serializers.CharField(required=False, allow_blank=True, default='')
    # IntegerField accepts 3, "3" and "3.0" but not 3.5
    score = serializers.IntegerField(min_value=1, max_value=5)


class FollowingReplySerializer(serializers.Serializer):
    reasoning = serializers.CharField(required=False, allow_blank=True, default='')
    answer = serializers.CharField()

    def validate_answer(self, value):
        value = value.lower()
        if value not in ('yes', 'no'):
            raise serializers.ValidationError(f"Expected 'yes' or 'no', got {value!r}.")
        return value


# --- Run configuration ------------------------------------------------------

class MockScriptSerializer(serializers.Serializer):
    MODES = ['always-succeed', 'fail-n-then-succeed', 'always-fail', 'reject-fraction']

    mode = serializers.ChoiceField(choices=MODES, default='always-succeed')
    n = serializers.IntegerField(min_value=0, default=0)
    p = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.0)
    seed = serializers.IntegerField(min_value=0, required=False)


class BackendConfigSerializer(serializers.Serializer):
    endpoint = serializers.URLField(required=False, allow_blank=True, default='')
    model = serializers.CharField(default='mock')
    api_key_env = serializers.CharField(required=False, allow_blank=True, default='')
    timeout = serializers.FloatField(default=60.0)
    max_concurrency = serializers.IntegerField(default=8)
    temperature = serializers.FloatField(min_value=0.0, max_value=2.0, default=0.0)
    params = serializers.DictField(required=False, default=dict)
    mock = MockScriptSerializer(required=False)

    def validate_timeout(self, value):
        if value <= 0:
            raise serializers.ValidationError("Must be greater than 0.")
        return value

    def validate_max_concurrency(self, value):
        if value < 1:
            raise serializers.ValidationError("Must be at least 1.")
        return value


class BackendsSerializer(serializers.Serializer):
    classifier = BackendConfigSerializer(required=False, default=dict)
    transformer = BackendConfigSerializer(required=False, default=dict)
    generator = BackendConfigSerializer(required=False, default=dict)
    judge_quality = BackendConfigSerializer(required=False, default=dict)
    judge_following = BackendConfigSerializer(required=False, default=dict)


class BalanceSerializer(serializers.Serializer):
    PRESETS = ['uniform-ablation', 'curated-minimal-text']

    preset = serializers.ChoiceField(choices=PRESETS, required=False)
    total = serializers.IntegerField(min_value=1, required=False)
    proportions = serializers.DictField(child=serializers.CharField(), required=False)
    categories = serializers.ListField(
        child=serializers.ChoiceField(choices=EditCategory.values), required=False
    )
    per_category = serializers.IntegerField(min_value=1, default=6000)

    def validate_proportions(self, value):
        unknown = sorted(set(value) - set(EditCategory.values))
        if unknown:
            raise serializers.ValidationError(f"Unknown categories: {', '.join(unknown)}")
        return value

    def validate(self, attrs):
        preset = attrs.get('preset')
        if preset is None and not ('total' in attrs and 'proportions' in attrs):
            raise serializers.ValidationError("Give either a preset or both total and proportions.")
        if preset == 'curated-minimal-text' and 'total' not in attrs:
            raise serializers.ValidationError({'total': "Required by the curated-minimal-text preset."})
        return attrs


class FlagsSerializer(serializers.Serializer):
    mock = serializers.BooleanField(default=False)
    filter_knowledge = serializers.BooleanField(default=False)
    short_circuit_judges = serializers.BooleanField(default=False)


class PipelineConfigSerializer(serializers.Serializer):
    input_path = serializers.CharField()
    image_root = serializers.CharField()
    knowledge_path = serializers.CharField(required=False, allow_null=True, default=None)
    knowledge_image_root = serializers.CharField(required=False, allow_null=True, default=None)
    work_dir = serializers.CharField()
    output_dir = serializers.CharField()
    seed = serializers.IntegerField(min_value=0, max_value=2 ** 64 - 1, default=0)

    retry_budget = serializers.IntegerField(min_value=1, default=lambda: settings.FORGE['RETRY_BUDGET'])
    backoff_base = serializers.FloatField(min_value=0.0, default=lambda: settings.FORGE['BACKOFF_BASE'])
    backoff_cap = serializers.FloatField(min_value=0.0, default=lambda: settings.FORGE['BACKOFF_CAP'])
    max_workers = serializers.IntegerField(min_value=1, default=lambda: settings.FORGE['MAX_WORKERS'])
    ledger_flush_every = serializers.IntegerField(
        min_value=1, default=lambda: settings.FORGE['LEDGER_FLUSH_EVERY']
    )

    min_quality = serializers.IntegerField(min_value=1, max_value=5, default=lambda: settings.FORGE['MIN_QUALITY'])
    filter_regeneration_retries = serializers.IntegerField(min_value=0, default=0)
    variant_bool_fraction = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.5)
    aesthetic_markers = serializers.ListField(
        child=serializers.CharField(), allow_empty=False,
        default=lambda: list(settings.FORGE['AESTHETIC_MARKERS'])
    )

    balance = BalanceSerializer(required=False, allow_null=True, default=None)
    selection_mode = serializers.ChoiceField(choices=['uniform', 'score-descending'], default='uniform')
    shard_size = serializers.IntegerField(min_value=1, default=lambda: settings.FORGE['SHARD_SIZE'])

    flags = FlagsSerializer(required=False, default=dict)
    backends = BackendsSerializer(required=False, default=dict)
    mock_seed = serializers.IntegerField(min_value=0, default=0)

    def validate(self, attrs):
        if attrs['backoff_cap'] < attrs['backoff_base']:
            raise serializers.ValidationError({'backoff_cap': "Must not be below backoff_base."})
        return attrs


# --- Output rows ------------------------------------------------------------

class ShardRowSerializer(serializers.Serializer):
    """Field order here is the field order of every output shard line"""
    id = serializers.CharField()
    task_category = serializers.CharField()
    variant = serializers.CharField()
    original_question = serializers.CharField(trim_whitespace=False)
    original_answer = serializers.CharField(trim_whitespace=False)
    process_answer = serializers.CharField(trim_whitespace=False)
    edit_instruction = serializers.CharField(trim_whitespace=False)
    source_image = serializers.CharField()
    target_image = serializers.CharField()
