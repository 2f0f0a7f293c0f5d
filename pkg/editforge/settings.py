"""
Django settings for the editforge project.

editforge runs the VQA-to-editing synthesis pipeline as a batch job driven by
`python manage.py forge ...`. There is no web surface: Django provides settings,
templates for prompt layouts, management commands and the test runner.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.1/ref/settings/
"""

from decouple import config


# Not used for anything security sensitive: no sessions, no signing
SECRET_KEY = config('SECRET_KEY', default="django-insecure-editforge-batch-pipeline-only")

DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    "rest_framework",
    "forge_app",
]

MIDDLEWARE = []

TEMPLATES = [
    {
        "BACKEND": "django.template.backends.django.DjangoTemplates",
        "DIRS": [],
        "APP_DIRS": True,
        "OPTIONS": {
            # Templates render chat prompts, never HTML
            "autoescape": False,
            "context_processors": [],
        },
    },
]


# The pipeline keeps its state in the work-dir ledger, not in a database.
DATABASES = {}

LANGUAGE_CODE = "en-us"

TIME_ZONE = "UTC"

USE_I18N = False

USE_TZ = True

# REST Framework is only used for its serializers (input and reply validation)
REST_FRAMEWORK = {
    'DEFAULT_AUTHENTICATION_CLASSES': [],
    'DEFAULT_PERMISSION_CLASSES': [],
    'UNAUTHENTICATED_USER': None,
}


# Pipeline defaults. A run config may override every one of them.
FORGE = {
    'MAX_WORKERS': config('FORGE_MAX_WORKERS', default=16, cast=int),
    'LEDGER_FLUSH_EVERY': config('FORGE_LEDGER_FLUSH_EVERY', default=100, cast=int),
    'RETRY_BUDGET': config('FORGE_RETRY_BUDGET', default=3, cast=int),
    'BACKOFF_BASE': config('FORGE_BACKOFF_BASE', default=1.0, cast=float),
    'BACKOFF_CAP': config('FORGE_BACKOFF_CAP', default=60.0, cast=float),
    'MIN_QUALITY': config('FORGE_MIN_QUALITY', default=3, cast=int),
    'SHARD_SIZE': config('FORGE_SHARD_SIZE', default=1000, cast=int),
    'AESTHETIC_MARKERS': config(
        'FORGE_AESTHETIC_MARKERS',
        default='Refine the image,enhance,aesthetic',
        cast=lambda v: [s.strip() for s in v.split(',') if s.strip()]
    ),
}


# Logging
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'standard': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'file': {
            'level': config('FORGE_LOG_LEVEL', default='INFO'),
            'class': 'logging.FileHandler',
            'filename': config('FORGE_LOG_FILE', default='forge.log'),
            'formatter': 'standard',
        },
        'console': {
            'level': config('FORGE_LOG_LEVEL', default='INFO'),
            'class': 'logging.StreamHandler',
            'formatter': 'standard',
        },
    },
    'loggers': {
        'forge_app': {
            'handlers': ['file', 'console'],
            'level': config('FORGE_LOG_LEVEL', default='INFO'),
            'propagate': True,
        },
    },
}
