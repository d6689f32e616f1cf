"""
Settings for the CRASHSAFE batch toolkit.

The project runs entirely through management commands; there is no web
surface, so only the apps needed for the ORM audit trail and the three
safety apps are installed.
"""
from pathlib import Path

from decouple import config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

DEBUG = config('DEBUG', default=False, cast=bool)
SECRET_KEY = config('DJANGO_SECRET_KEY', default='crashsafe-local-batch-key')

ALLOWED_HOSTS = []

# Application definition

DJANGO_APPS = [
    'django.contrib.contenttypes',
]

LOCAL_APPS = [
    'safety_apps.crash_models',
    'safety_apps.site_data',
    'safety_apps.site_screening',
]

INSTALLED_APPS = DJANGO_APPS + LOCAL_APPS

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': config('CRASHSAFE_DB_PATH', default=str(BASE_DIR / 'crashsafe.sqlite3')),
    }
}

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

# ── Sampler / gates ──────────────────────────────────────────────────────────

# Default chain-parallel worker count; --threads overrides per run.
CRASHSAFE_THREADS = config('CRASHSAFE_THREADS', default=1, cast=int)

CONVERGENCE_BGR_MAX = config('CONVERGENCE_BGR_MAX', default=1.1, cast=float)
CONVERGENCE_MC_ERROR_RATIO = config('CONVERGENCE_MC_ERROR_RATIO', default=0.03, cast=float)

# Long recovery / calibration suites
CRASHSAFE_SLOW_TESTS = config('CRASHSAFE_SLOW_TESTS', default=False, cast=bool)

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {process:d} {thread:d} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'file': {
            'level': 'INFO',
            'class': 'logging.FileHandler',
            'filename': config('CRASHSAFE_LOG_FILE', default=str(BASE_DIR / 'crashsafe.log')),
            'formatter': 'verbose',
        },
        'console': {
            'level': 'INFO',
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'safety_apps': {
            'handlers': ['file', 'console'],
            'level': config('CRASHSAFE_LOG_LEVEL', default='INFO'),
            'propagate': True,
        },
    },
}
