"""
Django settings for the depo_lab project.

For more information on this file, see
https://docs.djangoproject.com/en/5.1/topics/settings/

Experiment defaults live at the bottom of this file (``DEPO_LAB_*``). Every
one of them can be overridden through the environment or a ``.env`` file at
the project root.
"""

import os
from pathlib import Path

from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

load_dotenv(BASE_DIR / '.env')


def _env_bool(name: str, default: bool) -> bool:
    value = os.getenv(name)
    if value is None:
        return default
    return value.strip().lower() in {'1', 'true', 'yes', 'on'}


def _env_int(name: str, default: int | None) -> int | None:
    value = os.getenv(name)
    if value is None or not value.strip():
        return default
    return int(value)


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.getenv(
    'SECRET_KEY',
    'django-insecure-depo-lab-local-only-7w!k2m$xq0v9#c5n1r8t4z6p3b',
)

# SECURITY WARNING: don't run with debug turned on in production!
DEBUG = _env_bool('DEBUG', True)

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.admin',
    'django.contrib.auth',
    'django.contrib.contenttypes',
    'django.contrib.sessions',
    'django.contrib.messages',
    'django.contrib.staticfiles',
    # Local apps
    'experiments',
]

MIDDLEWARE = [
    'django.middleware.security.SecurityMiddleware',
    'django.contrib.sessions.middleware.SessionMiddleware',
    'django.middleware.common.CommonMiddleware',
    'django.middleware.csrf.CsrfViewMiddleware',
    'django.contrib.auth.middleware.AuthenticationMiddleware',
    'django.contrib.messages.middleware.MessageMiddleware',
    'django.middleware.clickjacking.XFrameOptionsMiddleware',
]

ROOT_URLCONF = 'depo_lab.urls'

TEMPLATES = [
    {
        'BACKEND': 'django.template.backends.django.DjangoTemplates',
        'DIRS': [],
        'APP_DIRS': True,
        'OPTIONS': {
            'context_processors': [
                'django.template.context_processors.debug',
                'django.template.context_processors.request',
                'django.contrib.auth.context_processors.auth',
                'django.contrib.messages.context_processors.messages',
            ],
        },
    },
]

WSGI_APPLICATION = 'depo_lab.wsgi.application'


# Database
# https://docs.djangoproject.com/en/5.1/ref/settings/#databases

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}


# Internationalization
# https://docs.djangoproject.com/en/5.1/topics/i18n/

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = True

USE_TZ = True


# Static files (CSS, JavaScript, Images)
# https://docs.djangoproject.com/en/5.1/howto/static-files/

STATIC_URL = 'static/'

# Default primary key field type
# https://docs.djangoproject.com/en/5.1/ref/settings/#default-auto-field

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Logging

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'timestamped': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'timestamped',
        },
    },
    'loggers': {
        'experiments': {
            'handlers': ['console'],
            'level': os.getenv('DEPO_LAB_LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
    },
}


# Experiment defaults

# Worker threads for replica-parallel work; None means os.cpu_count().
DEPO_LAB_THREADS = _env_int('DEPO_LAB_THREADS', None)

# Exact solves refuse state spaces larger than this.
DEPO_LAB_STATE_CAP = _env_int('DEPO_LAB_STATE_CAP', 1_000_000)

# A single regeneration cycle longer than this raises CycleTimeout.
DEPO_LAB_CYCLE_CAP = _env_int('DEPO_LAB_CYCLE_CAP', 10_000_000)

# Output directories are created below this root unless --out is given.
DEPO_LAB_OUTPUT_ROOT = Path(os.getenv('DEPO_LAB_OUTPUT_ROOT', BASE_DIR / 'runs'))

# Persist an ExperimentRun row per command invocation.
DEPO_LAB_RECORD_RUNS = _env_bool('DEPO_LAB_RECORD_RUNS', True)
