"""
Django settings for the fhsim project.

The project has no web surface: Django provides the management-command CLI,
the run registry database and the test runner.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.2/ref/settings/
"""

import os
import sys
from pathlib import Path

from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Add project root to Python path for core modules
PROJECT_ROOT = BASE_DIR.parent
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

# Local overrides (FHSIM_SEED, FHSIM_LOG_LEVEL, ...) from a .env file next to the repo root
load_dotenv(PROJECT_ROOT / '.env')

# Required by Django; nothing is signed since there are no sessions or views.
SECRET_KEY = os.environ.get('FHSIM_SECRET_KEY', 'fhsim-offline-simulation-key')

DEBUG = os.environ.get('FHSIM_DEBUG', '0') == '1'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    # Local apps
    'core',         # Logging infrastructure
    'simulation',   # Primary app - federated simulation, evaluation, CLI commands
]

MIDDLEWARE = []


# Database
# https://docs.djangoproject.com/en/5.2/ref/settings/#databases

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Simulation settings

FHSIM_LOG_DIR = os.environ.get('FHSIM_LOG_DIR', str(PROJECT_ROOT / 'logs'))

FHSIM_LOG_TO_FILE = os.environ.get('FHSIM_LOG_TO_FILE', '0') == '1'

FHSIM_RESULTS_ROOT = os.environ.get('FHSIM_RESULTS_ROOT', str(PROJECT_ROOT / 'results'))

# None means "number of physical cores" (resolved with psutil at command time)
FHSIM_DEFAULT_JOBS = int(os.environ['FHSIM_DEFAULT_JOBS']) if os.environ.get('FHSIM_DEFAULT_JOBS') else None
