"""
Django settings for the smc_transformer project.

The project has no web surface: Django provides the management-command CLI,
the settings layer, the test runner and the ORM behind the run registry.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/6.0/ref/settings/
"""

from pathlib import Path
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Load environment variables from .env file if it exists
try:
    from dotenv import load_dotenv
    load_dotenv(BASE_DIR.parent / '.env')
except ImportError:
    pass  # python-dotenv not installed, skip

# Only used for signing, which nothing in this project does
SECRET_KEY = os.getenv('DJANGO_SECRET_KEY', 'smct-insecure-local-key')

DEBUG = os.getenv('DEBUG', 'False') == 'True'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    # Project apps
    'numkit',
    'diffcore',
    'attention',
    'smc',
    'trainer',
    'dataio',
    'evalkit',
    'runs',
]


# Database
# https://docs.djangoproject.com/en/6.0/ref/settings/#databases

# Use PostgreSQL for the run registry if DB_NAME is set, otherwise use SQLite
if os.getenv('DB_NAME'):
    DATABASES = {
        'default': {
            'ENGINE': 'django.db.backends.postgresql',
            'NAME': os.getenv('DB_NAME'),
            'USER': os.getenv('DB_USER', 'postgres'),
            'PASSWORD': os.getenv('DB_PASSWORD', ''),
            'HOST': os.getenv('DB_HOST', 'localhost'),
            'PORT': os.getenv('DB_PORT', '5432'),
            'OPTIONS': {
                'sslmode': os.getenv('DB_SSLMODE', 'prefer'),  # require, prefer, disable
            },
        }
    }
else:
    DATABASES = {
        'default': {
            'ENGINE': 'django.db.backends.sqlite3',
            'NAME': BASE_DIR / 'db.sqlite3',
        }
    }

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# Logging
# Library modules log through logging.getLogger(__name__)

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': os.getenv('SMCT_LOG_LEVEL', 'INFO'),
    },
}


# SMC Transformer defaults
# Run configuration precedence: command-line flags > config file > these values

SMC_TRANSFORMER = {
    # Model dimensions
    'depth': int(os.getenv('SMCT_DEPTH', '32')),
    'ff_units': int(os.getenv('SMCT_FF_UNITS', '32')),
    # Particle filter
    'particles': int(os.getenv('SMCT_PARTICLES', '10')),
    'lag': int(os.getenv('SMCT_LAG', '24')),
    # Optimisation
    'epochs': int(os.getenv('SMCT_EPOCHS', '50')),
    'batch_size': int(os.getenv('SMCT_BATCH_SIZE', '32')),
    'learning_rate': float(os.getenv('SMCT_LEARNING_RATE', '0.001')),
    'lr_schedule': os.getenv('SMCT_LR_SCHEDULE', 'constant'),  # constant, warmup
    'warmup_steps': int(os.getenv('SMCT_WARMUP_STEPS', '4000')),
    'adam_beta1': 0.9,
    'adam_beta2': 0.98,
    'adam_epsilon': 1e-9,
    'patience': None,  # None trains a fixed number of epochs
    # EM updates of the noise variances
    'em_exponent': float(os.getenv('SMCT_EM_EXPONENT', '0.6')),
    'em_targets': 'q,k,v,z,obs',
    'variance_floor': 1e-6,
    'initial_variance': 0.5,
    # Evaluation
    'n_samples': int(os.getenv('SMCT_N_SAMPLES', '1000')),
    'coverage': 0.95,
    'split_ratios': (0.7, 0.15, 0.15),
    # Runtime
    'threads': int(os.getenv('SMCT_THREADS', '1')),
    'output_dir': os.getenv('SMCT_OUTPUT_DIR', str(BASE_DIR.parent / 'runs_output')),
}
