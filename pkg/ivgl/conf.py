# ivgl / Copyright Consortium Érudit <tech@erudit.org> / MIT License

import os
import zlib

from django.conf import settings


# Used when ivgl runs outside a Django project (the CLI, notebooks, scripts)
DEFAULTS = {
    "CACHES": {
        "default": {
            "BACKEND": "django.core.cache.backends.locmem.LocMemCache",
            "LOCATION": "ivgl-default",
        },
    },
    "IVGL_DEBUG": False,
    "IVGL_MAX_SWEEPS": 10000,
    "IVGL_TOL": 1e-8,
    "IVGL_KKT_TOL": 1e-6,
    "IVGL_GAP_TOL": 1e-9,
    "IVGL_TRUNCATE_PATH": True,
    "IVGL_STANDARDIZE": True,
    "IVGL_LAMBDA_GRID_SIZE": 100,
    "IVGL_LAMBDA_MIN_RATIO": 1e-3,
    "IVGL_CV_FOLDS": 10,
    "IVGL_LAMBDA2_GRID": (0.01, 0.1, 1.0, 10.0),
    "IVGL_N_JOBS": 1,
    "IVGL_SEED": 0,
    "IVGL_MAX_ALT_ITERS": 30,
    "IVGL_ALT_TOL": 1e-6,
    "IVGL_CACHE_ENABLED": False,
    "IVGL_CACHE_BACKEND": "default",
    "IVGL_CACHE_COMPRESS": True,
    "IVGL_CACHE_COMPRESS_LEVEL": zlib.Z_DEFAULT_COMPRESSION,
    "IVGL_CACHE_VERSION": "",
    "IVGL_CACHE_TIMEOUT": None,
}


def configure(**overrides):
    """
    Configure django settings with the ivgl defaults, unless a settings module
    is already in charge (a django project, or the test suite).
    Calling it again once configured does nothing.
    """
    if settings.configured or os.environ.get("DJANGO_SETTINGS_MODULE"):
        return
    options = dict(DEFAULTS)
    options.update(overrides)
    settings.configure(**options)


def setting(name, default=None):
    """
    Return the value of an ``IVGL_*`` setting, falling back on our own defaults
    and then on ``default``.
    """
    return getattr(settings, name, DEFAULTS.get(name, default))


def is_debug_activated():
    """In debug mode, errors we usually log and swallow are raised."""
    return bool(setting("IVGL_DEBUG", False))


configure()
