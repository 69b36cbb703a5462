import zlib

DEBUG = False

CACHES = {
    "default": {
        "BACKEND": "django.core.cache.backends.locmem.LocMemCache",
        "LOCATION": "default-cache",
    },
    "foo": {
        "BACKEND": "django.core.cache.backends.locmem.LocMemCache",
        "LOCATION": "foo-cache",
    },
}

IVGL_DEBUG = False

# Small solver settings, to keep the suite fast
IVGL_MAX_SWEEPS = 10000
IVGL_TOL = 1e-10
IVGL_KKT_TOL = 1e-6
# the optimality conditions, not the duality gap, end the solves of the suite
IVGL_GAP_TOL = 1e-16
IVGL_TRUNCATE_PATH = True
IVGL_STANDARDIZE = True
IVGL_LAMBDA_GRID_SIZE = 20
IVGL_LAMBDA_MIN_RATIO = 1e-3
IVGL_CV_FOLDS = 3
IVGL_LAMBDA2_GRID = (0.1, 1.0)
IVGL_N_JOBS = 1
IVGL_SEED = 0
IVGL_MAX_ALT_ITERS = 30
IVGL_ALT_TOL = 1e-6

IVGL_CACHE_ENABLED = True
IVGL_CACHE_COMPRESS = False
IVGL_CACHE_COMPRESS_LEVEL = zlib.Z_DEFAULT_COMPRESSION
IVGL_CACHE_BACKEND = "default"
IVGL_CACHE_VERSION = ""
IVGL_CACHE_TIMEOUT = None

SECRET_KEY = "ivgl-tests-4c1f9e07b2d84a6a9f3e5d21c8b7a610"

INSTALLED_APPS = [
    "ivgl",
]

USE_TZ = True
