# ivgl / Copyright Consortium Érudit <tech@erudit.org> / MIT License

import hashlib
import json
import logging
import pickle
import zlib

from django.core.cache import caches
from django.core.cache.backends.filebased import FileBasedCache
from django.utils.encoding import force_bytes

from ivgl import __version__
from ivgl.conf import is_debug_activated, setting


logger = logging.getLogger("ivgl.cache")


class ReplicateCacheMetaClass(type):
    """
    Metaclass used by ReplicateCache to save the Meta entries in an options field.
    """

    def __new__(mcs, name, bases, attrs):
        klass = super(ReplicateCacheMetaClass, mcs).__new__(mcs, name, bases, attrs)
        klass.options = klass._meta = klass.Meta()
        return klass


class ReplicateCache(object, metaclass=ReplicateCacheMetaClass):
    """
    Store the result rows of one simulation replicate in a Django cache.

    The key depends on the simulation config, the solver config and the
    fitted methods, so any change of them is a miss. To change its behaviour,
    change one or more of these settings (see the `Meta` class):

        * IVGL_CACHE_ENABLED
        * IVGL_CACHE_COMPRESS
        * IVGL_CACHE_COMPRESS_LEVEL
        * IVGL_CACHE_BACKEND
        * IVGL_CACHE_VERSION
        * IVGL_CACHE_TIMEOUT

    Or inherit from this class, or use `using_directory` to get a subclass
    storing in files.
    """

    # Will change if the stored rows change
    INTERNAL_VERSION = "1"
    # Used to separate the internal version and the content
    VERSION_SEPARATOR = "::"

    options = None

    class Meta:
        """
        Options of this class. Accessible via cls.options or self.options.
        """

        # If the cache is used at all
        enabled = setting("IVGL_CACHE_ENABLED", False)

        # If the content will be compressed before caching
        compress = setting("IVGL_CACHE_COMPRESS", True)
        compress_level = setting("IVGL_CACHE_COMPRESS_LEVEL", zlib.Z_DEFAULT_COMPRESSION)

        # The cache backend to use (or use the "default" one)
        cache_backend = setting("IVGL_CACHE_BACKEND", "default")

        # Directory of a file based cache, used instead of `cache_backend` when set
        location = None

        # Part of the INTERNAL_VERSION configurable via settings
        internal_version = setting("IVGL_CACHE_VERSION", "")

        # Seconds before expiry, None to keep forever
        timeout = setting("IVGL_CACHE_TIMEOUT", None)

    def __init__(self, sim_cfg, seed, methods, solver_cfg):
        super(ReplicateCache, self).__init__()
        self.sim_cfg = sim_cfg
        self.seed = seed
        self.methods = list(methods)
        self.solver_cfg = solver_cfg

        parts = [self.__class__.INTERNAL_VERSION, __version__]
        if self.options.internal_version:
            parts.append(self.options.internal_version)
        self.INTERNAL_VERSION = force_bytes("|".join(parts))
        self.VERSION_SEPARATOR = force_bytes(self.__class__.VERSION_SEPARATOR)

        self.cache = self.get_cache_object()
        self.cache_key = self.get_cache_key()

    @classmethod
    def using_directory(cls, directory):
        """
        Return a subclass of this one, enabled, storing in a file based cache
        in `directory`.
        """
        meta = type("Meta", (cls.Meta,), {"enabled": True, "location": str(directory)})
        return type(cls.__name__, (cls,), {"Meta": meta})

    def hash_args(self):
        """
        Hash of the canonical JSON of the simulation config, the solver config
        and the methods. The number of replicates is left out: a replicate
        does not depend on how many others are run.
        """
        simulation = self.sim_cfg.as_dict()
        simulation.pop("n_replicates")
        canonical = json.dumps(
            {
                "simulation": simulation,
                "solver": self.solver_cfg.as_dict(),
                "methods": self.methods,
            },
            sort_keys=True,
            default=str,
        )
        return hashlib.md5(force_bytes(canonical)).hexdigest()

    def get_base_cache_key(self):
        return "ivgl.replicate.%(setup)s.%(si)s.%(s0)s.%(seed)s.%(hash)s"

    def get_cache_key_args(self):
        return dict(
            setup=self.sim_cfg.setup,
            si=self.sim_cfg.si,
            s0=self.sim_cfg.s0,
            seed=self.seed,
            hash=self.hash_args(),
        )

    def get_cache_key(self):
        return self.get_base_cache_key() % self.get_cache_key_args()

    def get_cache_object(self):
        """
        Return the cache object used to get and set the values: the file based
        one when `location` is set, else the Django cache named `cache_backend`.
        """
        if self.options.location:
            return FileBasedCache(self.options.location, {"TIMEOUT": self.options.timeout})
        return caches[self.options.cache_backend]

    def cache_get(self):
        return self.cache.get(self.cache_key)

    def cache_set(self, to_cache):
        self.cache.set(self.cache_key, to_cache, self.options.timeout)

    def join_content_version(self, to_cache):
        return self.VERSION_SEPARATOR.join([self.INTERNAL_VERSION, to_cache])

    def split_content_version(self, content):
        """
        Return the content without its version, or None if the stored version
        is not the current one.
        """
        parts = content.split(self.VERSION_SEPARATOR, 1)
        if len(parts) != 2 or parts[0] != self.INTERNAL_VERSION:
            return None
        return parts[1]

    def encode_content(self, record):
        content = pickle.dumps(record)
        if self.options.compress:
            content = zlib.compress(content, self.options.compress_level)
        return content

    def decode_content(self, content):
        if self.options.compress:
            content = zlib.decompress(content)
        return pickle.loads(content)

    def get(self):
        """
        Return the cached record, or None when missing, outdated or unreadable.
        """
        if not self.options.enabled:
            return None
        try:
            content = self.cache_get()
        except Exception:
            if is_debug_activated():
                raise
            logger.exception("Error when getting the cached replicate %s", self.cache_key)
            return None
        if not content:
            return None
        try:
            content = self.split_content_version(content)
            if content is None:
                return None
            return self.decode_content(content)
        except Exception:
            logger.warning("Discarding an unreadable cached replicate %s", self.cache_key)
            return None

    def save(self, record):
        if not self.options.enabled:
            return
        to_cache = self.join_content_version(self.encode_content(record))
        try:
            self.cache_set(to_cache)
        except Exception:
            if is_debug_activated():
                raise
            logger.exception("Error when saving the cached replicate %s", self.cache_key)

    def load(self, compute):
        """
        Return the cached record, or call `compute()`, save its result and
        return it.
        """
        record = self.get()
        if record is None:
            record = compute()
            self.save(record)
        return record
