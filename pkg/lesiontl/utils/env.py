import os

ENVIRON_PREFIX = 'lesiontl'


class EnvFallbackDict(object):
    """
        This dict will first search for a key inside of it, then search ENVIRON for it if the key isn't found.

        When constructed with a section_name of "training"
        Searching for key "batch_size" will search for "batch_size" inside of the dict, and if it's not there, it
        will then look in "LESIONTL_TRAINING_BATCH_SIZE" and return that value. If it's not inside the dict, or
        environ, it will raise KeyError like normal.

        This dict is read only. Values found in the environment are always strings, values found in the dict are
        returned as given; subclasses decide how to cast either.
    """
    __slots__ = ['_section_name', '_data']

    def __init__(self, section_name, data):
        self._section_name = None
        if section_name:
            self.section_name = section_name

        self._data = {}

        if data is not None:
            self._data.update(data)

    @property
    def section_name(self):
        return self._section_name

    @section_name.setter
    def section_name(self, value):
        self._section_name = value.replace('.', '_')

    def environ_key(self, key):
        if not self._section_name:
            return ('%s_%s' % (ENVIRON_PREFIX, key)).upper()

        return ('%s_%s_%s' % (ENVIRON_PREFIX, self._section_name, key)).upper()

    def __contains__(self, item):
        if item in self._data and self._data[item] is not None:
            return True

        return self.environ_key(item) in os.environ

    def __repr__(self):
        return '<%s %s %r>' % (self.__class__.__name__, self._section_name, self._data)

    def __getitem__(self, key):
        if key in self._data and self._data[key] is not None:
            return self.cast_val(key, self._data[key])

        env_key = self.environ_key(key)
        if env_key in os.environ:
            return self.cast_val(key, os.environ[env_key])

        raise KeyError(key)

    def get(self, key, failobj=None):
        if key not in self:
            return failobj

        return self[key]

    def cast_val(self, key, val):
        return val


def cache_dir():
    """
        The pretrained weight cache, `LESIONTL_CACHE` or ~/.cache/lesiontl.
    """
    value = EnvFallbackDict(None, {}).get('cache')
    if value:
        return os.path.expanduser(value)

    return os.path.join(os.path.expanduser('~'), '.cache', ENVIRON_PREFIX)
