"""
Run configuration as a flat key=value text document.

Syntax matches psfa.txt: one ``key=value`` per line and blank lines are
ignored. A ``#`` at the start of a line or after whitespace starts a
comment, so values such as ``runs/#3`` keep their ``#``. Each command
declares its keys and their types; anything else is rejected.
"""

import logging
import os
import re

from .errors import ConfigError

logger = logging.getLogger(__name__)

_TRUE = {'true', 'yes', 'on', '1'}
_FALSE = {'false', 'no', 'off', '0'}
_COMMENT = re.compile(r"(^|\s)#.*$")


def default_threads():
    """PSFA_THREADS if set, else the machine's CPU count"""
    env = os.getenv('PSFA_THREADS')
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"PSFA_THREADS must be an integer, got {env!r}") from None
        if value < 1:
            raise ConfigError(f"PSFA_THREADS must be >= 1, got {value}")
        return value
    return os.cpu_count() or 1


def parse_bool(text):
    t = str(text).strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _format(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return '' if value is None else str(value)


HYPER_KEYS = {
    'a_alpha': (float, 1e-6),
    'b_alpha': (float, 1e-6),
    'a_gamma': (float, 1e-6),
    'b_gamma': (float, 1e-6),
    'a_tau': (float, 1e-6),
    'b_tau': (float, 1e-6),
    'beta': (float, 1e-6),
}

SCHEMAS = {
    'generate': {
        'voxels': (int, 1000),
        'timepoints': (int, 25),
        'subjects': (int, 3),
        'components': (int, 3),
        'sparsity': (float, 0.5),
        'noise_mean': (float, 0.009),
        'noise_sd': (float, 0.002),
        'seed': (int, 0),
        'out': (str, None),
    },
    'fit': {
        'model': (str, 'psfa'),
        'components': (int, 6),
        'max_iters': (int, 500),
        'tol': (float, 1e-9),
        'restarts': (int, 1),
        'seed': (int, 0),
        'mean': (bool, False),
        'elbo_every': (int, 1),
        'check_monotone': (bool, True),
        'alpha_rate_form': (str, 'corrected'),
        'mean_cov_form': (str, 'corrected'),
        'prune_every': (int, 25),
        'checkpoint_every': (int, 0),
        'threads': (int, None),
        'in': (str, None),
        'out': (str, None),
        **HYPER_KEYS,
    },
    'eval': {
        'est': (str, None),
        'ref': (str, None),
        'truth_noise': (str, None),
        'est_noise': (str, None),
        'out': (str, None),
    },
    'compare': {
        'in': (str, None),
        'truth_dir': (str, None),
        'components': (int, 6),
        'max_iters': (int, 500),
        'tol': (float, 1e-9),
        'restarts': (int, 10),
        'seed': (int, 0),
        'threads': (int, None),
        'out': (str, None),
    },
}


class RunConfig:
    """Typed key/value settings for one command"""

    def __init__(self, command, values=None):
        if command not in SCHEMAS:
            raise ConfigError(f"unknown command {command!r}")
        self.command = command
        self.schema = SCHEMAS[command]
        self._values = {k: default for k, (_, default) in self.schema.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key, value):
        key = key.strip().replace('-', '_')
        if key not in self.schema:
            raise ConfigError(f"unknown key {key!r} for command {self.command!r}")
        kind, _ = self.schema[key]
        if value is None or (isinstance(value, str) and value.strip() == ''):
            self._values[key] = None
            return
        try:
            if kind is bool:
                self._values[key] = value if isinstance(value, bool) else parse_bool(value)
            elif kind is int:
                self._values[key] = int(value)
            elif kind is float:
                self._values[key] = float(value)
            else:
                self._values[key] = str(value).strip()
        except ValueError:
            raise ConfigError(f"invalid value {value!r} for {kind.__name__} key {key!r}") from None

    def get(self, key):
        return self._values[key.replace('-', '_')]

    def __getitem__(self, key):
        return self.get(key)

    def update(self, values):
        """Apply explicitly given values, skipping None"""
        for key, value in values.items():
            if value is not None:
                self.set(key, value)
        return self

    def as_dict(self):
        return dict(self._values)

    def to_text(self):
        lines = [f"# psfa {self.command} run configuration"]
        lines += [f"{k}={_format(v)}" for k, v in self._values.items()]
        return '\n'.join(lines) + '\n'

    def save(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            f.write(self.to_text())

    @classmethod
    def parse(cls, command, text, source='<string>'):
        config = cls(command)
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = _COMMENT.sub('', raw).strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = line.split('=', 1)
            try:
                config.set(key, value)
            except ConfigError as e:
                raise ConfigError(f"{source}:{lineno}: {e}") from None
        return config

    @classmethod
    def load(cls, command, path):
        with open(path, encoding='utf-8') as f:
            return cls.parse(command, f.read(), source=path)

    def __repr__(self):
        return f"RunConfig({self.command!r}, {self._values!r})"
