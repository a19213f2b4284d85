"""Run configuration: one INI section per module, every key defaulted.

Precedence, lowest first: dataclass defaults, config file, environment
variables (``SPLITREC__SECTION__KEY``), ``--section.key=value`` overrides.
"""
import configparser
import io
import os
from dataclasses import dataclass, field, fields

from .allocator import AgentConfig
from .model import ModelConfig
from .rewards import RewardConfig
from .training import TrainConfig

ENV_PREFIX = "SPLITREC__"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    rewards: RewardConfig = field(default_factory=RewardConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    SECTIONS = ("model", "agent", "rewards", "train")

    def validate(self):
        self.agent.validate()
        self.rewards.validate()
        self.train.validate()
        if self.model.dim < 1:
            raise ConfigError("model.dim must be positive")
        if self.model.dtype not in ("float64", "float32"):
            raise ConfigError(f"unknown dtype {self.model.dtype!r}")
        return self

    def set(self, dotted, value):
        """Assign ``section.key`` from a string, coercing to the field's type."""
        try:
            section, key = dotted.split(".", 1)
        except ValueError:
            raise ConfigError(f"expected section.key, got {dotted!r}") from None
        if section not in self.SECTIONS:
            raise ConfigError(f"unknown section {section!r}")
        obj = getattr(self, section)
        types = {f.name: f.type for f in fields(obj)}
        if key not in types:
            raise ConfigError(f"unknown key {section}.{key}")
        setattr(obj, key, _coerce(value, types[key], dotted))

    def dumps(self):
        cp = configparser.ConfigParser()
        for section in self.SECTIONS:
            obj = getattr(self, section)
            cp[section] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text):
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        cfg = cls()
        for section in cp.sections():
            for key, value in cp[section].items():
                cfg.set(f"{section}.{key}", value)
        return cfg

    @classmethod
    def load(cls, path=None, overrides=(), environ=None):
        if path is None:
            cfg = cls()
        else:
            with open(path, encoding="utf-8") as fh:
                cfg = cls.loads(fh.read())
        environ = os.environ if environ is None else environ
        for name, value in sorted(environ.items()):
            if name.startswith(ENV_PREFIX):
                parts = name[len(ENV_PREFIX):].lower().split("__")
                if len(parts) != 2:
                    raise ConfigError(f"bad environment override {name}")
                cfg.set(".".join(parts), value)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} needs section.key=value")
            k, v = item.split("=", 1)
            cfg.set(k, v)
        return cfg.validate()


def _fmt(value):
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(value, typ, name):
    if typ in (bool, "bool"):
        low = str(value).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: not a boolean: {value!r}")
    conv = {"int": int, "float": float, "str": str}.get(typ, typ)
    try:
        return conv(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot parse {value!r}") from None
