"""Flat ``key = value`` run configuration.

One line per setting, ``#`` starts a comment, keys are ``section.field``.
Unknown keys, malformed values and failed validation raise
:class:`ConfigError`; a file resolves completely before any compute starts.
"""
import dataclasses

from .data import SynthConfig
from .search import SearchConfig
from .supernet import NetworkConfig
from .train_eval import RetrainConfig


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class DataConfig:
    augment: bool = False
    window: int = 300
    trim_top: int = 20
    trim_bottom: int = 20
    overlap: float = 0.5
    flip: bool = True
    split: tuple = (0.8, 0.2)
    morphology: str = "erode:3,close:3"

    def morphology_ops(self):
        if not self.morphology.strip() or self.morphology.strip() == "none":
            return ()
        ops = []
        for item in self.morphology.split(","):
            op, _, k = item.strip().partition(":")
            if op not in ("erode", "dilate", "close"):
                raise ConfigError(f"data.morphology: unknown op {op!r}")
            try:
                k = int(k or 3)
            except ValueError:
                raise ConfigError(f"data.morphology: bad kernel in {item!r}") from None
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"data.morphology: kernel must be odd and positive, got {k}")
            ops.append((op, k))
        return tuple(ops)


@dataclasses.dataclass
class RuntimeConfig:
    backend: str = "auto"  # auto | numpy | numba
    dtype: str = "float32"
    checkpoint_every: int = 1


# Fixed architectural constants; listed so a resolved config states them, but not tunable.
FIXED = {"net.conv_kernel": 3, "net.pool_size": 2}

SECTIONS = {
    "synth": (SynthConfig, {"seed"}),
    "data": (DataConfig, set()),
    "net": (NetworkConfig, {"input_size", "in_channels", "num_classes"}),
    "search": (SearchConfig, {"seed"}),
    "retrain": (RetrainConfig, {"seed"}),
    "runtime": (RuntimeConfig, set()),
}


def _fields(cls, skip):
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key, text, default):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text, 0) if text.lower().startswith("0x") else int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.split(",") if v.strip()) if text.strip() else ()
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    synth: SynthConfig = dataclasses.field(default_factory=SynthConfig)
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    net: NetworkConfig = dataclasses.field(default_factory=NetworkConfig)
    search: SearchConfig = dataclasses.field(default_factory=SearchConfig)
    retrain: RetrainConfig = dataclasses.field(default_factory=RetrainConfig)
    runtime: RuntimeConfig = dataclasses.field(default_factory=RuntimeConfig)

    def image_size(self):
        if self.data.augment:
            return (self.data.window, self.data.window)
        return (self.synth.height, self.synth.width)

    def resolve(self):
        """Propagate shared values (seed, image size, classes) and validate everything."""
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        try:
            for sub in (self.synth, self.search, self.retrain):
                sub.seed = self.seed
            self.net.num_classes = self.synth.num_classes
            self.net.input_size = self.image_size()
            self.net.in_channels = 1
            self.synth.validate()
            self.net.validate()
            self.search.validate()
            RetrainConfig(**dataclasses.asdict(self.retrain))
            self.data.morphology_ops()
            fr = self.data.split
            if len(fr) not in (2, 3) or abs(sum(fr) - 1.0) > 1e-9 or min(fr) < 0:
                raise ValueError(f"data.split must be 2 or 3 fractions summing to 1, got {fr}")
            if self.data.augment and self.synth.height - self.data.trim_top - self.data.trim_bottom != self.data.window:
                raise ValueError("synth.height minus trims must equal data.window when augmenting")
            if self.runtime.backend not in ("auto", "numpy", "numba"):
                raise ValueError(f"runtime.backend must be auto, numpy or numba, got {self.runtime.backend!r}")
            if self.runtime.dtype not in ("float32", "float64"):
                raise ValueError("runtime.dtype must be float32 or float64")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def items(self):
        yield "seed", self.seed
        for sec, (cls, skip) in SECTIONS.items():
            obj = getattr(self, sec)
            for name in _fields(cls, skip):
                yield f"{sec}.{name}", getattr(obj, name)
            if sec == "net":
                yield from FIXED.items()

    def to_text(self):
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.items())

    def set(self, key, text):
        if key == "seed":
            self.seed = _parse(key, text, 0)
            return
        if key in FIXED:
            if _parse(key, text, 0) != FIXED[key]:
                raise ConfigError(f"{key} is fixed at {FIXED[key]}")
            return
        sec, _, name = key.partition(".")
        if sec not in SECTIONS or name not in _fields(*SECTIONS[sec]):
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(self, sec)
        object.__setattr__(obj, name, _parse(key, text, getattr(obj, name)))


def parse_config(text, base=None, source="<config>"):
    cfg = base or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        try:
            cfg.set(key.strip(), value.strip())
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return cfg


def load_config(path, base=None):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base, source=str(path))


def desk_config():
    """Small synthetic setup: 64x64 images, depth 3, base width 8, M=3."""
    return RunConfig()


def paper_faithful_config():
    """Full-scale search/retrain hyperparameters on 340x1024 inputs cropped to 300x300."""
    cfg = RunConfig()
    cfg.synth = SynthConfig(num_images=45, height=340, width=1024, max_amplitude=8.0)
    cfg.data = DataConfig(augment=True, window=300, trim_top=20, trim_bottom=20, overlap=0.5, flip=True,
                          split=(0.8, 0.2))
    # 300 = 4 * 75, so only two halvings keep every level integral.
    cfg.net = NetworkConfig(depth=2, base_channels=16, m=7, input_size=(300, 300))
    cfg.search = SearchConfig(epochs=300, batch_size=2, lr_max=0.025, lr_min=0.01, momentum=0.95,
                              weight_decay=3e-4)
    cfg.retrain = RetrainConfig(epochs=300, batch_size=2, lr=3.0e-4, weight_decay=5.0e-5)
    return cfg
