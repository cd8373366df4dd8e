"""Run configuration: flat ``key=value`` text with section prefixes.

    # comments and blank lines are ignored
    epochs=12
    synth.num_identities=20
    arm.roi_size=14
    sgd.learning_rate=0.003
    model.embed_dim=128

Top-level keys are ``epochs``, ``batch_size``, ``variant``, ``variants``
(comma separated, ablate only), ``repeats`` (ablate seeds, counting up from
``seed``), ``seed`` and ``out``. Command-line ``--set``
pairs are applied after the file, so they win.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .arm import VARIANTS, ArmConfig, UsageError, ablation_variant
from .model import ModelConfig
from .optim import SgdConfig
from .synth import SynthConfig

SECTIONS = ("synth", "arm", "sgd", "model")
TOP_LEVEL = ("epochs", "batch_size", "variant", "variants", "repeats", "seed", "out")


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    arm: ArmConfig = field(default_factory=lambda: ArmConfig(channels_in=32))
    sgd: SgdConfig = field(default_factory=SgdConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 12
    batch_size: int = 3
    variant: str = "full_arm"
    variants: tuple[str, ...] = tuple(VARIANTS)
    repeats: int = 1
    seed: int = 0
    out: str = "runs"

    def __post_init__(self):
        if self.epochs < 0:
            raise UsageError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise UsageError("batch_size must be at least 1")
        ablation_variant(self.variant)
        if self.repeats < 1:
            raise UsageError("repeats must be at least 1")
        if not self.variants:
            raise UsageError("variants must be nonempty")
        for v in self.variants:
            ablation_variant(v)

    def model_config(self, variant: str | None = None) -> ModelConfig:
        """ModelConfig with this run's ARM settings and variant filled in."""
        return dataclasses.replace(self.model, arm=self.arm, variant=variant or self.variant)

    def with_seed(self, seed: int) -> "RunConfig":
        """Same run with ``seed`` driving both data and weights."""
        return dataclasses.replace(self, seed=seed, synth=dataclasses.replace(self.synth, seed=seed))

    # -- text form --------------------------------------------------------
    def items(self) -> list[tuple[str, str]]:
        out = []
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                if section == "model" and f.name in ("arm", "variant"):
                    continue  # owned by the arm section and the top level
                out.append((f"{section}.{f.name}", _format(getattr(obj, f.name))))
        for key in TOP_LEVEL:
            out.append((key, _format(getattr(self, key))))
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.items())

    def hash(self) -> str:
        """Stable 16-hex-digit digest of the canonical text form, with the
        output directory left out so relocating a run keeps its hash."""
        text = "".join(f"{k}={v}\n" for k, v in self.items() if k != "out")
        return hashlib.blake2b(text.encode(), digest_size=8).hexdigest()


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(raw: str, current, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if current and isinstance(current[0], int):
                return tuple(int(p) for p in parts)
            return tuple(parts)
        if current is None:  # optional integers such as arm.token_mlp_hidden
            return None if raw.lower() == "none" else int(raw)
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_pairs(lines: Iterable[str], source: str = "<config>") -> list[tuple[str, str]]:
    pairs = []
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def build_config(pairs: Iterable[tuple[str, str]] = (), base: RunConfig | None = None) -> RunConfig:
    """Apply ``pairs`` in order on top of ``base`` (defaults if omitted)."""
    base = base or RunConfig()
    sections = {s: dataclasses.asdict(getattr(base, s)) for s in SECTIONS}
    sections["model"].pop("arm")
    sections["model"].pop("variant")
    top = {k: getattr(base, k) for k in TOP_LEVEL}
    # hidden widths follow roi_size / channels unless pinned explicitly
    arm = sections["arm"]
    if arm["token_mlp_hidden"] == 2 * base.arm.tokens:
        arm["token_mlp_hidden"] = None
    if arm["channel_mlp_hidden"] == 2 * base.arm.reduced:
        arm["channel_mlp_hidden"] = None
    for key, raw in pairs:
        if "." in key:
            section, name = key.split(".", 1)
            if section not in sections or name not in sections[section]:
                raise UsageError(f"unknown config key {key!r}")
            sections[section][name] = _convert(raw, sections[section][name], key)
        elif key in top:
            top[key] = _convert(raw, top[key], key)
        else:
            raise UsageError(f"unknown config key {key!r}")
    try:
        model = sections["model"]
        model["backbone_widths"] = tuple(model["backbone_widths"])
        return RunConfig(synth=SynthConfig(**sections["synth"]), arm=ArmConfig(**sections["arm"]),
                         sgd=SgdConfig(**sections["sgd"]), model=ModelConfig(**model), **top)
    except UsageError:
        raise
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    pairs = []
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
        pairs += parse_pairs(text.splitlines(), str(path))
    pairs += parse_pairs(overrides, "--set")
    return build_config(pairs)
