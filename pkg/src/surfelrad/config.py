"""Run configuration: a flat ``key=value`` text file plus command-line overrides."""
from dataclasses import asdict, dataclass, fields, replace

from .losses import LossWeights
from .radiometry import PRESETS, RadConfig


class ConfigError(ValueError):
    """Unknown key or unparsable value in a run configuration."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 0  # 0 uses every available core
    rad_preset: str = "desk"
    n_g: int = 256
    n_s: int = 64
    n_s_render: int = 16
    specular: bool = True
    camera_dirs: bool = True
    detach_surfel: bool = False
    detach_pbr: bool = False
    lam_rad: float = 0.2
    lam_dist: float = 1000.0
    lam_n: float = 0.05
    lam_ns: float = 0.02
    lam_m: float = 0.05
    lam_as: float = 0.2
    lam_rs: float = 0.1
    lam_light: float = 0.01
    lam_rad_relight: float = 1.0
    iters_init: int = 2000
    iters_inverse: int = 1000
    iters_relight: int = 500
    lr_sh: float = 0.0025
    lr_albedo: float = 0.005
    lr_roughness: float = 0.005
    lr_env: float = 0.01
    lr_opacity: float = 0.01
    reinit: bool = True
    checkpoint_every: int = 0

    def rad(self, stage="inverse"):
        lam = self.lam_rad_relight if stage == "relight" else self.lam_rad
        return RadConfig(n_g=self.n_g, n_s=self.n_s, lam_rad=lam, seed=self.seed, specular=self.specular,
                         camera_dirs=self.camera_dirs, detach_surfel=self.detach_surfel,
                         detach_pbr=self.detach_pbr)

    def weights(self, stage="inverse"):
        if stage == "relight":
            return replace(LossWeights.relight(), rad=self.lam_rad_relight)
        return LossWeights(rad=self.lam_rad, dist=self.lam_dist, n=self.lam_n, ns=self.lam_ns, m=self.lam_m,
                           a_s=self.lam_as, r_s=self.lam_rs, light=self.lam_light)

    def learning_rates(self):
        return {"sh": self.lr_sh, "albedo": self.lr_albedo, "roughness": self.lr_roughness, "env": self.lr_env,
                "opacity": self.lr_opacity}

    def iterations(self, stage):
        return {"init": self.iters_init, "inverse": self.iters_inverse, "relight": self.iters_relight}[stage]


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key, text):
    kind = _TYPES[key]
    text = text.strip()
    try:
        if kind in (bool, "bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def parse_overrides(pairs, base=None):
    """Apply ``key=value`` strings to ``base`` (default config), rejecting unknown keys."""
    cfg = base or RunConfig()
    updates = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        key, val = item.split("=", 1)
        key = key.strip()
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = _parse_value(key, val)
    if "rad_preset" in updates:
        preset = updates["rad_preset"]
        if preset not in PRESETS:
            raise ConfigError(f"unknown rad_preset {preset!r}; choose from {', '.join(PRESETS)}")
        # a preset sets the sample budget unless the same file also sets it explicitly
        updates.setdefault("n_g", PRESETS[preset].n_g)
        updates.setdefault("n_s", PRESETS[preset].n_s)
    try:
        return replace(cfg, **updates)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def read_config(path, base=None):
    lines = []
    with open(path) as f:
        for raw in f:
            line = raw.split("#", 1)[0].strip()
            if line:
                lines.append(line)
    return parse_overrides(lines, base)


def write_config(cfg, path):
    with open(path, "w") as f:
        for key, val in asdict(cfg).items():
            f.write(f"{key}={int(val) if isinstance(val, bool) else val!r}\n" if not isinstance(val, str)
                    else f"{key}={val}\n")
