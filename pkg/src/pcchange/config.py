"""Flat `key = value` run configuration shared by every subcommand.

One file carries scene generation, architecture, and training settings
under dotted section prefixes (scene.*, synth.*, net.*, train.*). Unknown
keys and duplicate keys are errors so typos never pass silently. Every
run writes the fully resolved configuration (defaults filled in) next to
its outputs as provenance.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError
from .model import NetConfig
from .synth import SceneSpec, format_ops, parse_ops
from .train import TrainConfig

# key -> (type tag, default, help)
KNOWN_KEYS = {
    "scene.kind": ("str", "ground-plane", "base surface: ground-plane | tunnel-cylinder"),
    "scene.extent_x": ("float", 20.0, "surface extent along x, metres"),
    "scene.extent_y": ("float", 20.0, "surface extent along y, metres"),
    "scene.density": ("float", 50.0, "sampling density, points per square metre"),
    "scene.noise": ("float", 0.03, "surface-normal noise sigma, metres"),
    "scene.seed": ("int", 0, "scene generator seed"),
    "scene.base_z": ("float", 0.0, "base surface elevation, metres"),
    "scene.radius": ("float", 0.0, "tunnel radius; 0 = extent_y / 2"),
    "scene.ops": ("str", "", "change ops, e.g. 'subside box x0 y0 z0 x1 y1 z1 depth=2; ...'"),
    "synth.train_scenes": ("int", 1, "number of training scenes to generate"),
    "synth.test_scenes": ("int", 0, "number of test scenes to generate"),
    "synth.randomize": ("int", 0, "1 = draw each scene from the built-in distribution"),
    "synth.name": ("str", "scene", "scene file name stem"),
    "net.ratios": ("ints", (4, 4, 2, 2), "per-level downsampling ratios"),
    "net.channels": ("ints", (32, 64, 128, 256), "per-level feature widths"),
    "net.k": ("int", 16, "neighborhood size for graphs and attention"),
    "net.min_points": ("int", 64, "minimum cloud size accepted by the encoder"),
    "net.seed": ("int", 0, "weight initialization seed"),
    "train.lr": ("float", 1e-3, "learning rate"),
    "train.beta1": ("float", 0.9, "first-moment decay"),
    "train.beta2": ("float", 0.999, "second-moment decay"),
    "train.eps": ("float", 1e-8, "optimizer epsilon"),
    "train.epochs": ("int", 200, "training epochs"),
    "train.steps_per_scene": ("int", 1, "crops drawn from each scene per epoch"),
    "train.chunk_size": ("int", 1024, "points per training crop"),
    "train.seed": ("int", 0, "training seed (crops and order)"),
    "train.w_changed": ("float", 0.0, "loss weight for changed; 0 = auto"),
    "train.w_unchanged": ("float", 0.0, "loss weight for unchanged; 0 = auto"),
    "train.eval_crops": ("int", 2, "held-out crops per scene for the epoch log"),
    "train.checkpoint_every": ("int", 0, "extra checkpoint cadence; 0 = off"),
}


def _parse_value(key: str, raw: str):
    kind = KNOWN_KEYS[key][0]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "ints":
            return tuple(int(v) for v in raw.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as {kind}") from exc
    return raw


def default_config() -> dict:
    return {key: spec[1] for key, spec in KNOWN_KEYS.items()}


def parse_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = default_config()
    seen = set()
    for ln, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{ln}: expected 'key = value', got {line.strip()!r}")
        key, raw = body.split("=", 1)
        key = key.strip()
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{path}:{ln}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"{path}:{ln}: duplicate config key {key!r}")
        seen.add(key)
        cfg[key] = _parse_value(key, raw)
    return cfg


def resolved_text(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        val = cfg[key]
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def write_resolved(cfg: dict, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / "resolved.cfg"
    target.write_text(resolved_text(cfg), encoding="utf-8", newline="\n")
    return target


def scene_spec_from(cfg: dict) -> SceneSpec:
    return SceneSpec(
        kind=cfg["scene.kind"],
        extent_x=cfg["scene.extent_x"],
        extent_y=cfg["scene.extent_y"],
        density=cfg["scene.density"],
        noise=cfg["scene.noise"],
        seed=cfg["scene.seed"],
        base_z=cfg["scene.base_z"],
        radius=cfg["scene.radius"],
        ops=parse_ops(cfg["scene.ops"]),
    )


def net_config_from(cfg: dict) -> NetConfig:
    try:
        return NetConfig(
            ratios=cfg["net.ratios"],
            channels=cfg["net.channels"],
            k=cfg["net.k"],
            min_points=cfg["net.min_points"],
            seed=cfg["net.seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def train_config_from(cfg: dict) -> TrainConfig:
    return TrainConfig(
        lr=cfg["train.lr"],
        beta1=cfg["train.beta1"],
        beta2=cfg["train.beta2"],
        eps=cfg["train.eps"],
        epochs=cfg["train.epochs"],
        steps_per_scene=cfg["train.steps_per_scene"],
        chunk_size=cfg["train.chunk_size"],
        seed=cfg["train.seed"],
        w_changed=cfg["train.w_changed"],
        w_unchanged=cfg["train.w_unchanged"],
        eval_crops=cfg["train.eval_crops"],
        checkpoint_every=cfg["train.checkpoint_every"],
    )


def spec_with_ops(cfg: dict, spec: SceneSpec) -> dict:
    """Mirror a generated spec back into flat keys for provenance."""
    out = dict(cfg)
    out["scene.kind"] = spec.kind
    out["scene.extent_x"] = spec.extent_x
    out["scene.extent_y"] = spec.extent_y
    out["scene.density"] = spec.density
    out["scene.noise"] = spec.noise
    out["scene.seed"] = spec.seed
    out["scene.base_z"] = spec.base_z
    out["scene.radius"] = spec.radius
    out["scene.ops"] = format_ops(spec.ops)
    return out
