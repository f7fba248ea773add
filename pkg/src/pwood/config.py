"""Run configuration: flat "key = value" files with embedded defaults.

The default configuration is the versioned synthetic benchmark ("bench-v1"):
64x64 grid, 2-6 objects of size 6-20 cells, 3 classes, 400 train / 100 val
scenes, seed 7.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigInvalid
from .scenes import SceneSpec
from .simloop import Schedule


@dataclass(frozen=True)
class RunConfig:
    # scene family
    grid_h: int = 64
    grid_w: int = 64
    min_objects: int = 2
    max_objects: int = 6
    min_size: float = 6.0
    max_size: float = 20.0
    num_classes: int = 3
    max_iou: float = 0.05
    background_noise: float = 0.05
    seed: int = 7
    # dataset
    train_scenes: int = 400
    val_scenes: int = 100
    labeled_fraction: float = 0.1
    form_mix: str = "hbox"
    noise_sigma: float = 0.0
    # schedule
    pretrain_iters: int = 300
    total_iters: int = 1200
    lr: float = 0.05
    ema_momentum: float = 0.99
    cpf_policy: str = "density"
    static_threshold: float | None = None
    val_interval: int = 200
    val_subset: int = 25
    init_bias_prob: float = 0.02
    min_cpf_scores: int = 20
    scale_transform: str = "log1p"
    overlap_normalization: str = "count"
    point_radius: float = 1.5
    aug_noise: float = 0.1
    aug_erase: bool = True
    decode_top_k: int = 2000
    decode_max_dets: int = 100
    grad_clip: float | None = 1.0
    lr_box: float | None = 0.05
    lr_angle: float | None = 0.02
    # run
    out_dir: str = "out"
    dataset_dir: str = "dataset"
    plots: bool = False

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            h=self.grid_h,
            w=self.grid_w,
            min_objects=self.min_objects,
            max_objects=self.max_objects,
            min_size=self.min_size,
            max_size=self.max_size,
            num_classes=self.num_classes,
            max_pairwise_iou=self.max_iou,
            background_noise=self.background_noise,
            seed=self.seed,
        )

    def schedule(self) -> Schedule:
        return Schedule(
            pretrain_iters=self.pretrain_iters,
            total_iters=self.total_iters,
            lr=self.lr,
            seed=self.seed,
            ema_momentum=self.ema_momentum,
            cpf_policy=self.cpf_policy,
            static_threshold=self.static_threshold,
            labeled_fraction=self.labeled_fraction,
            form_mix=self.form_mix,
            noise_sigma=self.noise_sigma,
            val_interval=self.val_interval,
            val_subset=self.val_subset,
            init_bias_prob=self.init_bias_prob,
            min_cpf_scores=self.min_cpf_scores,
            scale_transform=self.scale_transform,
            overlap_normalization=self.overlap_normalization,
            point_radius=self.point_radius,
            aug_noise=self.aug_noise,
            aug_erase=self.aug_erase,
            decode_top_k=self.decode_top_k,
            decode_max_dets=self.decode_max_dets,
            grad_clip=self.grad_clip,
            lr_box=self.lr_box,
            lr_angle=self.lr_angle,
        )

    def to_flat_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            out[f.name] = _format_value(getattr(self, f.name))
        return out


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def _parse_value(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    raw = raw.strip()
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    if ftype == "float | None":
        return None if raw.lower() == "none" else float(raw)
    if ftype == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigInvalid(f"cannot parse boolean {raw!r} for key {key!r}")
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse flat "key = value" text; unknown keys are errors."""
    values = dict((base or RunConfig()).__dict__)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigInvalid(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigInvalid(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(key, val)
        except ValueError as exc:
            raise ConfigInvalid(f"line {lineno}: {exc}") from exc
    cfg = RunConfig(**values)
    cfg.schedule().validate()
    return cfg


def parse_config_dict(flat: dict[str, str]) -> RunConfig:
    """Rebuild a RunConfig from the flat string dict echoed in summaries."""
    lines = [f"{k} = {v}" for k, v in flat.items()]
    return parse_config("\n".join(lines))


def format_config(cfg: RunConfig) -> str:
    lines = ["# pwood run configuration"]
    for key, val in cfg.to_flat_dict().items():
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"
