"""Run configuration and the ``key = value`` config-file format.

Files are INI-style: ``[section]`` headers, ``key = value`` lines and ``#``
comments. Every key must belong to a known section; unknown sections or keys
raise ConfigError and nothing is half-applied.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import math
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunSection:
    seed: int = 0
    iterations_stage1: int = 3000
    iterations_stage2: int = 3000
    ref_angle: float = 0.0
    ref_prob: float = 0.25
    shape_seed: int = 1000
    shape_class: int = 0
    base_res: int = 4
    render_res_stage1: int = 32
    render_res_stage2: int = 128
    teacher_res: int = 32
    lr: float = 1e-3
    weight_decay: float = 2e-5
    band_masking: bool = True
    regularize_ref: bool = True
    regularize_unseen: bool = True
    reg_stage1: str = "normal"
    reg_stage2: str = "laplacian"
    teacher_source: str = "trained"  # trained | oracle
    oracle_std: float = 0.05
    view_teacher: str = "teachers/view.dtck"
    class_teacher: str = "teachers/class.dtck"
    failure_psnr: float = 12.0
    divergence_grad_norm: float = 1e6
    divergence_patience: int = 10


@dataclass
class CurriculumSection:
    schedule: str = "annealed"
    t_max: int = 980
    t_min: int = 20
    delta_max: int = 100
    delta_min: int = 10
    step_length: int = 0  # 0 means N // 10
    lambda_max: float = 0.5
    log_base: float = 2.0


@dataclass
class SdsSection:
    weight_kind: str = "sigma_sq"
    cfg_scale_coarse: float = 5.0
    cfg_scale_fine: float = 25.0
    multi_step_switch_t: int = 200
    multi_step_count: int = 4
    pose_w_min: float = 0.5
    clip_norm: float = 1.0
    drop_prob: float = 0.5


@dataclass
class ObjectiveSection:
    lambda_reg: float = 0.01
    lambda_rec: float = 1.0
    rec_value: float = 1.0
    rec_mask: float = 0.5
    rec_pearson: float = 0.1
    mask_sharpness: float = 20.0
    ref_mask_threshold: float = 0.02
    normal_beta: float = 1.0
    normal_samples: int = 256
    normal_eps: float = 1e-2
    iso: float = 0.5


@dataclass
class DiffusionSection:
    T: int = 1000
    schedule: str = "cosine"


@dataclass
class TeacherSection:
    corpus_seed: int = 7
    n_shapes: int = 600
    angles_per_shape: int = 16
    epochs: int = 200
    batch_size: int = 128
    lr: float = 3e-3
    weight_decay: float = 2e-5
    cond_dropout: float = 0.1
    hidden: tuple = (256, 256, 256)
    max_steps: int = 6000  # 0 means no cap


@dataclass
class ExperimentSection:
    theory_dim: int = 8
    theory_separation: float = 1.0
    theory_std: float = 0.1
    theory_samples: int = 20000
    theory_steps: int = 3000
    theory_hidden: tuple = (128, 128)
    theory_trials: int = 200
    theory_deltas: str = "0 0.5 1.0"
    variance_t: int = 900
    variance_samples: int = 16
    variance_downsample: int = 4
    variance_angle: float = 0.7
    compare_shape_seed: int = 500
    compare_shapes: int = 24
    compare_angles: int = 4
    compare_t: str = "200 400 600 800"
    compare_threshold: float = 0.05
    compare_cfg_scale: float = 1.0
    ablation_schedules: str = "annealed random linear"
    ablation_masks: str = "on off"
    ablation_teachers: str = "dual coarse"
    ablation_seeds: int = 3
    ablation_shapes: str = "1000:0 1001:1 1002:2"
    ablation_workers: int = 1


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    curriculum: CurriculumSection = field(default_factory=CurriculumSection)
    sds: SdsSection = field(default_factory=SdsSection)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def validate(self) -> "RunConfig":
        r = self.run
        if not 0.0 <= r.ref_prob <= 1.0:
            raise ConfigError("run.ref_prob must lie in [0, 1]")
        if r.iterations_stage1 < 0 or r.iterations_stage2 < 0:
            raise ConfigError("iteration counts must be nonnegative")
        if r.teacher_source not in ("trained", "oracle"):
            raise ConfigError("run.teacher_source must be 'trained' or 'oracle'")
        for key in ("reg_stage1", "reg_stage2"):
            if getattr(r, key) not in ("normal", "laplacian", "both", "none"):
                raise ConfigError(f"run.{key} must be normal, laplacian, both or none")
        if r.render_res_stage1 % r.teacher_res or r.render_res_stage2 % r.teacher_res:
            raise ConfigError("render resolutions must be multiples of run.teacher_res")
        if self.curriculum.schedule not in ("annealed", "random", "linear"):
            raise ConfigError("curriculum.schedule must be annealed, random or linear")
        if not 0.0 <= self.sds.drop_prob <= 1.0 or not 0.0 <= self.sds.pose_w_min <= 1.0:
            raise ConfigError("probabilities and weights must lie in [0, 1]")
        e = self.experiment
        if e.ablation_seeds < 3:
            raise ConfigError("experiment.ablation_seeds must be at least 3")
        if e.variance_samples < 2:
            raise ConfigError("experiment.variance_samples must be at least 2")
        if e.theory_trials < 100:
            raise ConfigError("experiment.theory_trials must be at least 100")
        return self

    def replace(self, **sections) -> "RunConfig":
        """Copy with per-section overrides: replace(run={'seed': 3})."""
        new = dataclasses.replace(self)
        for name, updates in sections.items():
            setattr(new, name, dataclasses.replace(getattr(self, name), **updates))
        return new.validate()


SECTIONS = {f.name: f.type for f in fields(RunConfig)}


def _section_types():
    hints = typing.get_type_hints(RunConfig)
    return {name: hints[name] for name in SECTIONS}


def _coerce(raw: str, typ, where: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            val = float(raw)
            if not math.isfinite(val):
                raise ValueError(raw)
            return val
        if typ is tuple:
            return tuple(int(p) for p in raw.replace(",", " ").split())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from exc


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(
        interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",), delimiters=("=",)
    )
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    types = _section_types()
    updates: dict[str, dict] = {}
    for sec in parser.sections():
        if sec not in types:
            raise ConfigError(f"unknown section [{sec}]")
        hints = typing.get_type_hints(types[sec])
        for key, raw in parser.items(sec):
            if key not in hints:
                raise ConfigError(f"unknown key {sec}.{key}")
            updates.setdefault(sec, {})[key] = _coerce(raw, _base_type(hints[key]), f"{sec}.{key}")
    for sec, upd in updates.items():
        setattr(cfg, sec, dataclasses.replace(getattr(cfg, sec), **upd))
    return cfg.validate()


def _base_type(hint):
    origin = typing.get_origin(hint)
    if origin is tuple:
        return tuple
    return hint


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(), base)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return " ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    """Fully resolved config, every key written out."""
    out = io.StringIO()
    for sec in SECTIONS:
        out.write(f"[{sec}]\n")
        for f_ in fields(getattr(cfg, sec)):
            out.write(f"{f_.name} = {_fmt(getattr(getattr(cfg, sec), f_.name))}\n")
        out.write("\n")
    return out.getvalue()
