"""Run configuration: a single hierarchical YAML document, fully validated
before any work starts. Unknown keys are rejected and every problem found is
reported at once. ``--set a.b.c=value`` overrides individual keys.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import AugmentationConfig, SyntheticSpec, load_manifest, synthesize_dataset
from .encoders import MiniEncoderConfig, ResnetEncoderConfig
from .errors import ConfigError, ValidationError
from .losses import HsaWeights
from .model import DEFAULT_LOGIT_SCALE, Stage, build_model
from .training import Schedule, StagePlan, TrainingData, make_training_data

_STAGE_SCHEDULE_DEFAULTS = {
    Stage.TSG: dict(kind="warmup_cosine", base_lr=3e-4, warmup_start_lr=1e-5,
                    warmup_epochs=5, milestones=[], decay=0.1),
    Stage.IFE: dict(kind="warmup_cosine", base_lr=3e-4, warmup_start_lr=1e-5,
                    warmup_epochs=5, milestones=[], decay=0.1),
    Stage.HSA: dict(kind="warmup_step", base_lr=3e-4, warmup_start_lr=3e-6,
                    warmup_epochs=10, milestones=[60, 100], decay=0.1),
}
_STAGE_EPOCH_DEFAULTS = {Stage.TSG: 10, Stage.IFE: 10, Stage.HSA: 15}


class _Section:
    """Typed, unknown-key-rejecting view of one config dict level."""

    def __init__(self, raw, path, problems):
        self.raw = raw if raw is not None else {}
        self.path = path
        self.problems = problems
        self._seen = set()
        if not isinstance(self.raw, dict):
            self.problems.append(f"{path}: expected a mapping, got {type(raw).__name__}")
            self.raw = {}

    def get(self, key, default=None, kind=None, choices=None):
        self._seen.add(key)
        value = self.raw.get(key, default)
        if value is None:
            return None
        if kind is not None:
            if kind is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if kind is int and isinstance(value, bool):
                self.problems.append(f"{self.path}.{key}: expected int, got bool")
                return default
            if not isinstance(value, kind):
                self.problems.append(
                    f"{self.path}.{key}: expected {getattr(kind, '__name__', kind)}, "
                    f"got {type(value).__name__} ({value!r})")
                return default
        if choices is not None and value not in choices:
            self.problems.append(f"{self.path}.{key}: must be one of {sorted(choices)}, got {value!r}")
            return default
        return value

    def get_pair(self, key, default):
        self._seen.add(key)
        value = self.raw.get(key, default)
        if (not isinstance(value, (list, tuple)) or len(value) != 2
                or not all(isinstance(v, int) for v in value)):
            self.problems.append(f"{self.path}.{key}: expected a pair of ints, got {value!r}")
            return tuple(default)
        return tuple(value)

    def get_floats(self, key, default, length):
        self._seen.add(key)
        value = self.raw.get(key, default)
        if (not isinstance(value, (list, tuple)) or len(value) != length
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
            self.problems.append(f"{self.path}.{key}: expected {length} numbers, got {value!r}")
            return tuple(default)
        return tuple(float(v) for v in value)

    def section(self, key):
        self._seen.add(key)
        return _Section(self.raw.get(key), f"{self.path}.{key}", self.problems)

    def finish(self):
        unknown = sorted(set(self.raw) - self._seen)
        for key in unknown:
            self.problems.append(f"{self.path}.{key}: unknown key")


@dataclass
class RunConfig:
    """Fully-resolved run configuration."""

    seed: int
    model: dict
    manifest: str | None
    eval_manifest: str | None
    synthetic: SyntheticSpec | None
    augmentation: AugmentationConfig
    num_ids_per_batch: int
    instances_per_modality: int
    plans: dict
    weight_decay: float
    run_dir: str | None
    eval: dict
    resolved: dict = field(repr=False, default_factory=dict)

    def config_hash(self) -> str:
        canon = json.dumps(self.resolved, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    # ---- builders -----------------------------------------------------

    def train_samples(self):
        """(samples, num_identities) of the training split."""
        if self.manifest is not None:
            manifest = load_manifest(self.manifest)
            return manifest.samples, manifest.num_identities
        samples = synthesize_dataset(self.synthetic)
        return samples, self.synthetic.num_identities

    def eval_samples(self):
        """Held-out evaluation split: explicit manifest, or the synthetic
        test split sharing the training identities."""
        if self.eval_manifest is not None:
            return load_manifest(self.eval_manifest).samples
        if self.synthetic is None:
            raise ValidationError("no eval_manifest configured and no synthetic data to derive one")
        spec = SyntheticSpec(**{**_spec_dict(self.synthetic), "split": "test"})
        return synthesize_dataset(spec)

    def build_model(self, num_identities: int):
        m = self.model
        if m["kind"] == "archive":
            return build_model(m["archive"], num_identities, m["num_prompt_tokens"],
                               seed=m["init_seed"])
        if m["kind"] == "mini":
            cfg = MiniEncoderConfig(feature_dim=m["feature_dim"], token_dim=m["token_dim"],
                                    stem_width=m["stem_width"], text_layers=m["text_layers"],
                                    pool_grid=tuple(m["pool_grid"]))
        else:
            cfg = ResnetEncoderConfig(feature_dim=m["feature_dim"], token_dim=m["token_dim"],
                                      base_width=m["base_width"],
                                      block_depths=tuple(m["block_depths"]),
                                      attn_heads=m["attn_heads"], text_layers=m["text_layers"])
        return build_model(cfg, num_identities, m["num_prompt_tokens"], seed=m["init_seed"],
                           logit_scale=m["logit_scale"])

    def build_training_data(self, samples) -> TrainingData:
        return make_training_data(samples, self.num_ids_per_batch, self.instances_per_modality,
                                  seed=self.seed, augmentation=self.augmentation)


def _spec_dict(spec: SyntheticSpec) -> dict:
    return dict(num_identities=spec.num_identities, images_per_identity=spec.images_per_identity,
                image_size=spec.image_size, noise_std=spec.noise_std, seed=spec.seed,
                split=spec.split, pattern_grid=spec.pattern_grid, jitter=spec.jitter,
                visible_cameras=spec.visible_cameras, infrared_cameras=spec.infrared_cameras)


def parse_config(raw: dict) -> RunConfig:
    """Validate a raw config mapping and resolve every default."""
    problems: list = []
    root = _Section(raw if raw is not None else {}, "config", problems)

    seed = root.get("seed", 7, int)

    model = root.section("model")
    kind = model.get("kind", "mini", str, choices=("mini", "resnet", "archive"))
    model_resolved = {
        "kind": kind,
        "archive": model.get("archive", None, str),
        "feature_dim": model.get("feature_dim", 64, int),
        "token_dim": model.get("token_dim", 32, int),
        "stem_width": model.get("stem_width", 16, int),
        "pool_grid": list(model.get_pair("pool_grid", (4, 2))),
        "base_width": model.get("base_width", 32, int),
        "block_depths": list(model.raw.get("block_depths", [1, 1, 1, 1, 1])),
        "attn_heads": model.get("attn_heads", 4, int),
        "text_layers": model.get("text_layers", 2, int),
        "num_prompt_tokens": model.get("num_prompt_tokens", 4, int),
        "logit_scale": model.get("logit_scale", DEFAULT_LOGIT_SCALE, float),
        "init_seed": model.get("init_seed", 0, int),
    }
    model._seen.add("block_depths")
    if kind == "archive" and not model_resolved["archive"]:
        problems.append("config.model.archive: required when model.kind is 'archive'")
    if model_resolved["num_prompt_tokens"] < 0:
        problems.append("config.model.num_prompt_tokens: must be >= 0")
    model.finish()

    data = root.section("data")
    manifest = data.get("manifest", None, str)
    eval_manifest = data.get("eval_manifest", None, str)
    synth = data.section("synthetic")
    synthetic = None
    if manifest is None or synth.raw:
        spec_kwargs = dict(
            num_identities=synth.get("num_identities", 10, int),
            images_per_identity=synth.get("images_per_identity", 20, int),
            image_size=synth.get_pair("image_size", (32, 16)),
            noise_std=synth.get("noise_std", 0.06, float),
            seed=synth.get("seed", 0, int),
            split=synth.get("split", "train", str),
            pattern_grid=synth.get_pair("pattern_grid", (8, 4)),
            jitter=synth.get("jitter", 2, int),
        )
        try:
            synthetic = SyntheticSpec(**spec_kwargs)
            synthetic.validate()
        except ValidationError as exc:
            problems.append(f"config.data.synthetic: {exc}")
    synth.finish()
    aug = data.section("augmentation")
    aug_cfg = AugmentationConfig(
        target_size=aug.get_pair("target_size", (32, 16)),
        flip_prob=aug.get("flip_prob", 0.5, float),
        pad_pixels=aug.get("pad_pixels", 2, int),
        mean=aug.get_floats("mean", (0.5, 0.5, 0.5), 3),
        std=aug.get_floats("std", (0.5, 0.5, 0.5), 3),
    )
    try:
        aug_cfg.validate()
    except ValidationError as exc:
        problems.append(f"config.data.augmentation: {exc}")
    aug.finish()
    data.finish()

    sampler = root.section("sampler")
    P = sampler.get("num_ids_per_batch", 2, int)
    K = sampler.get("instances_per_modality", 4, int)
    batch_size = sampler.get("batch_size", None, int)
    if P <= 0 or K <= 0:
        problems.append("config.sampler: num_ids_per_batch and instances_per_modality must be positive")
    elif batch_size is not None and batch_size != 2 * P * K:
        problems.append(
            f"config.sampler.batch_size: {batch_size} != 2 * P * K = {2 * P * K}")
    sampler.finish()

    stages = root.section("stages")
    train = root.section("train")
    weight_decay = train.get("weight_decay", 5e-4, float)
    run_dir = train.get("run_dir", None, str)
    train.finish()

    plans = {}
    for stage in (Stage.TSG, Stage.IFE, Stage.HSA):
        sec = stages.section(stage.value)
        sched_sec = sec.section("schedule")
        defaults = _STAGE_SCHEDULE_DEFAULTS[stage]
        epochs = sec.get("epochs", _STAGE_EPOCH_DEFAULTS[stage], int)
        milestones = sched_sec.raw.get("milestones", defaults["milestones"])
        sched_sec._seen.add("milestones")
        if not isinstance(milestones, (list, tuple)) or not all(isinstance(m, int) for m in milestones):
            problems.append(f"config.stages.{stage.value}.schedule.milestones: expected a list of ints")
            milestones = defaults["milestones"]
        schedule = Schedule(
            kind=sched_sec.get("kind", defaults["kind"], str,
                               choices=("warmup_cosine", "warmup_step")),
            base_lr=sched_sec.get("base_lr", defaults["base_lr"], float),
            warmup_start_lr=sched_sec.get("warmup_start_lr", defaults["warmup_start_lr"], float),
            warmup_epochs=sched_sec.get("warmup_epochs", defaults["warmup_epochs"], int),
            total_epochs=epochs,
            milestones=tuple(milestones),
            decay=sched_sec.get("decay", defaults["decay"], float),
        )
        sched_sec.finish()
        plan_kwargs = dict(stage=stage, epochs=epochs, schedule=schedule, seed=seed,
                           weight_decay=weight_decay)
        if stage in (Stage.TSG, Stage.IFE):
            plan_kwargs["unique_identity_denominator"] = bool(
                sec.get("unique_identity_denominator", False, bool))
        if stage is Stage.HSA:
            lam1 = sec.get("lambda1", 0.05, float)
            lam2 = sec.get("lambda2", 0.05, float)
            try:
                plan_kwargs["hsa_weights"] = HsaWeights(lam1, lam2)
            except ValidationError as exc:
                problems.append(f"config.stages.hsa: {exc}")
            plan_kwargs["text_refresh_every"] = sec.get("text_refresh_every", 1, int)
        plan = StagePlan(**plan_kwargs)
        try:
            plan.validate()
        except ValidationError as exc:
            problems.append(f"config.stages.{stage.value}: {exc}")
        plans[stage] = plan
        sec.finish()
    stages.finish()

    ev = root.section("eval")
    eval_resolved = {
        "protocol": ev.get("protocol", "regdb", str, choices=("regdb", "sysu")),
        "direction": ev.get("direction", "ir2vis", str, choices=("ir2vis", "vis2ir")),
        "mode": ev.get("mode", "all", str, choices=("all", "indoor")),
        "shot": ev.get("shot", "single", str, choices=("single", "multi")),
        "trials": ev.get("trials", 10, int),
        "repeats": ev.get("repeats", 10, int),
        "seed": ev.get("seed", 0, int),
        "max_rank": ev.get("max_rank", 20, int),
        "gallery_per_id": ev.get("gallery_per_id", 10, int),
    }
    if eval_resolved["trials"] <= 0 or eval_resolved["repeats"] <= 0:
        problems.append("config.eval: trials and repeats must be positive")
    if eval_resolved["max_rank"] <= 0:
        problems.append("config.eval.max_rank: must be positive")
    ev.finish()
    root.finish()

    if problems:
        raise ConfigError(problems)

    resolved = {
        "seed": seed,
        "model": model_resolved,
        "data": {
            "manifest": manifest,
            "eval_manifest": eval_manifest,
            "synthetic": None if synthetic is None else _spec_dict(synthetic),
            "augmentation": {
                "target_size": list(aug_cfg.target_size), "flip_prob": aug_cfg.flip_prob,
                "pad_pixels": aug_cfg.pad_pixels, "mean": list(aug_cfg.mean),
                "std": list(aug_cfg.std),
            },
        },
        "sampler": {"num_ids_per_batch": P, "instances_per_modality": K},
        "stages": {
            stage.value: {
                "epochs": plans[stage].epochs,
                "schedule": {
                    "kind": plans[stage].schedule.kind,
                    "base_lr": plans[stage].schedule.base_lr,
                    "warmup_start_lr": plans[stage].schedule.warmup_start_lr,
                    "warmup_epochs": plans[stage].schedule.warmup_epochs,
                    "milestones": list(plans[stage].schedule.milestones),
                    "decay": plans[stage].schedule.decay,
                },
                **({"unique_identity_denominator": plans[stage].unique_identity_denominator}
                   if stage in (Stage.TSG, Stage.IFE) else {}),
                **({"lambda1": plans[stage].hsa_weights.lambda1,
                    "lambda2": plans[stage].hsa_weights.lambda2,
                    "text_refresh_every": plans[stage].text_refresh_every}
                   if stage is Stage.HSA else {}),
            } for stage in plans
        },
        "train": {"weight_decay": weight_decay, "run_dir": run_dir},
        "eval": eval_resolved,
    }
    if resolved["data"]["synthetic"] is not None:
        synth_res = resolved["data"]["synthetic"]
        synth_res["image_size"] = list(synth_res["image_size"])
        synth_res["pattern_grid"] = list(synth_res["pattern_grid"])
        synth_res["visible_cameras"] = list(synth_res["visible_cameras"])
        synth_res["infrared_cameras"] = list(synth_res["infrared_cameras"])

    return RunConfig(
        seed=seed, model=model_resolved, manifest=manifest, eval_manifest=eval_manifest,
        synthetic=synthetic, augmentation=aug_cfg, num_ids_per_batch=P,
        instances_per_modality=K, plans=plans, weight_decay=weight_decay,
        run_dir=run_dir, eval=eval_resolved, resolved=resolved,
    )


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` overrides; values parse as YAML scalars."""
    out = json.loads(json.dumps(raw)) if raw else {}
    for item in overrides or []:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not of the form key.path=value")
        key, _, value = item.partition("=")
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ValidationError(f"override {item!r} has an empty key path")
        node = out
        for part in parts[:-1]:
            nxt = node.get(part)
            if not isinstance(nxt, dict):
                nxt = {}
                node[part] = nxt
            node = nxt
        node[parts[-1]] = yaml.safe_load(value)
    return out


def load_config(path, overrides=None) -> RunConfig:
    """Read, override, and validate a YAML config file."""
    text = Path(path).read_text(encoding="utf-8")
    raw = yaml.safe_load(text)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return parse_config(apply_overrides(raw, overrides))


def save_config_snapshot(config: RunConfig, path) -> None:
    Path(path).write_text(
        yaml.safe_dump(config.resolved, sort_keys=True, default_flow_style=False),
        encoding="utf-8")
