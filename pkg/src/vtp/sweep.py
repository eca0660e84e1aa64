"""Sweep orchestration over a single varied axis, with an append-only run
registry so interrupted sweeps resume by skipping completed points.

A sweep point = (axis value, seed) resolved against a base training config.
Every point trains a tokenizer, computes reconstruction/probe metrics, then
trains the fixed flow harness on the frozen tokenizer and scores generation.
The harness always trains and scores on the same held-aside dataset, never the
tokenizer's own training images, so axis comparisons measure tokenizer
generalization rather than memorization. Results land in registry.jsonl, one
immutable record per attempt.
"""

import copy
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

from filelock import FileLock

from .data import dataset_from_manifest, synth_dataset
from .evaluation import compute_metrics, train_feature_extractor
from .genharness import DiTConfig, train_and_score
from .model import MODEL_TIERS, count_flops, count_params
from .trainer import Trainer, TrainConfig, load_tokenizer

AXES = ("compute", "data", "encoder", "decoder", "objective")

# (enable_clip, enable_ssl, enable_rec) per objective combination. The
# autoencoding route is always on: without it there is nothing to decode.
OBJECTIVE_SETS = {
    "ae": (False, False, True),
    "clip+ae": (True, False, True),
    "ssl+ae": (False, True, True),
    "clip+ssl+ae": (True, True, True),
}

DECODER_TIERS = {"s": (128, 2, 4), "b": (256, 3, 4), "l": (512, 4, 8)}

RECORD_VERSION = 1


class RegistryError(RuntimeError):
    pass


def objectives_label(cfg: TrainConfig) -> str:
    parts = []
    if cfg.enable_clip and cfg.weights.lambda_clip > 0:
        parts.append("clip")
    if cfg.enable_ssl and cfg.weights.lambda_ssl > 0:
        parts.append("ssl")
    if cfg.enable_rec and cfg.weights.lambda_rec > 0:
        parts.append("ae")
    return "+".join(parts)


@dataclass
class SweepSpec:
    """One varied axis, a value grid, seeds, and the shared base configs."""

    axis: str
    values: list
    seeds: list = field(default_factory=lambda: [0])
    train: dict = field(default_factory=dict)
    dit: dict = field(default_factory=dict)
    eval_n: int = 256
    n_score: int = 512
    score_n: int = 4096        # size of the fixed harness-training dataset
    heldout_seed: int = 7700

    def validate(self):
        if self.axis not in AXES:
            raise ValueError(f"unknown sweep axis {self.axis!r}, expected one of {AXES}")
        if len(self.values) < 1:
            raise ValueError("sweep needs at least one axis value")
        if len(set(map(str, self.values))) != len(self.values):
            raise ValueError("duplicate axis values in sweep grid")
        if len(self.seeds) < 1:
            raise ValueError("sweep needs at least one seed")
        if self.axis == "objective":
            bad = [v for v in self.values if v not in OBJECTIVE_SETS]
            if bad:
                raise ValueError(
                    f"unknown objective combos {bad}, expected keys of {sorted(OBJECTIVE_SETS)}")
        if self.axis in ("encoder", "decoder"):
            tiers = MODEL_TIERS if self.axis == "encoder" else DECODER_TIERS
            bad = [v for v in self.values if v not in tiers]
            if bad:
                raise ValueError(f"unknown {self.axis} tiers {bad}")
        # base config must itself be well formed before any axis edits
        self.resolve_train(self.values[0], self.seeds[0])
        return self

    @classmethod
    def from_dict(cls, doc: dict) -> "SweepSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown sweep spec fields: {sorted(extra)}")
        return cls(**doc).validate()

    def resolve_train(self, value, seed: int) -> TrainConfig:
        """Apply one grid point to the base training config."""
        doc = copy.deepcopy(self.train)
        doc["seed"] = int(seed)
        if self.axis == "objective":
            clip, ssl, rec = OBJECTIVE_SETS[value]
            doc["enable_clip"], doc["enable_ssl"], doc["enable_rec"] = clip, ssl, rec
        elif self.axis == "data":
            ds = dict(doc.get("dataset", {"kind": "synth"}))
            ds["n"] = int(value)
            doc["dataset"] = ds
        elif self.axis == "compute":
            doc["total_samples"] = int(value)
            doc["total_flops"] = 0
        elif self.axis == "encoder":
            w, d, h = MODEL_TIERS[value]
            m = dict(doc.get("model", {}))
            m.update(encoder_width=w, encoder_depth=d, encoder_heads=h)
            doc["model"] = m
        elif self.axis == "decoder":
            w, blocks, h = DECODER_TIERS[value]
            m = dict(doc.get("model", {}))
            m.update(decoder_width=w, decoder_blocks=blocks, decoder_heads=h)
            doc["model"] = m
        return TrainConfig.from_dict(doc).validate()

    def resolve_dit(self, train_cfg: TrainConfig) -> DiTConfig:
        doc = dict(self.dit)
        doc.setdefault("latent_dim", train_cfg.model.latent_dim)
        doc.setdefault("grid", train_cfg.model.token_grid)
        ds = train_cfg.dataset
        doc.setdefault("num_classes", int(ds.get("num_classes", 16)))
        return DiTConfig(**doc).validate()

    def jobs(self) -> list:
        out = []
        for value in self.values:
            for seed in self.seeds:
                cfg = self.resolve_train(value, seed)
                out.append({
                    "point_id": point_id(self.axis, value, cfg, seed),
                    "point_sha": point_sha(self.axis, value, cfg, self.resolve_dit(cfg), seed),
                    "axis": self.axis,
                    "axis_value": value,
                    "objectives": objectives_label(cfg),
                    "seed": int(seed),
                })
        return out


def point_id(axis: str, value, cfg: TrainConfig, seed: int) -> str:
    return f"{axis}={value}/{objectives_label(cfg)}/seed{seed}"


def point_sha(axis, value, cfg: TrainConfig, dit_cfg: DiTConfig, seed) -> str:
    blob = json.dumps(
        {"axis": axis, "value": str(value), "train": cfg.to_dict(),
         "dit": dit_cfg.sha(), "seed": int(seed)},
        sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def registry_path(registry_dir: str) -> str:
    return os.path.join(registry_dir, "registry.jsonl")


def load_registry(registry_dir: str) -> list:
    path = registry_path(registry_dir)
    if not os.path.exists(path):
        return []
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise RegistryError(f"corrupt registry line {line_no}: {e}") from None
    return records


def append_record(registry_dir: str, record: dict, force_new_id: bool = False) -> dict:
    """Append one record under the registry lock. Records are immutable:
    a point that already has a completed record is rejected unless the caller
    explicitly asks for a new attempt id."""
    os.makedirs(registry_dir, exist_ok=True)
    lock = FileLock(os.path.join(registry_dir, "registry.lock"))
    with lock:
        existing = load_registry(registry_dir)
        same_point = [r for r in existing if r.get("point_sha") == record["point_sha"]]
        done = [r for r in same_point if r.get("status") == "ok"]
        if done and not force_new_id:
            raise RegistryError(
                f"point {record['point_id']} already completed "
                f"(sha {record['point_sha'][:12]}); pass --force-new-id to append a new attempt")
        record = dict(record)
        record["attempt"] = len(same_point) + 1
        if record["attempt"] > 1:
            record["point_id"] = f"{record['point_id']}#a{record['attempt']}"
        with open(registry_path(registry_dir), "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
    return record


def completed_shas(records: list) -> set:
    return {r["point_sha"] for r in records if r.get("status") == "ok"}


def run_point(spec: SweepSpec, value, seed: int, work_dir: str,
              extractor=None, extractor_cache=None) -> dict:
    """Train, evaluate, and score one sweep point. Returns a full record dict
    (status ok) or raises; the caller decides how failures are registered."""
    cfg = spec.resolve_train(value, seed)
    dit_cfg = spec.resolve_dit(cfg)
    variant = cfg.dataset.get("variant", "plain")
    t0 = time.time()

    if extractor is None:
        extractor = train_feature_extractor(
            cfg.model.image_size, num_classes=int(cfg.dataset.get("num_classes", 16)),
            cache_dir=extractor_cache, variant=variant)

    point_dir = os.path.join(work_dir, point_id(spec.axis, value, cfg, seed).replace("/", "_"))
    trainer = Trainer(cfg, out_dir=point_dir)
    trainer.run(metrics_path=os.path.join(point_dir, "train_log.jsonl"))
    model, manifest = load_tokenizer(os.path.join(point_dir, "final"))

    eval_ds = synth_dataset(
        seed=spec.heldout_seed + 1, n=spec.eval_n,
        num_classes=int(cfg.dataset.get("num_classes", 16)),
        image_size=cfg.model.image_size, variant=variant)
    record_metrics = compute_metrics(model, eval_ds, trainer.vocab, extractor,
                                     n_eval=spec.eval_n)

    # the harness dataset is pinned by the spec, not by the point: every
    # tokenizer is scored on identical fresh images
    if cfg.dataset.get("kind") == "synth":
        score_ds = synth_dataset(
            seed=spec.heldout_seed + 2, n=spec.score_n,
            num_classes=int(cfg.dataset.get("num_classes", 16)),
            image_size=cfg.model.image_size, variant=variant)
    else:
        score_ds = dataset_from_manifest(cfg.dataset)
    gen = train_and_score(model, score_ds, dit_cfg, extractor,
                          n_score=spec.n_score, heldout_seed=spec.heldout_seed)
    record_metrics.frechet_gen = gen["frechet_gen"]
    record_metrics.dit_sha = gen["dit_sha"]

    return {
        "record_version": RECORD_VERSION,
        "point_id": point_id(spec.axis, value, cfg, seed),
        "point_sha": point_sha(spec.axis, value, cfg, dit_cfg, seed),
        "status": "ok",
        "axis": spec.axis,
        "axis_value": value,
        "objectives": objectives_label(cfg),
        "seed": int(seed),
        "flops": str(trainer.state.flops_cum),
        "params": count_params(cfg.model),
        "model_flops_fwd": str(count_flops(cfg.model)),
        "metrics": record_metrics.to_dict(),
        "tokenizer_sha": gen["tokenizer_sha"],
        "dit_sha": gen["dit_sha"],
        "extractor_sha": extractor.sha,
        "rf_loss_init": gen["rf_loss_init"],
        "rf_loss_final": gen["rf_loss_final"],
        "wall_clock_s": round(time.time() - t0, 3),
        "checkpoint": os.path.join(point_dir, "final"),
        "error": None,
    }


def run_sweep(spec: SweepSpec, registry_dir: str, work_dir: str,
              dry_run: bool = False, force_new_id: bool = False,
              extractor_cache=None) -> list:
    """Execute all pending sweep points. Completed points (matching content
    hash) are skipped; failed points are recorded and the sweep continues."""
    spec.validate()
    jobs = spec.jobs()
    if dry_run:
        return jobs

    os.makedirs(work_dir, exist_ok=True)
    done = completed_shas(load_registry(registry_dir))
    base_cfg = spec.resolve_train(spec.values[0], spec.seeds[0])
    extractor = train_feature_extractor(
        base_cfg.model.image_size,
        num_classes=int(base_cfg.dataset.get("num_classes", 16)),
        cache_dir=extractor_cache,
        variant=base_cfg.dataset.get("variant", "plain"))

    appended = []
    for job in jobs:
        if job["point_sha"] in done and not force_new_id:
            continue
        try:
            record = run_point(spec, job["axis_value"], job["seed"], work_dir,
                               extractor=extractor)
        except Exception as e:  # noqa: BLE001 - partial failure is a recorded outcome
            record = {
                "record_version": RECORD_VERSION,
                "status": "error",
                "error": f"{type(e).__name__}: {e}",
                "metrics": None, "flops": None, "params": None,
                "tokenizer_sha": None, "dit_sha": None, "extractor_sha": None,
                "wall_clock_s": None, "checkpoint": None,
                **{k: job[k] for k in ("point_id", "point_sha", "axis", "axis_value",
                                       "objectives", "seed")},
            }
        appended.append(append_record(registry_dir, record, force_new_id=force_new_id))
    return appended


def load_sweep_spec(path: str) -> SweepSpec:
    with open(path) as fh:
        return SweepSpec.from_dict(json.load(fh))
