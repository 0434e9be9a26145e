"""Deterministic end-to-end training of the staged objective.

Reproducibility contract: given (seed, config, data) the whole trajectory is
fixed. Minibatch order comes from a counter-based RNG keyed by (seed, epoch),
dropout masks from a dedicated torch generator seeded once per run, and
parameter initialization from the model's own seed, so no global RNG state is
consulted anywhere.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import platform
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import container
from .config import ModelConfig, TrainConfig, VariantSpec, config_hash
from .data import (LANGUAGE_CHANNELS, VISUAL_CHANNELS, Standardizer, TrialStore)
from .errors import (ConfigMismatchError, ConfigurationError, NumericError,
                     ShapeMismatchError, VersionError)
from .features import FeatureBundle
from .losses import AlignmentTargets, total_loss
from .model import StagedEEGModel

CHECKPOINT_VERSION = 1
EPOCH_CSV_COLUMNS = ("epoch", "L_I", "L_IIc", "L_IIf", "L_III", "total", "seconds")

# CSV column per loss site.
_SITE_COLUMNS = {"low": "L_I", "coarse": "L_IIc", "fine": "L_IIf", "fused": "L_III"}


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Counter-based shuffle: Philox keyed by (seed, epoch)."""
    rng = np.random.Generator(np.random.Philox(key=[seed, epoch]))
    return rng.permutation(n)


def channel_plan(config: ModelConfig, variant: VariantSpec,
                 channel_names) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Decide which named channels feed the visual and extra inputs.

    A store that already carries exactly the model's visual channel count is
    consumed as-is (tiny/desk configs); otherwise the canonical visual montage
    is selected by name, plus the language montage for variants that consume
    recorded extra channels.
    """
    need_extra = variant.needs_extra_channels()
    if not need_extra and len(channel_names) == config.n_visual_channels:
        return tuple(channel_names), ()
    if config.n_visual_channels != len(VISUAL_CHANNELS):
        raise ConfigurationError(
            f"montage has {len(channel_names)} channels but the model wants "
            f"{config.n_visual_channels} visual channels; provide a store with "
            f"exactly that channel count or use the canonical montage")
    extra = ()
    if need_extra:
        if config.n_latent_channels != len(LANGUAGE_CHANNELS):
            raise ConfigurationError("recorded extra channels require "
                                     f"n_latent_channels == {len(LANGUAGE_CHANNELS)}")
        extra = LANGUAGE_CHANNELS
    return VISUAL_CHANNELS, extra


def prepare_inputs(store: TrialStore, config: ModelConfig, variant: VariantSpec,
                   standardizer: Standardizer | None):
    """Select channels, optionally standardize, and split visual/extra blocks."""
    visual_names, extra_names = channel_plan(config, variant, store.channel_names)
    visual = store.select_channels(visual_names)
    sig_v = visual.signal
    sig_e = None
    if extra_names:
        extra = store.select_channels(extra_names)
        sig_e = extra.signal
    if standardizer is not None:
        sig_v = standardizer.apply(sig_v, visual_names)
        if sig_e is not None:
            sig_e = standardizer.apply(sig_e, extra_names)
    return sig_v, sig_e


def fit_standardizer(store: TrialStore, config: ModelConfig,
                     variant: VariantSpec) -> Standardizer:
    visual_names, extra_names = channel_plan(config, variant, store.channel_names)
    union = list(visual_names) + [n for n in extra_names if n not in visual_names]
    return Standardizer.fit(store.select_channels(union))


def _batch_targets(model: StagedEEGModel, bundle_rows: dict, idx: np.ndarray,
                   dtype: torch.dtype) -> AlignmentTargets:
    sites = model.active_sites()
    v_low = v_fine = None
    if "low" in sites:
        raw = torch.as_tensor(bundle_rows["low"][idx], dtype=dtype)
        v_low, _ = model.project_image_features(raw_low=raw)
    if "fine" in sites:
        raw = torch.as_tensor(bundle_rows["high"][idx], dtype=dtype)
        _, v_fine = model.project_image_features(raw_high=raw)
    t_coarse = (torch.as_tensor(bundle_rows["text"][idx], dtype=dtype)
                if "coarse" in sites else None)
    v_image = torch.as_tensor(bundle_rows["final"][idx], dtype=dtype)
    return AlignmentTargets(v_low=v_low, t_coarse=t_coarse, v_fine=v_fine, v_image=v_image)


@dataclass
class TrainResult:
    model: StagedEEGModel
    standardizer: Standardizer | None
    manifest: dict
    history: list[dict]
    checkpoint_path: Path | None


def train(model: StagedEEGModel, store: TrialStore, bundle: FeatureBundle,
          cfg: TrainConfig, out_dir: str | Path | None = None) -> TrainResult:
    """Run the full optimization loop; bit-reproducible on one machine."""
    t_start = time.perf_counter()
    variant = model.variant
    config = model.config
    n = len(store)
    n_batches = n // cfg.batch_size
    if n_batches == 0:
        raise ConfigurationError(f"batch_size {cfg.batch_size} exceeds the "
                                 f"{n}-trial training set; no full minibatch")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    standardizer = fit_standardizer(store, config, variant) if cfg.standardize else None
    sig_v, sig_e = prepare_inputs(store, config, variant, standardizer)
    x_v = torch.as_tensor(sig_v, dtype=model.dtype)
    x_e = torch.as_tensor(sig_e, dtype=model.dtype) if sig_e is not None else None

    stim = list(store.stimulus_ids)
    cls = list(store.class_ids)
    sites = model.active_sites()
    bundle_rows = {"final": bundle.final.rows(stim)}
    if "low" in sites:
        bundle_rows["low"] = bundle.low.rows(stim)
    if "fine" in sites:
        bundle_rows["high"] = bundle.high.rows(stim)
    if "coarse" in sites:
        bundle_rows["text"] = bundle.text.rows(cls)
    feature_fingerprint = bundle.fingerprint()

    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate,
                                  betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                                  weight_decay=cfg.weight_decay)
    dropout_gen = torch.Generator()
    dropout_gen.manual_seed(cfg.seed ^ 0xD706)

    history: list[dict] = []
    last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}

    def abort(term: str, epoch: int, step: int):
        model.load_state_dict(last_good)
        if out_dir is not None:
            save_checkpoint(model, out_dir / "last_good.bin", seed=cfg.seed,
                            standardizer=standardizer)
        raise NumericError(f"non-finite loss term {term!r} at epoch {epoch} "
                           f"step {step}; restored last-good parameters")

    for epoch in range(cfg.epochs):
        t_epoch = time.perf_counter()
        perm = epoch_permutation(cfg.seed, epoch, n)
        sums = {site: 0.0 for site in sites}
        sums["total"] = 0.0
        for step in range(n_batches):
            idx = perm[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            tidx = torch.as_tensor(idx, dtype=torch.long)
            xb = x_v[tidx]
            eb = x_e[tidx] if x_e is not None else None
            stages = model.forward_all(xb, eb, mode="train", generator=dropout_gen)
            targets = _batch_targets(model, bundle_rows, idx, model.dtype)
            total, breakdown = total_loss(stages, targets, model.logit_scales,
                                          cfg.loss_weights)
            for site, term in breakdown.items():
                if not torch.isfinite(term):
                    abort(site, epoch, step)
            if not torch.isfinite(total):
                abort("total", epoch, step)
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            for site, term in breakdown.items():
                sums[site] += float(term.detach())
            sums["total"] += float(total.detach())

        row = {"epoch": epoch, "seconds": time.perf_counter() - t_epoch}
        for site in sites:
            row[site] = sums[site] / n_batches
        row["total"] = sums["total"] / n_batches
        history.append(row)
        last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}

    checkpoint_path = None
    if out_dir is not None:
        checkpoint_path = out_dir / "checkpoint.bin"
        save_checkpoint(model, checkpoint_path, seed=cfg.seed, standardizer=standardizer)
        write_epoch_csv(out_dir / "epochs.csv", history)

    manifest = {
        "model_config": dataclasses.asdict(config),
        "variant": dataclasses.asdict(variant),
        "train_config": dataclasses.asdict(cfg),
        "config_hash": config_hash({"model": dataclasses.asdict(config),
                                    "variant": dataclasses.asdict(variant),
                                    "train": dataclasses.asdict(cfg)}),
        "n_train_trials": n,
        "batches_per_epoch": n_batches,
        "dropped_per_epoch": n - n_batches * cfg.batch_size,
        "shuffle_rng": "philox4x64 keyed by (seed, epoch)",
        "standardize": cfg.standardize,
        "feature_fingerprint": feature_fingerprint,
        "epochs": history,
        "wall_time_seconds": time.perf_counter() - t_start,
        "checkpoint_sha256": (hashlib.sha256(checkpoint_path.read_bytes()).hexdigest()
                              if checkpoint_path else None),
        "environment": {
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": np.__version__,
            "platform": platform.platform(),
        },
    }
    if out_dir is not None:
        write_manifest(out_dir / "manifest.json", manifest)
    return TrainResult(model=model, standardizer=standardizer, manifest=manifest,
                       history=history, checkpoint_path=checkpoint_path)


def write_epoch_csv(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(EPOCH_CSV_COLUMNS)
        for row in history:
            out = [row["epoch"]]
            for site in ("low", "coarse", "fine", "fused"):
                out.append(f"{row[site]:.10f}" if site in row else "")
            out.append(f"{row['total']:.10f}")
            out.append(f"{row['seconds']:.3f}")
            writer.writerow(out)


def write_manifest(path: Path, manifest: dict) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    tmp.replace(path)


# -- checkpointing -------------------------------------------------------------

def save_checkpoint(model: StagedEEGModel, path: str | Path, seed: int,
                    standardizer: Standardizer | None = None) -> Path:
    """Container payload of all parameters plus a JSON name table sidecar."""
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    np_dtype = np.float32 if model.dtype == torch.float32 else np.float64
    for name, p in model.named_parameters():
        arr = p.detach().cpu().numpy().astype(np_dtype)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "kind": "param"})
        chunks.append(arr.reshape(-1))
        offset += arr.size
    if standardizer is not None:
        extras = dict(standardizer.to_arrays())
        extras["preproc.channel_codes"] = np.asarray(
            [float(i) for i in range(len(standardizer.channel_names))])
        for name in sorted(extras):
            arr = extras[name].astype(np_dtype).reshape(-1)
            entries.append({"name": name, "shape": [arr.size], "offset": offset,
                            "kind": "preproc"})
            chunks.append(arr)
            offset += arr.size
    payload = (np.concatenate(chunks) if chunks else np.zeros(0, np_dtype)).reshape(1, -1)
    container.write_array(path, payload.astype(np_dtype), "params")
    table = {
        "version": CHECKPOINT_VERSION,
        "model_config": dataclasses.asdict(model.config),
        "variant": dataclasses.asdict(model.variant),
        "seed": int(seed),
        "dtype": np.dtype(np_dtype).name,
        "entries": entries,
        "preproc_channels": (list(standardizer.channel_names)
                             if standardizer is not None else None),
    }
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(table, indent=1), encoding="utf-8")
    return path


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config: ModelConfig
    variant: VariantSpec
    seed: int
    standardizer: Standardizer | None


def load_checkpoint(path: str | Path,
                    expected_config: ModelConfig | None = None) -> Checkpoint:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    table = json.loads(sidecar.read_text(encoding="utf-8"))
    if table.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {table.get('version')}")
    config = ModelConfig(**table["model_config"])
    variant = VariantSpec(**table["variant"])
    if expected_config is not None and dataclasses.asdict(expected_config) != \
            dataclasses.asdict(config):
        raise ConfigMismatchError("checkpoint was written under a different model "
                                  "configuration")
    payload, _ = container.read_array(path, expect_level="params")
    flat = payload.reshape(-1)
    arrays = {}
    params = {}
    preproc = {}
    for entry in table["entries"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = flat[entry["offset"]:entry["offset"] + size].reshape(entry["shape"])
        arrays[entry["name"]] = arr
        (params if entry["kind"] == "param" else preproc)[entry["name"]] = arr
    declared = sum(int(np.prod(e["shape"])) for e in table["entries"])
    if declared != flat.size:
        raise ShapeMismatchError(f"checkpoint payload has {flat.size} values, "
                                 f"name table declares {declared}")
    standardizer = None
    if table.get("preproc_channels"):
        standardizer = Standardizer(tuple(table["preproc_channels"]),
                                    preproc["preproc.mean"].astype(np.float64),
                                    preproc["preproc.std"].astype(np.float64))
    return Checkpoint(arrays=params, config=config, variant=variant,
                      seed=int(table["seed"]), standardizer=standardizer)


def build_model_from_checkpoint(ckpt: Checkpoint,
                                dtype: torch.dtype = torch.float32) -> StagedEEGModel:
    model = StagedEEGModel(ckpt.config, ckpt.variant, dtype=dtype, init_seed=ckpt.seed)
    expected = set(model.parameter_paths())
    stored = set(ckpt.arrays)
    if expected != stored:
        missing = sorted(expected - stored)
        surplus = sorted(stored - expected)
        raise ConfigMismatchError(f"checkpoint parameter names do not match the "
                                  f"rebuilt model (missing {missing[:3]}, "
                                  f"surplus {surplus[:3]})")
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.as_tensor(ckpt.arrays[name], dtype=dtype))
    return model
