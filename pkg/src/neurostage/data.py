"""EEG data ingestion, channel selection, splits, and synthetic corpora.

On-disk layout (one directory per subject)::

    <root>/subjects/<subject_id>/
        train_eeg.bin   binary container, level "eeg", rows = trials, dim = C*T
        test_eeg.bin    same container
        ids.json        row-aligned stimulus/class/repetition ids + montage + declared structure

Channel handling is always name-driven: selection takes an ordered name list
and errors on unknown names rather than silently re-indexing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import container
from .config import SyntheticSpec
from .errors import (CountMismatchError, DataError, MissingRepetitionError,
                     NumericError, UnknownChannelError)
from .features import FeatureBundle, class_id, stimulus_id

# Channels primarily associated with visual responses, in canonical order.
VISUAL_CHANNELS = ("P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8",
                   "PO7", "PO3", "POz", "PO4", "PO8", "O1", "Oz", "O2")

# Channels associated with semantic processing in language-comprehension
# studies; used by the ablation that swaps generated latent channels for
# recorded ones. Note P7 overlaps with the visual set.
LANGUAGE_CHANNELS = ("Fp1", "F3", "F7", "FC5", "FC1", "C3", "T7", "CP5",
                     "P7", "FT7", "F5", "TP7")

# Default synthetic montage: the visual set plus the non-overlapping language
# channels, so every ablation variant can run on one corpus.
SYNTH_CHANNELS = VISUAL_CHANNELS + tuple(c for c in LANGUAGE_CHANNELS
                                         if c not in VISUAL_CHANNELS)

# Structure of the reference benchmark recordings.
THINGS_TRAIN_CLASSES = 1654
THINGS_TRAIN_IMAGES_PER_CLASS = 10
THINGS_TRAIN_REPS = 4
THINGS_TRAIN_COUNT = THINGS_TRAIN_CLASSES * THINGS_TRAIN_IMAGES_PER_CLASS * THINGS_TRAIN_REPS
THINGS_TEST_CLASSES = 200
THINGS_TEST_REPS = 80
THINGS_TEST_COUNT = THINGS_TEST_CLASSES * THINGS_TEST_REPS
DEFAULT_TIMESTEPS = 175
TRIAL_SPAN_MS = 1000.0


@dataclass
class TrialStore:
    """A set of EEG trials with row-aligned ids."""

    signal: np.ndarray  # (N, C, T) float32
    channel_names: tuple[str, ...]
    stimulus_ids: np.ndarray  # (N,) str
    class_ids: np.ndarray  # (N,) str
    repetitions: np.ndarray  # (N,) int
    times_ms: np.ndarray  # (T,) float

    def __post_init__(self):
        n, c, t = self.signal.shape
        if len(self.channel_names) != c:
            raise DataError(f"{len(self.channel_names)} channel names for {c} channels")
        for name, arr in (("stimulus_ids", self.stimulus_ids),
                          ("class_ids", self.class_ids),
                          ("repetitions", self.repetitions)):
            if len(arr) != n:
                raise CountMismatchError(f"{name} has {len(arr)} entries for {n} trials")
        if len(self.times_ms) != t:
            raise DataError(f"{len(self.times_ms)} sample times for {t} time steps")

    def __len__(self) -> int:
        return self.signal.shape[0]

    @property
    def n_timesteps(self) -> int:
        return self.signal.shape[2]

    def validate_finite(self) -> None:
        if not np.isfinite(self.signal).all():
            idx = np.argwhere(~np.isfinite(self.signal))[0]
            raise NumericError(f"non-finite sample at trial/channel/time {tuple(idx)}")

    def select_channels(self, names) -> "TrialStore":
        """Order-stable, name-driven channel subset."""
        index = {n: i for i, n in enumerate(self.channel_names)}
        missing = [n for n in names if n not in index]
        if missing:
            raise UnknownChannelError(f"montage is missing channels {missing}")
        idx = [index[n] for n in names]
        return replace(self, signal=self.signal[:, idx, :], channel_names=tuple(names))

    def subset(self, rows) -> "TrialStore":
        return replace(self, signal=self.signal[rows],
                       stimulus_ids=self.stimulus_ids[rows],
                       class_ids=self.class_ids[rows],
                       repetitions=self.repetitions[rows])


@dataclass
class SubjectDataset:
    """Train and test stores of one subject; class sets must be disjoint."""

    subject_id: str
    train: TrialStore
    test: TrialStore
    declared: dict = field(default_factory=dict)

    def __post_init__(self):
        overlap = set(self.train.class_ids) & set(self.test.class_ids)
        if overlap:
            raise DataError(f"train/test class sets overlap (zero-shot violated): "
                            f"{sorted(overlap)[:5]}")


@dataclass
class EvalView:
    """Collapsed test queries of one target subject."""

    subject_id: str
    queries: np.ndarray  # (Q, C, T)
    stimulus_ids: np.ndarray
    class_ids: np.ndarray
    channel_names: tuple[str, ...]
    times_ms: np.ndarray


def collapse_test_repetitions(store: TrialStore) -> EvalView:
    """Average the repetitions of each test stimulus into one query.

    Queries come out in class-id order; uneven repetition counts raise,
    naming the offending stimulus ids.
    """
    by_stim: dict[str, list[int]] = {}
    stim_class: dict[str, str] = {}
    for row, (sid, cid) in enumerate(zip(store.stimulus_ids, store.class_ids)):
        by_stim.setdefault(sid, []).append(row)
        stim_class[sid] = cid
    counts = {sid: len(rows) for sid, rows in by_stim.items()}
    expected = max(counts.values())
    short = sorted(sid for sid, n in counts.items() if n != expected)
    if short:
        raise MissingRepetitionError(
            f"uneven repetition counts (expected {expected}): {short}")
    order = sorted(by_stim, key=lambda sid: (stim_class[sid], sid))
    queries = np.stack([store.signal[by_stim[sid]].mean(axis=0) for sid in order])
    return EvalView(
        subject_id="",
        queries=queries.astype(np.float32),
        stimulus_ids=np.asarray(order, dtype=object),
        class_ids=np.asarray([stim_class[s] for s in order], dtype=object),
        channel_names=store.channel_names,
        times_ms=store.times_ms,
    )


def make_split(datasets: dict[str, SubjectDataset], mode: str,
               target_subject: str) -> tuple[TrialStore, EvalView]:
    """Subject-dependent or subject-independent split.

    The eval view is always the target subject's collapsed test queries;
    dependent trains on the target's own train set, independent pools every
    other subject's train set.
    """
    if target_subject not in datasets:
        raise ValueError(f"unknown target subject {target_subject!r}; "
                         f"have {sorted(datasets)}")
    if mode not in ("dependent", "independent"):
        raise ValueError(f"split mode must be dependent|independent, got {mode!r}")
    target = datasets[target_subject]
    if mode == "dependent":
        train = target.train
    else:
        others = [datasets[s].train for s in sorted(datasets) if s != target_subject]
        if not others:
            raise ValueError("independent split needs at least one other subject")
        train = TrialStore(
            signal=np.concatenate([s.signal for s in others]),
            channel_names=others[0].channel_names,
            stimulus_ids=np.concatenate([s.stimulus_ids for s in others]),
            class_ids=np.concatenate([s.class_ids for s in others]),
            repetitions=np.concatenate([s.repetitions for s in others]),
            times_ms=others[0].times_ms,
        )
    view = collapse_test_repetitions(target.test)
    view.subject_id = target_subject
    overlap = set(train.class_ids) & set(view.class_ids)
    if overlap:
        raise DataError(f"split leaks eval classes into training: {sorted(overlap)[:5]}")
    return train, view


# -- standardization ----------------------------------------------------------

@dataclass
class Standardizer:
    """Per-channel z-scoring with training-set statistics."""

    channel_names: tuple[str, ...]
    mean: np.ndarray  # (C,)
    std: np.ndarray  # (C,)

    @classmethod
    def fit(cls, store: TrialStore) -> "Standardizer":
        mean = store.signal.mean(axis=(0, 2))
        std = store.signal.std(axis=(0, 2))
        return cls(store.channel_names, mean.astype(np.float64),
                   np.maximum(std, 1e-8).astype(np.float64))

    @classmethod
    def identity(cls, channel_names) -> "Standardizer":
        c = len(channel_names)
        return cls(tuple(channel_names), np.zeros(c), np.ones(c))

    def apply(self, signal: np.ndarray, channel_names) -> np.ndarray:
        index = {n: i for i, n in enumerate(self.channel_names)}
        missing = [n for n in channel_names if n not in index]
        if missing:
            raise UnknownChannelError(f"standardizer has no statistics for {missing}")
        idx = [index[n] for n in channel_names]
        mean = self.mean[idx].reshape(1, -1, 1)
        std = self.std[idx].reshape(1, -1, 1)
        return ((signal - mean) / std).astype(np.float32)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"preproc.mean": self.mean, "preproc.std": self.std}


# -- synthetic corpora ---------------------------------------------------------

def _check_bundle_universe(spec: SyntheticSpec, bundle: FeatureBundle) -> None:
    for c in range(spec.n_classes):
        if not bundle.text.has(class_id(c)):
            raise DataError(f"feature bundle lacks class {class_id(c)}; regenerate "
                            f"features with a matching universe")
        for i in range(spec.images_per_class):
            if not bundle.low.has(stimulus_id(c, i)):
                raise DataError(f"feature bundle lacks stimulus {stimulus_id(c, i)}")


def synthesize_corpus(spec: SyntheticSpec, bundle: FeatureBundle,
                      subject_id: str = "sub-synth01",
                      noise_seed: int | None = None) -> SubjectDataset:
    """Synthetic subject with planted staged structure.

    Every trial is Gaussian channel noise plus, inside the early window, a
    fixed linear encoding of the stimulus's low-level feature and, inside the
    late window, a fixed linear encoding of the class text feature. The
    encoding matrices depend only on ``spec.seed`` (shared across subjects);
    the noise stream is keyed by ``noise_seed`` so subjects differ.
    """
    _check_bundle_universe(spec, bundle)
    n_ch = len(SYNTH_CHANNELS)
    t = spec.n_timesteps
    e0, e1 = spec.early_window
    l0, l1 = spec.late_window
    d_low = bundle.low.dim
    d_sem = bundle.text.dim

    enc_rng = np.random.Generator(np.random.Philox(key=spec.seed))
    early_map = enc_rng.standard_normal((n_ch * (e1 - e0), d_low)) * spec.plant_amplitude
    late_map = enc_rng.standard_normal((n_ch * (l1 - l0), d_sem)) * spec.plant_amplitude

    noise_key = spec.seed if noise_seed is None else noise_seed
    noise_rng = np.random.Generator(np.random.Philox(key=(noise_key, 0xEE6)))

    def make_trial(sid: str, cid: str) -> np.ndarray:
        trial = noise_rng.standard_normal((n_ch, t)) * spec.noise_sd
        if e1 > e0:
            pattern = (early_map @ bundle.low.vector(sid)).reshape(n_ch, e1 - e0)
            trial[:, e0:e1] += pattern
        if l1 > l0:
            pattern = (late_map @ bundle.text.vector(cid)).reshape(n_ch, l1 - l0)
            trial[:, l0:l1] += pattern
        return trial

    times = np.arange(t) * (TRIAL_SPAN_MS / t)
    train_rows, train_stim, train_cls, train_rep = [], [], [], []
    for c in range(spec.n_train_classes):
        for i in range(spec.images_per_class):
            for r in range(spec.reps):
                train_rows.append(make_trial(stimulus_id(c, i), class_id(c)))
                train_stim.append(stimulus_id(c, i))
                train_cls.append(class_id(c))
                train_rep.append(r)
    test_rows, test_stim, test_cls, test_rep = [], [], [], []
    for c in range(spec.n_train_classes, spec.n_classes):
        for r in range(spec.test_reps):
            test_rows.append(make_trial(stimulus_id(c, 0), class_id(c)))
            test_stim.append(stimulus_id(c, 0))
            test_cls.append(class_id(c))
            test_rep.append(r)

    def store(rows, stim, cls, rep) -> TrialStore:
        return TrialStore(
            signal=np.asarray(rows, dtype=np.float32),
            channel_names=SYNTH_CHANNELS,
            stimulus_ids=np.asarray(stim, dtype=object),
            class_ids=np.asarray(cls, dtype=object),
            repetitions=np.asarray(rep, dtype=np.int64),
            times_ms=times,
        )

    declared = {
        "train": {"n_classes": spec.n_train_classes,
                  "images_per_class": spec.images_per_class, "repetitions": spec.reps},
        "test": {"n_classes": spec.n_heldout_classes, "images_per_class": 1,
                 "repetitions": spec.test_reps},
    }
    return SubjectDataset(subject_id=subject_id,
                          train=store(train_rows, train_stim, train_cls, train_rep),
                          test=store(test_rows, test_stim, test_cls, test_rep),
                          declared=declared)


# -- on-disk subject directories ----------------------------------------------

def write_subject_dir(dataset: SubjectDataset, root: str | Path) -> Path:
    """Write one subject in the standard directory layout."""
    out = Path(root) / "subjects" / dataset.subject_id
    out.mkdir(parents=True, exist_ok=True)
    meta = {"version": 1, "subject_id": dataset.subject_id,
            "channel_names": list(dataset.train.channel_names),
            "n_timesteps": int(dataset.train.n_timesteps),
            "times_ms": [float(x) for x in dataset.train.times_ms]}
    for split, store in (("train", dataset.train), ("test", dataset.test)):
        n, c, t = store.signal.shape
        container.write_array(out / f"{split}_eeg.bin",
                              store.signal.reshape(n, c * t), "eeg")
        meta[split] = {
            "stimulus_ids": [str(s) for s in store.stimulus_ids],
            "class_ids": [str(s) for s in store.class_ids],
            "repetitions": [int(r) for r in store.repetitions],
            "declared": dataset.declared.get(split, {}),
        }
    (out / "ids.json").write_text(json.dumps(meta), encoding="utf-8")
    return out


def load_subject(root: str | Path, subject_id: str) -> SubjectDataset:
    """Load one subject directory, validating counts and finiteness."""
    sub_dir = Path(root) / "subjects" / subject_id
    ids_path = sub_dir / "ids.json"
    if not ids_path.is_file():
        raise DataError(f"no ids.json under {sub_dir}")
    meta = json.loads(ids_path.read_text(encoding="utf-8"))
    channel_names = tuple(meta["channel_names"])
    t = int(meta["n_timesteps"])
    times = np.asarray(meta.get("times_ms",
                                list(np.arange(t) * (TRIAL_SPAN_MS / t))), dtype=np.float64)

    stores = {}
    declared = {}
    for split in ("train", "test"):
        flat, _ = container.read_array(sub_dir / f"{split}_eeg.bin", expect_level="eeg",
                                       expect_dim=len(channel_names) * t)
        ids = meta[split]
        n = flat.shape[0]
        for key in ("stimulus_ids", "class_ids", "repetitions"):
            if len(ids[key]) != n:
                raise CountMismatchError(
                    f"{subject_id}/{split}: {key} has {len(ids[key])} entries "
                    f"for {n} trials")
        dec = ids.get("declared") or {}
        if dec:
            expected = dec["n_classes"] * dec["images_per_class"] * dec["repetitions"]
            if expected != n:
                raise CountMismatchError(
                    f"{subject_id}/{split}: declared structure implies {expected} "
                    f"trials, file has {n}")
        declared[split] = dec
        store = TrialStore(
            signal=flat.reshape(n, len(channel_names), t).astype(np.float32),
            channel_names=channel_names,
            stimulus_ids=np.asarray(ids["stimulus_ids"], dtype=object),
            class_ids=np.asarray(ids["class_ids"], dtype=object),
            repetitions=np.asarray(ids["repetitions"], dtype=np.int64),
            times_ms=times,
        )
        store.validate_finite()
        stores[split] = store
    return SubjectDataset(subject_id=subject_id, train=stores["train"],
                          test=stores["test"], declared=declared)


def list_subjects(root: str | Path) -> list[str]:
    base = Path(root) / "subjects"
    if not base.is_dir():
        return []
    return sorted(p.name for p in base.iterdir() if (p / "ids.json").is_file())


def validate_things_structure(dataset: SubjectDataset) -> None:
    """Assert the canonical benchmark counts on a loaded subject."""
    if len(dataset.train) != THINGS_TRAIN_COUNT:
        raise CountMismatchError(f"expected {THINGS_TRAIN_COUNT} training trials, "
                                 f"found {len(dataset.train)}")
    if len(dataset.test) != THINGS_TEST_COUNT:
        raise CountMismatchError(f"expected {THINGS_TEST_COUNT} test trials, "
                                 f"found {len(dataset.test)}")


def convert_preprocessed_subject(train_signal: np.ndarray, test_signal: np.ndarray,
                                 train_ids: dict, test_ids: dict,
                                 channel_names, subject_id: str,
                                 root: str | Path) -> Path:
    """Converter stub: wrap externally preprocessed (N, C, T) arrays and
    row-aligned id dicts (stimulus_ids/class_ids/repetitions) into the
    standard subject layout."""
    t = train_signal.shape[2]
    times = np.arange(t) * (TRIAL_SPAN_MS / t)

    def store(sig, ids):
        return TrialStore(signal=sig.astype(np.float32), channel_names=tuple(channel_names),
                          stimulus_ids=np.asarray(ids["stimulus_ids"], dtype=object),
                          class_ids=np.asarray(ids["class_ids"], dtype=object),
                          repetitions=np.asarray(ids["repetitions"], dtype=np.int64),
                          times_ms=times)

    dataset = SubjectDataset(subject_id=subject_id, train=store(train_signal, train_ids),
                             test=store(test_signal, test_ids))
    return write_subject_dir(dataset, root)
