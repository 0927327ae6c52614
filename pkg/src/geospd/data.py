"""Synthetic multichannel datasets with controllable class structure, plus
the on-disk trial format.

A dataset directory holds three files:

* ``manifest.json`` -- shapes, class info, seed, format version
* ``epochs.f32``    -- little-endian float32, index order [trial][epoch][channel][sample]
* ``labels.u8``     -- one unsigned byte per trial

Trials are band-limited oscillator mixtures. Classes differ both in their
channel mixing (covariance structure) and in the epoch at which the mixing
switches (so the graph dynamics also carry label information).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import CorruptData, IncompatibleFormat, InvalidInput, IoError

FORMAT_VERSION = 1
PROFILES = ("default", "alignment")


@dataclass(frozen=True)
class DatasetManifest:
    num_trials: int
    channels: int
    epochs: int
    samples_per_epoch: int
    sample_rate: float
    num_classes: int
    seed: int
    class_balance: Tuple[float, ...]
    format_version: int = FORMAT_VERSION
    profile: str = "default"

    def __post_init__(self):
        if min(self.num_trials, self.channels, self.epochs,
               self.samples_per_epoch, self.num_classes) < 1:
            raise InvalidInput("manifest dimensions must be positive")
        if self.num_classes > 255:
            raise InvalidInput("labels are stored as u8; at most 255 classes")
        if self.sample_rate <= 0:
            raise InvalidInput("sample rate must be positive")
        if len(self.class_balance) != self.num_classes:
            raise InvalidInput("class_balance length must equal num_classes")
        if abs(sum(self.class_balance) - 1.0) > 1e-9 or min(self.class_balance) < 0:
            raise InvalidInput("class_balance must be a distribution")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_balance"] = list(self.class_balance)
        return d

    @staticmethod
    def from_dict(d: dict) -> "DatasetManifest":
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            raise IncompatibleFormat(f"unsupported dataset format version {version!r}")
        try:
            return DatasetManifest(
                num_trials=int(d["num_trials"]), channels=int(d["channels"]),
                epochs=int(d["epochs"]), samples_per_epoch=int(d["samples_per_epoch"]),
                sample_rate=float(d["sample_rate"]), num_classes=int(d["num_classes"]),
                seed=int(d["seed"]), class_balance=tuple(d["class_balance"]),
                format_version=int(version), profile=str(d.get("profile", "default")),
            )
        except KeyError as exc:
            raise CorruptData(f"manifest missing key {exc}") from exc


@dataclass(frozen=True)
class SynthSpec:
    """Per-class generative structure: pre/post-switch mixing matrices, an
    oscillation band, the switch epoch, and the noise level."""

    mixings: Tuple[Tuple[np.ndarray, np.ndarray], ...]  # per class (A_pre, A_post)
    bands: Tuple[Tuple[float, float], ...]              # per class (lo, hi) Hz
    switch_epochs: Tuple[int, ...]                      # per class
    noise_level: float
    n_sources: int

    def validate(self, manifest: DatasetManifest):
        nyquist = manifest.sample_rate / 2.0
        if len(self.mixings) != manifest.num_classes or len(self.bands) != manifest.num_classes:
            raise InvalidInput("spec must define mixings and bands for every class")
        if len(self.switch_epochs) != manifest.num_classes:
            raise InvalidInput("spec must define a switch epoch for every class")
        for pair in self.mixings:
            for A in pair:
                if A.shape != (manifest.channels, self.n_sources):
                    raise InvalidInput(
                        f"mixing must be {(manifest.channels, self.n_sources)}, got {A.shape}"
                    )
                if np.linalg.matrix_rank(A) < min(A.shape):
                    raise InvalidInput("mixing matrices must have full column rank")
        for lo, hi in self.bands:
            if not 0 < lo < hi < nyquist:
                raise InvalidInput(f"band ({lo}, {hi}) outside (0, {nyquist})")
        for s in self.switch_epochs:
            if not 0 <= s <= manifest.epochs:
                raise InvalidInput(f"switch epoch {s} outside [0, {manifest.epochs}]")
        if self.noise_level < 0:
            raise InvalidInput("noise level must be nonnegative")


def _orthonormal_columns(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, k)))
    return q * np.where(np.diagonal(r) < 0.0, -1.0, 1.0)


def default_synth_spec(manifest: DatasetManifest, profile: str = "default",
                       noise_level: float | None = None) -> SynthSpec:
    """Built-in generation profiles.

    ``default``: classes differ strongly in both covariance structure (band
    and mixing) and switch epoch -- an easy sanity-check task.

    ``alignment``: classes share the same band and the same two mixing
    matrices, applied in opposite orders around the same switch epoch, so the
    stationary covariance is nearly class-invariant and the label lives mostly
    in the connectivity dynamics that the graph view captures.
    """
    if profile not in PROFILES:
        raise InvalidInput(f"unknown profile {profile!r}, expected one of {PROFILES}")
    rng = np.random.default_rng(np.random.SeedSequence([manifest.seed, 0x737063]))
    n, k = manifest.channels, max(2, min(3, manifest.channels - 1))
    nyq = manifest.sample_rate / 2.0
    if profile == "default":
        mixings, bands, switches = [], [], []
        for c in range(manifest.num_classes):
            pre = _orthonormal_columns(rng, n, k)
            post = _orthonormal_columns(rng, n, k)
            mixings.append((pre, post))
            lo = 4.0 + 10.0 * c
            hi = min(lo + 8.0, nyq - 1.0)
            bands.append((lo, hi))
            switches.append((2 + 2 * c) % (manifest.epochs + 1))
        noise = 0.1 if noise_level is None else noise_level
        return SynthSpec(mixings=tuple(mixings), bands=tuple(bands),
                         switch_epochs=tuple(switches), noise_level=noise, n_sources=k)
    # alignment profile
    a = _orthonormal_columns(rng, n, k)
    b = _orthonormal_columns(rng, n, k)
    band = (6.0, min(14.0, nyq - 1.0))
    mid = manifest.epochs // 2
    mixings = tuple([(a, b), (b, a)] * ((manifest.num_classes + 1) // 2))[: manifest.num_classes]
    noise = 0.3 if noise_level is None else noise_level
    return SynthSpec(mixings=mixings, bands=tuple([band] * manifest.num_classes),
                     switch_epochs=tuple([mid] * manifest.num_classes),
                     noise_level=noise, n_sources=k)


def label_schedule(num_trials: int, balance: Sequence[float]) -> np.ndarray:
    """Deterministic interleaved label order matching the balance within
    one trial per class."""
    balance = np.asarray(balance, dtype=np.float64)
    counts = np.zeros(len(balance))
    labels = np.empty(num_trials, dtype=np.int64)
    for i in range(num_trials):
        deficit = balance * (i + 1) - counts
        labels[i] = int(np.argmax(deficit))
        counts[labels[i]] += 1.0
    return labels


def _synth_trial(spec: SynthSpec, manifest: DatasetManifest, label: int,
                 rng: np.random.Generator) -> np.ndarray:
    T, N, L = manifest.epochs, manifest.channels, manifest.samples_per_epoch
    lo, hi = spec.bands[label]
    freqs = rng.uniform(lo, hi, spec.n_sources)
    phases = rng.uniform(0.0, 2.0 * np.pi, spec.n_sources)
    t_axis = np.arange(T * L) / manifest.sample_rate
    sources = np.sin(2.0 * np.pi * freqs[:, None] * t_axis[None, :] + phases[:, None])
    pre, post = spec.mixings[label]
    switch = spec.switch_epochs[label]
    x = np.empty((N, T * L))
    for e in range(T):
        A = pre if e < switch else post
        x[:, e * L : (e + 1) * L] = A @ sources[:, e * L : (e + 1) * L]
    if spec.noise_level > 0:
        x += spec.noise_level * rng.standard_normal((N, T * L))
    return x.reshape(N, T, L).transpose(1, 0, 2)  # (T, N, L)


def generate(spec: SynthSpec, manifest: DatasetManifest, out_dir) -> Path:
    """Write a dataset directory; byte-identical for identical inputs."""
    spec.validate(manifest)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create dataset directory {out}: {exc}") from exc
    labels = label_schedule(manifest.num_trials, manifest.class_balance)
    trials = np.empty(
        (manifest.num_trials, manifest.epochs, manifest.channels,
         manifest.samples_per_epoch),
        dtype=np.float32,
    )
    for i in range(manifest.num_trials):
        rng = np.random.default_rng(np.random.SeedSequence([manifest.seed, 0x7472, i]))
        trials[i] = _synth_trial(spec, manifest, int(labels[i]), rng).astype("<f4")
    try:
        (out / "manifest.json").write_text(
            json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n"
        )
        (out / "epochs.f32").write_bytes(trials.astype("<f4").tobytes())
        (out / "labels.u8").write_bytes(labels.astype(np.uint8).tobytes())
    except OSError as exc:
        raise IoError(f"cannot write dataset to {out}: {exc}") from exc
    return out


@dataclass
class Dataset:
    """Loaded dataset: float32 trials in manifest order plus labels."""

    manifest: DatasetManifest
    trials: np.ndarray  # (n, T, N, L) float32
    labels: np.ndarray  # (n,) int64

    def split(self, ratios: Sequence[float] = (0.6, 0.2, 0.2)) -> Dict[str, np.ndarray]:
        """Disjoint contiguous train/val/test index sets covering all trials."""
        ratios = np.asarray(ratios, dtype=np.float64)
        if ratios.size != 3 or np.any(ratios < 0) or abs(ratios.sum() - 1.0) > 1e-9:
            raise InvalidInput(f"ratios must be 3 nonnegative values summing to 1, got {ratios}")
        n = self.manifest.num_trials
        edges = np.floor(np.cumsum(ratios) * n + 1e-9).astype(int)
        edges[-1] = n
        idx = np.arange(n)
        return {
            "train": idx[: edges[0]],
            "val": idx[edges[0] : edges[1]],
            "test": idx[edges[1] :],
        }

    def trials64(self, index=None) -> np.ndarray:
        sel = self.trials if index is None else self.trials[index]
        return np.asarray(sel, dtype=np.float64)


def load(path) -> Dataset:
    """Load a dataset directory, validating shapes against the manifest."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise IoError(f"no manifest.json under {root}")
    try:
        manifest = DatasetManifest.from_dict(json.loads(manifest_path.read_text()))
    except json.JSONDecodeError as exc:
        raise CorruptData(f"manifest.json is not valid JSON: {exc}") from exc
    shape = (manifest.num_trials, manifest.epochs, manifest.channels,
             manifest.samples_per_epoch)
    try:
        blob = (root / "epochs.f32").read_bytes()
        label_blob = (root / "labels.u8").read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read dataset blobs under {root}: {exc}") from exc
    expected = int(np.prod(shape)) * 4
    if len(blob) != expected:
        raise CorruptData(
            f"epochs.f32 holds {len(blob)} bytes, manifest implies {expected}"
        )
    if len(label_blob) != manifest.num_trials:
        raise CorruptData(
            f"labels.u8 holds {len(label_blob)} entries, manifest says {manifest.num_trials}"
        )
    trials = np.frombuffer(blob, dtype="<f4").reshape(shape)
    labels = np.frombuffer(label_blob, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() >= manifest.num_classes:
        raise CorruptData(f"label {labels.max()} exceeds num_classes {manifest.num_classes}")
    return Dataset(manifest=manifest, trials=trials, labels=labels)
