"""Synthetic untrimmed sequences, proposals and pooled features.

A sequence is a T x d matrix of unit features: background units are
N(0, noise_bg^2 I), units inside an action of class c are N(mu_c, noise_act^2 I)
scaled by a linear ramp over the first/last 10% of the action, so boundaries
are soft and boundary uncertainty has signal to capture. Proposals mimic a
first stage by jittering annotation boundaries; any proposal whose best tIoU
against the annotations reaches 0.5 is labelled with that class and given
normalized start/end offsets as regression targets, everything else is
background (class 0).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .evaluate import tiou
from .layers import PooledFeature, vap_pool
from .losses import RegressionTarget
from .moments import GaussianScalar

POSITIVE_TIOU = 0.5
NEGATIVE_MAX_TIOU = 0.3


@dataclass(frozen=True)
class SynthConfig:
    d: int = 64
    num_classes: int = 5
    class_means: np.ndarray = field(default=None, repr=False)
    t_range: tuple[int, int] = (120, 200)
    actions_range: tuple[int, int] = (1, 3)
    len_range: tuple[int, int] = (24, 60)
    noise_action: float = 1.5
    noise_background: float = 1.5
    ramp_frac: float = 0.1
    jitter: float = 0.25
    positives_per_action: int = 4
    negatives_per_sequence: int = 6
    min_proposal_len: int = 8
    sigma_t2: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.noise_action < 0 or self.noise_background < 0 or self.jitter < 0:
            raise ValueError("noise and jitter must be non-negative")
        if self.class_means is None:
            raise ValueError("class_means missing; build configs via SynthConfig.create")
        cm = np.asarray(self.class_means, dtype=np.float64)
        object.__setattr__(self, "class_means", cm)
        if cm.shape != (self.num_classes, self.d):
            raise ValueError(f"class_means shape {cm.shape} != ({self.num_classes}, {self.d})")
        if not (self.t_range[0] <= self.t_range[1] and self.len_range[0] <= self.len_range[1]):
            raise ValueError("invalid ranges")
        if self.len_range[1] > self.t_range[0]:
            raise ValueError("actions must fit inside the shortest sequence")
        if self.min_proposal_len < 1 or self.min_proposal_len > self.t_range[0]:
            raise ValueError("invalid min_proposal_len")

    @staticmethod
    def create(signal: float = 0.5, seed: int = 0, **kwargs) -> "SynthConfig":
        """Draw per-class mean vectors ~ N(0, signal^2 I) from the seed."""
        d = kwargs.pop("d", 64)
        num_classes = kwargs.pop("num_classes", 5)
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x636C7373)))
        means = rng.normal(0.0, signal, size=(num_classes, d))
        return SynthConfig(d=d, num_classes=num_classes, class_means=means, seed=seed, **kwargs)


@dataclass
class SyntheticSequence:
    seq_id: str
    units: np.ndarray  # (T, d)
    annotations: list[tuple[int, int, int]]  # (class in 1..C, start, end)


@dataclass(frozen=True)
class Proposal:
    seq_id: str
    start: int
    end: int
    label: int = 0
    target: RegressionTarget | None = None

    def __post_init__(self):
        if self.start >= self.end:
            raise ValueError(f"proposal {self.seq_id}[{self.start},{self.end}) is empty")
        if (self.label == 0) != (self.target is None):
            raise ValueError("background proposals and only they lack a target")


@dataclass
class Dataset:
    split: str
    config: SynthConfig
    sequences: list[SyntheticSequence]
    proposals: list[Proposal]

    def sequence_by_id(self, seq_id: str) -> SyntheticSequence:
        return self._index()[seq_id]

    def _index(self):
        if not hasattr(self, "_by_id"):
            self._by_id = {s.seq_id: s for s in self.sequences}
        return self._by_id


def _ramp_profile(length: int, ramp_frac: float) -> np.ndarray:
    r = max(1, int(round(ramp_frac * length)))
    rise = np.minimum(np.arange(1, length + 1) / r, 1.0)
    return np.minimum(rise, rise[::-1])


def gen_sequence(config: SynthConfig, seed, seq_id: str = "seq") -> SyntheticSequence:
    rng = np.random.default_rng(seed)
    t = int(rng.integers(config.t_range[0], config.t_range[1] + 1))
    n_act = int(rng.integers(config.actions_range[0], config.actions_range[1] + 1))
    classes = rng.integers(1, config.num_classes + 1, size=n_act)
    lengths = rng.integers(config.len_range[0], config.len_range[1] + 1, size=n_act)
    # drop actions until they fit with at least one gap unit between them
    while n_act > 0 and lengths[:n_act].sum() + (n_act + 1) > t:
        n_act -= 1
    free = t - int(lengths[:n_act].sum())
    gaps = rng.multinomial(free, np.full(n_act + 1, 1.0 / (n_act + 1))) if n_act else []

    units = rng.normal(0.0, config.noise_background, size=(t, config.d))
    annotations = []
    cursor = 0
    for i in range(n_act):
        cursor += int(gaps[i])
        s, e = cursor, cursor + int(lengths[i])
        cls = int(classes[i])
        alpha = _ramp_profile(e - s, config.ramp_frac)
        units[s:e] = alpha[:, None] * config.class_means[cls - 1] + rng.normal(
            0.0, config.noise_action, size=(e - s, config.d)
        )
        annotations.append((cls, s, e))
        cursor = e
    return SyntheticSequence(seq_id, units, annotations)


def _fix_interval(s: int, e: int, min_len: int, t: int) -> tuple[int, int]:
    s, e = max(0, min(s, t)), max(0, min(e, t))
    if e - s < min_len:
        mid = (s + e) // 2
        s = max(0, min(mid - min_len // 2, t - min_len))
        e = s + min_len
    return s, e


def regression_offsets(start: int, end: int, ann_start: int, ann_end: int) -> tuple[float, float]:
    """Normalized offsets from a proposal to its matched annotation."""
    length = end - start
    return (ann_start - start) / length, (ann_end - end) / length


def assign_label(start: int, end: int, annotations, sigma_t2: float) -> tuple[int, RegressionTarget | None]:
    """Class of the max-tIoU annotation when tIoU >= 0.5, else background."""
    best_cls, best_t, best_ann = 0, 0.0, None
    for cls, a_s, a_e in annotations:
        t = tiou((start, end), (a_s, a_e))
        if t > best_t:
            best_cls, best_t, best_ann = cls, t, (a_s, a_e)
    if best_t >= POSITIVE_TIOU:
        t_s, t_e = regression_offsets(start, end, *best_ann)
        return best_cls, RegressionTarget(
            GaussianScalar(t_s, sigma_t2), GaussianScalar(t_e, sigma_t2)
        )
    return 0, None


def gen_proposals(seq: SyntheticSequence, config: SynthConfig, seed) -> list[Proposal]:
    rng = np.random.default_rng(seed)
    t = seq.units.shape[0]
    raw: list[tuple[int, int]] = []
    for _, s, e in seq.annotations:
        length = e - s
        for _ in range(config.positives_per_action):
            ds = rng.uniform(-config.jitter, config.jitter) * length
            de = rng.uniform(-config.jitter, config.jitter) * length
            raw.append(_fix_interval(round(s + ds), round(e + de), config.min_proposal_len, t))
    needed = config.negatives_per_sequence
    for _ in range(20 * needed):
        if needed == 0:
            break
        length = int(rng.integers(config.len_range[0], min(config.len_range[1], t) + 1))
        s = int(rng.integers(0, t - length + 1))
        cand = (s, s + length)
        if all(tiou(cand, (a_s, a_e)) < NEGATIVE_MAX_TIOU for _, a_s, a_e in seq.annotations):
            raw.append(cand)
            needed -= 1
    out = []
    for s, e in raw:
        label, target = assign_label(s, e, seq.annotations, config.sigma_t2)
        out.append(Proposal(seq.seq_id, s, e, label, target))
    return out


def featurize(seq: SyntheticSequence, proposal: Proposal, k: int) -> PooledFeature:
    """Pool a proposal with half-length context windows on each side.

    Context windows are clipped to the sequence bounds and may be empty.
    """
    t = seq.units.shape[0]
    s, e = proposal.start, proposal.end
    if not (0 <= s < e <= t):
        raise ValueError(f"proposal {seq.seq_id}[{s},{e}) outside sequence of {t} units")
    if e - s < k:
        raise ValueError(
            f"proposal {seq.seq_id}[{s},{e}) has {e - s} units, cannot form k={k} parts"
        )
    ctx = (e - s) // 2
    cb = min(ctx, s)
    ca = min(ctx, t - e)
    return vap_pool(seq.units[s - cb : e + ca], k, cb, ca)


def _split_key(split: str) -> int:
    return zlib.crc32(split.encode())


def make_split(config: SynthConfig, n_sequences: int, split: str) -> Dataset:
    """Generate one split; every sequence derives its own random stream from
    (config.seed, split), so different splits never share a stream."""
    root = np.random.SeedSequence((config.seed, _split_key(split)))
    sequences = []
    proposals = []
    for i, child in enumerate(root.spawn(n_sequences)):
        seq_seed, prop_seed = child.spawn(2)
        seq = gen_sequence(config, seq_seed, seq_id=f"{split}-{i:05d}")
        sequences.append(seq)
        proposals.extend(gen_proposals(seq, config, prop_seed))
    return Dataset(split, config, sequences, proposals)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def save_dataset(path, ds: Dataset) -> None:
    cfg = ds.config
    header = {
        "kind": "dataset",
        "format_version": 1,
        "split": ds.split,
        "config": {
            "d": cfg.d,
            "num_classes": cfg.num_classes,
            "t_range": list(cfg.t_range),
            "actions_range": list(cfg.actions_range),
            "len_range": list(cfg.len_range),
            "noise_action": cfg.noise_action,
            "noise_background": cfg.noise_background,
            "ramp_frac": cfg.ramp_frac,
            "jitter": cfg.jitter,
            "positives_per_action": cfg.positives_per_action,
            "negatives_per_sequence": cfg.negatives_per_sequence,
            "min_proposal_len": cfg.min_proposal_len,
            "sigma_t2": cfg.sigma_t2,
            "seed": cfg.seed,
        },
    }
    seq_index = {s.seq_id: i for i, s in enumerate(ds.sequences)}
    seq_lens = np.array([s.units.shape[0] for s in ds.sequences], dtype=np.int64)
    units = (
        np.concatenate([s.units for s in ds.sequences])
        if ds.sequences
        else np.zeros((0, cfg.d))
    )
    ann = np.array(
        [(i, cls, s, e) for i, sq in enumerate(ds.sequences) for cls, s, e in sq.annotations],
        dtype=np.int64,
    ).reshape(-1, 4)
    prop_int = np.array(
        [(seq_index[p.seq_id], p.start, p.end, p.label) for p in ds.proposals],
        dtype=np.int64,
    ).reshape(-1, 4)
    prop_tgt = np.full((len(ds.proposals), 2), np.nan)
    for i, p in enumerate(ds.proposals):
        if p.target is not None:
            prop_tgt[i] = (p.target.start.mu, p.target.end.mu)
    write_container(
        path,
        header,
        {
            "class_means": cfg.class_means,
            "seq_lens": seq_lens,
            "units": units,
            "annotations": ann,
            "prop_int": prop_int,
            "prop_targets": prop_tgt,
        },
    )


def load_dataset(path) -> Dataset:
    header, arrays = read_container(path)
    if header.get("kind") != "dataset":
        raise ValueError(f"{path}: not a dataset file")
    c = header["config"]
    config = SynthConfig(
        d=c["d"],
        num_classes=c["num_classes"],
        class_means=arrays["class_means"],
        t_range=tuple(c["t_range"]),
        actions_range=tuple(c["actions_range"]),
        len_range=tuple(c["len_range"]),
        noise_action=c["noise_action"],
        noise_background=c["noise_background"],
        ramp_frac=c["ramp_frac"],
        jitter=c["jitter"],
        positives_per_action=c["positives_per_action"],
        negatives_per_sequence=c["negatives_per_sequence"],
        min_proposal_len=c["min_proposal_len"],
        sigma_t2=c["sigma_t2"],
        seed=c["seed"],
    )
    split = header["split"]
    sequences = []
    offset = 0
    for i, t in enumerate(arrays["seq_lens"]):
        t = int(t)
        sequences.append(
            SyntheticSequence(f"{split}-{i:05d}", arrays["units"][offset : offset + t], [])
        )
        offset += t
    for seq_i, cls, s, e in arrays["annotations"]:
        sequences[int(seq_i)].annotations.append((int(cls), int(s), int(e)))
    proposals = []
    for (seq_i, s, e, label), (t_s, t_e) in zip(arrays["prop_int"], arrays["prop_targets"]):
        target = None
        if label > 0:
            target = RegressionTarget(
                GaussianScalar(float(t_s), config.sigma_t2),
                GaussianScalar(float(t_e), config.sigma_t2),
            )
        proposals.append(
            Proposal(sequences[int(seq_i)].seq_id, int(s), int(e), int(label), target)
        )
    return Dataset(split, config, sequences, proposals)
