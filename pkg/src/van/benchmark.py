"""The default noisy synthetic benchmark and its runner.

One benchmark run = generate a train/test pair for a seed, train each
requested variant from that seed, and evaluate with cascade refinement and
NMS. Soft action boundaries plus jittered proposals make regression targets
noisy, which is exactly the regime where variance-aware training pays off.
"""

from __future__ import annotations

from dataclasses import dataclass

from .data import SynthConfig, make_split
from .evaluate import TIOU_THRESHOLDS
from .network import NetworkConfig, build
from .train import TrainConfig, evaluate_dataset, train

#: data knobs of the default benchmark (matches the CLI defaults)
BENCHMARK_DATA = dict(
    signal=0.5,
    d=64,
    num_classes=5,
    t_range=(120, 200),
    actions_range=(1, 3),
    len_range=(24, 60),
    noise_action=1.5,
    noise_background=1.5,
    jitter=0.25,
    positives_per_action=4,
    negatives_per_sequence=6,
    min_proposal_len=8,
    sigma_t2=0.01,
)

#: training knobs the benchmark results are calibrated for
BENCHMARK_TRAIN = dict(
    batch_size=128,
    lr=0.01,
    iters=2000,
    optimizer="sgd-momentum",
    momentum=0.9,
    lambda_reg=1.0,
)

TRAIN_SEQUENCES = 200
TEST_SEQUENCES = 100


@dataclass
class BenchmarkRow:
    variant: str
    seed: int
    per_threshold: dict[float, float]
    avg: float


def run_seed(seed: int, variants, k: int = 3, hidden: int = 128,
             cascade_steps: int = 2, iters: int | None = None) -> list[BenchmarkRow]:
    """Train and evaluate `variants` on the benchmark datasets for one seed."""
    data_cfg = SynthConfig.create(seed=seed, **BENCHMARK_DATA)
    train_ds = make_split(data_cfg, TRAIN_SEQUENCES, "train")
    test_ds = make_split(data_cfg, TEST_SEQUENCES, "test")
    train_kwargs = dict(BENCHMARK_TRAIN)
    if iters is not None:
        train_kwargs["iters"] = iters
    rows = []
    for variant in variants:
        config = NetworkConfig(variant=variant, d=BENCHMARK_DATA["d"], k=k,
                               hidden=hidden, classes=BENCHMARK_DATA["num_classes"],
                               sigma_t2=BENCHMARK_DATA["sigma_t2"])
        params = build(config, seed)
        train(params, config, train_ds, TrainConfig(seed=seed, **train_kwargs))
        per_thr, avg, _ = evaluate_dataset(params, config, test_ds,
                                           steps=cascade_steps,
                                           thresholds=TIOU_THRESHOLDS)
        rows.append(BenchmarkRow(variant, seed, per_thr, avg))
    return rows


def median(values):
    ordered = sorted(values)
    return ordered[len(ordered) // 2]
