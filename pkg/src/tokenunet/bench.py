"""Inference cost harness: wall-clock, peak tensor bytes and analytic FLOP split."""
import time
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, flops, memory, no_grad
from .models import ModelConfig, build_model, model_forward

FLOP_SECTIONS = ("encoder", "token_learner", "bottleneck", "token_fuser", "decoder")


@dataclass
class BenchReport:
    variant: str
    size: int
    repeats: int
    median_ms: float
    min_ms: float
    max_ms: float
    peak_bytes: int
    flops: dict
    attention_scores: int

    @property
    def total_flops(self):
        return sum(self.flops.values())

    def to_dict(self):
        d = asdict(self)
        d["total_flops"] = self.total_flops
        return d


def measure(model, size, repeats=5, seed=0):
    """Benchmark one model at cubic input ``size``; a warmup run is excluded."""
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    k = model.cfg.downsampling_factor
    if size % k:
        raise ValueError(f"size {size} is not divisible by the model stride {k}")
    x = Tensor(np.random.default_rng(seed).standard_normal((model.cfg.in_channels, size, size, size)))
    times = []
    with no_grad():
        model_forward(model, x)
        base = memory.current
        memory.reset_peak()
        flops.reset()
        model_forward(model, x)
        peak = memory.peak
        split = {s: flops.sections.get(s, 0) for s in FLOP_SECTIONS}
        split["decoder"] += flops.sections.get("other", 0)
        scores = flops.events.get("attention_scores", 0)
        for _ in range(repeats):
            t = time.perf_counter()
            model_forward(model, x)
            times.append((time.perf_counter() - t) * 1e3)
    param_bytes = sum(p.data.nbytes for p in model.parameters())
    return BenchReport(model.cfg.variant, size, repeats, float(np.median(times)), float(min(times)),
                       float(max(times)), int(peak - base + param_bytes), split, int(scores))


def run_bench(variants, sizes, repeats=5, scale="desk", seed=0):
    reports = []
    for v in variants:
        cfg = (ModelConfig.paper if scale == "paper" else ModelConfig.desk)(v, seed=seed)
        model = build_model(cfg)
        for s in sizes:
            reports.append(measure(model, s, repeats, seed))
    return reports


def format_table(reports):
    head = f"{'variant':<24}{'size':>6}{'median ms':>12}{'min ms':>10}{'peak MB':>10}" \
           f"{'enc GF':>10}{'TL+TF MF':>10}{'tok MF':>9}{'dec GF':>9}"
    lines = [head, "-" * len(head)]
    for r in reports:
        f = r.flops
        lines.append(f"{r.variant:<24}{r.size:>6}{r.median_ms:>12.1f}{r.min_ms:>10.1f}{r.peak_bytes / 1e6:>10.1f}"
                     f"{f['encoder'] / 1e9:>10.3f}{(f['token_learner'] + f['token_fuser']) / 1e6:>10.3f}"
                     f"{f['bottleneck'] / 1e6:>9.3f}{f['decoder'] / 1e9:>9.3f}")
    return "\n".join(lines)
