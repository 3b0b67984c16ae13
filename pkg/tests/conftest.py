import numpy as np
import pytest
from hypothesis import strategies as st

from hydra_power.hydra import train_hydra
from hydra_power.models import AnalyticalModel, TrainConfig, train_mlp_arrays
from hydra_power.selector import CandidateSpec, ForestConfig
from hydra_power.stats import fit_normalization
from hydra_power.trace import DEFAULT_PROFILE, StatSample, SyntheticConfig, Trace, generate_synthetic


def make_sample(t=0.0, util=50.0, power=None, rapl=None, tag=None, **overrides):
    fields = dict(
        timestamp=t,
        cpu_freq_mhz=2400.0,
        user_time_pct=util * 0.9,
        cpu_util_pct=util,
        interrupts_per_s=1000.0,
        soft_interrupts_per_s=200.0,
        process_count=150,
        cache_miss_ratio=0.05,
        virtual_mem_pct=20.0,
        syscalls_per_s=5000.0,
        instructions_per_s=1e9,
        shared_mem_bytes=1e8,
        measured_power_watts=power,
        rapl_watts=rapl,
        workload_tag=tag,
    )
    fields.update(overrides)
    return StatSample(**fields)


def mixed_trace(seed, n=3000, noise=1.0, regime="mixed"):
    return generate_synthetic(
        SyntheticConfig(regime=regime, duration_samples=n, noise_sigma_watts=noise, seed=seed)
    )


def fit_mlp(trace, seed=0, epochs=60, profile=DEFAULT_PROFILE):
    norm = fit_normalization([trace])
    X = norm.transform(trace.feature_matrix)
    y = (trace.column("measured_power_watts") - profile.idle_power_watts) / profile.dynamic_range
    return train_mlp_arrays(X, y, TrainConfig(seed=seed, epochs=epochs), norm).model


def build_hydra(seed, n=3000, epochs=60, forest=None):
    """MLP, selector and test traces from three disjoint seeds."""
    mlp = fit_mlp(mixed_trace(seed, n), seed=seed, epochs=epochs)
    cands = ((CandidateSpec("analytical", 0), AnalyticalModel(1.0)), (CandidateSpec("mlp", 1), mlp))
    sel = mixed_trace(seed + 500, n)
    res = train_hydra(sel, cands, DEFAULT_PROFILE, forest_config=forest or ForestConfig(seed=seed))
    return res, mixed_trace(seed + 1000, n)


@pytest.fixture(scope="session")
def hydra_setup():
    res, test = build_hydra(seed=7, n=2400, epochs=40, forest=ForestConfig(n_trees=25, seed=7))
    return res.model, test


# hypothesis strategies -------------------------------------------------------

finite = dict(allow_nan=False, allow_infinity=False)


@st.composite
def stat_samples(draw, t=0.0):
    pct = st.floats(0.0, 100.0, **finite)
    rate = st.floats(0.0, 1e12, **finite)
    opt_power = st.one_of(st.none(), st.floats(1e-3, 1e4, **finite))
    return StatSample(
        timestamp=t,
        cpu_freq_mhz=draw(st.floats(0.0, 6000.0, **finite)),
        user_time_pct=draw(pct),
        cpu_util_pct=draw(pct),
        interrupts_per_s=draw(rate),
        soft_interrupts_per_s=draw(rate),
        process_count=draw(st.integers(0, 10**6)),
        cache_miss_ratio=draw(st.floats(0.0, 1.0, **finite)),
        virtual_mem_pct=draw(pct),
        syscalls_per_s=draw(rate),
        instructions_per_s=draw(rate),
        shared_mem_bytes=draw(st.floats(0.0, 1e13, **finite)),
        measured_power_watts=draw(opt_power),
        rapl_watts=draw(opt_power),
        workload_tag=draw(st.one_of(st.none(), st.sampled_from(["compute", "noncompute", "job-7"]))),
    )


@st.composite
def traces(draw, min_size=1, max_size=8):
    n = draw(st.integers(min_size, max_size))
    dt = draw(st.sampled_from([0.5, 1.0, 2.0]))
    samples = [draw(stat_samples(t=i * dt)) for i in range(n)]
    return Trace("hyp", dt, samples)


def random_trace(rng, n):
    """Random valid trace for non-hypothesis loops."""
    samples = []
    for i in range(n):
        samples.append(make_sample(
            t=float(i),
            util=float(rng.uniform(0, 100)),
            power=float(rng.uniform(50, 500)) if rng.random() < 0.8 else None,
            rapl=float(rng.uniform(5, 200)) if rng.random() < 0.5 else None,
            tag=str(rng.choice(["compute", "noncompute"])) if rng.random() < 0.5 else None,
            cpu_freq_mhz=float(rng.uniform(800, 4000)),
            interrupts_per_s=float(rng.exponential(3000)),
            process_count=int(rng.integers(0, 5000)),
            cache_miss_ratio=float(rng.uniform(0, 1)),
            shared_mem_bytes=float(rng.uniform(0, 1e10)),
            instructions_per_s=float(np.exp(rng.uniform(0, 25))),
        ))
    return Trace("rand", 1.0, samples)
