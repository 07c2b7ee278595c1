"""Three-stage orchestration and the experiment matrix.

Variants: the full geometry-aware mixture model, its no-geometry ablation,
single-net flow-matching baselines (shared, per-pair, multi-marginal), and
the training-free baselines (per-marginal Gaussian, linear interpolation,
static OT).  Runs persist under ``runs/<config-hash>/`` with stage
checkpoints, an epoch log, and the evaluation report.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .bend import BendModel, BendTrainConfig, train_bend
from .checkpoint import canonical_json, load_checkpoint, save_checkpoint
from .evaluate import (
    EvalReport,
    coordwise_w1,
    gaussian_baseline,
    linear_interp_baseline,
    model_chain_field,
    regime_report,
    sliced_w1,
    static_ot_map,
    wd_suite,
)
from .geometry import GeometryTrainConfig, metric_from_dict, train_geometry
from .lorenz import LorenzConfig, generate_lorenz
from .marginal_io import read_marginals
from .mesh import MeshBenchConfig, generate_mesh_benchmark, project_back, surface_deviation
from .transport import AccessLoggedSequence, Coupling, MarginalSequence, pushforward_chain
from .velocity import (
    GumbelSchedule,
    MixtureVelocityModel,
    PenaltyWeights,
    VelocityTrainConfig,
    train_velocity,
)

__all__ = [
    "DatasetSpec",
    "EvalConfig",
    "ExperimentConfig",
    "RunRecord",
    "lorenz_experiment",
    "mesh_experiment",
    "synthetic_experiment",
    "apply_overrides",
    "config_hash",
    "run_experiment",
    "run_matrix",
    "dim_sweep",
    "VARIANTS",
]

VARIANTS = (
    "flux",
    "flux_no_geometry",
    "vanilla_cfm",
    "independent_cfm",
    "euclid_multimarginal",
    "gaussian",
    "linear",
    "static_ot",
)
ODE_VARIANTS = ("flux", "flux_no_geometry", "euclid_multimarginal")
GEOMETRY_VARIANTS = ("flux",)
TRAINED_VARIANTS = ODE_VARIANTS + ("vanilla_cfm", "independent_cfm")


@dataclass
class DatasetSpec:
    kind: str = "lorenz"  # lorenz | mesh | file | synthetic
    lorenz: LorenzConfig = field(default_factory=LorenzConfig)
    mesh: MeshBenchConfig = field(default_factory=MeshBenchConfig)
    path: str = None
    synthetic_samples: int = 96
    synthetic_dim: int = 4


@dataclass
class EvalConfig:
    n_steps_per_segment: int = 100
    n_projections: int = 128
    seed: int = 0
    max_chain_samples: int = 512


@dataclass
class ExperimentConfig:
    variant: str = "flux"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    geometry: GeometryTrainConfig = None
    bend: BendTrainConfig = None
    velocity: VelocityTrainConfig = field(default_factory=VelocityTrainConfig)
    single_hidden: tuple = (64, 64)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    held_out: tuple = ()
    standardize: bool = True
    seed: int = 0

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant in GEOMETRY_VARIANTS:
            if self.geometry is None or self.bend is None:
                raise ValueError(f"variant {self.variant!r} needs geometry and bend configs")
        elif self.geometry is not None or self.bend is not None:
            raise ValueError(
                f"variant {self.variant!r} uses Euclidean paths and forbids geometry/bend configs"
            )
        return self


@dataclass
class RunRecord:
    config_hash: str
    variant: str
    seed: int
    status: str = "ok"
    error: str = None
    checkpoint_hashes: dict = field(default_factory=dict)
    wallclock: dict = field(default_factory=dict)
    train_marginals_read: list = field(default_factory=list)
    report: EvalReport = None

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["report"] = None if self.report is None else self.report.to_dict()
        return d


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    return obj


def config_to_dict(cfg: ExperimentConfig):
    return _to_plain(cfg)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(config_to_dict(cfg))).hexdigest()[:12]


def apply_overrides(cfg, overrides):
    """Apply dotted-path overrides like velocity.n_experts=4; unknown paths
    are a hard error."""
    for key, raw in overrides.items():
        parts = key.split(".")
        obj = cfg
        for p in parts[:-1]:
            if not hasattr(obj, p):
                raise KeyError(f"unknown config path: {key}")
            obj = getattr(obj, p)
        leaf = parts[-1]
        if not hasattr(obj, leaf):
            raise KeyError(f"unknown config path: {key}")
        current = getattr(obj, leaf)
        try:
            value = json.loads(raw)
        except (json.JSONDecodeError, TypeError):
            value = raw
        if isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        if isinstance(current, bool) and isinstance(value, int):
            value = bool(value)
        setattr(obj, leaf, value)
    return cfg


# ---------------------------------------------------------------------------
# Default experiment configurations


def lorenz_experiment(variant="flux", seed=0, samples_per_marginal=512) -> ExperimentConfig:
    """Lorenz defaults: K=2 experts of hidden width 8, 180 velocity epochs,
    50 geometry / 100 bend epochs, batch 32, lr 1e-4."""
    needs_geometry = variant in GEOMETRY_VARIANTS
    cfg = ExperimentConfig(
        variant=variant,
        dataset=DatasetSpec(kind="lorenz", lorenz=LorenzConfig(samples_per_marginal=samples_per_marginal)),
        geometry=GeometryTrainConfig(
            epochs=50, batch_size=32, lr=1e-2, weight_decay=1e-5,
            n_centers=128, feature_dim=32, hidden=(64, 64),
        ) if needs_geometry else None,
        bend=BendTrainConfig(
            epochs=100, batch_size=32, lr=1e-4, weight_decay=1e-5, hidden=(64, 64),
            coupling=Coupling(kind="index_aligned"),
        ) if needs_geometry else None,
        velocity=VelocityTrainConfig(
            epochs=180, batch_size=32, lr=1e-4, weight_decay=1e-5,
            n_experts=2, expert_hidden=(8, 8), router_hidden=(64, 64), time_dim=16,
            gumbel=GumbelSchedule(tau_init=1.0, tau_min=0.2, tau_decay=0.9995, soft_epochs=50),
            penalties=PenaltyWeights(),
            coupling=Coupling(kind="index_aligned"),
            source_conditioning=True,
        ),
        single_hidden=(64, 64),
        seed=seed,
        standardize=True,
    )
    return cfg


def mesh_experiment(variant="flux", embed_dim=3, seed=0, samples_per_marginal=400) -> ExperimentConfig:
    """Desk-scale mesh benchmark defaults; marginals 1 and 6 held out."""
    needs_geometry = variant in GEOMETRY_VARIANTS
    cfg = ExperimentConfig(
        variant=variant,
        dataset=DatasetSpec(
            kind="mesh",
            mesh=MeshBenchConfig(embed_dim=embed_dim, samples_per_marginal=samples_per_marginal, embed_seed=seed),
        ),
        geometry=GeometryTrainConfig(
            epochs=60, batch_size=128, lr=1e-2, weight_decay=1e-5,
            n_centers=100, feature_dim=4, hidden=(64, 64),
        ) if needs_geometry else None,
        bend=BendTrainConfig(
            epochs=60, batch_size=64, lr=1e-4, weight_decay=1e-5, hidden=(64, 64),
            coupling=Coupling(kind="random_perm"),
        ) if needs_geometry else None,
        velocity=VelocityTrainConfig(
            epochs=120, batch_size=64, lr=1e-4, weight_decay=1e-5,
            n_experts=2, expert_hidden=(64, 64), router_hidden=(64, 64), time_dim=16,
            gumbel=GumbelSchedule(tau_init=1.0, tau_min=0.1, tau_decay=0.98, soft_epochs=20),
            penalties=PenaltyWeights(vel=0.0),
            coupling=Coupling(kind="sinkhorn_ot"),
            source_conditioning=True,
        ),
        single_hidden=(96, 96),
        evaluation=EvalConfig(max_chain_samples=256),
        held_out=(1, 6),
        standardize=False,
        seed=seed,
    )
    return cfg


def synthetic_experiment(variant="flux", seed=0) -> ExperimentConfig:
    """Small 5-marginal, 3-stage stand-in exercising the full pipeline."""
    needs_geometry = variant in GEOMETRY_VARIANTS
    cfg = ExperimentConfig(
        variant=variant,
        dataset=DatasetSpec(kind="synthetic"),
        geometry=GeometryTrainConfig(epochs=10, n_centers=32, feature_dim=8, hidden=(32, 32))
        if needs_geometry else None,
        bend=BendTrainConfig(epochs=10, hidden=(32, 32)) if needs_geometry else None,
        velocity=VelocityTrainConfig(
            epochs=30, n_experts=3, expert_hidden=(16, 16), router_hidden=(32, 32),
            gumbel=GumbelSchedule(soft_epochs=10),
        ),
        single_hidden=(32, 32),
        seed=seed,
    )
    return cfg


def make_synthetic_stages(n=96, d=4, rng=None) -> MarginalSequence:
    """Five drifting Gaussians with three labeled stages (0,0,1,1,2): the
    drift direction changes at each stage boundary."""
    rng = rng if rng is not None else np.random.default_rng(0)
    dirs = np.zeros((3, d))
    dirs[0, 0] = 2.0
    dirs[1, 1] = 2.5
    dirs[2, 2 % d] += 2.0
    dirs[2, 0] -= 1.0
    stage_of = [0, 0, 1, 1, 2]
    center = np.zeros(d)
    marginals = []
    for k in range(5):
        marginals.append(center + 0.25 * rng.standard_normal((n, d)))
        if k < 4:
            center = center + dirs[stage_of[k + 1]]
    return MarginalSequence(marginals, regime_labels=stage_of)


def resolve_dataset(spec: DatasetSpec, rng):
    """Build the marginal sequence; mesh datasets also return extras."""
    if spec.kind == "lorenz":
        return generate_lorenz(spec.lorenz, rng), None
    if spec.kind == "mesh":
        seq, mesh, A, m3d = generate_mesh_benchmark(spec.mesh, rng)
        return seq, {"mesh": mesh, "A": A, "marginals3d": m3d}
    if spec.kind == "file":
        if spec.path is None:
            raise ValueError("dataset kind 'file' needs a path")
        return read_marginals(spec.path), None
    if spec.kind == "synthetic":
        return make_synthetic_stages(spec.synthetic_samples, spec.synthetic_dim, rng), None
    raise ValueError(f"unknown dataset kind {spec.kind!r}")


@dataclass
class Scaler:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X):
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
        return cls(mean, scale)

    @classmethod
    def identity(cls, d):
        return cls(np.zeros(d), np.ones(d))

    def transform(self, X):
        return (X - self.mean) / self.scale

    def inverse(self, X):
        return X * self.scale + self.mean

    def transform_seq(self, seq: MarginalSequence):
        return MarginalSequence(
            [self.transform(seq.samples(k)) for k in range(seq.T)],
            times=seq.times.copy(),
            segment_ids=list(seq.segment_ids),
            regime_labels=None if seq.regime_labels is None else list(seq.regime_labels),
        )


def _single_net_config(cfg: ExperimentConfig, source_conditioning, time_mode) -> VelocityTrainConfig:
    return dataclasses.replace(
        cfg.velocity,
        n_experts=1,
        expert_hidden=tuple(cfg.single_hidden),
        penalties=PenaltyWeights.zeros(),
        source_conditioning=source_conditioning,
        time_mode=time_mode,
    )


def _seed_rngs(seed, names):
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(ss) for name, ss in zip(names, children)}


def run_experiment(cfg: ExperimentConfig, out_dir=None, save=True) -> RunRecord:
    """Execute the applicable stages for the configured variant, evaluate,
    and (optionally) persist the run directory."""
    cfg.validate()
    chash = config_hash(cfg)
    record = RunRecord(config_hash=chash, variant=cfg.variant, seed=cfg.seed)
    rngs = _seed_rngs(cfg.seed, ["data", "geometry", "bend", "velocity", "eval", "baseline"])
    artifacts = None

    run_dir = None
    if save:
        out_dir = out_dir or "runs"
        run_dir = os.path.join(out_dir, chash)
        os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
        with open(os.path.join(run_dir, "config.json"), "wb") as fh:
            fh.write(canonical_json(config_to_dict(cfg)))

    try:
        t0 = time.perf_counter()
        full_seq, extras = resolve_dataset(cfg.dataset, rngs["data"])
        record.wallclock["data"] = time.perf_counter() - t0

        retained = [k for k in range(full_seq.T) if k not in set(cfg.held_out)]
        if cfg.standardize:
            scaler = Scaler.fit(full_seq.pooled(retained))
        else:
            scaler = Scaler.identity(full_seq.dim)
        std_seq = scaler.transform_seq(full_seq)
        guard = AccessLoggedSequence(std_seq)
        pairs = [(retained[i], retained[i + 1]) for i in range(len(retained) - 1)]

        artifacts = _train_stages(cfg, guard, retained, pairs, rngs, record, run_dir)
        record.train_marginals_read = sorted(guard.accessed)
        held = set(cfg.held_out) & guard.accessed
        if held:
            raise RuntimeError(f"training read held-out marginals {sorted(held)}")

        t0 = time.perf_counter()
        record.report = _evaluate(cfg, std_seq, scaler, extras, artifacts, rngs)
        record.wallclock["eval"] = time.perf_counter() - t0
    except Exception as exc:  # stage failure: record and stop
        record.status = "failed"
        record.error = f"{type(exc).__name__}: {exc}"
        if save:
            _persist_record(run_dir, record, artifacts)
        raise

    if save:
        _persist_record(run_dir, record, artifacts)
    return record


def _train_stages(cfg, guard, retained, pairs, rngs, record, run_dir):
    """Run the stages the variant needs; returns trained artifacts."""
    variant = cfg.variant
    artifacts = {"metric": None, "bend": None, "model": None, "models": None, "log": None}
    hashes = record.checkpoint_hashes

    if variant == "flux":
        t0 = time.perf_counter()
        pooled = guard.pooled(retained)
        metric = train_geometry(pooled, cfg.geometry, rng=rngs["geometry"])
        record.wallclock["geometry"] = time.perf_counter() - t0
        artifacts["metric"] = metric
        if run_dir:
            hashes["metric"] = save_checkpoint(
                os.path.join(run_dir, "checkpoints", "metric.json"), "metric", metric.to_dict()
            )

        t0 = time.perf_counter()
        bend = train_bend(guard, pairs, metric, cfg.bend, rngs["bend"])
        record.wallclock["bend"] = time.perf_counter() - t0
        artifacts["bend"] = bend
        if run_dir:
            hashes["bend"] = save_checkpoint(
                os.path.join(run_dir, "checkpoints", "bend.json"),
                "bend",
                bend.to_dict(metric_hash=hashes.get("metric")),
            )

    if variant in ("flux", "flux_no_geometry"):
        vcfg = cfg.velocity
    elif variant == "euclid_multimarginal":
        vcfg = _single_net_config(cfg, source_conditioning=True, time_mode="global")
    elif variant == "vanilla_cfm":
        vcfg = _single_net_config(cfg, source_conditioning=False, time_mode="local")
    elif variant == "independent_cfm":
        vcfg = _single_net_config(cfg, source_conditioning=False, time_mode="local")
    else:
        return artifacts

    t0 = time.perf_counter()
    if variant == "independent_cfm":
        models = {}
        logs = []
        for pair in pairs:
            model, log = train_velocity(guard, [pair], None, None, vcfg, rngs["velocity"])
            models[pair] = model
            logs.extend(log)
        artifacts["models"] = models
        artifacts["log"] = logs
    else:
        model, log = train_velocity(
            guard, pairs, artifacts["bend"], artifacts["metric"], vcfg, rngs["velocity"]
        )
        artifacts["model"] = model
        artifacts["log"] = log
        if run_dir:
            hashes["velocity"] = save_checkpoint(
                os.path.join(run_dir, "checkpoints", "velocity.json"),
                "velocity",
                model.to_dict(metric_hash=hashes.get("metric"), bend_hash=hashes.get("bend")),
            )
    record.wallclock["velocity"] = time.perf_counter() - t0
    return artifacts


def _hop_eval(hop_fn, seq, n_projections, seed):
    """wd1/wd2 for baselines defined by a direct (i -> j) transport."""
    from .evaluate import _multi_seed_w1

    hops = [(hop_fn(i, i + 1), seq.samples(i + 1)) for i in range(seq.T - 1)]
    wd1, wd1_std = _multi_seed_w1(hops, n_projections, seed)
    two = [(hop_fn(i, i + 2), seq.samples(i + 2)) for i in range(seq.T - 2)]
    wd2, wd2_std = _multi_seed_w1(two, n_projections, seed)
    return wd1, wd2, wd1_std, wd2_std


def _evaluate(cfg, std_seq, scaler, extras, artifacts, rngs) -> EvalReport:
    ev = cfg.evaluation
    report = EvalReport()
    variant = cfg.variant

    if variant in ODE_VARIANTS:
        model = artifacts["model"]
        suite = wd_suite(model, std_seq, ev.n_steps_per_segment, ev.n_projections, ev.seed)
        report.wd1 = suite["wd1"]
        report.wd2 = suite["wd2"]
        report.wd_fc = suite["wd_fc"]
        report.wd1_std = suite["wd1_std"]
        report.wd2_std = suite["wd2_std"]
        report.wd_fc_std = suite["wd_fc_std"]
        report.per_marginal_wd = suite["per_marginal_wd"]
        report.diverged = suite["diverged"]
        if model.n_experts > 1:
            reg = regime_report(model, std_seq)
            report.gating_entropy = reg["gating_entropy"]
            report.switch_rate = reg["switch_rate"]
            report.majority_usage = reg["majority_usage"]
            report.seg_ari = reg.get("seg_ari")
            report.seg_nmi = reg.get("seg_nmi")
        if extras is not None and cfg.dataset.kind == "mesh":
            _mesh_metrics(cfg, std_seq, scaler, extras, suite["chain_generated"], report)
    elif variant == "vanilla_cfm":
        model = artifacts["model"]
        field_fn = model_chain_field(model)
        knots = model.time_knots_

        def hop(i, j):
            gen, div = pushforward_chain(
                field_fn, std_seq.samples(i), std_seq.times[i : j + 1], ev.n_steps_per_segment, knots=knots
            )
            return gen[-1][~div]

        report.wd1, report.wd2, report.wd1_std, report.wd2_std = _hop_eval(
            hop, std_seq, ev.n_projections, ev.seed
        )
    elif variant == "independent_cfm":
        models = artifacts["models"]

        def hop(i, j):
            X = std_seq.samples(i)
            for a in range(i, j):
                model = models[(a, a + 1)]
                fld = model_chain_field(model)
                gen, div = pushforward_chain(
                    fld, X, std_seq.times[a : a + 2], ev.n_steps_per_segment, knots=model.time_knots_
                )
                X = gen[-1][~div]
            return X

        report.wd1, report.wd2, report.wd1_std, report.wd2_std = _hop_eval(
            hop, std_seq, ev.n_projections, ev.seed
        )
    elif variant == "gaussian":
        rng = rngs["baseline"]
        fitted = gaussian_baseline(std_seq, rng)

        def hop(i, j):
            return fitted[j]

        report.wd1, report.wd2, report.wd1_std, report.wd2_std = _hop_eval(
            hop, std_seq, ev.n_projections, ev.seed
        )
    elif variant == "linear":
        rng = rngs["baseline"]

        def hop(i, j):
            return linear_interp_baseline(
                (std_seq.samples(i), std_seq.samples(j)), rng, alpha=1.0,
                n=std_seq.samples(j).shape[0],
            )

        report.wd1, report.wd2, report.wd1_std, report.wd2_std = _hop_eval(
            hop, std_seq, ev.n_projections, ev.seed
        )
    elif variant == "static_ot":

        def hop(i, j):
            return static_ot_map(std_seq.samples(i), std_seq.samples(j))

        report.wd1, report.wd2, report.wd1_std, report.wd2_std = _hop_eval(
            hop, std_seq, ev.n_projections, ev.seed
        )
    return report


def _mesh_metrics(cfg, std_seq, scaler, extras, chain_generated, report):
    """Held-out / training / all-marginal coordinate WD after projection
    back to 3D, plus mean surface deviation."""
    A = extras["A"]
    mesh = extras["mesh"]
    marginals3d = extras["marginals3d"]
    held = set(cfg.held_out)
    per_k = {}
    surf = []
    for k, gen in enumerate(chain_generated):
        gen3d = project_back(scaler.inverse(gen), A)
        target3d = marginals3d[k]
        per_k[k] = coordwise_w1(gen3d, target3d)
        surf.append(surface_deviation(gen3d, mesh))
    report.held_out_wd = float(np.mean([per_k[k] for k in sorted(held)])) if held else None
    train_ks = [k for k in per_k if k not in held and k != 0]
    report.training_wd = float(np.mean([per_k[k] for k in train_ks]))
    report.all_wd = float(np.mean(list(per_k.values())))
    report.surface_dev = float(np.mean(surf))


def _persist_record(run_dir, record: RunRecord, artifacts):
    if run_dir is None:
        return
    if record.report is not None:
        with open(os.path.join(run_dir, "report.json"), "wb") as fh:
            fh.write(canonical_json(record.report.to_dict()))
    with open(os.path.join(run_dir, "record.json"), "w", encoding="utf-8") as fh:
        json.dump(record.to_dict(), fh, indent=2, sort_keys=True)
    if artifacts and artifacts.get("log"):
        with open(os.path.join(run_dir, "log.jsonl"), "w", encoding="utf-8") as fh:
            for rec in artifacts["log"]:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def run_matrix(configs, out_dir="runs", threads=None):
    """Run every config sequentially (or in a bounded process pool) and
    aggregate per-variant means/stds."""
    if threads is None:
        threads = int(os.environ.get("FLUX_LAB_THREADS", "1"))
    records = []
    if threads > 1 and len(configs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(threads, len(configs))) as pool:
            records = list(pool.map(_run_one, [(c, out_dir) for c in configs]))
    else:
        for c in configs:
            records.append(run_experiment(c, out_dir=out_dir))
    return records


def _run_one(args):
    cfg, out_dir = args
    return run_experiment(cfg, out_dir=out_dir)


REPORT_COLUMNS = ("method", "seed", "1-hop WD", "2-hop WD", "full-chain WD", "ARI", "NMI")


def matrix_rows(records):
    """One CSV row per run plus mean/std aggregate rows per variant."""
    rows = []
    for rec in sorted(records, key=lambda r: (r.variant, r.seed)):
        rep = rec.report or EvalReport()
        rows.append(
            {
                "method": rec.variant,
                "seed": rec.seed,
                "1-hop WD": rep.wd1,
                "2-hop WD": rep.wd2,
                "full-chain WD": rep.wd_fc,
                "ARI": rep.seg_ari,
                "NMI": rep.seg_nmi,
            }
        )
    by_variant = {}
    for row in rows:
        by_variant.setdefault(row["method"], []).append(row)
    agg = []
    for variant in sorted(by_variant):
        group = by_variant[variant]
        mean_row = {"method": f"{variant} (mean)", "seed": ""}
        std_row = {"method": f"{variant} (std)", "seed": ""}
        for col in ("1-hop WD", "2-hop WD", "full-chain WD", "ARI", "NMI"):
            vals = [r[col] for r in group if r[col] is not None]
            mean_row[col] = float(np.mean(vals)) if vals else None
            std_row[col] = float(np.std(vals)) if vals else None
        agg.append(mean_row)
        agg.append(std_row)
    return rows + agg


def dim_sweep(base_cfg_fn, dims, variants, out_dir="runs", seed=0):
    """Mesh benchmark across ambient dimensions: per (D, variant) held-out
    WD, training WD, all-marginal WD, and surface deviation."""
    rows = []
    records = []
    for D in dims:
        for variant in variants:
            cfg = base_cfg_fn(variant=variant, embed_dim=D, seed=seed)
            rec = run_experiment(cfg, out_dir=out_dir)
            records.append(rec)
            rep = rec.report
            rows.append(
                {
                    "dim": D,
                    "method": variant,
                    "held_out_wd": rep.held_out_wd,
                    "training_wd": rep.training_wd,
                    "all_wd": rep.all_wd,
                    "surface_dev": rep.surface_dev,
                }
            )
    return rows, records
