"""End-to-end experiment orchestration and report files.

One run: load or synthesize a table, split it, normalize with bounds
fitted on the training partition, slice columns into silos, inject the
configured misalignment into the training views, optionally reorder each
silo's columns by correlation, pretrain the shared encoder federatedly,
then score the three probes (pooled reference, embeddings, local raw
reference) on the common test partition.

Outputs of a run, all under one directory:

* ``metrics.csv``   - dataset, setting, silo, model, precision, recall, f1
* ``summary.json``  - config echo, per-silo rows, mean F1 per model, deltas
* ``rounds.csv``    - round, silo, l_total, l_r, l_c, l_d, seconds
* ``manifest.json`` - per-silo feature counts, presence, classes, column order

``metrics.csv`` contains no timing and is byte-identical across repeated
runs of the same config and seed, serial or parallel.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentConfig
from .data import (
    SplitTable,
    Table,
    apply_minmax,
    fit_minmax,
    load_csv,
    synth_correlated_table,
    synth_nonlinear_table,
    synth_table,
    train_test_split,
)
from .augment import make_views
from .errors import ConfigError, DataError
from .federation import TrainConfig, run_cfl
from .losses import (BenchResult, LossConfig, bench_similarity,
                     contrastive_loss, distance_loss, recon_loss,
                     total_loss)
from .mlp import (
    backward_views,
    flatten,
    forward_traced,
    init_params,
    parameter_count,
    save_checkpoint,
    unflatten,
)
from .numerics import RngStream
from .probe import MetricsReport, ProbeConfig, evaluate_baselines, evaluate_silo
from .silos import (
    ImbalanceSpec,
    apply_column_order,
    apply_imbalance,
    covariance_deviation_experiment,
    pearson_reorder,
    silo_manifest,
    vertical_partition,
)

__all__ = [
    "DatasetSpec",
    "ExperimentConfig",
    "RunSummary",
    "desk_profile",
    "prepare_experiment",
    "run_experiment",
    "run_pearson_ablation",
    "run_loss_bench",
    "run_gradcheck",
    "run_covdev",
    "GradcheckResult",
]

SETTINGS = ("standard", "data_size", "class_size", "mixed")


def _check_keys(d: dict, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass(frozen=True)
class DatasetSpec:
    """Where the table comes from.

    ``kind="csv"``: read ``path`` with ``label_column``; ``rows`` (if set)
    subsamples that many rows uniformly at random before splitting.
    ``kind="synth"``: generate a table; ``style`` picks plain Gaussian
    blobs ("blobs"), the latent-cluster generator whose class structure
    is nonlinear in feature space ("nonlinear"), or the generator that
    hides most of the class signal in block correlation patterns
    ("correlated"). ``block_size`` and ``plain_every`` only apply to the
    correlated style.
    """

    kind: str = "synth"
    path: str | None = None
    label_column: str | None = None
    rows: int = 6000
    features: int = 105
    classes: int = 4
    style: str = "correlated"
    latent_dim: int = 10
    separation: float = 3.0
    latent_noise: float = 1.0
    mix_scale: float = 1.5
    obs_noise: float = 0.35
    margin: float = 4.0
    block_size: int = 7
    plain_every: int = 5
    name: str | None = None

    def __post_init__(self):
        if self.kind not in ("csv", "synth"):
            raise ConfigError(f"dataset kind must be csv or synth, got {self.kind!r}")
        if self.kind == "csv" and (not self.path or not self.label_column):
            raise ConfigError("csv dataset needs path and label_column")
        if self.style not in ("nonlinear", "blobs", "correlated"):
            raise ConfigError(f"unknown synth style {self.style!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        _check_keys(d, {f.name for f in dataclasses.fields(cls)}, "dataset")
        return cls(**d)

    def load(self, stream: RngStream) -> Table:
        if self.kind == "csv":
            t = load_csv(self.path, self.label_column, name=self.name)
            if self.rows and self.rows < t.m:
                g = stream.child(tag="subsample").generator()
                idx = np.sort(g.choice(t.m, size=self.rows, replace=False))
                t = t.take(idx)
            return t
        gen_stream = stream.child(tag="synth")
        if self.style == "blobs":
            t = synth_table(self.rows, self.features, self.classes, gen_stream,
                            margin=self.margin)
        elif self.style == "correlated":
            t = synth_correlated_table(
                self.rows, self.features, self.classes, gen_stream,
                latent_dim=self.latent_dim, separation=self.separation,
                latent_noise=self.latent_noise, mix_scale=self.mix_scale,
                obs_noise=self.obs_noise, block_size=self.block_size,
                plain_every=self.plain_every)
        else:
            t = synth_nonlinear_table(
                self.rows, self.features, self.classes, gen_stream,
                latent_dim=self.latent_dim, separation=self.separation,
                latent_noise=self.latent_noise, mix_scale=self.mix_scale,
                obs_noise=self.obs_noise)
        if self.name:
            return Table(self.name, t.feature_names, t.features, t.labels,
                         t.row_ids)
        return t


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of one run; serializes losslessly to JSON."""

    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    setting: str = "standard"
    n_silos: int = 5
    features_per_silo: int = 21
    encoder_size: int = 256
    embed_size: int = 256
    epochs: int = 10
    batch_size: int = 256
    temperature: float = 0.1
    learning_rate: float = 1e-3
    noise_level: float = 0.1
    mask_prob: float = 0.2
    client_drop_rate: float = 0.25
    data_drop_rate: float = 0.5
    class_drop_rate: float = 0.5
    labeled_fraction: float = 1.0
    split_rate: float = 0.3
    seed: int = 0
    pearson_reorder: bool = True
    similarity: str = "dot"
    optimizer: str = "adam"
    local_epochs_per_round: int = 1
    parallel: bool = False
    weighted_average: bool = False
    recon_weight: float = 1.0
    contrastive_weight: float = 1.0
    distance_weight: float = 1.0
    mask_mode: str = "zero"
    second_view_gaussian: bool = True
    probe_l2: float = 1e-4
    probe_max_iter: int = 500
    probe_tol: float = 1e-6

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.n_silos < 1:
            raise ConfigError("n_silos must be >= 1")
        if not 0.0 < self.split_rate < 1.0:
            raise ConfigError("split_rate must be in (0, 1)")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _check_keys(d, {f.name for f in dataclasses.fields(cls)}, "config")
        d = dict(d)
        if "dataset" in d:
            if not isinstance(d["dataset"], dict):
                raise ConfigError("dataset must be an object")
            d["dataset"] = DatasetSpec.from_dict(d["dataset"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    # derived sub-configs ------------------------------------------------

    def stream(self) -> RngStream:
        return RngStream(seed=self.seed)

    def imbalance_spec(self) -> ImbalanceSpec:
        return ImbalanceSpec(
            mode=self.setting,
            client_drop_rate=self.client_drop_rate,
            data_drop_rate=self.data_drop_rate,
            class_drop_rate=self.class_drop_rate,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            hidden=self.encoder_size,
            embed=self.embed_size,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            optimizer=self.optimizer,
            local_epochs_per_round=self.local_epochs_per_round,
            parallel=self.parallel,
            weighted_average=self.weighted_average,
            augment=AugmentConfig(
                noise_level=self.noise_level,
                mask_prob=self.mask_prob,
                second_view_gaussian=self.second_view_gaussian,
                mask_mode=self.mask_mode,
            ),
            loss=LossConfig(
                temperature=self.temperature,
                similarity=self.similarity,
                recon_weight=self.recon_weight,
                contrastive_weight=self.contrastive_weight,
                distance_weight=self.distance_weight,
            ),
        )

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(
            l2=self.probe_l2,
            max_iter=self.probe_max_iter,
            tol=self.probe_tol,
            labeled_fraction=self.labeled_fraction,
        )


def desk_profile(seed: int = 0, setting: str = "standard",
                 **overrides) -> ExperimentConfig:
    """Desk-scale default profile: 6,000 rows, 5 silos x 21 features,
    10 federated epochs, batch 256.

    The bundled synthetic table stands in for a tabular census-style CSV
    when no dataset file is provided; point ``dataset`` at a csv spec to
    run the same profile on real data.
    """
    cfg = ExperimentConfig(seed=seed, setting=setting)
    return cfg.replace(**overrides) if overrides else cfg


@dataclass(eq=False)
class PreparedExperiment:
    """Everything the training and evaluation stages consume."""

    table_name: str
    split: SplitTable
    train_views: list
    test_views: list
    manifest: dict


def prepare_experiment(cfg: ExperimentConfig) -> PreparedExperiment:
    """Load, split, normalize, slice, misalign, and reorder."""
    stream = cfg.stream()
    table = cfg.dataset.load(stream.child(tag="dataset"))
    needed = cfg.n_silos * cfg.features_per_silo
    if needed > table.d:
        raise ConfigError(
            f"{cfg.n_silos} silos x {cfg.features_per_silo} features need "
            f"{needed} columns, table {table.name!r} has {table.d}")

    split = train_test_split(table, cfg.split_rate, stream.child(tag="split"))
    scaler = fit_minmax(split.train)
    train_n = apply_minmax(split.train, scaler)
    test_n = apply_minmax(split.test, scaler)

    # keep only the columns actually assigned to silos so the pooled
    # reference probe sees exactly the federation's information
    keep = list(range(needed))
    def slice_cols(t: Table) -> Table:
        return Table(t.name, [t.feature_names[j] for j in keep],
                     t.features[:, keep], t.labels, t.row_ids)
    train_s = slice_cols(train_n)
    test_s = slice_cols(test_n)

    train_views = vertical_partition(train_s, cfg.n_silos, cfg.features_per_silo)
    test_views = vertical_partition(test_s, cfg.n_silos, cfg.features_per_silo)

    train_views = apply_imbalance(train_views, cfg.imbalance_spec(),
                                  stream.child(tag="imbalance"))
    for v in train_views:
        # absent rows must be exact zero vectors (the converse can fail
        # legitimately when a present row sits at every column minimum)
        if np.any(v.features[~v.present] != 0.0):
            raise DataError(f"silo {v.silo_id}: absent rows carry data")
    everywhere = np.logical_and.reduce([v.present for v in train_views])
    if not everywhere.any():
        raise DataError("no training row is present in every silo")

    if cfg.pearson_reorder:
        # fit the order on training rows, replay it on the test slice
        train_views = [pearson_reorder(tv) for tv in train_views]
        test_views = [
            apply_column_order(ev, rv.column_order)
            for rv, ev in zip(train_views, test_views)
        ]

    manifest = silo_manifest(train_views)
    manifest["setting"] = cfg.setting
    manifest["seed"] = cfg.seed
    manifest["dataset"] = table.name
    return PreparedExperiment(
        table_name=table.name,
        split=SplitTable(train=train_s, test=test_s, split_rate=cfg.split_rate),
        train_views=train_views,
        test_views=test_views,
        manifest=manifest,
    )


@dataclass(eq=False)
class RunSummary:
    """Aggregate view of one finished run."""

    config: dict
    dataset: str
    setting: str
    rows: list[dict]
    mean_f1: dict
    deltas: dict
    privacy: dict
    wall_seconds: float
    files: dict

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


MODEL_ORDER = {"Base1": 0, "CFL": 1, "Base2": 2}


def _write_metrics_csv(path: Path, dataset: str, setting: str,
                       report: MetricsReport) -> None:
    lines = ["dataset,setting,silo,model,precision,recall,f1"]
    ordered = sorted(report.rows, key=lambda r: (r.silo_id, MODEL_ORDER[r.model]))
    for r in ordered:
        lines.append(f"{dataset},{setting},{r.silo_id},{r.model},"
                     f"{r.precision!r},{r.recall!r},{r.f1!r}")
    path.write_text("\n".join(lines) + "\n")


def _write_rounds_csv(path: Path, logs) -> None:
    lines = ["round,silo,l_total,l_r,l_c,l_d,seconds"]
    for lg in sorted(logs, key=lambda l: (l.round, l.silo_id)):
        lines.append(f"{lg.round},{lg.silo_id},{lg.l_total!r},{lg.l_recon!r},"
                     f"{lg.l_contrastive!r},{lg.l_distance!r},{lg.seconds!r}")
    path.write_text("\n".join(lines) + "\n")


def run_experiment(cfg: ExperimentConfig, out_dir) -> RunSummary:
    """Execute one full run and write its report files."""
    t0 = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prep = prepare_experiment(cfg)
    stream = cfg.stream()

    result = run_cfl(prep.train_views, cfg.train_config(),
                     stream.child(tag="federate"))
    expected = parameter_count(cfg.features_per_silo, cfg.encoder_size,
                               cfg.embed_size)
    size_issues = [
        f"silo {s.silo_id} round {s.round}: payload {s.count} != {expected}"
        for s in result.message_stats if s.count != expected
    ]
    privacy = {
        "passed": not size_issues,
        "expected_count": expected,
        "n_messages": len(result.message_stats),
        "issues": size_issues,
    }

    probe_cfg = cfg.probe_config()
    probe_stream = stream.child(tag="probe")
    rows = evaluate_baselines(prep.split, prep.train_views, prep.test_views,
                              probe_cfg, probe_stream)
    for tv, ev in zip(prep.train_views, prep.test_views):
        rows.append(evaluate_silo(result.params, tv, ev, probe_cfg,
                                  probe_stream))
    report = MetricsReport(rows=rows)

    metrics_path = out / "metrics.csv"
    rounds_path = out / "rounds.csv"
    manifest_path = out / "manifest.json"
    summary_path = out / "summary.json"
    checkpoint_path = out / "encoder.ckpt"

    _write_metrics_csv(metrics_path, prep.table_name, cfg.setting, report)
    _write_rounds_csv(rounds_path, result.logs)
    manifest_path.write_text(json.dumps(prep.manifest, indent=2, sort_keys=True))
    save_checkpoint(result.params, checkpoint_path)

    summary = RunSummary(
        config=cfg.to_dict(),
        dataset=prep.table_name,
        setting=cfg.setting,
        rows=[dataclasses.asdict(r) for r in report.rows],
        mean_f1={tag: report.mean_f1(tag) for tag in MODEL_ORDER},
        deltas=report.deltas(),
        privacy=privacy,
        wall_seconds=time.perf_counter() - t0,
        files={
            "metrics": str(metrics_path),
            "rounds": str(rounds_path),
            "manifest": str(manifest_path),
            "summary": str(summary_path),
            "checkpoint": str(checkpoint_path),
        },
    )
    summary_path.write_text(summary.to_json())
    return summary


def run_pearson_ablation(cfg: ExperimentConfig, out_dir) -> dict:
    """Run the identical config with and without column reordering.

    Both runs share the seed and every other knob; the comparison JSON
    lands in ``out_dir/ablation.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with_summary = run_experiment(cfg.replace(pearson_reorder=True),
                                  out / "with_reorder")
    without_summary = run_experiment(cfg.replace(pearson_reorder=False),
                                     out / "without_reorder")
    comparison = {
        "seed": cfg.seed,
        "setting": cfg.setting,
        "with_reorder": with_summary.mean_f1,
        "without_reorder": without_summary.mean_f1,
        "f1_gap_cfl": with_summary.mean_f1["CFL"] - without_summary.mean_f1["CFL"],
    }
    (out / "ablation.json").write_text(json.dumps(comparison, indent=2,
                                                  sort_keys=True))
    return comparison


def run_loss_bench(out_dir, embed_dim: int = 256, k: int = 256,
                   iters: int = 200, seed: int = 0,
                   dataset_tag: str = "random") -> BenchResult:
    """Time both similarity kernels and write one CSV row."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = bench_similarity(embed_dim, k, iters,
                           rng=RngStream(seed=seed, tag="bench"),
                           dataset_tag=dataset_tag)
    path = out / "bench.csv"
    header = "dataset,embed_dim,k,t_dot_s,t_cos_s,ratio"
    path.write_text(header + "\n" + res.csv_row() + "\n")
    return res


@dataclass(frozen=True)
class GradcheckResult:
    cases: tuple
    max_rel_err: float
    threshold: float
    passed: bool
    seconds: float


def _loss_for_weights(similarity: str, wr: float, wc: float, wd: float) -> LossConfig:
    return LossConfig(similarity=similarity, recon_weight=wr,
                      contrastive_weight=wc, distance_weight=wd)


def finite_difference_grads(loss_fn, flat: np.ndarray,
                            h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    out = np.zeros_like(flat)
    for i in range(flat.shape[0]):
        bump = flat.copy()
        bump[i] += h
        up = loss_fn(bump)
        bump[i] -= 2.0 * h
        down = loss_fn(bump)
        out[i] = (up - down) / (2.0 * h)
    return out


def run_gradcheck(seed: int = 0, d_in: int = 12, hidden: int = 32,
                  embed: int = 16, k: int = 8, h: float = 1e-5,
                  threshold: float = 1e-4, grad_hook=None) -> GradcheckResult:
    """Compare analytic parameter gradients against central differences.

    Covers each loss term in isolation plus the full objective, under both
    similarity kernels. ``grad_hook`` (test instrumentation) can perturb
    the analytic gradients to prove the check catches broken backprop.

    The six case losses are all weightings of four component losses, so
    a single sweep over the parameter vector evaluates the components at
    each perturbed point and every case gradient is composed from those
    shared evaluations. With unit weights the composed sums reproduce what
    ``total_loss`` would have returned bit for bit.
    """
    t0 = time.perf_counter()
    stream = RngStream(seed=seed, tag="gradcheck")
    params = init_params(d_in, hidden, embed, stream.child(tag="init"))
    g = stream.child(tag="data").generator()
    batch = g.random((k, d_in))
    aug = AugmentConfig()
    v1, v2 = make_views(batch, aug, stream.child(tag="views"))

    def components_at(flat_vec):
        p = unflatten(flat_vec, d_in, hidden, embed)
        t1 = forward_traced(p, v1)
        t2 = forward_traced(p, v2)
        l_r, _, _ = recon_loss(t1.reconstruction, t2.reconstruction, batch)
        l_cd, _, _ = contrastive_loss(t1.embedding, t2.embedding,
                                      similarity="dot")
        l_cc, _, _ = contrastive_loss(t1.embedding, t2.embedding,
                                      similarity="cosine")
        l_d, _, _ = distance_loss(t1.embedding, t2.embedding)
        return l_r, l_cd, l_cc, l_d

    flat0 = flatten(params)
    plus = np.zeros((flat0.size, 4))
    minus = np.zeros((flat0.size, 4))
    for i in range(flat0.size):
        probe = flat0.copy()
        probe[i] = flat0[i] + h
        plus[i] = components_at(probe)
        probe[i] = flat0[i] - h
        minus[i] = components_at(probe)

    def numeric_for(weights):
        wr, wc_dot, wc_cos, wd = weights
        tp = wr * plus[:, 0] + wc_dot * plus[:, 1] \
            + wc_cos * plus[:, 2] + wd * plus[:, 3]
        tm = wr * minus[:, 0] + wc_dot * minus[:, 1] \
            + wc_cos * minus[:, 2] + wd * minus[:, 3]
        return (tp - tm) / (2.0 * h)

    cases = [
        ("recon", _loss_for_weights("dot", 1.0, 0.0, 0.0), (1, 0, 0, 0)),
        ("contrastive-dot", _loss_for_weights("dot", 0.0, 1.0, 0.0),
         (0, 1, 0, 0)),
        ("contrastive-cosine", _loss_for_weights("cosine", 0.0, 1.0, 0.0),
         (0, 0, 1, 0)),
        ("distance", _loss_for_weights("dot", 0.0, 0.0, 1.0), (0, 0, 0, 1)),
        ("total-dot", _loss_for_weights("dot", 1.0, 1.0, 1.0), (1, 1, 0, 1)),
        ("total-cosine", _loss_for_weights("cosine", 1.0, 1.0, 1.0),
         (1, 0, 1, 1)),
    ]

    results = []
    worst = 0.0
    for name, loss_cfg, weights in cases:
        tr1 = forward_traced(params, v1)
        tr2 = forward_traced(params, v2)
        bd = total_loss(tr1.reconstruction, tr2.reconstruction,
                        tr1.embedding, tr2.embedding, batch, loss_cfg)
        analytic = flatten(backward_views(params, tr1, tr2, bd.d_embed1,
                                          bd.d_embed2, bd.d_recon1, bd.d_recon2))
        if grad_hook is not None:
            analytic = grad_hook(analytic)
        numeric = numeric_for(weights)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        rel = float(np.max(np.abs(analytic - numeric) / denom))
        results.append((name, rel))
        worst = max(worst, rel)

    return GradcheckResult(
        cases=tuple(results),
        max_rel_err=worst,
        threshold=threshold,
        passed=worst < threshold,
        seconds=time.perf_counter() - t0,
    )


def run_covdev(out_dir, m_silos: int = 50, delta_cap: float = 2.5,
               seeds: int = 20, rows_per_silo: int = 500, features: int = 8,
               drop_rate: float = 0.3, dirty_silos: int | None = 1,
               base_seed: int = 0) -> dict:
    """Covariance deviation series over several seeds, written as CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["seed,m_silos,deviation,bound"]
    sums = np.zeros(m_silos)
    for s in range(seeds):
        pts = covariance_deviation_experiment(
            m_silos, delta_cap, RngStream(seed=base_seed + s, tag="covdev"),
            rows_per_silo=rows_per_silo, features=features,
            drop_rate=drop_rate, dirty_silos=dirty_silos)
        for p in pts:
            lines.append(f"{base_seed + s},{p.m_silos},{p.deviation!r},{p.bound!r}")
            sums[p.m_silos - 1] += p.deviation
    (out / "covdev.csv").write_text("\n".join(lines) + "\n")
    means = (sums / seeds).tolist()
    return {"m_silos": m_silos, "seeds": seeds, "mean_deviation": means}
