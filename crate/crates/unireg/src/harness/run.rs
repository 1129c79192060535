//! Experiment runners. Each run is fully determined by (config, seed):
//! named generator streams cover initialization, data order, prior draws,
//! and evaluation, so re-running a manifest reproduces the metrics file
//! byte for byte. Distribution diagnostics are always measured against the
//! unit cube `[-1, 1]^d` with 4 bins per axis and 1-NN entropy.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use crate::diagnostics::{
    accuracy, hypercube_occupancy, kmeans, knn_entropy, ks_uniformity, nmi, probe_accuracy,
    recall_at_1, spearman, ProbeConfig,
};
use crate::error::{Result, UniregError};
use crate::harness::config::{Config, Experiment};
use crate::harness::export::write_embedding_dump;
use crate::harness::manifest::{save_manifest, RunManifest, MANIFEST_FORMAT_VERSION};
use crate::harness::metrics::{MetricsRow, MetricsTable};
use crate::nn::{
    save_checkpoint, HiddenActivation, Mlp, MlpSpec, Optimizer, OutputActivation, ParamRole,
    ParameterStore,
};
use crate::priors::{prior_ladder, PriorKind, PriorSpec};
use crate::regularizer::{
    baseline_step, AdversarialRegularizer, GeneratorLossForm, RegularizerConfig, StepOutcome,
    TaskGraph,
};
use crate::rng::{Rng, Stream, RNG_ALGORITHM};
use crate::tape::Tape;
use crate::tasks::{
    augment_ood, classification_loss, contrastive_loss, load_idx_pair, make_blobs_task,
    prototypical_loss, sample_episode, AffineShift, ClassPool, LabeledBatch,
    BLOBS_MEANS_SCALE,
};
use crate::tensor::Tensor;

const DIAG_LOW: f64 = -1.0;
const DIAG_HIGH: f64 = 1.0;
const DIAG_BINS: usize = 4;
const KMEANS_RESTARTS: usize = 10;
const EVAL_EPISODES: usize = 30;

pub fn run_id(config: &Config, seed: u64) -> String {
    format!("{}_s{seed}", config.experiment().as_str())
}

struct Settings {
    steps: usize,
    batch_size: usize,
    eval_every: usize,
    eval_batch: usize,
    embed_dim: usize,
    hidden: usize,
    activation: HiddenActivation,
    output_activation: OutputActivation,
    encoder_lr: f64,
    gamma: f64,
    disc_lr: f64,
    disc_updates: usize,
    loss_form: GeneratorLossForm,
    prior: PriorSpec,
    probe_steps: usize,
    probe_final_only: bool,
}

impl Settings {
    fn from_config(config: &Config) -> Result<Settings> {
        let embed_dim = config.usize_of("embed_dim")?;
        let prior = match config.str_of("prior.kind")? {
            "uniform" => PriorSpec::uniform_hypercube(
                embed_dim,
                config.f64_of("prior.low")?,
                config.f64_of("prior.high")?,
            )?,
            _ => PriorSpec::isotropic_gaussian(
                embed_dim,
                config.f64_of("prior.mean")?,
                config.f64_of("prior.variance")?,
            )?,
        };
        Ok(Settings {
            steps: config.usize_of("steps")?,
            batch_size: config.usize_of("batch_size")?,
            eval_every: config.usize_of("eval_every")?,
            eval_batch: config.usize_of("eval_batch")?,
            embed_dim,
            hidden: config.usize_of("encoder.hidden")?,
            activation: match config.str_of("encoder.activation")? {
                "tanh" => HiddenActivation::Tanh,
                _ => HiddenActivation::Relu,
            },
            output_activation: match config.str_of("encoder.output_activation")? {
                "tanh" => OutputActivation::Tanh,
                "sigmoid" => OutputActivation::Sigmoid,
                _ => OutputActivation::None,
            },
            encoder_lr: config.f64_of("encoder.lr")?,
            gamma: config.f64_of("regularizer.gamma")?,
            disc_lr: config.f64_of("regularizer.disc_lr")?,
            disc_updates: config.usize_of("regularizer.disc_updates")?,
            loss_form: match config.str_of("regularizer.loss_form")? {
                "non_saturating" => GeneratorLossForm::NonSaturating,
                _ => GeneratorLossForm::Saturating,
            },
            prior,
            probe_steps: config.usize_of("probe.steps")?,
            probe_final_only: config.bool_of("probe.final_only")?,
        })
    }

    fn is_eval_step(&self, step: usize) -> bool {
        step == self.steps || (self.eval_every > 0 && step % self.eval_every == 0)
    }

    fn probe_config(&self) -> ProbeConfig {
        ProbeConfig { steps: self.probe_steps, ..ProbeConfig::default() }
    }

    /// The adversarial regularizer for this run, or `None` when `gamma` is
    /// zero: a zero-weight run is normalized to plain task training.
    fn build_regularizer(&self, disc_init: &mut Rng) -> Result<Option<AdversarialRegularizer>> {
        if self.gamma == 0.0 {
            return Ok(None);
        }
        let config = RegularizerConfig {
            gamma: self.gamma,
            prior: self.prior,
            disc_lr: self.disc_lr,
            disc_updates_per_task_update: self.disc_updates,
            generator_loss_form: self.loss_form,
        };
        Ok(Some(AdversarialRegularizer::new(config, disc_init)?))
    }
}

struct Model {
    encoder: Mlp,
    head: Option<Mlp>,
    params: ParameterStore,
    embed_dim: usize,
}

impl Model {
    fn build(
        settings: &Settings,
        input_dim: usize,
        n_classes: Option<usize>,
        init: &mut Rng,
    ) -> Result<(Model, Optimizer)> {
        let enc_spec = MlpSpec::new(
            vec![input_dim, settings.hidden, settings.embed_dim],
            settings.activation,
            settings.output_activation,
        )?;
        let mut params = ParameterStore::new();
        let encoder = Mlp::init(&mut params, "encoder.", enc_spec, init)?;
        let head = match n_classes {
            Some(c) => {
                let spec = MlpSpec::new(
                    vec![settings.embed_dim, c],
                    HiddenActivation::Relu,
                    OutputActivation::None,
                )?;
                Some(Mlp::init(&mut params, "head.", spec, init)?)
            }
            None => None,
        };
        let opt = Optimizer::adam(settings.encoder_lr, &params);
        Ok((Model { encoder, head, params, embed_dim: settings.embed_dim }, opt))
    }

    fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.shape()[0];
        let out = x.with_values(|v| self.encoder.infer(&self.params, v, n))?;
        Tensor::new(vec![n, self.embed_dim], out)
    }

    fn predict(&self, x: &Tensor, n_classes: usize) -> Result<Vec<usize>> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| UniregError::Contract("model has no classification head".into()))?;
        let z = self.embed(x)?;
        let n = z.shape()[0];
        let logits = z.with_values(|v| head.infer(&self.params, v, n))?;
        Ok(logits
            .chunks(n_classes)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }
}

fn baseline_outcome(loss: f64) -> StepOutcome {
    StepOutcome { task_loss: loss, uniformity_loss: None, disc_loss: None, disc_accuracy: None }
}

/// One training step of encoder + head on a labeled batch, regularized
/// when a regularizer is present.
fn classification_step(
    model: &Model,
    opt: &mut Optimizer,
    reg: Option<&mut AdversarialRegularizer>,
    batch: &LabeledBatch,
    prior_rng: &mut Rng,
) -> Result<StepOutcome> {
    let head = model
        .head
        .as_ref()
        .ok_or_else(|| UniregError::Contract("classification needs a head".into()))?;
    let build = |tape: &mut Tape| -> Result<TaskGraph> {
        let x = tape.constant_from(&batch.x);
        let z = model.encoder.forward(tape, &model.params, x, ParamRole::Trainable)?;
        let logits = head.forward(tape, &model.params, z, ParamRole::Trainable)?;
        let task_loss = classification_loss(tape, logits, &batch.labels)?;
        Ok(TaskGraph { task_loss, embeddings: z })
    };
    match reg {
        Some(reg) => reg.combined_step(
            &model.params,
            opt,
            || model.embed(&batch.x),
            build,
            prior_rng,
        ),
        None => {
            let loss = baseline_step(&model.params, opt, |tape| Ok(build(tape)?.task_loss))?;
            Ok(baseline_outcome(loss))
        }
    }
}

/// KS, occupancy, and entropy of an embedding batch against the unit cube.
fn distribution_metrics(z: &Tensor) -> Result<(f64, f64, f64)> {
    let ks = ks_uniformity(z, DIAG_LOW, DIAG_HIGH)?;
    let occupancy = hypercube_occupancy(z, DIAG_LOW, DIAG_HIGH, DIAG_BINS)?.fraction;
    let entropy = knn_entropy(z, 1)?;
    Ok((ks, occupancy, entropy))
}

fn losses_into_row(row: &mut MetricsRow, outcome: &StepOutcome) {
    row.task_loss = Some(outcome.task_loss);
    row.uniformity_loss = outcome.uniformity_loss;
    row.disc_loss = outcome.disc_loss;
    row.disc_accuracy = outcome.disc_accuracy;
}

fn summary_of(table: &MetricsTable) -> BTreeMap<String, f64> {
    table
        .last()
        .map(|row| {
            row.filled()
                .into_iter()
                .map(|(name, v)| (name.to_string(), v))
                .collect()
        })
        .unwrap_or_default()
}

#[allow(clippy::too_many_arguments)]
fn write_run_outputs(
    out_dir: &Path,
    config: &Config,
    seed: u64,
    table: &MetricsTable,
    summary: BTreeMap<String, f64>,
    notes: BTreeMap<String, String>,
    params: Option<&ParameterStore>,
    embeddings: Option<&Tensor>,
    started: Instant,
) -> Result<RunManifest> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("metrics.csv"), table.to_csv())?;
    if let Some(params) = params {
        save_checkpoint(params, &out_dir.join("checkpoint.bin"))?;
    }
    if let Some(z) = embeddings {
        write_embedding_dump(&out_dir.join("embeddings.txt"), z)?;
    }
    let manifest = RunManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        run_id: run_id(config, seed),
        experiment: config.experiment().as_str().to_string(),
        seed,
        rng_algorithm: RNG_ALGORITHM.to_string(),
        config_echo: config.echo(),
        resolved_config: config.resolved(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        summary,
        notes,
    };
    save_manifest(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn gamma_note(settings: &Settings, notes: &mut BTreeMap<String, String>) {
    if settings.gamma == 0.0 {
        notes.insert(
            "gamma_zero".into(),
            "regularizer weight is zero: run executes plain task updates only".into(),
        );
    }
}

/// Dispatch a single run into `out_dir`.
pub fn run(config: &Config, seed: u64, out_dir: &Path) -> Result<RunManifest> {
    match config.experiment() {
        Experiment::Zsda => run_zsda(config, seed, out_dir),
        Experiment::PriorLadder => run_prior_ladder(config, seed, out_dir),
        Experiment::Episodic => run_episodic(config, seed, out_dir),
        Experiment::MetricLearning => run_metric_learning(config, seed, out_dir),
        Experiment::Ood => run_ood(config, seed, out_dir),
    }
}

struct ZsdaOutcome {
    table: MetricsTable,
    params: ParameterStore,
    final_embeddings: Tensor,
}

/// Shared trainer for the domain-shift classification recipe, with the
/// prior and regularizer weight optionally replaced (the ladder reuses
/// this for each of its cells).
fn zsda_core(
    config: &Config,
    seed: u64,
    prior_override: Option<PriorSpec>,
    gamma_override: Option<f64>,
) -> Result<ZsdaOutcome> {
    let mut settings = Settings::from_config(config)?;
    if let Some(prior) = prior_override {
        settings.prior = prior;
    }
    if let Some(gamma) = gamma_override {
        settings.gamma = gamma;
    }
    let classes = config.usize_of("task.classes")?;
    let input_dim = config.usize_of("task.input_dim")?;
    let shift = AffineShift::new(
        config.f64_of("task.shift_degrees")?.to_radians(),
        config.f64_of("task.shift_scale")?,
        config.f64_of("task.shift_translation")?,
    )?;

    let mut init = Rng::stream(seed, Stream::Init);
    let task = make_blobs_task(
        classes,
        input_dim,
        config.f64_of("task.class_scale")?,
        shift,
        &mut init,
    )?;
    let (model, mut opt) = Model::build(&settings, input_dim, Some(classes), &mut init)?;
    let mut reg = settings.build_regularizer(&mut Rng::stream(seed, Stream::DiscInit))?;

    let mut data = Rng::stream(seed, Stream::Data);
    let mut prior_rng = Rng::stream(seed, Stream::Prior);
    let mut eval = Rng::stream(seed, Stream::Eval);
    let mut table = MetricsTable::new();
    let mut final_embeddings = None;

    for step in 1..=settings.steps {
        let batch = task.sample_source(settings.batch_size, &mut data)?;
        let outcome =
            classification_step(&model, &mut opt, reg.as_mut(), &batch, &mut prior_rng)?;
        if settings.is_eval_step(step) {
            let is_final = step == settings.steps;
            let source = task.sample_source(settings.eval_batch, &mut eval)?;
            let target = task.sample_target(settings.eval_batch, &mut eval)?;
            let z_src = model.embed(&source.x)?;
            let mut row = MetricsRow { step, ..MetricsRow::default() };
            losses_into_row(&mut row, &outcome);
            row.eval_accuracy =
                Some(accuracy(&model.predict(&target.x, classes)?, &target.labels)?);
            row.recall_at_1 = Some(recall_at_1(&z_src, &source.labels)?);
            let clusters = kmeans(&z_src, classes, KMEANS_RESTARTS, &mut eval)?;
            row.nmi = Some(nmi(&clusters, &source.labels)?);
            let (ks, occupancy, entropy) = distribution_metrics(&z_src)?;
            row.max_ks = Some(ks);
            row.occupancy = Some(occupancy);
            row.entropy = Some(entropy);
            if is_final || !settings.probe_final_only {
                let z_tgt = model.embed(&target.x)?;
                row.probe_accuracy =
                    Some(probe_accuracy(&z_src, &z_tgt, &settings.probe_config(), &mut eval)?);
            }
            table.push(row)?;
            if is_final {
                final_embeddings = Some(z_src);
            }
        }
    }
    Ok(ZsdaOutcome {
        table,
        params: model.params,
        final_embeddings: final_embeddings
            .ok_or_else(|| UniregError::Contract("run finished without a final eval".into()))?,
    })
}

fn run_zsda(config: &Config, seed: u64, out_dir: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    let settings = Settings::from_config(config)?;
    let outcome = zsda_core(config, seed, None, None)?;
    let summary = summary_of(&outcome.table);
    let mut notes = BTreeMap::new();
    gamma_note(&settings, &mut notes);
    write_run_outputs(
        out_dir,
        config,
        seed,
        &outcome.table,
        summary,
        notes,
        Some(&outcome.params),
        Some(&outcome.final_embeddings),
        started,
    )
}

fn ladder_cell_label(spec: &PriorSpec) -> String {
    match spec.kind {
        PriorKind::UniformHypercube { .. } => "uniform".to_string(),
        PriorKind::IsotropicGaussian { variance_scale, .. } => {
            format!("gaussian_v{variance_scale}")
        }
    }
}

struct LadderRecord {
    cell: String,
    seed: u64,
    eval_accuracy: f64,
    entropy: f64,
    max_ks: f64,
}

/// The ladder sweep: for each seed, train a baseline cell plus one cell
/// per ladder prior, all sharing the seed's init/data/eval streams so the
/// comparison is paired.
fn run_prior_ladder(config: &Config, seed: u64, out_dir: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    let settings = Settings::from_config(config)?;
    let n_seeds = config.usize_of("ladder.seeds")?;
    if n_seeds == 0 {
        return Err(UniregError::Config("ladder.seeds must be at least 1".into()));
    }
    let ladder = prior_ladder(settings.embed_dim);
    let mut cells: Vec<(String, Option<PriorSpec>, f64)> =
        vec![("baseline".to_string(), None, 0.0)];
    for spec in &ladder {
        cells.push((ladder_cell_label(spec), Some(*spec), settings.gamma));
    }

    let mut records = Vec::new();
    for s in 0..n_seeds {
        let run_seed = seed + s as u64;
        for (label, prior, gamma) in &cells {
            let outcome = zsda_core(config, run_seed, *prior, Some(*gamma))?;
            let row = outcome
                .table
                .last()
                .ok_or_else(|| UniregError::Contract("ladder cell produced no rows".into()))?;
            let want = |v: Option<f64>, what: &str| {
                v.ok_or_else(|| {
                    UniregError::Contract(format!("ladder cell is missing {what}"))
                })
            };
            records.push(LadderRecord {
                cell: label.clone(),
                seed: run_seed,
                eval_accuracy: want(row.eval_accuracy, "eval_accuracy")?,
                entropy: want(row.entropy, "entropy")?,
                max_ks: want(row.max_ks, "max_ks")?,
            });
        }
    }

    std::fs::create_dir_all(out_dir)?;
    let metric_names = ["eval_accuracy", "entropy", "max_ks"];
    let value_of = |r: &LadderRecord, metric: &str| match metric {
        "eval_accuracy" => r.eval_accuracy,
        "entropy" => r.entropy,
        _ => r.max_ks,
    };

    let mut runs_csv = String::from("cell,seed,metric,value\n");
    for (label, _, _) in &cells {
        for r in records.iter().filter(|r| &r.cell == label) {
            for metric in metric_names {
                runs_csv.push_str(&format!("{},{},{},{}\n", r.cell, r.seed, metric, value_of(r, metric)));
            }
        }
    }
    std::fs::write(out_dir.join("ladder_runs.csv"), runs_csv)?;

    // Per-cell mean and sample standard deviation of target accuracy,
    // plus mean max_ks; one summary row per cell and statistic.
    let mut summary_csv = String::from("cell,metric,value\n");
    let mut cell_stats: BTreeMap<(String, &'static str), f64> = BTreeMap::new();
    for (label, _, _) in &cells {
        let cell_records: Vec<&LadderRecord> =
            records.iter().filter(|r| &r.cell == label).collect();
        let k = cell_records.len() as f64;
        let acc_mean =
            cell_records.iter().map(|r| r.eval_accuracy).sum::<f64>() / k;
        let acc_std = if cell_records.len() > 1 {
            (cell_records
                .iter()
                .map(|r| (r.eval_accuracy - acc_mean).powi(2))
                .sum::<f64>()
                / (k - 1.0))
                .sqrt()
        } else {
            0.0
        };
        let ks_mean = cell_records.iter().map(|r| r.max_ks).sum::<f64>() / k;
        for (metric, value) in
            [("accuracy_mean", acc_mean), ("accuracy_std", acc_std), ("max_ks_mean", ks_mean)]
        {
            summary_csv.push_str(&format!("{label},{metric},{value}\n"));
            cell_stats.insert((label.clone(), metric), value);
        }
    }
    std::fs::write(out_dir.join("ladder_summary.csv"), summary_csv)?;

    let stat =
        |label: &str, metric: &'static str| cell_stats[&(label.to_string(), metric)];
    let mut summary = BTreeMap::new();
    summary.insert("baseline_mean_accuracy".to_string(), stat("baseline", "accuracy_mean"));
    summary.insert("uniform_mean_accuracy".to_string(), stat("uniform", "accuracy_mean"));
    summary.insert(
        "uniform_advantage_pp".to_string(),
        100.0 * (stat("uniform", "accuracy_mean") - stat("baseline", "accuracy_mean")),
    );
    summary.insert("baseline_mean_max_ks".to_string(), stat("baseline", "max_ks_mean"));
    summary.insert("uniform_mean_max_ks".to_string(), stat("uniform", "max_ks_mean"));
    // Rank correlation between position along the ladder (toward the
    // uniform end) and that cell's mean accuracy.
    let positions: Vec<f64> = (1..cells.len()).map(|i| i as f64).collect();
    let cell_accuracy: Vec<f64> = cells[1..]
        .iter()
        .map(|(label, _, _)| stat(label, "accuracy_mean"))
        .collect();
    if let Ok(rho) = spearman(&positions, &cell_accuracy) {
        summary.insert("spearman_ladder_accuracy".to_string(), rho);
    }

    let mut notes = BTreeMap::new();
    notes.insert(
        "cells".to_string(),
        cells.iter().map(|(l, _, _)| l.as_str()).collect::<Vec<_>>().join(","),
    );
    notes.insert("seeds_per_cell".to_string(), n_seeds.to_string());
    write_run_outputs(
        out_dir, config, seed, &MetricsTable::new(), summary, notes, None, None, started,
    )
}

struct Pools {
    train: ClassPool,
    train_batch: LabeledBatch,
    eval_batch: LabeledBatch,
    n_train_classes: usize,
    n_eval_classes: usize,
}

/// Synthetic labeled pools for episodic and metric learning: Gaussian
/// blobs over `pool.classes` classes, split class-disjointly into train
/// and eval pools (two thirds / one third).
fn build_pools(config: &Config, init: &mut Rng) -> Result<Pools> {
    let classes = config.usize_of("pool.classes")?;
    let per_class = config.usize_of("pool.per_class")?;
    let input_dim = config.usize_of("pool.input_dim")?;
    let class_scale = config.f64_of("task.class_scale")?;
    if classes < 2 {
        return Err(UniregError::Config("pool.classes must be at least 2".into()));
    }
    let n_train_classes = classes - classes / 3;
    let n_eval_classes = classes - n_train_classes;
    if n_eval_classes == 0 {
        return Err(UniregError::Config("pool split left no eval classes".into()));
    }

    let means: Vec<f64> =
        (0..classes * input_dim).map(|_| BLOBS_MEANS_SCALE * init.normal()).collect();
    let fill = |class_range: std::ops::Range<usize>, init: &mut Rng| -> Result<LabeledBatch> {
        let n = class_range.len() * per_class;
        let mut values = Vec::with_capacity(n * input_dim);
        let mut labels = Vec::with_capacity(n);
        for (local, class) in class_range.enumerate() {
            for _ in 0..per_class {
                for j in 0..input_dim {
                    values
                        .push(means[class * input_dim + j] + class_scale * init.normal());
                }
                labels.push(local);
            }
        }
        LabeledBatch::new(Tensor::new(vec![n, input_dim], values)?, labels)
    };
    let train_batch = fill(0..n_train_classes, init)?;
    let eval_batch = fill(n_train_classes..classes, init)?;
    let train = ClassPool::new(&train_batch, n_train_classes)?;
    Ok(Pools { train, train_batch, eval_batch, n_train_classes, n_eval_classes })
}

fn pool_split_notes(pools: &Pools, notes: &mut BTreeMap<String, String>) {
    let n = pools.n_train_classes + pools.n_eval_classes;
    notes.insert("train_classes".to_string(), format!("0..{}", pools.n_train_classes));
    notes.insert("eval_classes".to_string(), format!("{}..{n}", pools.n_train_classes));
    notes.insert("class_split_disjoint".to_string(), "passed".to_string());
}

fn stack_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    let mut values = a.values();
    values.extend(b.values());
    Tensor::new(vec![sa[0] + sb[0], sa[1]], values)
}

/// Mean classification accuracy over fresh prototypical episodes, with
/// queries assigned to the nearest support-mean prototype.
fn episodic_accuracy(
    model: &Model,
    pool: &ClassPool,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    episodes: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for _ in 0..episodes {
        let ep = sample_episode(pool, n_way, k_shot, n_query, rng)?;
        let zs = model.embed(&ep.support)?;
        let zq = model.embed(&ep.query)?;
        let d = model.embed_dim;
        let mut prototypes = vec![0.0f64; n_way * d];
        zs.with_values(|values| {
            for (i, &way) in ep.support_labels.iter().enumerate() {
                for j in 0..d {
                    prototypes[way * d + j] += values[i * d + j] / k_shot as f64;
                }
            }
        });
        zq.with_values(|values| {
            for (i, &label) in ep.query_labels.iter().enumerate() {
                let row = &values[i * d..(i + 1) * d];
                let mut best = 0usize;
                let mut best_sq = f64::INFINITY;
                for way in 0..n_way {
                    let proto = &prototypes[way * d..(way + 1) * d];
                    let sq: f64 =
                        row.iter().zip(proto).map(|(a, b)| (a - b) * (a - b)).sum();
                    if sq < best_sq {
                        best_sq = sq;
                        best = way;
                    }
                }
                if best == label {
                    correct += 1;
                }
                total += 1;
            }
        });
    }
    Ok(correct as f64 / total as f64)
}

/// Shared evaluation for embedding-quality experiments: retrieval,
/// clustering, and distribution metrics on the eval pool's embeddings.
fn embedding_eval(
    model: &Model,
    eval_batch: &LabeledBatch,
    n_eval_classes: usize,
    row: &mut MetricsRow,
    eval: &mut Rng,
) -> Result<Tensor> {
    let z = model.embed(&eval_batch.x)?;
    row.recall_at_1 = Some(recall_at_1(&z, &eval_batch.labels)?);
    let clusters = kmeans(&z, n_eval_classes, KMEANS_RESTARTS, eval)?;
    row.nmi = Some(nmi(&clusters, &eval_batch.labels)?);
    let (ks, occupancy, entropy) = distribution_metrics(&z)?;
    row.max_ks = Some(ks);
    row.occupancy = Some(occupancy);
    row.entropy = Some(entropy);
    Ok(z)
}

fn run_episodic(config: &Config, seed: u64, out_dir: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    let settings = Settings::from_config(config)?;
    let n_way = config.usize_of("episode.n_way")?;
    let k_shot = config.usize_of("episode.k_shot")?;
    let n_query = config.usize_of("episode.n_query")?;

    let mut init = Rng::stream(seed, Stream::Init);
    let pools = build_pools(config, &mut init)?;
    if n_way > pools.n_train_classes || n_way > pools.n_eval_classes {
        return Err(UniregError::Config(format!(
            "episode.n_way = {n_way} exceeds a pool split ({} train / {} eval classes)",
            pools.n_train_classes, pools.n_eval_classes
        )));
    }
    let input_dim = config.usize_of("pool.input_dim")?;
    let (model, mut opt) = Model::build(&settings, input_dim, None, &mut init)?;
    let mut reg = settings.build_regularizer(&mut Rng::stream(seed, Stream::DiscInit))?;
    let eval_pool = ClassPool::new(&pools.eval_batch, pools.n_eval_classes)?;

    let mut data = Rng::stream(seed, Stream::Data);
    let mut prior_rng = Rng::stream(seed, Stream::Prior);
    let mut eval = Rng::stream(seed, Stream::Eval);
    let mut table = MetricsTable::new();
    let mut final_embeddings = None;

    for step in 1..=settings.steps {
        let ep = sample_episode(&pools.train, n_way, k_shot, n_query, &mut data)?;
        let build = |tape: &mut Tape| -> Result<TaskGraph> {
            let xs = tape.constant_from(&ep.support);
            let xq = tape.constant_from(&ep.query);
            let zs = model.encoder.forward(tape, &model.params, xs, ParamRole::Trainable)?;
            let zq = model.encoder.forward(tape, &model.params, xq, ParamRole::Trainable)?;
            let task_loss = prototypical_loss(
                tape,
                zs,
                &ep.support_labels,
                zq,
                &ep.query_labels,
                n_way,
            )?;
            let embeddings = tape.concat_rows(zs, zq)?;
            Ok(TaskGraph { task_loss, embeddings })
        };
        let outcome = match reg.as_mut() {
            Some(reg) => reg.combined_step(
                &model.params,
                &mut opt,
                || model.embed(&stack_rows(&ep.support, &ep.query)?),
                build,
                &mut prior_rng,
            )?,
            None => baseline_outcome(baseline_step(&model.params, &mut opt, |tape| {
                Ok(build(tape)?.task_loss)
            })?),
        };

        if settings.is_eval_step(step) {
            let mut row = MetricsRow { step, ..MetricsRow::default() };
            losses_into_row(&mut row, &outcome);
            row.eval_accuracy = Some(episodic_accuracy(
                &model,
                &eval_pool,
                n_way,
                k_shot,
                n_query,
                EVAL_EPISODES,
                &mut eval,
            )?);
            let z = embedding_eval(
                &model,
                &pools.eval_batch,
                pools.n_eval_classes,
                &mut row,
                &mut eval,
            )?;
            table.push(row)?;
            if step == settings.steps {
                final_embeddings = Some(z);
            }
        }
    }

    let summary = summary_of(&table);
    let mut notes = BTreeMap::new();
    pool_split_notes(&pools, &mut notes);
    gamma_note(&settings, &mut notes);
    write_run_outputs(
        out_dir,
        config,
        seed,
        &table,
        summary,
        notes,
        Some(&model.params),
        final_embeddings.as_ref(),
        started,
    )
}

fn run_metric_learning(config: &Config, seed: u64, out_dir: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    let settings = Settings::from_config(config)?;
    let margin = config.f64_of("metric.margin")?;

    let mut init = Rng::stream(seed, Stream::Init);
    let pools = build_pools(config, &mut init)?;
    let input_dim = config.usize_of("pool.input_dim")?;
    let (model, mut opt) = Model::build(&settings, input_dim, None, &mut init)?;
    let mut reg = settings.build_regularizer(&mut Rng::stream(seed, Stream::DiscInit))?;

    let mut data = Rng::stream(seed, Stream::Data);
    let mut prior_rng = Rng::stream(seed, Stream::Prior);
    let mut eval = Rng::stream(seed, Stream::Eval);
    let mut table = MetricsTable::new();
    let mut final_embeddings = None;

    let train_values = pools.train_batch.x.values();
    let n_train_rows = pools.train_batch.len();
    for step in 1..=settings.steps {
        let batch = {
            let mut values = Vec::with_capacity(settings.batch_size * input_dim);
            let mut labels = Vec::with_capacity(settings.batch_size);
            for _ in 0..settings.batch_size {
                let i = data.index(n_train_rows);
                values.extend_from_slice(&train_values[i * input_dim..(i + 1) * input_dim]);
                labels.push(pools.train_batch.labels[i]);
            }
            LabeledBatch::new(
                Tensor::new(vec![settings.batch_size, input_dim], values)?,
                labels,
            )?
        };
        let build = |tape: &mut Tape| -> Result<TaskGraph> {
            let x = tape.constant_from(&batch.x);
            let z = model.encoder.forward(tape, &model.params, x, ParamRole::Trainable)?;
            let task_loss = contrastive_loss(tape, z, &batch.labels, margin)?;
            Ok(TaskGraph { task_loss, embeddings: z })
        };
        let outcome = match reg.as_mut() {
            Some(reg) => reg.combined_step(
                &model.params,
                &mut opt,
                || model.embed(&batch.x),
                build,
                &mut prior_rng,
            )?,
            None => baseline_outcome(baseline_step(&model.params, &mut opt, |tape| {
                Ok(build(tape)?.task_loss)
            })?),
        };

        if settings.is_eval_step(step) {
            let mut row = MetricsRow { step, ..MetricsRow::default() };
            losses_into_row(&mut row, &outcome);
            let z = embedding_eval(
                &model,
                &pools.eval_batch,
                pools.n_eval_classes,
                &mut row,
                &mut eval,
            )?;
            table.push(row)?;
            if step == settings.steps {
                final_embeddings = Some(z);
            }
        }
    }

    let summary = summary_of(&table);
    let mut notes = BTreeMap::new();
    pool_split_notes(&pools, &mut notes);
    gamma_note(&settings, &mut notes);
    write_run_outputs(
        out_dir,
        config,
        seed,
        &table,
        summary,
        notes,
        Some(&model.params),
        final_embeddings.as_ref(),
        started,
    )
}

/// Synthetic image set: each class is a bright 3x3 patch at a
/// class-specific position over low background noise.
fn synthetic_images(
    classes: usize,
    per_class: usize,
    side: usize,
    init: &mut Rng,
) -> Result<LabeledBatch> {
    if side < 6 {
        return Err(UniregError::Config(format!(
            "ood.side must be at least 6, got {side}"
        )));
    }
    let span = side - 3;
    let mut values = Vec::with_capacity(classes * per_class * side * side);
    let mut labels = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let top = (class * 7) % span;
        let left = (class * 13 + 2) % span;
        for _ in 0..per_class {
            let mut img = vec![0.0f64; side * side];
            for v in img.iter_mut() {
                *v = 0.2 * init.uniform();
            }
            for r in top..top + 3 {
                for c in left..left + 3 {
                    img[r * side + c] = 1.0;
                }
            }
            values.extend(img);
            labels.push(class);
        }
    }
    LabeledBatch::new(
        Tensor::new(vec![classes * per_class, side * side], values)?,
        labels,
    )
}

fn run_ood(config: &Config, seed: u64, out_dir: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    let settings = Settings::from_config(config)?;
    let images_path = config.str_of("ood.images")?.to_string();
    let labels_path = config.str_of("ood.labels")?.to_string();

    let mut init = Rng::stream(seed, Stream::Init);
    let (all, source_note) = if images_path.is_empty() && labels_path.is_empty() {
        let batch = synthetic_images(
            config.usize_of("task.classes")?,
            config.usize_of("ood.per_class")?,
            config.usize_of("ood.side")?,
            &mut init,
        )?;
        (batch, "synthetic".to_string())
    } else if !images_path.is_empty() && !labels_path.is_empty() {
        let batch = load_idx_pair(Path::new(&images_path), Path::new(&labels_path))?;
        (batch, format!("idx:{images_path}"))
    } else {
        return Err(UniregError::Config(
            "ood.images and ood.labels must be set together".into(),
        ));
    };
    let n_classes = all.labels.iter().max().map(|m| m + 1).unwrap_or(0);
    let input_dim = all.x.shape()[1];

    // Row split: one quarter of the rows, spread evenly, held out for eval.
    let n = all.len();
    let eval_rows: Vec<usize> = (0..n).filter(|i| i % 4 == 3).collect();
    let train_rows: Vec<usize> = (0..n).filter(|i| i % 4 != 3).collect();
    let take = |rows: &[usize]| -> Result<LabeledBatch> {
        let mut values = Vec::with_capacity(rows.len() * input_dim);
        let mut labels = Vec::with_capacity(rows.len());
        all.x.with_values(|v| {
            for &i in rows {
                values.extend_from_slice(&v[i * input_dim..(i + 1) * input_dim]);
                labels.push(all.labels[i]);
            }
        });
        LabeledBatch::new(Tensor::new(vec![rows.len(), input_dim], values)?, labels)
    };
    let train_set = take(&train_rows)?;
    let eval_set = take(&eval_rows)?;

    let (model, mut opt) = Model::build(&settings, input_dim, Some(n_classes), &mut init)?;
    let mut reg = settings.build_regularizer(&mut Rng::stream(seed, Stream::DiscInit))?;

    let mut data = Rng::stream(seed, Stream::Data);
    let mut prior_rng = Rng::stream(seed, Stream::Prior);
    let mut eval = Rng::stream(seed, Stream::Eval);
    let mut table = MetricsTable::new();
    let mut final_embeddings = None;

    let train_values = train_set.x.values();
    for step in 1..=settings.steps {
        let batch = {
            let mut values = Vec::with_capacity(settings.batch_size * input_dim);
            let mut labels = Vec::with_capacity(settings.batch_size);
            for _ in 0..settings.batch_size {
                let i = data.index(train_set.len());
                values.extend_from_slice(&train_values[i * input_dim..(i + 1) * input_dim]);
                labels.push(train_set.labels[i]);
            }
            LabeledBatch::new(
                Tensor::new(vec![settings.batch_size, input_dim], values)?,
                labels,
            )?
        };
        let outcome =
            classification_step(&model, &mut opt, reg.as_mut(), &batch, &mut prior_rng)?;

        if settings.is_eval_step(step) {
            let is_final = step == settings.steps;
            let corrupted = augment_ood(&eval_set.x, &mut eval)?;
            let z_clean = model.embed(&eval_set.x)?;
            let mut row = MetricsRow { step, ..MetricsRow::default() };
            losses_into_row(&mut row, &outcome);
            row.eval_accuracy =
                Some(accuracy(&model.predict(&corrupted, n_classes)?, &eval_set.labels)?);
            row.recall_at_1 = Some(recall_at_1(&z_clean, &eval_set.labels)?);
            let clusters = kmeans(&z_clean, n_classes, KMEANS_RESTARTS, &mut eval)?;
            row.nmi = Some(nmi(&clusters, &eval_set.labels)?);
            let (ks, occupancy, entropy) = distribution_metrics(&z_clean)?;
            row.max_ks = Some(ks);
            row.occupancy = Some(occupancy);
            row.entropy = Some(entropy);
            if is_final || !settings.probe_final_only {
                let z_corrupted = model.embed(&corrupted)?;
                row.probe_accuracy = Some(probe_accuracy(
                    &z_clean,
                    &z_corrupted,
                    &settings.probe_config(),
                    &mut eval,
                )?);
            }
            table.push(row)?;
            if is_final {
                final_embeddings = Some(z_clean);
            }
        }
    }

    let summary = summary_of(&table);
    let mut notes = BTreeMap::new();
    notes.insert("image_source".to_string(), source_note);
    notes.insert(
        "row_split".to_string(),
        format!("{} train / {} eval rows", train_set.len(), eval_set.len()),
    );
    gamma_note(&settings, &mut notes);
    write_run_outputs(
        out_dir,
        config,
        seed,
        &table,
        summary,
        notes,
        Some(&model.params),
        final_embeddings.as_ref(),
        started,
    )
}

/// Run the config once per seed on a small thread pool; each run writes to
/// `out_dir/<run_id>/`. A `sweep_summary.csv` aggregates final metrics.
pub fn sweep(
    config: &Config,
    base_seed: u64,
    n_seeds: usize,
    out_dir: &Path,
) -> Result<Vec<RunManifest>> {
    if n_seeds == 0 {
        return Err(UniregError::Config("sweep needs at least one seed".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let queue: Mutex<VecDeque<u64>> =
        Mutex::new((0..n_seeds as u64).map(|i| base_seed + i).collect());
    let results: Mutex<BTreeMap<u64, Result<RunManifest>>> = Mutex::new(BTreeMap::new());
    let workers = std::thread::available_parallelism()
        .map(|p| p.get())
        .unwrap_or(1)
        .min(n_seeds);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let seed = { queue.lock().unwrap().pop_front() };
                let Some(seed) = seed else { break };
                let manifest = run(config, seed, &out_dir.join(run_id(config, seed)));
                results.lock().unwrap().insert(seed, manifest);
            });
        }
    });

    let mut manifests = Vec::with_capacity(n_seeds);
    for (_, result) in results.into_inner().unwrap() {
        manifests.push(result?);
    }
    let mut csv = String::from("run_id,metric,value\n");
    for manifest in &manifests {
        for (metric, value) in &manifest.summary {
            csv.push_str(&format!("{},{metric},{value}\n", manifest.run_id));
        }
    }
    std::fs::write(out_dir.join("sweep_summary.csv"), csv)?;
    Ok(manifests)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::manifest::load_manifest;

    fn tiny_zsda() -> Config {
        Config::parse(
            "experiment = zsda\nsteps = 8\nbatch_size = 16\neval_every = 4\n\
             eval_batch = 64\nprobe.steps = 20\ntask.classes = 3\ntask.input_dim = 6\n\
             encoder.hidden = 16\nembed_dim = 4\n",
        )
        .unwrap()
    }

    #[test]
    fn zsda_run_writes_all_outputs_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_zsda();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let manifest = run(&config, 3, &a).unwrap();
        run(&config, 3, &b).unwrap();

        assert_eq!(manifest.run_id, "zsda_s3");
        assert_eq!(manifest.rng_algorithm, RNG_ALGORITHM);
        assert!(manifest.summary.contains_key("eval_accuracy"));
        let csv_a = std::fs::read(a.join("metrics.csv")).unwrap();
        let csv_b = std::fs::read(b.join("metrics.csv")).unwrap();
        assert_eq!(csv_a, csv_b);
        assert!(a.join("checkpoint.bin").exists());
        assert!(a.join("embeddings.txt").exists());

        let loaded = load_manifest(&a.join("manifest.json")).unwrap();
        assert_eq!(loaded.config_echo, manifest.config_echo);

        let table = MetricsTable::parse_csv(&String::from_utf8(csv_a).unwrap()).unwrap();
        assert_eq!(table.rows().len(), 2);
        assert_eq!(table.rows()[0].step, 4);
        assert_eq!(table.rows()[1].step, 8);
        // Probe runs only on the final row by default.
        assert!(table.rows()[0].probe_accuracy.is_none());
        assert!(table.rows()[1].probe_accuracy.is_some());
        assert!(table.rows()[1].uniformity_loss.is_some());

        let c = dir.path().join("c");
        run(&config, 4, &c).unwrap();
        assert_ne!(std::fs::read(c.join("metrics.csv")).unwrap(), csv_b);
    }

    #[test]
    fn gamma_zero_runs_without_adversarial_columns() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_zsda();
        config.set("regularizer.gamma", "0").unwrap();
        let manifest = run(&config, 1, dir.path()).unwrap();
        assert!(manifest.notes.contains_key("gamma_zero"));
        let table = MetricsTable::parse_csv(
            &std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap(),
        )
        .unwrap();
        for row in table.rows() {
            assert!(row.uniformity_loss.is_none());
            assert!(row.disc_loss.is_none());
            assert!(row.disc_accuracy.is_none());
            assert!(row.task_loss.is_some());
        }
    }

    #[test]
    fn episodic_run_smoke() {
        let dir = tempfile::tempdir().unwrap();
        let config = Config::parse(
            "experiment = episodic\nsteps = 6\neval_every = 0\npool.classes = 6\n\
             pool.per_class = 12\npool.input_dim = 5\nepisode.n_way = 2\n\
             episode.k_shot = 2\nepisode.n_query = 3\nencoder.hidden = 12\nembed_dim = 3\n",
        )
        .unwrap();
        let manifest = run(&config, 5, dir.path()).unwrap();
        assert_eq!(manifest.notes["train_classes"], "0..4");
        assert_eq!(manifest.notes["eval_classes"], "4..6");
        assert!(manifest.summary.contains_key("eval_accuracy"));
        assert!(manifest.summary.contains_key("recall_at_1"));
        let table = MetricsTable::parse_csv(
            &std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap(),
        )
        .unwrap();
        assert_eq!(table.rows().len(), 1);
        assert_eq!(table.rows()[0].step, 6);
    }

    #[test]
    fn metric_learning_run_smoke() {
        let dir = tempfile::tempdir().unwrap();
        let config = Config::parse(
            "experiment = metric_learning\nsteps = 5\nbatch_size = 12\neval_every = 0\n\
             pool.classes = 4\npool.per_class = 10\npool.input_dim = 5\n\
             encoder.hidden = 12\nembed_dim = 3\n",
        )
        .unwrap();
        let manifest = run(&config, 2, dir.path()).unwrap();
        assert_eq!(manifest.resolved_config["regularizer.gamma"], "0.4");
        let table = MetricsTable::parse_csv(
            &std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap(),
        )
        .unwrap();
        assert!(table.rows()[0].eval_accuracy.is_none());
        assert!(table.rows()[0].recall_at_1.is_some());
    }

    #[test]
    fn ood_run_smoke() {
        let dir = tempfile::tempdir().unwrap();
        let config = Config::parse(
            "experiment = ood\nsteps = 5\nbatch_size = 16\neval_every = 0\n\
             task.classes = 3\nood.per_class = 16\nood.side = 8\n\
             encoder.hidden = 12\nembed_dim = 3\nprobe.steps = 10\n",
        )
        .unwrap();
        let manifest = run(&config, 6, dir.path()).unwrap();
        assert_eq!(manifest.notes["image_source"], "synthetic");
        assert!(manifest.summary.contains_key("eval_accuracy"));
        assert!(manifest.summary.contains_key("probe_accuracy"));
    }

    #[test]
    fn ladder_run_produces_cell_files() {
        let dir = tempfile::tempdir().unwrap();
        let config = Config::parse(
            "experiment = prior_ladder\nsteps = 4\nbatch_size = 8\neval_every = 0\n\
             eval_batch = 48\nladder.seeds = 1\ntask.classes = 3\ntask.input_dim = 5\n\
             encoder.hidden = 10\nembed_dim = 3\n",
        )
        .unwrap();
        let manifest = run(&config, 11, dir.path()).unwrap();
        let summary_csv =
            std::fs::read_to_string(dir.path().join("ladder_summary.csv")).unwrap();
        // Header plus 6 cells x 3 statistics.
        assert_eq!(summary_csv.lines().count(), 19, "{summary_csv}");
        assert!(summary_csv.contains("baseline,accuracy_mean,"));
        assert!(summary_csv.contains("gaussian_v0.1,"));
        assert!(summary_csv.contains("uniform,max_ks_mean,"));
        // One seed per cell: the standard deviation rows are zero.
        assert!(summary_csv.contains("baseline,accuracy_std,0\n"));
        let runs_csv = std::fs::read_to_string(dir.path().join("ladder_runs.csv")).unwrap();
        assert_eq!(runs_csv.lines().count(), 19);
        assert!(manifest.summary.contains_key("baseline_mean_accuracy"));
        assert!(manifest.summary.contains_key("uniform_advantage_pp"));
        assert!(manifest.summary.contains_key("uniform_mean_max_ks"));
    }

    #[test]
    fn sweep_runs_each_seed_and_summarizes() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_zsda();
        let manifests = sweep(&config, 10, 2, dir.path()).unwrap();
        assert_eq!(manifests.len(), 2);
        assert_eq!(manifests[0].run_id, "zsda_s10");
        assert_eq!(manifests[1].run_id, "zsda_s11");
        assert!(dir.path().join("zsda_s10/metrics.csv").exists());
        assert!(dir.path().join("zsda_s11/metrics.csv").exists());
        let csv = std::fs::read_to_string(dir.path().join("sweep_summary.csv")).unwrap();
        assert!(csv.starts_with("run_id,metric,value\n"));
        assert!(csv.contains("zsda_s10,eval_accuracy,"));
    }

    #[test]
    fn rerun_from_manifest_reproduces_metrics_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_zsda();
        let first = dir.path().join("first");
        let manifest = run(&config, 9, &first).unwrap();

        let rebuilt = manifest.config().unwrap();
        let second = dir.path().join("second");
        run(&rebuilt, manifest.seed, &second).unwrap();
        assert_eq!(
            std::fs::read(first.join("metrics.csv")).unwrap(),
            std::fs::read(second.join("metrics.csv")).unwrap()
        );
        assert_eq!(
            std::fs::read(first.join("checkpoint.bin")).unwrap(),
            std::fs::read(second.join("checkpoint.bin")).unwrap()
        );
    }
}
