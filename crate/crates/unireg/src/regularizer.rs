//! Adversarial uniformity regularization: a discriminator is trained to
//! tell prior samples from embeddings, and the task model is penalized for
//! embeddings the discriminator can identify. Training alternates one or
//! more discriminator ascent steps with one combined task step.

use crate::error::{Result, UniregError};
use crate::nn::{Mlp, MlpSpec, Optimizer, ParamRole, ParameterStore};
use crate::priors::{sample_prior, PriorSpec};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Epsilon used to clamp discriminator outputs before taking logs, so exact
/// 0 or 1 outputs (a saturated or perfect discriminator) stay finite.
pub const LOG_EPS: f64 = 1e-12;

/// Which generator-side objective the task model descends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorLossForm {
    /// `mean(log(1 - D(z)))`: the mirror of the discriminator's embedding
    /// term. Gradients fade as the discriminator wins.
    Saturating,
    /// `mean(-log D(z))`: stays steep when the discriminator wins.
    NonSaturating,
}

/// Hyperparameters of the adversarial regularizer.
#[derive(Debug, Clone)]
pub struct RegularizerConfig {
    /// Weight of the uniformity term in the combined loss. Zero disables
    /// the regularizer entirely (no discriminator updates, no prior draws).
    pub gamma: f64,
    /// Target latent distribution the embeddings are matched to.
    pub prior: PriorSpec,
    /// Adam learning rate for the discriminator.
    pub disc_lr: f64,
    /// Discriminator ascent steps per task step.
    pub disc_updates_per_task_update: usize,
    pub generator_loss_form: GeneratorLossForm,
}

impl RegularizerConfig {
    /// Defaults for classification-style tasks.
    pub fn new(prior: PriorSpec) -> RegularizerConfig {
        RegularizerConfig {
            gamma: 0.1,
            prior,
            disc_lr: 1e-5,
            disc_updates_per_task_update: 1,
            generator_loss_form: GeneratorLossForm::Saturating,
        }
    }

    /// Defaults for metric-learning tasks, which tolerate a stronger pull
    /// toward the prior.
    pub fn metric_learning(prior: PriorSpec) -> RegularizerConfig {
        RegularizerConfig { gamma: 0.4, ..RegularizerConfig::new(prior) }
    }

    fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(UniregError::Config(format!(
                "gamma must be finite and non-negative, got {}",
                self.gamma
            )));
        }
        if !(self.disc_lr > 0.0) || !self.disc_lr.is_finite() {
            return Err(UniregError::Config(format!(
                "disc_lr must be positive, got {}",
                self.disc_lr
            )));
        }
        if self.disc_updates_per_task_update == 0 {
            return Err(UniregError::Config(
                "disc_updates_per_task_update must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

fn check_unit_interval(tape: &Tape, d: Var, what: &str) -> Result<()> {
    let values = tape.value(d);
    if values.is_empty() {
        return Err(UniregError::Contract(format!("{what}: empty discriminator output")));
    }
    for &v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(UniregError::Domain(format!(
                "{what}: discriminator output {v} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Discriminator objective, to be ascended:
/// `mean(log D(prior)) + mean(log(1 - D(embeddings)))`.
///
/// Maximized by a discriminator that outputs 1 on prior samples and 0 on
/// embeddings; when the two batches are indistinguishable the optimum is
/// D = 1/2 everywhere, where the objective equals `-2 ln 2`.
pub fn discriminator_loss(tape: &mut Tape, d_prior: Var, d_embed: Var) -> Result<Var> {
    check_unit_interval(tape, d_prior, "discriminator_loss (prior side)")?;
    check_unit_interval(tape, d_embed, "discriminator_loss (embedding side)")?;
    let log_p = tape.log_clamped(d_prior, LOG_EPS)?;
    let one = tape.constant(vec![1], vec![1.0])?;
    let flipped = tape.sub(one, d_embed)?;
    let log_e = tape.log_clamped(flipped, LOG_EPS)?;
    let mean_p = tape.mean(log_p, None)?;
    let mean_e = tape.mean(log_e, None)?;
    tape.add(mean_p, mean_e)
}

/// Generator-side uniformity objective over discriminator outputs on
/// embeddings, to be descended by the task model.
pub fn uniformity_loss(tape: &mut Tape, d_embed: Var, form: GeneratorLossForm) -> Result<Var> {
    check_unit_interval(tape, d_embed, "uniformity_loss")?;
    match form {
        GeneratorLossForm::Saturating => {
            let one = tape.constant(vec![1], vec![1.0])?;
            let flipped = tape.sub(one, d_embed)?;
            let log = tape.log_clamped(flipped, LOG_EPS)?;
            tape.mean(log, None)
        }
        GeneratorLossForm::NonSaturating => {
            let log = tape.log_clamped(d_embed, LOG_EPS)?;
            let mean = tape.mean(log, None)?;
            tape.neg(mean)
        }
    }
}

/// Result of one discriminator ascent step, measured on the training batch
/// before the update.
#[derive(Debug, Clone, Copy)]
pub struct DiscStepReport {
    pub loss: f64,
    /// Fraction of the batch classified correctly with threshold 1/2.
    pub accuracy: f64,
}

/// Losses observed in one combined step. The optional fields are `None`
/// when `gamma == 0`, where no adversarial work is done.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub task_loss: f64,
    pub uniformity_loss: Option<f64>,
    pub disc_loss: Option<f64>,
    pub disc_accuracy: Option<f64>,
}

/// Task graph handed back by a model-building closure: the scalar task loss
/// and the embedding batch the uniformity term attaches to.
#[derive(Debug, Clone, Copy)]
pub struct TaskGraph {
    pub task_loss: Var,
    pub embeddings: Var,
}

/// Whether each phase of a combined step left the other side's parameters
/// untouched (values bit-identical, no gradients accumulated).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IsolationEvidence {
    pub task_params_unchanged_by_disc_phase: bool,
    pub disc_params_unchanged_by_task_phase: bool,
}

impl IsolationEvidence {
    pub fn holds(&self) -> bool {
        self.task_params_unchanged_by_disc_phase && self.disc_params_unchanged_by_task_phase
    }
}

fn grads_absent(store: &ParameterStore) -> bool {
    store
        .iter()
        .all(|(_, t)| t.with_grad(|g| g.map_or(true, |g| g.iter().all(|&v| v == 0.0))))
}

/// Adversarial regularizer: owns the discriminator, its optimizer state,
/// and the alternating update schedule.
pub struct AdversarialRegularizer {
    config: RegularizerConfig,
    disc: Mlp,
    disc_params: ParameterStore,
    disc_opt: Optimizer,
    last_isolation: Option<IsolationEvidence>,
}

impl AdversarialRegularizer {
    /// Build a fresh discriminator for embeddings of the prior's dimension.
    pub fn new(config: RegularizerConfig, init_rng: &mut Rng) -> Result<AdversarialRegularizer> {
        config.validate()?;
        let spec = MlpSpec::discriminator(config.prior.dim);
        let mut disc_params = ParameterStore::new();
        let disc = Mlp::init(&mut disc_params, "", spec, init_rng)?;
        let disc_opt = Optimizer::adam(config.disc_lr, &disc_params);
        Ok(AdversarialRegularizer {
            config,
            disc,
            disc_params,
            disc_opt,
            last_isolation: None,
        })
    }

    pub fn config(&self) -> &RegularizerConfig {
        &self.config
    }

    pub fn disc_params(&self) -> &ParameterStore {
        &self.disc_params
    }

    /// Isolation evidence recorded by the most recent `combined_step`.
    pub fn last_isolation(&self) -> Option<IsolationEvidence> {
        self.last_isolation
    }

    /// Discriminator outputs on a batch, outside any tape.
    pub fn discriminate(&self, z: &Tensor) -> Result<Vec<f64>> {
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != self.config.prior.dim {
            return Err(UniregError::Dimension(format!(
                "discriminate expects [n, {}], got {:?}",
                self.config.prior.dim, shape
            )));
        }
        z.with_values(|values| self.disc.infer(&self.disc_params, values, shape[0]))
    }

    /// One discriminator ascent step against a detached embedding batch and
    /// a fresh prior batch of the same size.
    pub fn disc_step(&mut self, embeddings: &Tensor, prior_rng: &mut Rng) -> Result<DiscStepReport> {
        let shape = embeddings.shape();
        if shape.len() != 2 || shape[1] != self.config.prior.dim {
            return Err(UniregError::Dimension(format!(
                "disc_step expects embeddings [n, {}], got {:?}",
                self.config.prior.dim, shape
            )));
        }
        let m = shape[0];
        let prior = sample_prior(&self.config.prior, m, prior_rng)?;

        let mut tape = Tape::new();
        let z_prior = tape.constant_from(&prior);
        let z_embed = tape.constant_from(embeddings);
        let d_prior = self.disc.forward(&mut tape, &self.disc_params, z_prior, ParamRole::Trainable)?;
        let d_embed = self.disc.forward(&mut tape, &self.disc_params, z_embed, ParamRole::Trainable)?;
        let loss = discriminator_loss(&mut tape, d_prior, d_embed)?;
        let loss_value = tape.item(loss)?;
        let accuracy = {
            let correct = tape.value(d_prior).iter().filter(|&&v| v > 0.5).count()
                + tape.value(d_embed).iter().filter(|&&v| v < 0.5).count();
            correct as f64 / (2 * m) as f64
        };
        let objective = tape.neg(loss)?;
        tape.backward(objective)?;
        self.disc_opt.step(&self.disc_params)?;
        self.disc_params.zero_grads();
        Ok(DiscStepReport { loss: loss_value, accuracy })
    }

    /// Attach the uniformity term to a live task graph. The discriminator's
    /// weights enter as constants, so gradients reach only the embeddings.
    pub fn uniformity_term(&self, tape: &mut Tape, embeddings: Var) -> Result<Var> {
        let d = self.disc.forward(tape, &self.disc_params, embeddings, ParamRole::Frozen)?;
        uniformity_loss(tape, d, self.config.generator_loss_form)
    }

    /// One alternating update: `disc_updates_per_task_update` discriminator
    /// ascent steps (each against a fresh prior batch), then one task step
    /// on `task_loss + gamma * uniformity_loss`.
    ///
    /// `embed` produces the detached embedding batch for the discriminator
    /// phase; `build` rebuilds the live task graph. With `gamma == 0` both
    /// adversarial phases are skipped and neither `embed` nor `prior_rng`
    /// is touched, so the parameter trajectory is bit-identical to
    /// `baseline_step` with the same `build`.
    pub fn combined_step<E, B>(
        &mut self,
        task_params: &ParameterStore,
        task_opt: &mut Optimizer,
        embed: E,
        build: B,
        prior_rng: &mut Rng,
    ) -> Result<StepOutcome>
    where
        E: FnOnce() -> Result<Tensor>,
        B: FnOnce(&mut Tape) -> Result<TaskGraph>,
    {
        let gamma = self.config.gamma;
        let mut outcome = StepOutcome {
            task_loss: 0.0,
            uniformity_loss: None,
            disc_loss: None,
            disc_accuracy: None,
        };

        let task_params_unchanged_by_disc_phase = if gamma != 0.0 {
            let task_snapshot = task_params.snapshot();
            let detached = embed()?;
            let mut last = DiscStepReport { loss: 0.0, accuracy: 0.0 };
            for _ in 0..self.config.disc_updates_per_task_update {
                last = self.disc_step(&detached, prior_rng)?;
            }
            outcome.disc_loss = Some(last.loss);
            outcome.disc_accuracy = Some(last.accuracy);
            task_params.matches_snapshot(&task_snapshot) && grads_absent(task_params)
        } else {
            true
        };

        let disc_snapshot = self.disc_params.snapshot();
        let mut tape = Tape::new();
        let graph = build(&mut tape)?;
        let total = if gamma != 0.0 {
            let uniformity = self.uniformity_term(&mut tape, graph.embeddings)?;
            outcome.uniformity_loss = Some(tape.item(uniformity)?);
            let scaled = tape.scale(uniformity, gamma)?;
            tape.add(graph.task_loss, scaled)?
        } else {
            graph.task_loss
        };
        outcome.task_loss = tape.item(graph.task_loss)?;
        tape.backward(total)?;
        task_opt.step(task_params)?;
        task_params.zero_grads();

        let disc_params_unchanged_by_task_phase =
            self.disc_params.matches_snapshot(&disc_snapshot) && grads_absent(&self.disc_params);
        self.last_isolation = Some(IsolationEvidence {
            task_params_unchanged_by_disc_phase,
            disc_params_unchanged_by_task_phase,
        });
        Ok(outcome)
    }
}

/// One plain task step: build the graph, descend the task loss. The
/// unregularized counterpart of `combined_step`.
pub fn baseline_step<B>(
    task_params: &ParameterStore,
    task_opt: &mut Optimizer,
    build: B,
) -> Result<f64>
where
    B: FnOnce(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape)?;
    let value = tape.item(loss)?;
    tape.backward(loss)?;
    task_opt.step(task_params)?;
    task_params.zero_grads();
    Ok(value)
}

/// Run one discriminator phase and one task phase and report whether each
/// left the other side untouched. Both checks are made independently;
/// neither subsumes the other.
pub fn gradient_isolation_check<D, T>(
    task_params: &ParameterStore,
    disc_params: &ParameterStore,
    disc_phase: D,
    task_phase: T,
) -> Result<IsolationEvidence>
where
    D: FnOnce() -> Result<()>,
    T: FnOnce() -> Result<()>,
{
    let task_snapshot = task_params.snapshot();
    disc_phase()?;
    let task_params_unchanged_by_disc_phase =
        task_params.matches_snapshot(&task_snapshot) && grads_absent(task_params);

    let disc_snapshot = disc_params.snapshot();
    task_phase()?;
    let disc_params_unchanged_by_task_phase =
        disc_params.matches_snapshot(&disc_snapshot) && grads_absent(disc_params);

    Ok(IsolationEvidence {
        task_params_unchanged_by_disc_phase,
        disc_params_unchanged_by_task_phase,
    })
}
