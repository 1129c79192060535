//! Shared finite-difference gradient harness used by the gradcheck and
//! acceptance targets.

use unireg::nn::{HiddenActivation, Mlp, MlpSpec, OutputActivation, ParamRole, ParameterStore};
use unireg::regularizer::{discriminator_loss, uniformity_loss, GeneratorLossForm, LOG_EPS};
use unireg::rng::Rng;
use unireg::tape::{Tape, Var};
use unireg::tasks::{classification_loss, prototypical_loss};
use unireg::tensor::Tensor;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

/// Check every coordinate of every leaf against a central difference.
/// `build` must construct the same scalar graph each call, reading the
/// leaves' current values.
pub fn check_case(
    label: &str,
    leaves: &[&Tensor],
    cases: &mut usize,
    build: impl Fn(&mut Tape) -> unireg::Result<Var>,
) {
    for t in leaves {
        t.zero_grad();
    }
    let mut tape = Tape::new();
    let loss = build(&mut tape).unwrap_or_else(|e| panic!("{label}: {e}"));
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    for (ti, t) in leaves.iter().enumerate() {
        let original = t.values();
        for i in 0..original.len() {
            let eval_at = |v: f64| -> f64 {
                t.with_values_mut(|vals| vals[i] = v);
                let mut tape = Tape::new();
                let loss = build(&mut tape).unwrap();
                tape.item(loss).unwrap()
            };
            let plus = eval_at(original[i] + STEP);
            let minus = eval_at(original[i] - STEP);
            t.with_values_mut(|vals| vals[i] = original[i]);
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[ti][i];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            assert!(
                ((a - numeric) / denom).abs() < REL_TOL,
                "{label}: leaf {ti} coord {i}: analytic {a}, numeric {numeric}"
            );
        }
    }
    *cases += 1;
}

pub fn random_tensor(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Values bounded away from zero, for operations with a kink there.
fn off_kink_tensor(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            sign * rng.uniform_in(0.05, 1.5)
        })
        .collect();
    Tensor::param(shape, values).unwrap()
}

fn positive_tensor(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.uniform_in(0.1, 2.0)).collect()).unwrap()
}

/// Reduce an arbitrary-shape output to a scalar through fixed weights so
/// every output coordinate contributes to the checked gradient.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> unireg::Result<Var> {
    let w = tape.constant_from(weights);
    let prod = tape.mul(out, w)?;
    tape.sum(prod, None)
}

/// Finite-difference every differentiable tape operation on several random
/// instances. Returns the number of checked cases.
pub fn run_op_gradient_cases() -> usize {
    let mut rng = Rng::from_seed(41);
    let mut cases = 0usize;

    for instance in 0..5 {
        let seed_rng = &mut rng;
        let shape = vec![3 + instance % 2, 4];

        type UnaryOp = fn(&mut Tape, Var) -> unireg::Result<Var>;
        let smooth_unary: &[(&str, UnaryOp)] = &[
            ("tanh", |t, x| t.tanh(x)),
            ("sigmoid", |t, x| t.sigmoid(x)),
            ("exp", |t, x| t.exp(x)),
            ("neg", |t, x| t.neg(x)),
            ("square", |t, x| t.square(x)),
            ("scale", |t, x| t.scale(x, -1.7)),
        ];
        for (name, op) in smooth_unary {
            let x = random_tensor(shape.clone(), seed_rng);
            let w = random_tensor(shape.clone(), seed_rng);
            check_case(name, &[&x], &mut cases, |tape| {
                let xv = tape.leaf(&x);
                let out = op(tape, xv)?;
                weighted_sum(tape, out, &w)
            });
        }

        let x = off_kink_tensor(shape.clone(), seed_rng);
        let w = random_tensor(shape.clone(), seed_rng);
        check_case("relu", &[&x], &mut cases, |tape| {
            let xv = tape.leaf(&x);
            let out = tape.relu(xv)?;
            weighted_sum(tape, out, &w)
        });

        let x = positive_tensor(shape.clone(), seed_rng);
        let w = random_tensor(shape.clone(), seed_rng);
        check_case("log", &[&x], &mut cases, |tape| {
            let xv = tape.leaf(&x);
            let out = tape.log(xv)?;
            weighted_sum(tape, out, &w)
        });
        let x = positive_tensor(shape.clone(), seed_rng);
        let w = random_tensor(shape.clone(), seed_rng);
        check_case("log_clamped", &[&x], &mut cases, |tape| {
            let xv = tape.leaf(&x);
            let out = tape.log_clamped(xv, LOG_EPS)?;
            weighted_sum(tape, out, &w)
        });

        type BinaryOp = fn(&mut Tape, Var, Var) -> unireg::Result<Var>;
        let binary: &[(&str, BinaryOp)] = &[
            ("add", |t, a, b| t.add(a, b)),
            ("sub", |t, a, b| t.sub(a, b)),
            ("mul", |t, a, b| t.mul(a, b)),
        ];
        for (name, op) in binary {
            let a = random_tensor(shape.clone(), seed_rng);
            let b = random_tensor(shape.clone(), seed_rng);
            let w = random_tensor(shape.clone(), seed_rng);
            check_case(name, &[&a, &b], &mut cases, |tape| {
                let av = tape.leaf(&a);
                let bv = tape.leaf(&b);
                let out = op(tape, av, bv)?;
                weighted_sum(tape, out, &w)
            });
        }

        // Scalar broadcast on the right operand.
        let a = random_tensor(shape.clone(), seed_rng);
        let s = random_tensor(vec![1], seed_rng);
        let w = random_tensor(shape.clone(), seed_rng);
        check_case("mul_scalar_broadcast", &[&a, &s], &mut cases, |tape| {
            let av = tape.leaf(&a);
            let sv = tape.leaf(&s);
            let out = tape.mul(av, sv)?;
            weighted_sum(tape, out, &w)
        });

        let a = random_tensor(vec![3, 4], seed_rng);
        let b = random_tensor(vec![4, 2], seed_rng);
        let w = random_tensor(vec![3, 2], seed_rng);
        check_case("matmul", &[&a, &b], &mut cases, |tape| {
            let av = tape.leaf(&a);
            let bv = tape.leaf(&b);
            let out = tape.matmul(av, bv)?;
            weighted_sum(tape, out, &w)
        });

        let x = random_tensor(vec![3, 4], seed_rng);
        let bias = random_tensor(vec![4], seed_rng);
        let w = random_tensor(vec![3, 4], seed_rng);
        check_case("add_bias", &[&x, &bias], &mut cases, |tape| {
            let xv = tape.leaf(&x);
            let bv = tape.leaf(&bias);
            let out = tape.add_bias(xv, bv)?;
            weighted_sum(tape, out, &w)
        });

        for axis in [None, Some(0), Some(1)] {
            let x = random_tensor(vec![3, 4], seed_rng);
            let out_shape = match axis {
                None => vec![1],
                Some(0) => vec![4],
                Some(1) => vec![3],
                _ => unreachable!(),
            };
            let w = random_tensor(out_shape.clone(), seed_rng);
            check_case(&format!("mean_axis_{axis:?}"), &[&x], &mut cases, |tape| {
                let xv = tape.leaf(&x);
                let out = tape.mean(xv, axis)?;
                weighted_sum(tape, out, &w)
            });
            let x = random_tensor(vec![3, 4], seed_rng);
            let w = random_tensor(out_shape, seed_rng);
            check_case(&format!("sum_axis_{axis:?}"), &[&x], &mut cases, |tape| {
                let xv = tape.leaf(&x);
                let out = tape.sum(xv, axis)?;
                weighted_sum(tape, out, &w)
            });
        }

        // Max over rows, with a clear per-row argmax margin.
        let mut values = vec![0.0; 12];
        for (r, row) in values.chunks_mut(4).enumerate() {
            for v in row.iter_mut() {
                *v = seed_rng.uniform_in(-1.0, 1.0);
            }
            let peak = seed_rng.index(4);
            row[peak] = 2.0 + r as f64;
        }
        let x = Tensor::param(vec![3, 4], values).unwrap();
        let w = random_tensor(vec![3], seed_rng);
        check_case("max_rows", &[&x], &mut cases, |tape| {
            let xv = tape.leaf(&x);
            let out = tape.max(xv, Some(1))?;
            weighted_sum(tape, out, &w)
        });

        let a = random_tensor(vec![2, 3], seed_rng);
        let b = random_tensor(vec![4, 3], seed_rng);
        let w = random_tensor(vec![6, 3], seed_rng);
        check_case("concat_rows", &[&a, &b], &mut cases, |tape| {
            let av = tape.leaf(&a);
            let bv = tape.leaf(&b);
            let out = tape.concat_rows(av, bv)?;
            weighted_sum(tape, out, &w)
        });

        let x = random_tensor(vec![5, 3], seed_rng);
        let groups = [0usize, 1, 0, 2, 1];
        let w = random_tensor(vec![3, 3], seed_rng);
        check_case("group_mean", &[&x], &mut cases, |tape| {
            let xv = tape.leaf(&x);
            let out = tape.group_mean(xv, &groups, 3)?;
            weighted_sum(tape, out, &w)
        });

        let q = random_tensor(vec![3, 4], seed_rng);
        let p = random_tensor(vec![2, 4], seed_rng);
        let w = random_tensor(vec![3, 2], seed_rng);
        check_case("pairwise_sqdist", &[&q, &p], &mut cases, |tape| {
            let qv = tape.leaf(&q);
            let pv = tape.leaf(&p);
            let out = tape.pairwise_sqdist(qv, pv)?;
            weighted_sum(tape, out, &w)
        });

        let logits = random_tensor(vec![4, 3], seed_rng);
        let labels = [0usize, 2, 1, 2];
        check_case("softmax_cross_entropy", &[&logits], &mut cases, |tape| {
            let lv = tape.leaf(&logits);
            tape.softmax_cross_entropy(lv, &labels)
        });

        // Contrastive loss: keep every pair distance away from the hinge
        // kink at `margin`.
        let margin = 1.0;
        let z = loop {
            let z = random_tensor(vec![4, 3], seed_rng);
            let clear = z.with_values(|v| {
                let mut ok = true;
                for i in 0..4 {
                    for j in (i + 1)..4 {
                        let d: f64 = (0..3)
                            .map(|k| (v[i * 3 + k] - v[j * 3 + k]).powi(2))
                            .sum::<f64>()
                            .sqrt();
                        ok &= (d - margin).abs() > 1e-3 && d > 1e-3;
                    }
                }
                ok
            });
            if clear {
                break z;
            }
        };
        let labels = [0usize, 1, 0, 1];
        check_case("contrastive", &[&z], &mut cases, |tape| {
            let zv = tape.leaf(&z);
            tape.contrastive_loss(zv, &labels, margin)
        });
    }
    cases
}

struct LossRig {
    store: ParameterStore,
    encoder: Mlp,
    head: Mlp,
    disc: Mlp,
    x: Tensor,
    prior: Tensor,
}

impl LossRig {
    fn new(rng: &mut Rng) -> LossRig {
        let mut store = ParameterStore::new();
        let encoder = Mlp::init(
            &mut store,
            "encoder.",
            MlpSpec::new(vec![5, 8, 4], HiddenActivation::Tanh, OutputActivation::None)
                .unwrap(),
            rng,
        )
        .unwrap();
        let head = Mlp::init(
            &mut store,
            "head.",
            MlpSpec::new(vec![4, 3], HiddenActivation::Tanh, OutputActivation::None).unwrap(),
            rng,
        )
        .unwrap();
        let disc = Mlp::init(
            &mut store,
            "disc.",
            MlpSpec::new(vec![4, 6, 1], HiddenActivation::Tanh, OutputActivation::Sigmoid)
                .unwrap(),
            rng,
        )
        .unwrap();
        let x = random_tensor(vec![6, 5], rng);
        let prior = random_tensor(vec![6, 4], rng);
        LossRig { store, encoder, head, disc, x, prior }
    }

    fn leaves(&self) -> Vec<&Tensor> {
        let mut leaves: Vec<&Tensor> = self.store.iter().map(|(_, t)| t).collect();
        leaves.push(&self.x);
        leaves
    }

    fn embed(&self, tape: &mut Tape) -> unireg::Result<Var> {
        let xv = tape.leaf(&self.x);
        self.encoder.forward(tape, &self.store, xv, ParamRole::Trainable)
    }
}

/// Finite-difference a full encoder(+discriminator) graph for each loss
/// the trainers use. Returns the number of checked cases.
pub fn run_loss_gradient_cases() -> usize {
    let mut rng = Rng::from_seed(97);
    let mut cases = 0usize;

    // Discriminator objective through discriminator and encoder.
    let rig = LossRig::new(&mut rng);
    check_case("discriminator_loss", &rig.leaves(), &mut cases, |tape| {
        let z = rig.embed(tape)?;
        let pv = tape.constant_from(&rig.prior);
        let d_prior = rig.disc.forward(tape, &rig.store, pv, ParamRole::Trainable)?;
        let d_embed = rig.disc.forward(tape, &rig.store, z, ParamRole::Trainable)?;
        discriminator_loss(tape, d_prior, d_embed)
    });

    for form in [GeneratorLossForm::Saturating, GeneratorLossForm::NonSaturating] {
        let rig = LossRig::new(&mut rng);
        check_case(&format!("uniformity_{form:?}"), &rig.leaves(), &mut cases, |tape| {
            let z = rig.embed(tape)?;
            let d_embed = rig.disc.forward(tape, &rig.store, z, ParamRole::Trainable)?;
            uniformity_loss(tape, d_embed, form)
        });
    }

    // Combined objective: task loss plus a weighted uniformity term.
    let rig = LossRig::new(&mut rng);
    let labels = [0usize, 1, 2, 0, 1, 2];
    check_case("combined_loss", &rig.leaves(), &mut cases, |tape| {
        let z = rig.embed(tape)?;
        let logits = rig.head.forward(tape, &rig.store, z, ParamRole::Trainable)?;
        let task = classification_loss(tape, logits, &labels)?;
        let d_embed = rig.disc.forward(tape, &rig.store, z, ParamRole::Trainable)?;
        let uniformity = uniformity_loss(tape, d_embed, GeneratorLossForm::Saturating)?;
        let weighted = tape.scale(uniformity, 0.3)?;
        tape.add(task, weighted)
    });

    let rig = LossRig::new(&mut rng);
    check_case("classification_loss", &rig.leaves(), &mut cases, |tape| {
        let z = rig.embed(tape)?;
        let logits = rig.head.forward(tape, &rig.store, z, ParamRole::Trainable)?;
        classification_loss(tape, logits, &labels)
    });

    let rig = LossRig::new(&mut rng);
    let support_labels = [0usize, 1, 2, 0, 1, 2];
    let query = random_tensor(vec![4, 5], &mut rng);
    let query_labels = [2usize, 0, 1, 1];
    let mut leaves = rig.leaves();
    leaves.push(&query);
    check_case("prototypical_loss", &leaves, &mut cases, |tape| {
        let zs = rig.embed(tape)?;
        let qv = tape.leaf(&query);
        let zq = rig.encoder.forward(tape, &rig.store, qv, ParamRole::Trainable)?;
        prototypical_loss(tape, zs, &support_labels, zq, &query_labels, 3)
    });

    let rig = LossRig::new(&mut rng);
    let pair_labels = [0usize, 1, 0, 1, 0, 1];
    check_case("contrastive_loss", &rig.leaves(), &mut cases, |tape| {
        let z = rig.embed(tape)?;
        tape.contrastive_loss(z, &pair_labels, 2.5)
    });

    cases
}
