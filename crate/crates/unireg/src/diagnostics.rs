//! Embedding diagnostics: distributional distance from the target cube
//! (KS statistic, occupancy, differential entropy), a trained domain probe,
//! and task-quality metrics (retrieval recall, clustering NMI, accuracy,
//! rank correlation).

use crate::error::{Result, UniregError};
use crate::nn::{Mlp, MlpSpec, Optimizer, ParamRole, ParameterStore};
use crate::regularizer::discriminator_loss;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

fn matrix_dims(z: &Tensor, what: &str) -> Result<(usize, usize)> {
    let shape = z.shape();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(UniregError::Dimension(format!(
            "{what} expects a non-empty [n, d] tensor, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1]))
}

/// Two-sided KS statistic of each coordinate against `U(low, high)`.
pub fn ks_per_dimension(z: &Tensor, low: f64, high: f64) -> Result<Vec<f64>> {
    if !(low < high) {
        return Err(UniregError::Config(format!(
            "ks needs low < high, got [{low}, {high}]"
        )));
    }
    let (n, d) = matrix_dims(z, "ks_per_dimension")?;
    let values = z.values();
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        let mut col: Vec<f64> = (0..n).map(|i| values[i * d + j]).collect();
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut stat = 0.0_f64;
        for (i, x) in col.iter().enumerate() {
            let cdf = ((x - low) / (high - low)).clamp(0.0, 1.0);
            // Both one-sided gaps: the empirical CDF exceeding the uniform
            // CDF, and the uniform CDF exceeding the empirical one.
            stat = stat.max((i + 1) as f64 / n as f64 - cdf);
            stat = stat.max(cdf - i as f64 / n as f64);
        }
        out.push(stat);
    }
    Ok(out)
}

/// Worst per-coordinate KS statistic against `U(low, high)`.
pub fn ks_uniformity(z: &Tensor, low: f64, high: f64) -> Result<f64> {
    Ok(ks_per_dimension(z, low, high)?.into_iter().fold(0.0, f64::max))
}

/// How much of a binned `[low, high]^d` cube the embeddings touch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancyReport {
    /// Occupied fraction: of all `bins^d` joint cells when that is at most
    /// a million, otherwise the mean occupied fraction of the `d` marginal
    /// histograms.
    pub fraction: f64,
    /// True when the joint histogram was used.
    pub joint: bool,
    /// Fraction of coordinates outside `[low, high]` (clamped for binning).
    pub out_of_cube: f64,
}

const MAX_JOINT_CELLS: f64 = 1e6;

pub fn hypercube_occupancy(
    z: &Tensor,
    low: f64,
    high: f64,
    bins: usize,
) -> Result<OccupancyReport> {
    if !(low < high) {
        return Err(UniregError::Config(format!(
            "occupancy needs low < high, got [{low}, {high}]"
        )));
    }
    if bins == 0 {
        return Err(UniregError::Config("occupancy needs at least one bin".into()));
    }
    let (n, d) = matrix_dims(z, "hypercube_occupancy")?;
    let values = z.values();
    let width = high - low;
    let mut outside = 0usize;
    let bin_of = |v: f64| -> usize {
        (((v - low) / width * bins as f64) as isize).clamp(0, bins as isize - 1) as usize
    };
    for &v in &values {
        if v < low || v > high {
            outside += 1;
        }
    }
    let out_of_cube = outside as f64 / values.len() as f64;

    let joint_cells = (bins as f64).powi(d as i32);
    if joint_cells <= MAX_JOINT_CELLS {
        let total = joint_cells as usize;
        let mut occupied = vec![false; total];
        for i in 0..n {
            let mut cell = 0usize;
            for j in 0..d {
                cell = cell * bins + bin_of(values[i * d + j]);
            }
            occupied[cell] = true;
        }
        let hit = occupied.iter().filter(|&&b| b).count();
        Ok(OccupancyReport { fraction: hit as f64 / total as f64, joint: true, out_of_cube })
    } else {
        let mut fraction_sum = 0.0;
        for j in 0..d {
            let mut occupied = vec![false; bins];
            for i in 0..n {
                occupied[bin_of(values[i * d + j])] = true;
            }
            let hit = occupied.iter().filter(|&&b| b).count();
            fraction_sum += hit as f64 / bins as f64;
        }
        Ok(OccupancyReport { fraction: fraction_sum / d as f64, joint: false, out_of_cube })
    }
}

/// Digamma at a positive integer: `psi(m) = -gamma + sum_{j<m} 1/j`.
fn digamma_integer(m: usize) -> f64 {
    const EULER_MASCHERONI: f64 = 0.577_215_664_901_532_9;
    let mut acc = -EULER_MASCHERONI;
    for j in 1..m {
        acc += 1.0 / j as f64;
    }
    acc
}

/// `ln` volume of the unit ball in `d` dimensions,
/// `ln(pi^{d/2} / Gamma(d/2 + 1))`, with the Gamma term evaluated exactly
/// by factorial or half-integer recursion.
fn ln_unit_ball_volume(d: usize) -> f64 {
    let ln_pi = std::f64::consts::PI.ln();
    let ln_gamma = if d % 2 == 0 {
        // Gamma(d/2 + 1) = (d/2)!
        (2..=d / 2).map(|j| (j as f64).ln()).sum::<f64>()
    } else {
        // Gamma(m + 1/2) = sqrt(pi) * prod_{j=1..m} (j - 1/2), m = (d+1)/2.
        let m = (d + 1) / 2;
        0.5 * ln_pi + (1..=m).map(|j| (j as f64 - 0.5).ln()).sum::<f64>()
    };
    d as f64 / 2.0 * ln_pi - ln_gamma
}

/// Distance floor for the entropy estimator: coincident points would
/// otherwise contribute `ln 0`.
const KNN_DISTANCE_FLOOR: f64 = 1e-12;

/// Kozachenko-Leonenko differential entropy estimate (natural log) from
/// k-th nearest-neighbor distances:
/// `psi(n) - psi(k) + ln V_d + (d/n) * sum_i ln eps_i`.
pub fn knn_entropy(z: &Tensor, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(UniregError::Config("knn entropy needs k >= 1".into()));
    }
    let (n, d) = matrix_dims(z, "knn_entropy")?;
    if n <= k {
        return Err(UniregError::Contract(format!(
            "knn entropy with k = {k} needs more than {k} points, got {n}"
        )));
    }
    let values = z.values();
    let mut ln_sum = 0.0;
    let mut sq = vec![0.0f64; n - 1];
    for i in 0..n {
        let row_i = &values[i * d..(i + 1) * d];
        let mut w = 0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let row_j = &values[j * d..(j + 1) * d];
            let mut acc = 0.0;
            for t in 0..d {
                let diff = row_i[t] - row_j[t];
                acc += diff * diff;
            }
            sq[w] = acc;
            w += 1;
        }
        let (_, kth, _) =
            sq.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
        ln_sum += kth.sqrt().max(KNN_DISTANCE_FLOOR).ln();
    }
    Ok(digamma_integer(n) - digamma_integer(k)
        + ln_unit_ball_volume(d)
        + d as f64 / n as f64 * ln_sum)
}

/// Training budget for the domain probe.
#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> ProbeConfig {
        ProbeConfig { steps: 300, batch: 128, lr: 1e-3 }
    }
}

fn rows_of(values: &[f64], d: usize, indices: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        out.extend_from_slice(&values[i * d..(i + 1) * d]);
    }
    out
}

/// Train a fresh two-hidden-layer probe to tell batch `a` from batch `b`
/// and report its balanced accuracy on a held-out half of each side.
/// 0.5 means the batches are indistinguishable to the probe.
pub fn probe_accuracy(a: &Tensor, b: &Tensor, config: &ProbeConfig, rng: &mut Rng) -> Result<f64> {
    let (n_a, d) = matrix_dims(a, "probe_accuracy")?;
    let (n_b, d_b) = matrix_dims(b, "probe_accuracy")?;
    if d != d_b {
        return Err(UniregError::Dimension(format!(
            "probe sides must share width, got {d} and {d_b}"
        )));
    }
    if n_a < 2 || n_b < 2 {
        return Err(UniregError::Contract(
            "probe needs at least 2 rows per side for a held-out split".into(),
        ));
    }
    if config.steps == 0 || config.batch == 0 || !(config.lr > 0.0) {
        return Err(UniregError::Config("probe needs positive steps, batch, lr".into()));
    }

    let mut params = ParameterStore::new();
    let probe = Mlp::init(&mut params, "", MlpSpec::discriminator(d), rng)?;
    let mut opt = Optimizer::adam(config.lr, &params);

    let split = |n: usize, rng: &mut Rng| -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        let test = idx.split_off(n / 2);
        (idx, test)
    };
    let (train_a, test_a) = split(n_a, rng);
    let (train_b, test_b) = split(n_b, rng);

    let values_a = a.values();
    let values_b = b.values();
    for _ in 0..config.steps {
        let pick = |pool: &[usize], rng: &mut Rng| -> Vec<usize> {
            (0..config.batch).map(|_| pool[rng.index(pool.len())]).collect()
        };
        let batch_a = rows_of(&values_a, d, &pick(&train_a, rng));
        let batch_b = rows_of(&values_b, d, &pick(&train_b, rng));
        let mut tape = Tape::new();
        let xa = tape.constant(vec![config.batch, d], batch_a)?;
        let xb = tape.constant(vec![config.batch, d], batch_b)?;
        let da = probe.forward(&mut tape, &params, xa, ParamRole::Trainable)?;
        let db = probe.forward(&mut tape, &params, xb, ParamRole::Trainable)?;
        let loss = discriminator_loss(&mut tape, da, db)?;
        let objective = tape.neg(loss)?;
        tape.backward(objective)?;
        opt.step(&params)?;
        params.zero_grads();
    }

    let side_accuracy = |values: &[f64], test: &[usize], positive: bool| -> Result<f64> {
        let inputs = rows_of(values, d, test);
        let out = probe.infer(&params, &inputs, test.len())?;
        let hits = out
            .iter()
            .filter(|&&v| if positive { v > 0.5 } else { v < 0.5 })
            .count();
        Ok(hits as f64 / test.len() as f64)
    };
    let acc_a = side_accuracy(&values_a, &test_a, true)?;
    let acc_b = side_accuracy(&values_b, &test_b, false)?;
    Ok((acc_a + acc_b) / 2.0)
}

/// Fraction of points whose nearest other point (ties broken toward the
/// lowest index) shares their label.
pub fn recall_at_1(z: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, d) = matrix_dims(z, "recall_at_1")?;
    if labels.len() != n {
        return Err(UniregError::Dimension(format!(
            "{n} rows but {} labels",
            labels.len()
        )));
    }
    if n < 2 {
        return Err(UniregError::Contract("recall needs at least 2 points".into()));
    }
    let values = z.values();
    let mut hits = 0usize;
    for i in 0..n {
        let row_i = &values[i * d..(i + 1) * d];
        let mut best = usize::MAX;
        let mut best_sq = f64::INFINITY;
        for j in 0..n {
            if j == i {
                continue;
            }
            let row_j = &values[j * d..(j + 1) * d];
            let mut acc = 0.0;
            for t in 0..d {
                let diff = row_i[t] - row_j[t];
                acc += diff * diff;
            }
            if acc < best_sq {
                best_sq = acc;
                best = j;
            }
        }
        if labels[best] == labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Fraction of positions where the two label sequences agree.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(UniregError::Dimension(format!(
            "accuracy needs equal non-empty label slices, got {} and {}",
            predicted.len(),
            truth.len()
        )));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Normalized mutual information between two labelings, normalized by the
/// arithmetic mean of the entropies. Two trivial (single-cluster)
/// labelings agree perfectly and score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(UniregError::Dimension(format!(
            "nmi needs equal non-empty label slices, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut joint = vec![0.0f64; ka * kb];
    let mut pa = vec![0.0f64; ka];
    let mut pb = vec![0.0f64; kb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * kb + y] += 1.0;
        pa[x] += 1.0;
        pb[y] += 1.0;
    }
    let entropy = |p: &[f64]| -> f64 {
        p.iter()
            .filter(|&&c| c > 0.0)
            .map(|&c| {
                let q = c / n;
                -q * q.ln()
            })
            .sum()
    };
    let ha = entropy(&pa);
    let hb = entropy(&pb);
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let c = joint[x * kb + y];
            if c > 0.0 {
                mi += c / n * ((c * n) / (pa[x] * pb[y])).ln();
            }
        }
    }
    Ok((mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0))
}

/// Lloyd's algorithm with k-means++ seeding; the best of `restarts`
/// restarts by within-cluster squared distance.
pub fn kmeans(z: &Tensor, k: usize, restarts: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let (n, d) = matrix_dims(z, "kmeans")?;
    if k == 0 || restarts == 0 {
        return Err(UniregError::Config("kmeans needs k >= 1 and restarts >= 1".into()));
    }
    if n < k {
        return Err(UniregError::Contract(format!(
            "kmeans with k = {k} needs at least {k} points, got {n}"
        )));
    }
    let values = z.values();
    let sqdist = |i: usize, center: &[f64]| -> f64 {
        let row = &values[i * d..(i + 1) * d];
        row.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum()
    };

    let mut best_assign = vec![0usize; n];
    let mut best_inertia = f64::INFINITY;
    for _ in 0..restarts {
        // k-means++ seeding.
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
        let first = rng.index(n);
        centers.push(values[first * d..(first + 1) * d].to_vec());
        let mut nearest_sq: Vec<f64> = (0..n).map(|i| sqdist(i, &centers[0])).collect();
        while centers.len() < k {
            let total: f64 = nearest_sq.iter().sum();
            let next = if total > 0.0 {
                let mut target = rng.uniform() * total;
                let mut chosen = n - 1;
                for (i, &w) in nearest_sq.iter().enumerate() {
                    target -= w;
                    if target <= 0.0 {
                        chosen = i;
                        break;
                    }
                }
                chosen
            } else {
                rng.index(n)
            };
            centers.push(values[next * d..(next + 1) * d].to_vec());
            let c = centers.last().unwrap();
            for i in 0..n {
                nearest_sq[i] = nearest_sq[i].min(sqdist(i, c));
            }
        }

        let mut assign = vec![0usize; n];
        for _ in 0..100 {
            let mut changed = false;
            for i in 0..n {
                let (mut best_c, mut best_d) = (0usize, f64::INFINITY);
                for (c, center) in centers.iter().enumerate() {
                    let dist = sqdist(i, center);
                    if dist < best_d {
                        best_d = dist;
                        best_c = c;
                    }
                }
                if assign[i] != best_c {
                    assign[i] = best_c;
                    changed = true;
                }
            }
            let mut sums = vec![vec![0.0f64; d]; k];
            let mut counts = vec![0usize; k];
            for i in 0..n {
                counts[assign[i]] += 1;
                for t in 0..d {
                    sums[assign[i]][t] += values[i * d + t];
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    for t in 0..d {
                        centers[c][t] = sums[c][t] / counts[c] as f64;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = (0..n).map(|i| sqdist(i, &centers[assign[i]])).sum();
        if inertia < best_inertia {
            best_inertia = inertia;
            best_assign = assign;
        }
    }
    Ok(best_assign)
}

fn midranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with midranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(UniregError::Dimension(format!(
            "spearman needs two equal slices of length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
        return Err(UniregError::Domain("spearman inputs must be finite".into()));
    }
    let ra = midranks(a);
    let rb = midranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - mean;
        let db = rb[i] - mean;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(UniregError::Domain(
            "spearman is undefined when a side is constant".into(),
        ));
    }
    Ok(cov / (var_a * var_b).sqrt())
}
