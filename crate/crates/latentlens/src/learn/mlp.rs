//! Three-layer MLP (two rectifier hidden layers) trained with mini-batch
//! adaptive-moment gradient descent. Parameters live in one flat vector so
//! the analytic gradients can be checked entry-by-entry against finite
//! differences.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::SeedRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlpHead {
    /// Softmax posterior, cross-entropy loss on labels.
    Classifier,
    /// Linear outputs, mean-squared error on target vectors.
    Regressor,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MlpHyper {
    pub hidden: (usize, usize),
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for MlpHyper {
    fn default() -> Self {
        Self {
            hidden: (128, 64),
            batch_size: 128,
            learning_rate: 1e-3,
            epochs: 200,
        }
    }
}

pub enum TrainTargets {
    Labels(Vec<usize>),
    Vectors(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Copy)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Flat parameter layout: [W1 | b1 | W2 | b2 | W3 | b3], each W row-major
/// (output × input).
#[derive(Debug, Clone)]
pub struct MlpModel {
    dims: [usize; 4],
    head: MlpHead,
    params: Vec<f64>,
}

/// (W1, b1, W2, b2, W3, b3)
type LayerSlices<'a> = (&'a [f64], &'a [f64], &'a [f64], &'a [f64], &'a [f64], &'a [f64]);

struct Workspace {
    a1: Vec<f64>,
    a2: Vec<f64>,
    out: Vec<f64>,
    d_out: Vec<f64>,
    d_a2: Vec<f64>,
    d_a1: Vec<f64>,
}

impl Workspace {
    fn new(dims: &[usize; 4]) -> Self {
        Self {
            a1: vec![0.0; dims[1]],
            a2: vec![0.0; dims[2]],
            out: vec![0.0; dims[3]],
            d_out: vec![0.0; dims[3]],
            d_a2: vec![0.0; dims[2]],
            d_a1: vec![0.0; dims[1]],
        }
    }
}

fn dense(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * n_in..(i + 1) * n_in];
        let mut acc = b[i];
        for (wij, xj) in row.iter().zip(x) {
            acc += wij * xj;
        }
        *o = acc;
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

impl MlpModel {
    /// He-normal weights; hidden biases start at a small positive value so
    /// rectifier units are initially active (a dead layer would otherwise
    /// park downstream pre-activations exactly on the kink). Deterministic
    /// given the rng.
    pub fn init(input_dim: usize, hidden: (usize, usize), output_dim: usize, head: MlpHead, rng: &mut impl Rng) -> Self {
        let dims = [input_dim, hidden.0, hidden.1, output_dim];
        let mut params = vec![0.0; Self::param_count(&dims)];
        let mut cursor = 0;
        for l in 0..3 {
            let (n_out, n_in) = (dims[l + 1], dims[l]);
            let std = (2.0 / n_in as f64).sqrt();
            for p in &mut params[cursor..cursor + n_out * n_in] {
                *p = std * rng.sample::<f64, _>(StandardNormal);
            }
            cursor += n_out * n_in;
            if l < 2 {
                for p in &mut params[cursor..cursor + n_out] {
                    *p = 0.01;
                }
            }
            cursor += n_out;
        }
        Self { dims, head, params }
    }

    fn param_count(dims: &[usize; 4]) -> usize {
        (0..3).map(|l| dims[l + 1] * (dims[l] + 1)).sum()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, i: usize) -> f64 {
        self.params[i]
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        self.params[i] = v;
    }

    pub fn head(&self) -> MlpHead {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.dims[3]
    }

    /// (W1, b1, W2, b2, W3, b3) slices of the flat parameter vector.
    fn layers(&self) -> LayerSlices<'_> {
        let [d, h1, h2, c] = self.dims;
        let mut ofs = 0;
        let mut take = |n: usize| {
            let s = &self.params[ofs..ofs + n];
            ofs += n;
            s
        };
        let w1 = take(h1 * d);
        let b1 = take(h1);
        let w2 = take(h2 * h1);
        let b2 = take(h2);
        let w3 = take(c * h2);
        let b3 = take(c);
        (w1, b1, w2, b2, w3, b3)
    }

    fn forward_into(&self, x: &[f64], ws: &mut Workspace) {
        let (w1, b1, w2, b2, w3, b3) = self.layers();
        dense(w1, b1, x, &mut ws.a1);
        for v in &mut ws.a1 {
            *v = v.max(0.0);
        }
        dense(w2, b2, &ws.a1, &mut ws.a2);
        for v in &mut ws.a2 {
            *v = v.max(0.0);
        }
        dense(w3, b3, &ws.a2, &mut ws.out);
        if matches!(self.head, MlpHead::Classifier) {
            softmax_in_place(&mut ws.out);
        }
    }

    /// Head output: posterior probabilities for the classifier head, raw
    /// linear outputs for the regressor head.
    pub fn forward(&self, x: &DVector<f64>) -> Vec<f64> {
        let mut ws = Workspace::new(&self.dims);
        self.forward_into(x.as_slice(), &mut ws);
        ws.out.clone()
    }

    fn sample_loss(&self, ws: &Workspace, target: Target<'_>) -> f64 {
        match (self.head, target) {
            (MlpHead::Classifier, Target::Label(y)) => {
                let p = ws.out[y];
                // f64::max would silently swallow a NaN posterior here
                if p.is_finite() {
                    -p.max(1e-300).ln()
                } else {
                    f64::NAN
                }
            }
            (MlpHead::Regressor, Target::Vector(t)) => {
                0.5 * ws
                    .out
                    .iter()
                    .zip(t)
                    .map(|(o, t)| (o - t) * (o - t))
                    .sum::<f64>()
            }
            _ => unreachable!("head/target mismatch is rejected at training entry"),
        }
    }

    /// Mean loss over a set: cross-entropy (classifier) or ½‖o−t‖² (regressor).
    pub fn mean_loss(&self, inputs: &[&DVector<f64>], targets: &TrainTargets) -> f64 {
        let mut ws = Workspace::new(&self.dims);
        let mut total = 0.0;
        for (i, x) in inputs.iter().enumerate() {
            self.forward_into(x.as_slice(), &mut ws);
            total += self.sample_loss(&ws, targets.get(i));
        }
        total / inputs.len() as f64
    }

    /// Analytic gradient of [`Self::mean_loss`] in the flat layout.
    pub fn gradients(&self, inputs: &[&DVector<f64>], targets: &TrainTargets) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        let mut ws = Workspace::new(&self.dims);
        for (i, x) in inputs.iter().enumerate() {
            self.forward_into(x.as_slice(), &mut ws);
            self.accumulate_sample_grad(x.as_slice(), targets.get(i), &mut ws, &mut grad);
        }
        let scale = 1.0 / inputs.len() as f64;
        for g in &mut grad {
            *g *= scale;
        }
        grad
    }

    fn accumulate_sample_grad(&self, x: &[f64], target: Target<'_>, ws: &mut Workspace, grad: &mut [f64]) {
        let [d, h1, h2, c] = self.dims;
        // d loss / d logits
        match (self.head, target) {
            (MlpHead::Classifier, Target::Label(y)) => {
                for (k, g) in ws.d_out.iter_mut().enumerate() {
                    *g = ws.out[k] - if k == y { 1.0 } else { 0.0 };
                }
            }
            (MlpHead::Regressor, Target::Vector(t)) => {
                for (k, g) in ws.d_out.iter_mut().enumerate() {
                    *g = ws.out[k] - t[k];
                }
            }
            _ => unreachable!(),
        }
        let (_, _, w2, _, w3, _) = self.layers();
        let o1 = 0;
        let o_b1 = o1 + h1 * d;
        let o2 = o_b1 + h1;
        let o_b2 = o2 + h2 * h1;
        let o3 = o_b2 + h2;
        let o_b3 = o3 + c * h2;
        // layer 3
        for k in 0..c {
            let gk = ws.d_out[k];
            let row = &mut grad[o3 + k * h2..o3 + (k + 1) * h2];
            for (gw, a) in row.iter_mut().zip(&ws.a2) {
                *gw += gk * a;
            }
            grad[o_b3 + k] += gk;
        }
        for j in 0..h2 {
            let mut acc = 0.0;
            for k in 0..c {
                acc += w3[k * h2 + j] * ws.d_out[k];
            }
            ws.d_a2[j] = if ws.a2[j] > 0.0 { acc } else { 0.0 };
        }
        // layer 2
        for j in 0..h2 {
            let gj = ws.d_a2[j];
            if gj != 0.0 {
                let row = &mut grad[o2 + j * h1..o2 + (j + 1) * h1];
                for (gw, a) in row.iter_mut().zip(&ws.a1) {
                    *gw += gj * a;
                }
            }
            grad[o_b2 + j] += gj;
        }
        for j in 0..h1 {
            let mut acc = 0.0;
            for k in 0..h2 {
                acc += w2[k * h1 + j] * ws.d_a2[k];
            }
            ws.d_a1[j] = if ws.a1[j] > 0.0 { acc } else { 0.0 };
        }
        // layer 1
        for j in 0..h1 {
            let gj = ws.d_a1[j];
            if gj != 0.0 {
                let row = &mut grad[o1 + j * d..o1 + (j + 1) * d];
                for (gw, xi) in row.iter_mut().zip(x) {
                    *gw += gj * xi;
                }
            }
            grad[o_b1 + j] += gj;
        }
    }
}

enum Target<'a> {
    Label(usize),
    Vector(&'a [f64]),
}

impl TrainTargets {
    fn get(&self, i: usize) -> Target<'_> {
        match self {
            TrainTargets::Labels(l) => Target::Label(l[i]),
            TrainTargets::Vectors(v) => Target::Vector(&v[i]),
        }
    }

    fn len(&self) -> usize {
        match self {
            TrainTargets::Labels(l) => l.len(),
            TrainTargets::Vectors(v) => v.len(),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Mini-batch Adam on the given examples. Deterministic given the rng; the
/// input order does not matter because batches are drawn from rng-shuffled
/// positions of the (caller-sorted) example list.
pub fn fit_mlp(
    inputs: &[&DVector<f64>],
    targets: &TrainTargets,
    output_dim: usize,
    head: MlpHead,
    hyper: &MlpHyper,
    rng: &mut impl Rng,
) -> Result<(MlpModel, TrainReport)> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::Training {
            epoch: 0,
            reason: format!(
                "{} inputs vs {} targets",
                inputs.len(),
                targets.len()
            ),
        });
    }
    let input_dim = inputs[0].len();
    let mut model = MlpModel::init(input_dim, hyper.hidden, output_dim, head, rng);
    let initial_loss = model.mean_loss(inputs, targets);
    let mut final_loss = initial_loss;
    let n = inputs.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut m = vec![0.0; model.params.len()];
    let mut v = vec![0.0; model.params.len()];
    let mut step = 0u64;
    let mut ws = Workspace::new(&model.dims);
    let mut grad = vec![0.0; model.params.len()];
    for epoch in 0..hyper.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size.max(1)) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            for &i in batch {
                model.forward_into(inputs[i].as_slice(), &mut ws);
                batch_loss += model.sample_loss(&ws, targets.get(i));
                model.accumulate_sample_grad(inputs[i].as_slice(), targets.get(i), &mut ws, &mut grad);
            }
            let scale = 1.0 / batch.len() as f64;
            step += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
            for ((p, g), (mi, vi)) in model
                .params
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = g * scale;
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                *p -= hyper.learning_rate * (*mi / bc1) / ((*vi / bc2).sqrt() + ADAM_EPS);
            }
            epoch_loss += batch_loss;
        }
        epoch_loss /= n as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: format!("loss became {epoch_loss}"),
            });
        }
        final_loss = epoch_loss;
    }
    Ok((model, TrainReport { initial_loss, final_loss }))
}

/// Trains a latent model on the records' seeds: labels for the classifier
/// head, full posteriors for the regressor head. Records are canonicalized
/// by index first so the result is independent of input order.
pub fn train_mlp(
    records: &[&SeedRecord],
    head: MlpHead,
    hyper: &MlpHyper,
    rng: &mut impl Rng,
) -> Result<MlpModel> {
    train_mlp_with_report(records, head, hyper, rng).map(|(m, _)| m)
}

pub fn train_mlp_with_report(
    records: &[&SeedRecord],
    head: MlpHead,
    hyper: &MlpHyper,
    rng: &mut impl Rng,
) -> Result<(MlpModel, TrainReport)> {
    if records.is_empty() {
        return Err(Error::Training {
            epoch: 0,
            reason: "no training records".into(),
        });
    }
    let num_classes = records[0].posterior.probabilities().len();
    if records.len() < 10 * num_classes {
        return Err(Error::Training {
            epoch: 0,
            reason: format!(
                "need ≥ {} records for {num_classes} classes, got {}",
                10 * num_classes,
                records.len()
            ),
        });
    }
    let mut sorted: Vec<&SeedRecord> = records.to_vec();
    sorted.sort_by_key(|r| r.index);
    let inputs: Vec<&DVector<f64>> = sorted.iter().map(|r| &r.seed).collect();
    let targets = match head {
        MlpHead::Classifier => TrainTargets::Labels(sorted.iter().map(|r| r.label).collect()),
        MlpHead::Regressor => TrainTargets::Vectors(
            sorted
                .iter()
                .map(|r| r.posterior.probabilities().to_vec())
                .collect(),
        ),
    };
    fit_mlp(&inputs, &targets, num_classes, head, hyper, rng)
}
