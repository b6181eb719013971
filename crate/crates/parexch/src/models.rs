//! Small deterministic models with analytic gradients, plus a seeded
//! synthetic classification dataset. These stand in for the big vision nets:
//! everything a trainer needs — forward/backward over a minibatch, flat
//! parameter layout, top-1 evaluation — at a size where oracles are cheap.
//!
//! Parameter layout is fixed so a `ParamBuffer` means the same thing on
//! every rank: per layer, weights row-major (output x input) then bias,
//! layers in forward order.

use crate::buffer::ParamBuffer;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// One-hot regression under mean squared error.
    Linear,
    /// Softmax regression under mean cross-entropy.
    Logistic,
    /// One tanh hidden layer, then softmax under mean cross-entropy.
    Mlp { hidden: usize },
}

impl ModelKind {
    pub fn parse(s: &str) -> Option<ModelKind> {
        match s {
            "linear" => Some(ModelKind::Linear),
            "logistic" => Some(ModelKind::Logistic),
            "mlp" => Some(ModelKind::Mlp { hidden: 16 }),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::Logistic => "logistic",
            ModelKind::Mlp { .. } => "mlp",
        }
    }
}

/// Model shape: kind plus input/output dimensions. Parameters live outside
/// in a flat buffer; this type knows the layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Model {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub output_dim: usize,
}

/// One minibatch: row-major features and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Scalar> {
    pub x: Vec<T>,
    pub labels: Vec<u32>,
    pub n: usize,
    pub dim: usize,
}

/// Synthetic dataset: n examples of Gaussian blobs around per-class centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar> {
    pub x: Vec<T>,
    pub labels: Vec<u32>,
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
}

impl<T: Scalar> Dataset<T> {
    /// Materialize a batch from example indices (shards are strided, so
    /// rows are gathered).
    pub fn gather(&self, indices: &[usize]) -> Batch<T> {
        let mut x = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(&self.x[i * self.dim..(i + 1) * self.dim]);
            labels.push(self.labels[i]);
        }
        Batch {
            x,
            labels,
            n: indices.len(),
            dim: self.dim,
        }
    }

    pub fn as_batch(&self) -> Batch<T> {
        Batch {
            x: self.x.clone(),
            labels: self.labels.clone(),
            n: self.n,
            dim: self.dim,
        }
    }

    /// Split off the trailing fraction as a validation set.
    pub fn split_val(&self, val_fraction: f64) -> (Dataset<T>, Dataset<T>) {
        let val_n = ((self.n as f64) * val_fraction).floor() as usize;
        let train_n = self.n - val_n;
        let train = Dataset {
            x: self.x[..train_n * self.dim].to_vec(),
            labels: self.labels[..train_n].to_vec(),
            n: train_n,
            dim: self.dim,
            classes: self.classes,
        };
        let val = Dataset {
            x: self.x[train_n * self.dim..].to_vec(),
            labels: self.labels[train_n..].to_vec(),
            n: val_n,
            dim: self.dim,
            classes: self.classes,
        };
        (train, val)
    }
}

/// Loss and top-1 error over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub error_rate: f64,
}

impl Model {
    pub fn new(kind: ModelKind, input_dim: usize, output_dim: usize) -> Model {
        Model {
            kind,
            input_dim,
            output_dim,
        }
    }

    /// Total parameter count P for this layout.
    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::Linear | ModelKind::Logistic => {
                self.output_dim * self.input_dim + self.output_dim
            }
            ModelKind::Mlp { hidden } => {
                hidden * self.input_dim + hidden + self.output_dim * hidden + self.output_dim
            }
        }
    }

    /// Seeded initialization: weights ~ N(0, 1/fan_in), biases zero. Draws
    /// happen in f64 so f32/f64 runs start from the same underlying values.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamBuffer<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(self.param_count());
        let layer = |rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize, vals: &mut Vec<T>| {
            let scale = 1.0 / (in_dim as f64).sqrt();
            for _ in 0..out_dim * in_dim {
                let z: f64 = StandardNormal.sample(rng);
                vals.push(T::of_f64(z * scale));
            }
            for _ in 0..out_dim {
                vals.push(T::zero());
            }
        };
        match self.kind {
            ModelKind::Linear | ModelKind::Logistic => {
                layer(&mut rng, self.output_dim, self.input_dim, &mut values);
            }
            ModelKind::Mlp { hidden } => {
                layer(&mut rng, hidden, self.input_dim, &mut values);
                layer(&mut rng, self.output_dim, hidden, &mut values);
            }
        }
        ParamBuffer::new(values).expect("finite init")
    }

    fn check_shapes<T: Scalar>(&self, params: &ParamBuffer<T>, batch: &Batch<T>) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "params length {} != layout {}",
                params.len(),
                self.param_count()
            )));
        }
        if batch.dim != self.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "batch dim {} != input_dim {}",
                batch.dim, self.input_dim
            )));
        }
        if batch.x.len() != batch.n * batch.dim || batch.labels.len() != batch.n {
            return Err(Error::ShapeMismatch(format!(
                "batch of {} examples has {} features, {} labels",
                batch.n,
                batch.x.len(),
                batch.labels.len()
            )));
        }
        for &l in &batch.labels {
            if l as usize >= self.output_dim {
                return Err(Error::ShapeMismatch(format!(
                    "label {l} out of range for {} outputs",
                    self.output_dim
                )));
            }
        }
        Ok(())
    }

    /// Mean loss over the batch and the gradient of that mean. Deterministic
    /// given inputs.
    pub fn forward_backward<T: Scalar>(
        &self,
        params: &ParamBuffer<T>,
        batch: &Batch<T>,
    ) -> Result<(T, ParamBuffer<T>)> {
        self.check_shapes(params, batch)?;
        if batch.n == 0 {
            return Err(Error::ShapeMismatch("empty batch".to_string()));
        }
        match self.kind {
            ModelKind::Linear => self.linear_fb(params, batch),
            ModelKind::Logistic => self.logistic_fb(params, batch),
            ModelKind::Mlp { hidden } => self.mlp_fb(params, batch, hidden),
        }
    }

    fn linear_fb<T: Scalar>(
        &self,
        params: &ParamBuffer<T>,
        batch: &Batch<T>,
    ) -> Result<(T, ParamBuffer<T>)> {
        let (d, c) = (self.input_dim, self.output_dim);
        let p = params.as_slice();
        let (w, b) = p.split_at(c * d);
        let inv_n = T::one() / T::of_f64(batch.n as f64);
        let half = T::of_f64(0.5);

        let mut grad = vec![T::zero(); params.len()];
        let (gw, gb) = grad.split_at_mut(c * d);
        let mut loss = T::zero();

        for e in 0..batch.n {
            let x = &batch.x[e * d..(e + 1) * d];
            for o in 0..c {
                let mut out = b[o];
                for i in 0..d {
                    out = out + w[o * d + i] * x[i];
                }
                let target = if batch.labels[e] as usize == o {
                    T::one()
                } else {
                    T::zero()
                };
                let err = out - target;
                loss = loss + half * err * err * inv_n;
                let scaled = err * inv_n;
                for i in 0..d {
                    gw[o * d + i] = gw[o * d + i] + scaled * x[i];
                }
                gb[o] = gb[o] + scaled;
            }
        }
        Ok((loss, ParamBuffer::from_vec_unchecked(grad)))
    }

    fn logits_softmax<T: Scalar>(logits: &mut [T]) {
        // stable softmax in place
        let mut max = logits[0];
        for &v in logits.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in logits.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in logits.iter_mut() {
            *v = *v / sum;
        }
    }

    fn logistic_fb<T: Scalar>(
        &self,
        params: &ParamBuffer<T>,
        batch: &Batch<T>,
    ) -> Result<(T, ParamBuffer<T>)> {
        let (d, c) = (self.input_dim, self.output_dim);
        let p = params.as_slice();
        let (w, b) = p.split_at(c * d);
        let inv_n = T::one() / T::of_f64(batch.n as f64);

        let mut grad = vec![T::zero(); params.len()];
        let (gw, gb) = grad.split_at_mut(c * d);
        let mut loss = T::zero();
        let mut probs = vec![T::zero(); c];

        for e in 0..batch.n {
            let x = &batch.x[e * d..(e + 1) * d];
            for o in 0..c {
                let mut out = b[o];
                for i in 0..d {
                    out = out + w[o * d + i] * x[i];
                }
                probs[o] = out;
            }
            Self::logits_softmax(&mut probs);
            let label = batch.labels[e] as usize;
            loss = loss - probs[label].max(T::min_positive_value()).ln() * inv_n;
            for o in 0..c {
                let target = if label == o { T::one() } else { T::zero() };
                let scaled = (probs[o] - target) * inv_n;
                for i in 0..d {
                    gw[o * d + i] = gw[o * d + i] + scaled * x[i];
                }
                gb[o] = gb[o] + scaled;
            }
        }
        Ok((loss, ParamBuffer::from_vec_unchecked(grad)))
    }

    fn mlp_fb<T: Scalar>(
        &self,
        params: &ParamBuffer<T>,
        batch: &Batch<T>,
        hidden: usize,
    ) -> Result<(T, ParamBuffer<T>)> {
        let (d, c, h) = (self.input_dim, self.output_dim, hidden);
        let p = params.as_slice();
        let (w1, rest) = p.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(c * h);
        let inv_n = T::one() / T::of_f64(batch.n as f64);

        let mut grad = vec![T::zero(); params.len()];
        let (gw1, grest) = grad.split_at_mut(h * d);
        let (gb1, grest) = grest.split_at_mut(h);
        let (gw2, gb2) = grest.split_at_mut(c * h);

        let mut loss = T::zero();
        let mut act = vec![T::zero(); h];
        let mut probs = vec![T::zero(); c];
        let mut dh = vec![T::zero(); h];

        for e in 0..batch.n {
            let x = &batch.x[e * d..(e + 1) * d];
            for j in 0..h {
                let mut pre = b1[j];
                for i in 0..d {
                    pre = pre + w1[j * d + i] * x[i];
                }
                act[j] = pre.tanh();
            }
            for o in 0..c {
                let mut out = b2[o];
                for j in 0..h {
                    out = out + w2[o * h + j] * act[j];
                }
                probs[o] = out;
            }
            Self::logits_softmax(&mut probs);
            let label = batch.labels[e] as usize;
            loss = loss - probs[label].max(T::min_positive_value()).ln() * inv_n;

            for v in dh.iter_mut() {
                *v = T::zero();
            }
            for o in 0..c {
                let target = if label == o { T::one() } else { T::zero() };
                let delta = (probs[o] - target) * inv_n;
                for j in 0..h {
                    gw2[o * h + j] = gw2[o * h + j] + delta * act[j];
                    dh[j] = dh[j] + delta * w2[o * h + j];
                }
                gb2[o] = gb2[o] + delta;
            }
            for j in 0..h {
                let dpre = dh[j] * (T::one() - act[j] * act[j]);
                for i in 0..d {
                    gw1[j * d + i] = gw1[j * d + i] + dpre * x[i];
                }
                gb1[j] = gb1[j] + dpre;
            }
        }
        Ok((loss, ParamBuffer::from_vec_unchecked(grad)))
    }

    /// Per-example class scores, used for evaluation.
    fn scores<T: Scalar>(&self, params: &ParamBuffer<T>, x: &[T]) -> Vec<T> {
        let (d, c) = (self.input_dim, self.output_dim);
        let p = params.as_slice();
        match self.kind {
            ModelKind::Linear | ModelKind::Logistic => {
                let (w, b) = p.split_at(c * d);
                (0..c)
                    .map(|o| {
                        let mut out = b[o];
                        for i in 0..d {
                            out = out + w[o * d + i] * x[i];
                        }
                        out
                    })
                    .collect()
            }
            ModelKind::Mlp { hidden } => {
                let h = hidden;
                let (w1, rest) = p.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                let act: Vec<T> = (0..h)
                    .map(|j| {
                        let mut pre = b1[j];
                        for i in 0..d {
                            pre = pre + w1[j * d + i] * x[i];
                        }
                        pre.tanh()
                    })
                    .collect();
                (0..c)
                    .map(|o| {
                        let mut out = b2[o];
                        for j in 0..h {
                            out = out + w2[o * h + j] * act[j];
                        }
                        out
                    })
                    .collect()
            }
        }
    }

    /// Mean loss and top-1 misclassification fraction over one batch.
    pub fn evaluate_batch<T: Scalar>(
        &self,
        params: &ParamBuffer<T>,
        batch: &Batch<T>,
    ) -> Result<Evaluation> {
        let (loss, _) = self.forward_backward(params, batch)?;
        let mut wrong = 0usize;
        for e in 0..batch.n {
            let scores = self.scores(params, &batch.x[e * batch.dim..(e + 1) * batch.dim]);
            let mut best = 0usize;
            for (o, s) in scores.iter().enumerate() {
                if *s > scores[best] {
                    best = o;
                }
            }
            if best != batch.labels[e] as usize {
                wrong += 1;
            }
        }
        Ok(Evaluation {
            loss: loss.into_f64(),
            error_rate: wrong as f64 / batch.n as f64,
        })
    }

    /// Mean loss and top-1 misclassification fraction over a dataset.
    pub fn evaluate<T: Scalar>(
        &self,
        params: &ParamBuffer<T>,
        data: &Dataset<T>,
    ) -> Result<Evaluation> {
        self.evaluate_batch(params, &data.as_batch())
    }
}

/// Seeded Gaussian-blob classification data: class centers at distance 4
/// from the origin in random directions, examples scattered around them
/// with standard deviation `difficulty`. Difficulty 0 collapses each class
/// onto its center, so the classes are linearly separable.
pub fn make_synthetic<T: Scalar>(
    seed: u64,
    n: usize,
    input_dim: usize,
    classes: usize,
    difficulty: f64,
) -> Dataset<T> {
    assert!(classes >= 1 && input_dim >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers = Vec::with_capacity(classes);
    for _ in 0..classes {
        let dir: Vec<f64> = (0..input_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        centers.push(dir.into_iter().map(|v| 4.0 * v / norm).collect::<Vec<f64>>());
    }

    let mut x = Vec::with_capacity(n * input_dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.random_range(0..classes);
        labels.push(class as u32);
        for i in 0..input_dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            x.push(T::of_f64(centers[class][i] + difficulty * noise));
        }
    }

    Dataset {
        x,
        labels,
        n,
        dim: input_dim,
        classes,
    }
}
