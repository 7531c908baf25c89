//! Dense feed-forward ReLU network with exact reverse-mode gradients.
//!
//! Parameters live in one flat buffer. Each affine layer stores its weight
//! matrix row-major with shape `(fan_out, fan_in)` followed by its bias.
//! Hidden layers use ReLU (subgradient 0 at the kink); the head is linear
//! and trained with mean softmax cross-entropy.
//!
//! The representation is the post-activation output of the last hidden
//! layer. [`Tape::backward`] accepts an upstream gradient on the logits, on
//! the representation, or on both, so that representation-level penalties
//! can be chained through the same backward pass as the loss.

use std::ops::{Deref, DerefMut};

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Layer widths from input to number of classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
}

/// Offsets of one affine layer inside a [`ParamVector`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "layer_sizes needs at least input and output widths, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer widths must be positive, got {layer_sizes:?}"
            )));
        }
        Ok(Self { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of affine layers.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Index into `layer_sizes` of the representation (the penultimate entry).
    pub fn representation_layer(&self) -> usize {
        self.layer_sizes.len() - 2
    }

    pub fn rep_dim(&self) -> usize {
        self.layer_sizes[self.representation_layer()]
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let l = LayerLayout {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                l
            })
            .collect()
    }
}

macro_rules! flat_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(Vec<f64>);

        impl $name {
            pub fn new(values: Vec<f64>) -> Self {
                Self(values)
            }

            pub fn zeros(len: usize) -> Self {
                Self(vec![0.0; len])
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.0
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }
        }

        impl Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut [f64] {
                &mut self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                Self(v)
            }
        }
    };
}

flat_newtype!(
    /// Flat network parameters laid out per [`MlpSpec::layout`].
    ParamVector
);
flat_newtype!(
    /// Gradient with the same layout as [`ParamVector`].
    Gradient
);

/// A minibatch: one feature row per sample and its class index.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Shape("batch must contain at least one sample".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("batch features".into()));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub representation: Matrix,
}

/// Glorot-uniform weights, zero biases. Deterministic in `(spec, seed)`.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; spec.num_params()];
    for l in spec.layout() {
        let bound = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite Glorot bound");
        for w in &mut values[l.weight_offset..l.bias_offset] {
            *w = dist.sample(&mut rng);
        }
    }
    ParamVector(values)
}

/// Activations recorded by a forward pass: `acts[0]` is the input,
/// `acts[depth]` the logits, everything in between post-ReLU.
#[derive(Clone, Debug)]
pub struct Tape {
    acts: Vec<Matrix>,
}

impl Tape {
    pub fn logits(&self) -> &Matrix {
        self.acts.last().unwrap()
    }

    pub fn representation(&self) -> &Matrix {
        &self.acts[self.acts.len() - 2]
    }

    pub fn into_output(mut self) -> ForwardOutput {
        let logits = self.acts.pop().unwrap();
        let representation = self.acts.pop().unwrap();
        ForwardOutput {
            logits,
            representation,
        }
    }

    /// Reverse pass. `logits_grad` is the upstream gradient on the logits,
    /// `rep_grad` an additional upstream gradient on the representation.
    pub fn backward(
        &self,
        params: &[f64],
        spec: &MlpSpec,
        logits_grad: Option<&Matrix>,
        rep_grad: Option<&Matrix>,
    ) -> Result<Gradient> {
        let layout = spec.layout();
        let depth = layout.len();
        let batch = self.acts[0].rows();
        for (g, want) in [
            (logits_grad, self.logits().shape()),
            (rep_grad, self.representation().shape()),
        ] {
            if let Some(g) = g {
                if g.shape() != want {
                    return Err(Error::Shape(format!(
                        "upstream gradient {:?} does not match activation {:?}",
                        g.shape(),
                        want
                    )));
                }
            }
        }

        let mut grad = vec![0.0; spec.num_params()];
        // Gradient w.r.t. acts[depth], if the head is on the path.
        let mut upstream: Option<Matrix> = logits_grad.cloned();
        let rep_layer = spec.representation_layer();
        for l in (0..depth).rev() {
            let out_idx = l + 1;
            let Some(mut delta) = upstream.take() else {
                if l == rep_layer && l > 0 {
                    upstream = rep_grad.cloned();
                }
                continue;
            };
            if out_idx < depth {
                let post = &self.acts[out_idx];
                for (d, &a) in delta.as_mut_slice().iter_mut().zip(post.as_slice()) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let lay = layout[l];
            let input = &self.acts[l];
            let w = &params[lay.weight_offset..lay.bias_offset];
            {
                let (gw, gb) = grad[lay.weight_offset..lay.bias_offset + lay.fan_out]
                    .split_at_mut(lay.fan_in * lay.fan_out);
                for b in 0..batch {
                    let drow = delta.row(b);
                    let xrow = input.row(b);
                    for (o, &d) in drow.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        gb[o] += d;
                        let wrow = &mut gw[o * lay.fan_in..(o + 1) * lay.fan_in];
                        for (gwi, &xi) in wrow.iter_mut().zip(xrow) {
                            *gwi += d * xi;
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            let mut prev = Matrix::zeros(batch, lay.fan_in);
            for b in 0..batch {
                let drow = delta.row(b);
                let prow = prev.row_mut(b);
                for (o, &d) in drow.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let wrow = &w[o * lay.fan_in..(o + 1) * lay.fan_in];
                    for (p, &wi) in prow.iter_mut().zip(wrow) {
                        *p += d * wi;
                    }
                }
            }
            if l == rep_layer {
                if let Some(r) = rep_grad {
                    for (p, &g) in prev.as_mut_slice().iter_mut().zip(r.as_slice()) {
                        *p += g;
                    }
                }
            }
            upstream = Some(prev);
        }
        Ok(Gradient(grad))
    }
}

fn check_params(params: &[f64], spec: &MlpSpec) -> Result<()> {
    if params.len() != spec.num_params() {
        return Err(Error::Shape(format!(
            "parameter vector has {} entries, layout {:?} needs {}",
            params.len(),
            spec.layer_sizes(),
            spec.num_params()
        )));
    }
    Ok(())
}

/// Forward pass keeping every activation for a later [`Tape::backward`].
pub fn forward_tape(params: &[f64], spec: &MlpSpec, features: &Matrix) -> Result<Tape> {
    check_params(params, spec)?;
    if features.cols() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "batch has {} features, network expects {}",
            features.cols(),
            spec.input_dim()
        )));
    }
    let layout = spec.layout();
    let depth = layout.len();
    let batch = features.rows();
    let mut acts = Vec::with_capacity(depth + 1);
    acts.push(features.clone());
    for (l, lay) in layout.iter().enumerate() {
        let input = &acts[l];
        let w = &params[lay.weight_offset..lay.bias_offset];
        let bias = &params[lay.bias_offset..lay.bias_offset + lay.fan_out];
        let mut out = Matrix::zeros(batch, lay.fan_out);
        for b in 0..batch {
            let xrow = input.row(b);
            let orow = out.row_mut(b);
            for (o, y) in orow.iter_mut().enumerate() {
                let wrow = &w[o * lay.fan_in..(o + 1) * lay.fan_in];
                let mut s = bias[o];
                for (wi, xi) in wrow.iter().zip(xrow) {
                    s += wi * xi;
                }
                *y = if l + 1 < depth { s.max(0.0) } else { s };
            }
        }
        acts.push(out);
    }
    Ok(Tape { acts })
}

pub fn forward(params: &[f64], spec: &MlpSpec, batch: &Batch) -> Result<ForwardOutput> {
    Ok(forward_tape(params, spec, &batch.features)?.into_output())
}

/// Row-wise numerically stable softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let classes = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Shape(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let batch = logits.rows() as f64;
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        let g = grad.row_mut(r);
        g[y] -= 1.0;
        for v in g.iter_mut() {
            *v /= batch;
        }
    }
    Ok((loss / batch, grad))
}

/// Mean cross-entropy loss, its exact gradient, and the representation.
pub fn loss_and_grad(
    params: &[f64],
    spec: &MlpSpec,
    batch: &Batch,
) -> Result<(f64, Gradient, Matrix)> {
    let tape = forward_tape(params, spec, &batch.features)?;
    let (loss, dlogits) = cross_entropy(tape.logits(), &batch.labels)?;
    let grad = tape.backward(params, spec, Some(&dlogits), None)?;
    Ok((loss, grad, tape.representation().clone()))
}

/// Pulls `rep_grad` back to the parameters with the loss head held out of
/// the path: the gradient of `sum(rep ⊙ rep_grad)` with `rep_grad` fixed.
pub fn backward_from_representation(
    params: &[f64],
    spec: &MlpSpec,
    batch: &Batch,
    rep_grad: &Matrix,
) -> Result<Gradient> {
    let tape = forward_tape(params, spec, &batch.features)?;
    tape.backward(params, spec, None, Some(rep_grad))
}

/// Central finite differences of an arbitrary scalar function of the
/// parameters. Used as an oracle for the reverse-mode paths.
pub fn finite_diff_grad(params: &[f64], eps: f64, f: impl Fn(&[f64]) -> f64) -> Gradient {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut w = params.to_vec();
    let mut g = vec![0.0; w.len()];
    for i in 0..w.len() {
        let orig = w[i];
        w[i] = orig + eps;
        let plus = f(&w);
        w[i] = orig - eps;
        let minus = f(&w);
        w[i] = orig;
        g[i] = (plus - minus) / (2.0 * eps);
    }
    Gradient(g)
}
