use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dictionary::normalize_atom;
use crate::error::{Error, Result};
use crate::subspace::Subspace;

/// `[L, s, h2, h3, P]`.
pub const DEFAULT_LAYOUT: [usize; 5] = [1000, 10, 200, 30, 2];

/// Internal output units are `T1 / 1000` and `T2 / 100`.
pub const DEFAULT_TARGET_SCALE: [f64; 2] = [1e-3, 1e-2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative, taking the ReLU slope at zero as 0.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => (z > 0.0) as u8 as f64,
        }
    }
}

/// `y = f(W x + b)` with `W` stored row-major, `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    /// He-style uniform weights in `±sqrt(6 / inputs)`, zero biases.
    pub fn he_uniform(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs)
                .map(|_| rng.random_range(-bound..=bound))
                .collect(),
            biases: vec![0.0; outputs],
            activation,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.inputs..(i + 1) * self.inputs]
    }

    /// Pre-activations `W x + b`.
    pub fn affine(&self, x: &[f64], z: &mut [f64]) {
        for (i, zi) in z.iter_mut().enumerate() {
            *zi = self.biases[i] + self.row(i).iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    fn validate(&self) -> Result<()> {
        if self.weights.len() != self.inputs * self.outputs || self.biases.len() != self.outputs {
            return Err(Error::DimensionMismatch {
                context: "layer parameters",
                expected: self.inputs * self.outputs + self.outputs,
                found: self.weights.len() + self.biases.len(),
            });
        }
        if self
            .weights
            .iter()
            .chain(&self.biases)
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidArgument(
                "layer parameters must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Pre- and post-activation values of every trainable layer for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub features: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

/// Parameter gradients shaped like the trainable layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.len()])
                .collect(),
            biases: model
                .layers
                .iter()
                .map(|l| vec![0.0; l.biases.len()])
                .collect(),
        }
    }

    pub fn clear(&mut self) {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .for_each(|v| v.fill(0.0));
    }

    /// Same order as [`MlpModel::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }
}

/// The network: a fixed projection `Re(V^H x)` followed by trainable
/// dense layers. Outputs are divided by `target_scale` to give physical
/// units.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    subspace: Subspace,
    layers: Vec<DenseLayer>,
    target_scale: Vec<f64>,
}

impl MlpModel {
    /// ReLU layers with He-uniform weights and zero biases after the
    /// fixed projection. `layout[0..2]` must match the subspace.
    pub fn init(subspace: Subspace, layout: &[usize], seed: u64) -> Result<Self> {
        if layout.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "layout needs at least [L, s, P], got {layout:?}"
            )));
        }
        if layout[0] != subspace.frames() || layout[1] != subspace.dim() {
            return Err(Error::InvalidArgument(format!(
                "layout starts with [{}, {}] but the subspace is {} x {}",
                layout[0],
                layout[1],
                subspace.frames(),
                subspace.dim()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layout[1..]
            .windows(2)
            .map(|w| DenseLayer::he_uniform(w[0], w[1], Activation::Relu, &mut rng))
            .collect();
        let p = *layout.last().unwrap();
        let target_scale = if p == DEFAULT_TARGET_SCALE.len() {
            DEFAULT_TARGET_SCALE.to_vec()
        } else {
            vec![1.0; p]
        };
        Self::from_parts(subspace, layers, target_scale)
    }

    pub fn from_parts(
        subspace: Subspace,
        layers: Vec<DenseLayer>,
        target_scale: Vec<f64>,
    ) -> Result<Self> {
        let mut width = subspace.dim();
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "model needs at least one trainable layer".into(),
            ));
        }
        for layer in &layers {
            layer.validate()?;
            if layer.inputs != width {
                return Err(Error::DimensionMismatch {
                    context: "layer input width",
                    expected: width,
                    found: layer.inputs,
                });
            }
            width = layer.outputs;
        }
        if target_scale.len() != width || target_scale.iter().any(|c| !(c.is_finite() && *c > 0.0))
        {
            return Err(Error::InvalidArgument(format!(
                "target scale needs {width} positive finite entries, got {target_scale:?}"
            )));
        }
        Ok(Self {
            subspace,
            layers,
            target_scale,
        })
    }

    pub fn subspace(&self) -> &Subspace {
        &self.subspace
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn target_scale(&self) -> &[f64] {
        &self.target_scale
    }

    pub fn frames(&self) -> usize {
        self.subspace.frames()
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    /// `[L, s, widths of trainable layers...]`.
    pub fn layout(&self) -> Vec<usize> {
        let mut out = vec![self.subspace.frames(), self.subspace.dim()];
        out.extend(self.layers.iter().map(|l| l.outputs));
        out
    }

    /// Number of ReLU units across the trainable layers.
    pub fn relu_units(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.activation == Activation::Relu)
            .map(|l| l.outputs)
            .sum()
    }

    /// SHA-256 of the fixed first-layer parameters.
    pub fn layer1_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for c in self.subspace.basis() {
            h.update(c.re.to_le_bytes());
            h.update(c.im.to_le_bytes());
        }
        h.finalize().into()
    }

    /// Trainable parameters, layer by layer, weights then biases.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        let n: usize = self
            .layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum();
        if values.len() != n {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected: n,
                found: values.len(),
            });
        }
        let mut it = values.iter();
        for l in &mut self.layers {
            l.weights
                .iter_mut()
                .chain(l.biases.iter_mut())
                .for_each(|p| *p = *it.next().unwrap());
        }
        Ok(())
    }

    /// `Re(V^H x)`.
    pub fn features(&self, x: &[Complex64]) -> Result<Vec<f64>> {
        if x.iter().any(|c| !(c.re.is_finite() && c.im.is_finite())) {
            return Err(Error::InvalidArgument(
                "input contains non-finite samples".into(),
            ));
        }
        self.subspace.project_real(x)
    }

    /// Features of a real signal: `Re(V)^T x`.
    pub fn features_real(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.frames() {
            return Err(Error::DimensionMismatch {
                context: "signal length",
                expected: self.frames(),
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "input contains non-finite samples".into(),
            ));
        }
        Ok((0..self.subspace.dim())
            .map(|k| {
                self.subspace
                    .column(k)
                    .iter()
                    .zip(x)
                    .map(|(v, xi)| v.re * xi)
                    .sum()
            })
            .collect())
    }

    pub fn trace(&self, features: &[f64]) -> Trace {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = post.last().map_or(features, |v| v.as_slice());
            let mut z = vec![0.0; layer.outputs];
            layer.affine(input, &mut z);
            post.push(z.iter().map(|&v| layer.activation.apply(v)).collect());
            pre.push(z);
        }
        Trace {
            features: features.to_vec(),
            pre,
            post,
        }
    }

    /// Final activations in internal (scaled) units.
    pub fn output_from_features(&self, features: &[f64]) -> Vec<f64> {
        self.trace(features).post.pop().unwrap()
    }

    fn to_physical(&self, internal: Vec<f64>) -> Vec<f64> {
        internal
            .into_iter()
            .zip(&self.target_scale)
            .map(|(v, c)| v / c)
            .collect()
    }

    /// Estimates in physical units (ms) for a phase-aligned, unit-norm
    /// signal.
    pub fn forward(&self, x: &[Complex64]) -> Result<Vec<f64>> {
        Ok(self.to_physical(self.output_from_features(&self.features(x)?)))
    }

    /// Last-layer pre-activations, in physical units.
    pub fn weighted_output(&self, x: &[Complex64]) -> Result<Vec<f64>> {
        Ok(self.weighted_output_from_features(&self.features(x)?))
    }

    pub fn weighted_output_from_features(&self, features: &[f64]) -> Vec<f64> {
        self.to_physical(self.trace(features).pre.pop().unwrap())
    }

    /// Phase-aligns and normalizes a raw voxel signal, then runs
    /// [`forward`](Self::forward).
    pub fn predict(&self, x: &[Complex64]) -> Result<Vec<f64>> {
        self.forward(&normalize_atom(x)?)
    }

    /// Mean squared error over the outputs for one sample, with its
    /// parameter gradients added into `grads`. `target` is in internal
    /// units.
    pub fn accumulate_gradients(
        &self,
        features: &[f64],
        target: &[f64],
        grads: &mut Gradients,
    ) -> f64 {
        let tr = self.trace(features);
        let out = tr.post.last().unwrap();
        let p = out.len() as f64;
        let mut loss = 0.0;
        let mut delta: Vec<f64> = out
            .iter()
            .zip(target)
            .zip(tr.pre.last().unwrap())
            .map(|((y, t), z)| {
                loss += (y - t).powi(2);
                2.0 / p * (y - t) * self.layers.last().unwrap().activation.derivative(*z)
            })
            .collect();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = if i == 0 {
                &tr.features
            } else {
                &tr.post[i - 1]
            };
            let gw = &mut grads.weights[i];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grads.biases[i][r] += d;
                gw[r * layer.inputs..(r + 1) * layer.inputs]
                    .iter_mut()
                    .zip(input)
                    .for_each(|(g, a)| *g += d * a);
            }
            if i > 0 {
                let below = &self.layers[i - 1];
                delta = (0..layer.inputs)
                    .map(|c| {
                        let back: f64 = delta
                            .iter()
                            .enumerate()
                            .map(|(r, d)| d * layer.weights[r * layer.inputs + c])
                            .sum();
                        back * below.activation.derivative(tr.pre[i - 1][c])
                    })
                    .collect();
            }
        }
        loss / p
    }

    /// Loss of one sample without gradients.
    pub fn loss(&self, features: &[f64], target: &[f64]) -> f64 {
        let out = self.output_from_features(features);
        out.iter()
            .zip(target)
            .map(|(y, t)| (y - t).powi(2))
            .sum::<f64>()
            / out.len() as f64
    }

    /// Same physical-unit model with a different internal output scaling.
    /// The last layer is rescaled, which is exact up to rounding because
    /// its activation is positively homogeneous.
    pub fn with_target_scale(&self, target_scale: &[f64]) -> Result<Self> {
        let mut out = Self::from_parts(
            self.subspace.clone(),
            self.layers.clone(),
            target_scale.to_vec(),
        )?;
        let last = out.layers.last_mut().unwrap();
        for (r, (new, old)) in target_scale.iter().zip(&self.target_scale).enumerate() {
            let k = new / old;
            last.weights[r * last.inputs..(r + 1) * last.inputs]
                .iter_mut()
                .for_each(|w| *w *= k);
            last.biases[r] *= k;
        }
        Ok(out)
    }
}
