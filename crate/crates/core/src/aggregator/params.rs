use rand::Rng;
use rand_distr::StandardNormal;

use super::{AggregatorConfig, ModelError, Result};
use crate::matrix::Matrix;
use crate::rng;
use crate::scalar::Scalar;

/// `y = x · weight + bias`, weight stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Matrix::zeros(fan_in, fan_out), bias: vec![T::zero(); fan_out] }
    }

    pub fn apply(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut y = x.matmul(&self.weight);
        y.add_row_vector(&self.bias);
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    fn identity(dim: usize) -> Self {
        Self { gain: vec![T::one(); dim], bias: vec![T::zero(); dim] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub norm1: LayerNorm<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorParams<T> {
    config: AggregatorConfig,
    pub input: Linear<T>,
    pub cls_token: Vec<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: LayerNorm<T>,
    pub head: Linear<T>,
}

fn truncated_normal<T: Scalar, R: Rng>(rng: &mut R, scale: f64) -> T {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return T::of(z * scale);
        }
    }
}

fn fill_weight<T: Scalar, R: Rng>(w: &mut Matrix<T>, rng: &mut R) {
    let scale = 1.0 / (w.rows() as f64).sqrt();
    for x in w.as_mut_slice() {
        *x = truncated_normal(rng, scale);
    }
}

impl<T: Scalar> AggregatorParams<T> {
    /// All-zero tensors, except layer-norm gains which are one.
    pub fn zeros(config: &AggregatorConfig) -> Result<Self> {
        config.validate()?;
        let (f, d, h) = (config.feature_dim, config.model_dim, config.hidden_dim());
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                norm1: LayerNorm::identity(d),
                query: Linear::zeros(d, d),
                key: Linear::zeros(d, d),
                value: Linear::zeros(d, d),
                output: Linear::zeros(d, d),
                norm2: LayerNorm::identity(d),
                fc1: Linear::zeros(d, h),
                fc2: Linear::zeros(h, d),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            input: Linear::zeros(f, d),
            cls_token: vec![T::zero(); d],
            blocks,
            final_norm: LayerNorm::identity(d),
            head: Linear::zeros(d, config.n_classes),
        })
    }

    /// Weights ~ truncated normal (±2σ) with σ = 1/√fan_in; biases and the
    /// classifier head start at zero, so an untrained model predicts 0.5.
    pub fn init(config: &AggregatorConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = rng::seeded(seed);
        fill_weight(&mut p.input.weight, &mut rng);
        let d = config.model_dim as f64;
        for x in &mut p.cls_token {
            *x = truncated_normal(&mut rng, 1.0 / d.sqrt());
        }
        for b in &mut p.blocks {
            fill_weight(&mut b.query.weight, &mut rng);
            fill_weight(&mut b.key.weight, &mut rng);
            fill_weight(&mut b.value.weight, &mut rng);
            fill_weight(&mut b.output.weight, &mut rng);
            fill_weight(&mut b.fc1.weight, &mut rng);
            fill_weight(&mut b.fc2.weight, &mut rng);
        }
        Ok(p)
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.config
    }

    /// Same shapes, every entry zero (used for gradients).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    /// Tensor names and shapes in definition order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (f, d, h, c) = (self.config.feature_dim, self.config.model_dim, self.config.hidden_dim(), self.config.n_classes);
        let mut out = vec![
            ("input.weight".to_string(), vec![f, d]),
            ("input.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![d]),
        ];
        for l in 0..self.blocks.len() {
            let p = format!("blocks.{l}");
            out.push((format!("{p}.norm1.gain"), vec![d]));
            out.push((format!("{p}.norm1.bias"), vec![d]));
            for name in ["query", "key", "value", "output"] {
                out.push((format!("{p}.attn.{name}.weight"), vec![d, d]));
                out.push((format!("{p}.attn.{name}.bias"), vec![d]));
            }
            out.push((format!("{p}.norm2.gain"), vec![d]));
            out.push((format!("{p}.norm2.bias"), vec![d]));
            out.push((format!("{p}.mlp.fc1.weight"), vec![d, h]));
            out.push((format!("{p}.mlp.fc1.bias"), vec![h]));
            out.push((format!("{p}.mlp.fc2.weight"), vec![h, d]));
            out.push((format!("{p}.mlp.fc2.bias"), vec![d]));
        }
        out.push(("final_norm.gain".to_string(), vec![d]));
        out.push(("final_norm.bias".to_string(), vec![d]));
        out.push(("head.weight".to_string(), vec![d, c]));
        out.push(("head.bias".to_string(), vec![c]));
        out
    }

    /// Flat views of every tensor, in `layout` order.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![self.input.weight.as_slice(), &self.input.bias, &self.cls_token];
        for b in &self.blocks {
            out.push(&b.norm1.gain);
            out.push(&b.norm1.bias);
            for lin in [&b.query, &b.key, &b.value, &b.output] {
                out.push(lin.weight.as_slice());
                out.push(&lin.bias);
            }
            out.push(&b.norm2.gain);
            out.push(&b.norm2.bias);
            out.push(b.fc1.weight.as_slice());
            out.push(&b.fc1.bias);
            out.push(b.fc2.weight.as_slice());
            out.push(&b.fc2.bias);
        }
        out.push(&self.final_norm.gain);
        out.push(&self.final_norm.bias);
        out.push(self.head.weight.as_slice());
        out.push(&self.head.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![self.input.weight.as_mut_slice(), &mut self.input.bias, &mut self.cls_token];
        for b in &mut self.blocks {
            out.push(&mut b.norm1.gain);
            out.push(&mut b.norm1.bias);
            for lin in [&mut b.query, &mut b.key, &mut b.value, &mut b.output] {
                out.push(lin.weight.as_mut_slice());
                out.push(&mut lin.bias);
            }
            out.push(&mut b.norm2.gain);
            out.push(&mut b.norm2.bias);
            out.push(b.fc1.weight.as_mut_slice());
            out.push(&mut b.fc1.bias);
            out.push(b.fc2.weight.as_mut_slice());
            out.push(&mut b.fc2.bias);
        }
        out.push(&mut self.final_norm.gain);
        out.push(&mut self.final_norm.bias);
        out.push(self.head.weight.as_mut_slice());
        out.push(&mut self.head.bias);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.config != other.config {
            return Err(ModelError::Shape("parameter sets have different configurations".into()));
        }
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }

    /// Element-wise cast, e.g. to run f64 verification on f32 weights.
    pub fn cast<U: Scalar>(&self) -> AggregatorParams<U> {
        let mut out = AggregatorParams::<U>::zeros(&self.config).expect("config already validated");
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = U::of(s.to_f64_lossy());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> AggregatorConfig {
        AggregatorConfig { feature_dim: 6, model_dim: 8, n_layers: 2, n_heads: 2, mlp_ratio: 2, ..Default::default() }
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let a = AggregatorParams::<f32>::init(&tiny(), 1).unwrap();
        let b = AggregatorParams::<f32>::init(&tiny(), 1).unwrap();
        let c = AggregatorParams::<f32>::init(&tiny(), 2).unwrap();
        let bits = |p: &AggregatorParams<f32>| -> Vec<u32> { p.tensors().iter().flat_map(|t| t.iter().map(|x| x.to_bits())).collect() };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn head_and_biases_start_at_zero() {
        let p = AggregatorParams::<f64>::init(&tiny(), 3).unwrap();
        assert!(p.head.weight.as_slice().iter().all(|&x| x == 0.0));
        assert!(p.head.bias.iter().all(|&x| x == 0.0));
        assert!(p.blocks.iter().all(|b| b.fc1.bias.iter().all(|&x| x == 0.0)));
        // truncation at two standard deviations of 1/sqrt(fan_in)
        let bound = 2.0 / (6f64).sqrt();
        assert!(p.input.weight.as_slice().iter().all(|x| x.abs() <= bound));
        assert!(p.input.weight.as_slice().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn layout_matches_tensors() {
        let p = AggregatorParams::<f64>::init(&tiny(), 3).unwrap();
        let layout = p.layout();
        let tensors = p.tensors();
        assert_eq!(layout.len(), tensors.len());
        for ((_, shape), t) in layout.iter().zip(&tensors) {
            assert_eq!(shape.iter().product::<usize>(), t.len());
        }
        let names: std::collections::HashSet<_> = layout.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names.len(), layout.len());
    }
}
