//! Named parameter tensors and the Adam optimizer that updates them.

use rand::Rng;
use rand_distr::StandardNormal;

/// A dense row-major tensor of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `r` of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.shape[1];
        &mut self.data[r * cols..(r + 1) * cols]
    }
}

/// A fixed, ordered collection of named tensors.
///
/// Both accessors must enumerate tensors in the same order; optimizers,
/// checkpoints and the momentum update rely on it.
pub trait Parameters {
    fn tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Sets every entry to zero, keeping shapes.
    fn zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.tensors();
        for ((_, dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            crate::linalg::add_assign(&mut dst.data, &s.data);
        }
    }

    /// First tensor holding a non-finite value, if any.
    fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates. One instance per parameter
/// set; moments are allocated lazily on the first step.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        let grads = grads.tensors();
        if self.m.is_empty() {
            self.m = grads.iter().map(|(_, g)| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (_, p)) in params.tensors_mut().into_iter().enumerate() {
            let g = &grads[i].1.data;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.data.len() {
                let gj = g[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar(Tensor);

    impl Parameters for Scalar {
        fn tensors(&self) -> Vec<(String, &Tensor)> {
            vec![("x".into(), &self.0)]
        }
        fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
            vec![("x".into(), &mut self.0)]
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Scalar(Tensor::filled(&[1], 5.0));
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..500 {
            let g = Scalar(Tensor::filled(&[1], 2.0 * p.0.data[0]));
            opt.step(&mut p, &g);
        }
        assert!(p.0.data[0].abs() < 0.05, "{}", p.0.data[0]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = Scalar(Tensor::filled(&[1], 1.0));
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p, &Scalar(Tensor::filled(&[1], 3.0)));
        assert!((p.0.data[0] - (1.0 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = Scalar(Tensor::filled(&[1], 0.123));
        let mut opt = Adam::new(AdamConfig {
            lr: 0.0,
            ..Default::default()
        });
        opt.step(&mut p, &Scalar(Tensor::filled(&[1], 7.0)));
        assert_eq!(p.0.data[0].to_bits(), 0.123f64.to_bits());
    }
}
