//! Trainable layers: convolution, batch normalization and dense heads.
//!
//! Layers own their parameter tensors and register them into a
//! [`ParameterSet`] under dot-separated paths, which fixes both the
//! checkpoint layout and the (lexicographic) optimizer iteration order.
//! Initialization draws from named streams keyed by the parameter path, so
//! the values a layer starts with depend only on `(seed, path)`.

use std::cell::{Cell, RefCell};

use rand_distr::{Distribution, Normal};

use crate::rng::stream;
use crate::tensor::{Element, ParameterSet, Tensor};

/// Forward-pass mode: training uses batch statistics and updates running
/// ones; evaluation is a pure function of the inputs and stored state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Seeded initializer handing out per-path values.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    /// He fan-in initialization: `N(0, sqrt(2 / fan_in))`.
    pub fn he<E: Element>(&self, path: &str, numel: usize, fan_in: usize) -> Vec<E> {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut rng = stream(self.seed, &format!("init.{path}"));
        (0..numel).map(|_| E::from_f64(normal.sample(&mut rng))).collect()
    }
}

pub struct Conv2d<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
    pub stride: usize,
    pub padding: usize,
}

impl<E: Element> Conv2d<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &Init,
        path: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let numel = out_channels * in_channels * kernel * kernel;
        let weight = Tensor::param(
            init.he(&format!("{path}.weight"), numel, fan_in),
            &[out_channels, in_channels, kernel, kernel],
        );
        let bias = bias.then(|| {
            let t = Tensor::zeros(&[out_channels]);
            t.set_requires_grad(true);
            t
        });
        Conv2d { weight, bias, stride, padding }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.stride, self.padding)
    }

    pub fn register(&self, prefix: &str, params: &mut ParameterSet<E>) {
        params.insert(format!("{prefix}.weight"), self.weight.clone());
        if let Some(bias) = &self.bias {
            params.insert(format!("{prefix}.bias"), bias.clone());
        }
    }
}

pub struct BatchNorm2d<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    running_mean: RefCell<Vec<E>>,
    running_var: RefCell<Vec<E>>,
    /// Set once statistics have been observed or loaded; eval mode before
    /// that is an error.
    initialized: Cell<bool>,
    pub momentum: f64,
    pub eps: f64,
}

impl<E: Element> BatchNorm2d<E> {
    pub fn new(channels: usize) -> Self {
        let gamma = Tensor::full(&[channels], E::one());
        gamma.set_requires_grad(true);
        let beta = Tensor::zeros(&[channels]);
        beta.set_requires_grad(true);
        BatchNorm2d {
            gamma,
            beta,
            running_mean: RefCell::new(vec![E::zero(); channels]),
            running_var: RefCell::new(vec![E::one(); channels]),
            initialized: Cell::new(false),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<E>, mode: Mode) -> Tensor<E> {
        match mode {
            Mode::Train => {
                let (y, batch_mean, batch_var) =
                    x.batchnorm2d_train(&self.gamma, &self.beta, E::from_f64(self.eps));
                let m = E::from_f64(self.momentum);
                let keep = E::one() - m;
                {
                    let mut rm = self.running_mean.borrow_mut();
                    let mut rv = self.running_var.borrow_mut();
                    for (r, &b) in rm.iter_mut().zip(&batch_mean) {
                        *r = keep * *r + m * b;
                    }
                    for (r, &b) in rv.iter_mut().zip(&batch_var) {
                        *r = keep * *r + m * b;
                    }
                }
                self.initialized.set(true);
                y
            }
            Mode::Eval => {
                assert!(
                    self.initialized.get(),
                    "batchnorm: eval mode with uninitialized running statistics"
                );
                x.batchnorm2d_eval(
                    &self.gamma,
                    &self.beta,
                    &self.running_mean.borrow(),
                    &self.running_var.borrow(),
                    E::from_f64(self.eps),
                )
            }
        }
    }

    pub fn register(&self, prefix: &str, params: &mut ParameterSet<E>) {
        params.insert(format!("{prefix}.gamma"), self.gamma.clone());
        params.insert(format!("{prefix}.beta"), self.beta.clone());
    }

    /// Running statistics are state, not weights: they live in the buffer
    /// set (and thus in checkpoints) but never in the parameter count.
    pub fn buffers(&self) -> Vec<(&'static str, Vec<E>)> {
        vec![
            ("running_mean", self.running_mean.borrow().clone()),
            ("running_var", self.running_var.borrow().clone()),
        ]
    }

    pub fn load_buffers(&self, running_mean: &[E], running_var: &[E]) {
        self.running_mean.borrow_mut().copy_from_slice(running_mean);
        self.running_var.borrow_mut().copy_from_slice(running_var);
        self.initialized.set(true);
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized.get()
    }
}

pub struct Linear<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Element> Linear<E> {
    pub fn new(init: &Init, path: &str, in_features: usize, out_features: usize) -> Self {
        let weight = Tensor::param(
            init.he(&format!("{path}.weight"), out_features * in_features, in_features),
            &[out_features, in_features],
        );
        let bias = Tensor::zeros(&[out_features]);
        bias.set_requires_grad(true);
        Linear { weight, bias }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        x.linear(&self.weight, Some(&self.bias))
    }

    pub fn register(&self, prefix: &str, params: &mut ParameterSet<E>) {
        params.insert(format!("{prefix}.weight"), self.weight.clone());
        params.insert(format!("{prefix}.bias"), self.bias.clone());
    }
}
