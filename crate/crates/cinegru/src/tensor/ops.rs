//! Elementwise, reduction and dense-layer operations.
//!
//! Binary operations require operands of identical shape; bias-style
//! broadcasts happen only inside the fused layer ops (`linear`, `conv2d`,
//! `batchnorm2d`), which keeps shape rules easy to reason about.

use super::{expect_same_shape, Element, Tensor};

impl<E: Element> Tensor<E> {
    fn unary(
        &self,
        op: &'static str,
        forward: impl Fn(E) -> E,
        // d(out)/d(in) as a function of (input value, output value)
        derivative: impl Fn(E, E) -> E + 'static,
    ) -> Tensor<E> {
        let out: Vec<E> = self.data().iter().map(|&v| forward(v)).collect();
        let parents = if self.requires_grad() { vec![self.clone()] } else { Vec::new() };
        let input = self.clone();
        let result_data = out.clone();
        Tensor::from_op(
            op,
            out,
            self.shape().to_vec(),
            parents,
            Box::new(move |grad, sink| {
                let input_data = input.data();
                let contribution: Vec<E> = grad
                    .iter()
                    .zip(input_data.iter().zip(&result_data))
                    .map(|(&g, (&x, &y))| g * derivative(x, y))
                    .collect();
                drop(input_data);
                sink.add(&input, &contribution);
            }),
        )
    }

    pub fn relu(&self) -> Tensor<E> {
        self.unary(
            "relu",
            |x| if x > E::zero() { x } else { E::zero() },
            |x, _| if x > E::zero() { E::one() } else { E::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        self.unary(
            "sigmoid",
            |x| {
                // Split by sign so exp never overflows.
                if x >= E::zero() {
                    E::one() / (E::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (E::one() + e)
                }
            },
            |_, y| y * (E::one() - y),
        )
    }

    pub fn tanh_act(&self) -> Tensor<E> {
        self.unary("tanh", |x| x.tanh(), |_, y| E::one() - y * y)
    }

    /// `alpha * x + beta`, elementwise with scalar coefficients.
    pub fn affine(&self, alpha: E, beta: E) -> Tensor<E> {
        self.unary("affine", move |x| alpha * x + beta, move |_, _| alpha)
    }

    pub fn scale(&self, alpha: E) -> Tensor<E> {
        self.affine(alpha, E::zero())
    }

    fn binary(
        &self,
        other: &Tensor<E>,
        op: &'static str,
        forward: impl Fn(E, E) -> E,
        // contribution factors: (dout/da, dout/db) from operand values
        derivative: impl Fn(E, E) -> (E, E) + 'static,
    ) -> Tensor<E> {
        expect_same_shape(op, self, other);
        let out: Vec<E> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| forward(a, b))
            .collect();
        let mut parents = Vec::new();
        if self.requires_grad() {
            parents.push(self.clone());
        }
        if other.requires_grad() {
            parents.push(other.clone());
        }
        let lhs = self.clone();
        let rhs = other.clone();
        Tensor::from_op(
            op,
            out,
            self.shape().to_vec(),
            parents,
            Box::new(move |grad, sink| {
                let a = lhs.data();
                let b = rhs.data();
                let mut da = Vec::with_capacity(grad.len());
                let mut db = Vec::with_capacity(grad.len());
                for ((&g, &av), &bv) in grad.iter().zip(a.iter()).zip(b.iter()) {
                    let (fa, fb) = derivative(av, bv);
                    da.push(g * fa);
                    db.push(g * fb);
                }
                drop(a);
                drop(b);
                sink.add(&lhs, &da);
                sink.add(&rhs, &db);
            }),
        )
    }

    pub fn add(&self, other: &Tensor<E>) -> Tensor<E> {
        self.binary(other, "add", |a, b| a + b, |_, _| (E::one(), E::one()))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Tensor<E> {
        self.binary(other, "sub", |a, b| a - b, |_, _| (E::one(), -E::one()))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Tensor<E> {
        self.binary(other, "mul", |a, b| a * b, |a, b| (b, a))
    }

    pub fn sum(&self) -> Tensor<E> {
        let total: E = self.data().iter().copied().sum();
        let parents = if self.requires_grad() { vec![self.clone()] } else { Vec::new() };
        let input = self.clone();
        Tensor::from_op(
            "sum",
            vec![total],
            vec![1],
            parents,
            Box::new(move |grad, sink| {
                sink.add(&input, &vec![grad[0]; input.numel()]);
            }),
        )
    }

    pub fn mean(&self) -> Tensor<E> {
        let n = E::from_f64(self.numel() as f64);
        self.sum().scale(E::one() / n)
    }

    /// Dense layer: `x[N,Cin] · W[Cout,Cin]ᵀ (+ b[Cout])  ->  [N,Cout]`.
    pub fn linear(&self, weight: &Tensor<E>, bias: Option<&Tensor<E>>) -> Tensor<E> {
        assert_eq!(self.shape().len(), 2, "linear: input must be 2-D, got {:?}", self.shape());
        assert_eq!(weight.shape().len(), 2, "linear: weight must be 2-D, got {:?}", weight.shape());
        let (n, cin) = (self.shape()[0], self.shape()[1]);
        let (cout, wcin) = (weight.shape()[0], weight.shape()[1]);
        assert_eq!(
            cin, wcin,
            "linear: input shape {:?} incompatible with weight shape {:?}",
            self.shape(),
            weight.shape()
        );
        if let Some(b) = bias {
            assert_eq!(
                b.shape(),
                &[cout],
                "linear: bias shape {:?} incompatible with weight shape {:?}",
                b.shape(),
                weight.shape()
            );
        }

        let mut out = vec![E::zero(); n * cout];
        {
            let x = self.data();
            let w = weight.data();
            // out[N,Cout] = x[N,Cin] · Wᵀ; Wᵀ expressed through strides.
            unsafe {
                E::gemm(
                    n,
                    cin,
                    cout,
                    x.as_ptr(),
                    cin as isize,
                    1,
                    w.as_ptr(),
                    1,
                    cin as isize,
                    E::zero(),
                    out.as_mut_ptr(),
                    cout as isize,
                    1,
                );
            }
            if let Some(b) = bias {
                let b = b.data();
                for row in out.chunks_exact_mut(cout) {
                    for (o, &bv) in row.iter_mut().zip(b.iter()) {
                        *o += bv;
                    }
                }
            }
        }

        let mut parents = Vec::new();
        for t in [Some(self), Some(weight), bias].into_iter().flatten() {
            if t.requires_grad() {
                parents.push(t.clone());
            }
        }
        let x = self.clone();
        let w = weight.clone();
        let b = bias.cloned();
        Tensor::from_op(
            "linear",
            out,
            vec![n, cout],
            parents,
            Box::new(move |grad, sink| {
                // dX = dY · W
                if x.requires_grad() {
                    let w_data = w.data();
                    let mut dx = vec![E::zero(); n * cin];
                    unsafe {
                        E::gemm(
                            n,
                            cout,
                            cin,
                            grad.as_ptr(),
                            cout as isize,
                            1,
                            w_data.as_ptr(),
                            cin as isize,
                            1,
                            E::zero(),
                            dx.as_mut_ptr(),
                            cin as isize,
                            1,
                        );
                    }
                    drop(w_data);
                    sink.add(&x, &dx);
                }
                // dW = dYᵀ · X
                if w.requires_grad() {
                    let x_data = x.data();
                    let mut dw = vec![E::zero(); cout * cin];
                    unsafe {
                        E::gemm(
                            cout,
                            n,
                            cin,
                            grad.as_ptr(),
                            1,
                            cout as isize,
                            x_data.as_ptr(),
                            cin as isize,
                            1,
                            E::zero(),
                            dw.as_mut_ptr(),
                            cin as isize,
                            1,
                        );
                    }
                    drop(x_data);
                    sink.add(&w, &dw);
                }
                if let Some(b) = &b {
                    if b.requires_grad() {
                        let mut db = vec![E::zero(); cout];
                        for row in grad.chunks_exact(cout) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        sink.add(b, &db);
                    }
                }
            }),
        )
    }

    /// Select one sample from the leading batch axis, keeping `N = 1`.
    /// The gradient scatters back into the selected segment.
    pub fn slice_batch(&self, index: usize) -> Tensor<E> {
        let shape = self.shape();
        assert!(!shape.is_empty(), "slice_batch: scalar input");
        let n = shape[0];
        assert!(index < n, "slice_batch: index {index} out of range for batch {n}");
        let stride: usize = shape[1..].iter().product();
        let out = self.data()[index * stride..(index + 1) * stride].to_vec();
        let mut out_shape = shape.to_vec();
        out_shape[0] = 1;
        let parents = if self.requires_grad() { vec![self.clone()] } else { Vec::new() };
        let input = self.clone();
        Tensor::from_op(
            "slice_batch",
            out,
            out_shape,
            parents,
            Box::new(move |grad, sink| {
                let mut dx = vec![E::zero(); input.numel()];
                dx[index * stride..(index + 1) * stride].copy_from_slice(grad);
                sink.add(&input, &dx);
            }),
        )
    }

    /// Concatenate two feature maps along the channel axis:
    /// `[N,C1,H,W] ++ [N,C2,H,W] -> [N,C1+C2,H,W]`.
    pub fn concat_channels(&self, other: &Tensor<E>) -> Tensor<E> {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(
            sa.len() == 4
                && sb.len() == 4
                && sa[0] == sb[0]
                && sa[2] == sb[2]
                && sa[3] == sb[3],
            "concat_channels: incompatible shapes {sa:?} vs {sb:?}"
        );
        let (n, c1, c2, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let mut out = Vec::with_capacity(n * (c1 + c2) * hw);
        {
            let a = self.data();
            let b = other.data();
            for i in 0..n {
                out.extend_from_slice(&a[i * c1 * hw..(i + 1) * c1 * hw]);
                out.extend_from_slice(&b[i * c2 * hw..(i + 1) * c2 * hw]);
            }
        }
        let mut parents = Vec::new();
        if self.requires_grad() {
            parents.push(self.clone());
        }
        if other.requires_grad() {
            parents.push(other.clone());
        }
        let lhs = self.clone();
        let rhs = other.clone();
        let shape = vec![n, c1 + c2, sa[2], sa[3]];
        Tensor::from_op(
            "concat_channels",
            out,
            shape,
            parents,
            Box::new(move |grad, sink| {
                let mut da = Vec::with_capacity(n * c1 * hw);
                let mut db = Vec::with_capacity(n * c2 * hw);
                for i in 0..n {
                    let base = i * (c1 + c2) * hw;
                    da.extend_from_slice(&grad[base..base + c1 * hw]);
                    db.extend_from_slice(&grad[base + c1 * hw..base + (c1 + c2) * hw]);
                }
                sink.add(&lhs, &da);
                sink.add(&rhs, &db);
            }),
        )
    }

    /// Mean binary cross-entropy against constant targets in `{0,1}`.
    ///
    /// Predictions are clamped to `[1e-7, 1 - 1e-7]`; outside the clamp the
    /// gradient is zero.
    pub fn bce_loss(&self, targets: &[E]) -> Tensor<E> {
        assert_eq!(
            self.numel(),
            targets.len(),
            "bce_loss: {} predictions vs {} targets",
            self.numel(),
            targets.len()
        );
        for &y in targets {
            assert!(
                y == E::zero() || y == E::one(),
                "bce_loss: target {y} outside {{0,1}}"
            );
        }
        let lo = E::from_f64(1e-7);
        let hi = E::one() - lo;
        let n = E::from_f64(targets.len() as f64);
        let clamp = move |p: E| p.max(lo).min(hi);

        let total: E = self
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let p = clamp(p);
                -(y * p.ln() + (E::one() - y) * (E::one() - p).ln())
            })
            .sum();
        let parents = if self.requires_grad() { vec![self.clone()] } else { Vec::new() };
        let preds = self.clone();
        let targets = targets.to_vec();
        Tensor::from_op(
            "bce_loss",
            vec![total / n],
            vec![1],
            parents,
            Box::new(move |grad, sink| {
                let p_data = preds.data();
                let contribution: Vec<E> = p_data
                    .iter()
                    .zip(&targets)
                    .map(|(&p, &y)| {
                        if p < lo || p > hi {
                            E::zero()
                        } else {
                            // d/dp of -[y ln p + (1-y) ln(1-p)] = (p - y) / (p (1-p))
                            grad[0] * (p - y) / (p * (E::one() - p)) / n
                        }
                    })
                    .collect();
                drop(p_data);
                sink.add(&preds, &contribution);
            }),
        )
    }
}
