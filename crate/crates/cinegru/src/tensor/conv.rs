//! Spatial operations: 2-D convolution (im2col + GEMM), max pooling,
//! global average pooling and batch normalization.
//!
//! Convolution here is cross-correlation (no kernel flip), the universal
//! deep-learning convention. Work is decomposed per batch sample with a
//! fixed accumulation order inside every output element, so results are
//! bit-identical regardless of how many threads execute the decomposition.

use rayon::prelude::*;

use super::{Element, Tensor};

/// Output extent of a strided window sweep; panics on an empty result.
fn out_extent(op: &str, input: usize, pad: usize, k: usize, stride: usize) -> usize {
    let padded = input + 2 * pad;
    assert!(
        padded >= k,
        "{op}: window {k} larger than padded extent {padded} (input {input}, padding {pad})"
    );
    let out = (padded - k) / stride + 1;
    assert!(out > 0, "{op}: zero-sized output");
    out
}

/// Scatter one sample into column-matrix layout `[Cin·kh·kw, oh·ow]`.
#[allow(clippy::too_many_arguments)]
fn im2col<E: Element>(
    input: &[E],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [E],
) {
    debug_assert_eq!(cols.len(), cin * kh * kw * oh * ow);
    for c in 0..cin {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(E::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            E::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Inverse of [`im2col`]: accumulate columns back onto the input plane.
#[allow(clippy::too_many_arguments)]
fn col2im<E: Element>(
    cols: &[E],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [E],
) {
    for c in 0..cin {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

impl<E: Element> Tensor<E> {
    /// 2-D cross-correlation.
    ///
    /// `input [N,Cin,H,W] ∗ kernel [Cout,Cin,kh,kw] (+ bias [Cout])
    ///  -> [N,Cout,H',W']` with `H' = (H + 2·pad − kh) / stride + 1`.
    pub fn conv2d(
        &self,
        kernel: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        stride: usize,
        padding: usize,
    ) -> Tensor<E> {
        assert!(stride > 0, "conv2d: stride must be positive");
        let ishape = self.shape();
        let kshape = kernel.shape();
        assert!(
            ishape.len() == 4 && kshape.len() == 4,
            "conv2d: expected 4-D input and kernel, got {ishape:?} and {kshape:?}"
        );
        assert_eq!(
            ishape[1], kshape[1],
            "conv2d: input shape {ishape:?} incompatible with kernel shape {kshape:?}"
        );
        let (n, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (cout, kh, kw) = (kshape[0], kshape[2], kshape[3]);
        if let Some(b) = bias {
            assert_eq!(
                b.shape(),
                &[cout],
                "conv2d: bias shape {:?} incompatible with kernel shape {kshape:?}",
                b.shape()
            );
        }
        let oh = out_extent("conv2d", h, padding, kh, stride);
        let ow = out_extent("conv2d", w, padding, kw, stride);
        let (ckk, ohw) = (cin * kh * kw, oh * ow);

        let mut out = vec![E::zero(); n * cout * ohw];
        {
            let x_guard = self.data();
            let x: &[E] = &x_guard;
            let k_guard = kernel.data();
            let k: &[E] = &k_guard;
            let bias_data = bias.map(|b| b.to_vec());
            let run = |(sample, chunk): (usize, &mut [E])| {
                let mut cols = vec![E::zero(); ckk * ohw];
                im2col(
                    &x[sample * cin * h * w..(sample + 1) * cin * h * w],
                    cin, h, w, kh, kw, stride, padding, oh, ow, &mut cols,
                );
                unsafe {
                    E::gemm(
                        cout, ckk, ohw,
                        k.as_ptr(), ckk as isize, 1,
                        cols.as_ptr(), ohw as isize, 1,
                        E::zero(),
                        chunk.as_mut_ptr(), ohw as isize, 1,
                    );
                }
                if let Some(b) = &bias_data {
                    for (c, plane) in chunk.chunks_exact_mut(ohw).enumerate() {
                        for v in plane {
                            *v += b[c];
                        }
                    }
                }
            };
            if n == 1 {
                run((0, &mut out));
            } else {
                out.par_chunks_exact_mut(cout * ohw).enumerate().for_each(run);
            }
        }

        let mut parents = Vec::new();
        for t in [Some(self), Some(kernel), bias].into_iter().flatten() {
            if t.requires_grad() {
                parents.push(t.clone());
            }
        }
        let x = self.clone();
        let k = kernel.clone();
        let b = bias.cloned();
        Tensor::from_op(
            "conv2d",
            out,
            vec![n, cout, oh, ow],
            parents,
            Box::new(move |grad, sink| {
                let x_guard = x.data();
                let x_data: &[E] = &x_guard;
                let k_guard = k.data();
                let k_data: &[E] = &k_guard;

                if x.requires_grad() {
                    let mut dx = vec![E::zero(); n * cin * h * w];
                    let run = |(sample, chunk): (usize, &mut [E])| {
                        // dcols = Kᵀ · dOut, then fold windows back onto the plane.
                        let mut dcols = vec![E::zero(); ckk * ohw];
                        unsafe {
                            E::gemm(
                                ckk, cout, ohw,
                                k_data.as_ptr(), 1, ckk as isize,
                                grad[sample * cout * ohw..].as_ptr(), ohw as isize, 1,
                                E::zero(),
                                dcols.as_mut_ptr(), ohw as isize, 1,
                            );
                        }
                        col2im(&dcols, cin, h, w, kh, kw, stride, padding, oh, ow, chunk);
                    };
                    if n == 1 {
                        run((0, &mut dx));
                    } else {
                        dx.par_chunks_exact_mut(cin * h * w).enumerate().for_each(run);
                    }
                    sink.add(&x, &dx);
                }

                if k.requires_grad() {
                    // Per-sample contributions computed in parallel, reduced in
                    // fixed sample order so summation is order-stable.
                    let per_sample: Vec<Vec<E>> = (0..n)
                        .into_par_iter()
                        .map(|sample| {
                            let mut cols = vec![E::zero(); ckk * ohw];
                            im2col(
                                &x_data[sample * cin * h * w..(sample + 1) * cin * h * w],
                                cin, h, w, kh, kw, stride, padding, oh, ow, &mut cols,
                            );
                            let mut dk = vec![E::zero(); cout * ckk];
                            unsafe {
                                E::gemm(
                                    cout, ohw, ckk,
                                    grad[sample * cout * ohw..].as_ptr(), ohw as isize, 1,
                                    cols.as_ptr(), 1, ohw as isize,
                                    E::zero(),
                                    dk.as_mut_ptr(), ckk as isize, 1,
                                );
                            }
                            dk
                        })
                        .collect();
                    let mut dk = vec![E::zero(); cout * ckk];
                    for sample_dk in &per_sample {
                        for (dst, &src) in dk.iter_mut().zip(sample_dk) {
                            *dst += src;
                        }
                    }
                    sink.add(&k, &dk);
                }

                if let Some(b) = &b {
                    if b.requires_grad() {
                        let mut db = vec![E::zero(); cout];
                        for sample in 0..n {
                            for (c, d) in db.iter_mut().enumerate() {
                                let base = (sample * cout + c) * ohw;
                                for &g in &grad[base..base + ohw] {
                                    *d += g;
                                }
                            }
                        }
                        sink.add(b, &db);
                    }
                }
            }),
        )
    }

    /// Max pooling over `kernel`×`kernel` windows. Padded cells never win.
    pub fn maxpool2d(&self, kernel: usize, stride: usize, padding: usize) -> Tensor<E> {
        let shape = self.shape();
        assert_eq!(shape.len(), 4, "maxpool2d: expected 4-D input, got {shape:?}");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let oh = out_extent("maxpool2d", h, padding, kernel, stride);
        let ow = out_extent("maxpool2d", w, padding, kernel, stride);

        let planes = n * c;
        let mut out = vec![E::zero(); planes * oh * ow];
        let mut argmax = vec![0usize; planes * oh * ow];
        {
            let x = self.data();
            for p in 0..planes {
                let plane = &x[p * h * w..(p + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = E::neg_infinity();
                        let mut best_idx = 0usize;
                        for ki in 0..kernel {
                            let iy = (oy * stride + ki) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kj in 0..kernel {
                                let ix = (ox * stride + kj) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = iy as usize * w + ix as usize;
                                // Strict comparison: first maximum wins ties.
                                if plane[idx] > best {
                                    best = plane[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[p * oh * ow + oy * ow + ox] = best;
                        argmax[p * oh * ow + oy * ow + ox] = p * h * w + best_idx;
                    }
                }
            }
        }

        let parents = if self.requires_grad() { vec![self.clone()] } else { Vec::new() };
        let x = self.clone();
        Tensor::from_op(
            "maxpool2d",
            out,
            vec![n, c, oh, ow],
            parents,
            Box::new(move |grad, sink| {
                let mut dx = vec![E::zero(); x.numel()];
                for (&g, &src) in grad.iter().zip(&argmax) {
                    dx[src] += g;
                }
                sink.add(&x, &dx);
            }),
        )
    }

    /// Spatial mean per channel: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&self) -> Tensor<E> {
        let shape = self.shape();
        assert_eq!(shape.len(), 4, "global_avg_pool: expected 4-D input, got {shape:?}");
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let inv = E::one() / E::from_f64(hw as f64);
        let out: Vec<E> = {
            let x = self.data();
            x.chunks_exact(hw).map(|plane| plane.iter().copied().sum::<E>() * inv).collect()
        };
        let parents = if self.requires_grad() { vec![self.clone()] } else { Vec::new() };
        let x = self.clone();
        Tensor::from_op(
            "global_avg_pool",
            out,
            vec![n, c],
            parents,
            Box::new(move |grad, sink| {
                let mut dx = vec![E::zero(); x.numel()];
                for (chunk, &g) in dx.chunks_exact_mut(hw).zip(grad) {
                    chunk.fill(g * inv);
                }
                sink.add(&x, &dx);
            }),
        )
    }

    /// Batch normalization over `(N,H,W)` per channel using batch statistics.
    ///
    /// Returns `(normalized, batch_mean, batch_var)`; the caller owns the
    /// running-statistics update, which stays outside the gradient graph.
    /// Variance is the biased estimator.
    pub fn batchnorm2d_train(
        &self,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        eps: E,
    ) -> (Tensor<E>, Vec<E>, Vec<E>) {
        let shape = self.shape();
        assert_eq!(shape.len(), 4, "batchnorm2d: expected 4-D input, got {shape:?}");
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        assert_eq!(gamma.shape(), &[c], "batchnorm2d: gamma shape {:?} for {c} channels", gamma.shape());
        assert_eq!(beta.shape(), &[c], "batchnorm2d: beta shape {:?} for {c} channels", beta.shape());
        let m = E::from_f64((n * hw) as f64);

        let mut mean = vec![E::zero(); c];
        let mut var = vec![E::zero(); c];
        {
            let x = self.data();
            for ch in 0..c {
                let mut acc = E::zero();
                for sample in 0..n {
                    let base = (sample * c + ch) * hw;
                    for &v in &x[base..base + hw] {
                        acc += v;
                    }
                }
                mean[ch] = acc / m;
                let mut sq = E::zero();
                for sample in 0..n {
                    let base = (sample * c + ch) * hw;
                    for &v in &x[base..base + hw] {
                        let d = v - mean[ch];
                        sq += d * d;
                    }
                }
                var[ch] = sq / m;
            }
        }
        let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();

        let mut out = vec![E::zero(); self.numel()];
        {
            let x = self.data();
            let g = gamma.data();
            let b = beta.data();
            for sample in 0..n {
                for ch in 0..c {
                    let base = (sample * c + ch) * hw;
                    for i in base..base + hw {
                        out[i] = g[ch] * (x[i] - mean[ch]) * inv_std[ch] + b[ch];
                    }
                }
            }
        }

        let mut parents = Vec::new();
        for t in [self, gamma, beta] {
            if t.requires_grad() {
                parents.push(t.clone());
            }
        }
        let x = self.clone();
        let gamma_t = gamma.clone();
        let beta_t = beta.clone();
        let mean_c = mean.clone();
        let inv_std_c = inv_std.clone();
        let result = Tensor::from_op(
            "batchnorm2d",
            out,
            shape.to_vec(),
            parents,
            Box::new(move |grad, sink| {
                let x_data = x.data();
                let g_data = gamma_t.data();
                let mut dgamma = vec![E::zero(); c];
                let mut dbeta = vec![E::zero(); c];
                let mut dx = vec![E::zero(); x.numel()];
                for ch in 0..c {
                    // Channel-wise sums of dy and dy·x̂.
                    let mut sum_dy = E::zero();
                    let mut sum_dy_xhat = E::zero();
                    for sample in 0..n {
                        let base = (sample * c + ch) * hw;
                        for i in base..base + hw {
                            let xhat = (x_data[i] - mean_c[ch]) * inv_std_c[ch];
                            sum_dy += grad[i];
                            sum_dy_xhat += grad[i] * xhat;
                        }
                    }
                    dbeta[ch] = sum_dy;
                    dgamma[ch] = sum_dy_xhat;
                    if x.requires_grad() {
                        let scale = g_data[ch] * inv_std_c[ch];
                        let mean_dy = sum_dy / m;
                        let mean_dy_xhat = sum_dy_xhat / m;
                        for sample in 0..n {
                            let base = (sample * c + ch) * hw;
                            for i in base..base + hw {
                                let xhat = (x_data[i] - mean_c[ch]) * inv_std_c[ch];
                                dx[i] = scale * (grad[i] - mean_dy - xhat * mean_dy_xhat);
                            }
                        }
                    }
                }
                drop(x_data);
                drop(g_data);
                if x.requires_grad() {
                    sink.add(&x, &dx);
                }
                sink.add(&gamma_t, &dgamma);
                sink.add(&beta_t, &dbeta);
            }),
        );
        (result, mean, var)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm2d_eval(
        &self,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        running_mean: &[E],
        running_var: &[E],
        eps: E,
    ) -> Tensor<E> {
        let shape = self.shape();
        assert_eq!(shape.len(), 4, "batchnorm2d: expected 4-D input, got {shape:?}");
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        assert_eq!(running_mean.len(), c, "batchnorm2d: running mean length mismatch");
        assert_eq!(running_var.len(), c, "batchnorm2d: running var length mismatch");
        let inv_std: Vec<E> = running_var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();

        let mut out = vec![E::zero(); self.numel()];
        {
            let x = self.data();
            let g = gamma.data();
            let b = beta.data();
            for sample in 0..n {
                for ch in 0..c {
                    let base = (sample * c + ch) * hw;
                    for i in base..base + hw {
                        out[i] = g[ch] * (x[i] - running_mean[ch]) * inv_std[ch] + b[ch];
                    }
                }
            }
        }

        let mut parents = Vec::new();
        for t in [self, gamma, beta] {
            if t.requires_grad() {
                parents.push(t.clone());
            }
        }
        let x = self.clone();
        let gamma_t = gamma.clone();
        let beta_t = beta.clone();
        let mean = running_mean.to_vec();
        let inv_std_c = inv_std;
        Tensor::from_op(
            "batchnorm2d",
            out,
            shape.to_vec(),
            parents,
            Box::new(move |grad, sink| {
                let x_data = x.data();
                let g_data = gamma_t.data();
                let mut dgamma = vec![E::zero(); c];
                let mut dbeta = vec![E::zero(); c];
                let mut dx = vec![E::zero(); x.numel()];
                for sample in 0..n {
                    for ch in 0..c {
                        let base = (sample * c + ch) * hw;
                        for i in base..base + hw {
                            let xhat = (x_data[i] - mean[ch]) * inv_std_c[ch];
                            dbeta[ch] += grad[i];
                            dgamma[ch] += grad[i] * xhat;
                            dx[i] = grad[i] * g_data[ch] * inv_std_c[ch];
                        }
                    }
                }
                drop(x_data);
                drop(g_data);
                if x.requires_grad() {
                    sink.add(&x, &dx);
                }
                sink.add(&gamma_t, &dgamma);
                sink.add(&beta_t, &dbeta);
            }),
        )
    }
}
