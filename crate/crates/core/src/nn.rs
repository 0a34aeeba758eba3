//! Layer primitives with hand-written backward passes.
//!
//! Networks are flat sequences of [`Op`]s whose weights live in a
//! [`ParamGroup`] list and are addressed by group index. A forward pass
//! never mutates parameters; batch-norm statistic updates are returned on the
//! [`Tape`] so the caller decides whether to commit them.

use matrixmultiply::dgemm;

use crate::params::ParamGroup;
use crate::tensor::Tensor;

/// Batch-norm epsilon added to the variance.
pub const BN_EPSILON: f64 = 1e-3;
/// Weight on the previous running statistic when folding in a batch.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// 3x3 convolution, stride 1, zero "same" padding.
    Conv {
        weight: usize,
        bias: usize,
        cin: usize,
        cout: usize,
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        mean: usize,
        var: usize,
    },
    Relu,
    MaxPool,
    Upsample,
    Sigmoid,
    GlobalAvgPool,
    Dense {
        weight: usize,
        bias: usize,
        fin: usize,
        fout: usize,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sequential {
    pub ops: Vec<Op>,
}

enum Cache {
    Conv { input: Tensor },
    BatchNorm { xhat: Tensor, inv_std: Vec<f64>, batch_stats: bool },
    Relu { output: Tensor },
    MaxPool { argmax: Vec<usize>, in_h: usize, in_w: usize },
    Upsample,
    Sigmoid { output: Tensor },
    GlobalAvgPool { h: usize, w: usize },
    Dense { input: Tensor },
}

/// Running-statistic update produced by a training-mode batch-norm layer.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean_group: usize,
    pub var_group: usize,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

pub struct Tape {
    caches: Vec<Cache>,
    pub stat_updates: Vec<StatUpdate>,
}

/// Per-group gradients; `None` for groups that were not differentiated.
#[derive(Clone, Debug)]
pub struct Grads {
    pub groups: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn new(len: usize) -> Self {
        Grads {
            groups: vec![None; len],
        }
    }

    fn accumulate(&mut self, group: usize, values: Vec<f64>) {
        match &mut self.groups[group] {
            Some(existing) => existing.iter_mut().zip(values).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(values),
        }
    }

    pub fn merge(&mut self, other: Grads) {
        for (i, g) in other.groups.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(i, g);
            }
        }
    }
}

impl Sequential {
    pub fn forward(&self, groups: &[ParamGroup], input: &Tensor, mode: Mode) -> (Tensor, Tape) {
        let mut tape = Tape {
            caches: Vec::with_capacity(self.ops.len()),
            stat_updates: Vec::new(),
        };
        let mut x = input.clone();
        for op in &self.ops {
            x = forward_op(op, groups, x, mode, &mut tape);
        }
        (x, tape)
    }

    /// Forward pass without keeping intermediate activations.
    pub fn infer(&self, groups: &[ParamGroup], input: &Tensor) -> Tensor {
        self.forward(groups, input, Mode::Eval).0
    }

    /// Back-propagates `grad_out`. Parameter gradients are produced only for
    /// trainable groups; the input gradient only when `need_input_grad`.
    pub fn backward(
        &self,
        groups: &[ParamGroup],
        tape: Tape,
        grad_out: Tensor,
        need_input_grad: bool,
    ) -> (Grads, Option<Tensor>) {
        let mut grads = Grads::new(groups.len());
        let mut g = grad_out;
        for (i, (op, cache)) in self.ops.iter().zip(tape.caches).enumerate().rev() {
            let want_input = need_input_grad || i > 0;
            g = match backward_op(op, groups, cache, g, want_input, &mut grads) {
                Some(next) => next,
                None => return (grads, None),
            };
        }
        (grads, Some(g))
    }
}

fn forward_op(op: &Op, groups: &[ParamGroup], x: Tensor, mode: Mode, tape: &mut Tape) -> Tensor {
    match *op {
        Op::Conv {
            weight,
            bias,
            cin,
            cout,
        } => {
            assert_eq!(x.c, cin, "conv input channels");
            let y = conv_forward(&x, &groups[weight].data, &groups[bias].data, cout);
            tape.caches.push(Cache::Conv { input: x });
            y
        }
        Op::BatchNorm {
            gamma,
            beta,
            mean,
            var,
        } => {
            let gamma_v = &groups[gamma].data;
            let beta_v = &groups[beta].data;
            let batch_stats = mode == Mode::Train && groups[gamma].trainable;
            let (mu, sigma2) = if batch_stats {
                let (m, v) = channel_moments(&x);
                tape.stat_updates.push(StatUpdate {
                    mean_group: mean,
                    var_group: var,
                    batch_mean: m.clone(),
                    batch_var: v.clone(),
                });
                (m, v)
            } else {
                (groups[mean].data.clone(), groups[var].data.clone())
            };
            let inv_std: Vec<f64> = sigma2.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
            let mut xhat = x;
            let mut y = Tensor::zeros(xhat.n, xhat.c, xhat.h, xhat.w);
            let plane = xhat.plane();
            for n in 0..xhat.n {
                for c in 0..xhat.c {
                    let off = (n * xhat.c + c) * plane;
                    let (m, s, g, b) = (mu[c], inv_std[c], gamma_v[c], beta_v[c]);
                    for k in off..off + plane {
                        let h = (xhat.data[k] - m) * s;
                        xhat.data[k] = h;
                        y.data[k] = g * h + b;
                    }
                }
            }
            tape.caches.push(Cache::BatchNorm {
                xhat,
                inv_std,
                batch_stats,
            });
            y
        }
        Op::Relu => {
            let mut y = x;
            y.data.iter_mut().for_each(|v| *v = v.max(0.0));
            tape.caches.push(Cache::Relu { output: y.clone() });
            y
        }
        Op::MaxPool => {
            let (oh, ow) = (x.h / 2, x.w / 2);
            let mut y = Tensor::zeros(x.n, x.c, oh, ow);
            let mut argmax = vec![0usize; y.data.len()];
            for nc in 0..x.n * x.c {
                let src = nc * x.plane();
                let dst = nc * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = src + (2 * oy) * x.w + 2 * ox;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let k = src + (2 * oy + dy) * x.w + 2 * ox + dx;
                            if x.data[k] > x.data[best] {
                                best = k;
                            }
                        }
                        y.data[dst + oy * ow + ox] = x.data[best];
                        argmax[dst + oy * ow + ox] = best;
                    }
                }
            }
            tape.caches.push(Cache::MaxPool {
                argmax,
                in_h: x.h,
                in_w: x.w,
            });
            y
        }
        Op::Upsample => {
            let (oh, ow) = (x.h * 2, x.w * 2);
            let mut y = Tensor::zeros(x.n, x.c, oh, ow);
            for nc in 0..x.n * x.c {
                let src = &x.data[nc * x.plane()..(nc + 1) * x.plane()];
                let dst = &mut y.data[nc * oh * ow..(nc + 1) * oh * ow];
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[oy * ow + ox] = src[(oy / 2) * x.w + ox / 2];
                    }
                }
            }
            tape.caches.push(Cache::Upsample);
            y
        }
        Op::Sigmoid => {
            let mut y = x;
            y.data.iter_mut().for_each(|v| *v = sigmoid(*v));
            tape.caches.push(Cache::Sigmoid { output: y.clone() });
            y
        }
        Op::GlobalAvgPool => {
            let plane = x.plane();
            let mut y = Tensor::zeros(x.n, x.c, 1, 1);
            for nc in 0..x.n * x.c {
                y.data[nc] = x.data[nc * plane..(nc + 1) * plane].iter().sum::<f64>() / plane as f64;
            }
            tape.caches.push(Cache::GlobalAvgPool { h: x.h, w: x.w });
            y
        }
        Op::Dense {
            weight,
            bias,
            fin,
            fout,
        } => {
            assert_eq!(x.sample_len(), fin, "dense input width");
            let w = &groups[weight].data;
            let b = &groups[bias].data;
            let mut y = Tensor::zeros(x.n, fout, 1, 1);
            for n in 0..x.n {
                y.data[n * fout..(n + 1) * fout].copy_from_slice(b);
            }
            // y (n x fout) += x (n x fin) * W^T, W stored fout x fin.
            unsafe {
                dgemm(
                    x.n, fin, fout, 1.0,
                    x.data.as_ptr(), fin as isize, 1,
                    w.as_ptr(), 1, fin as isize,
                    1.0,
                    y.data.as_mut_ptr(), fout as isize, 1,
                );
            }
            tape.caches.push(Cache::Dense { input: x });
            y
        }
    }
}

fn backward_op(
    op: &Op,
    groups: &[ParamGroup],
    cache: Cache,
    g: Tensor,
    want_input: bool,
    grads: &mut Grads,
) -> Option<Tensor> {
    match (op, cache) {
        (
            &Op::Conv {
                weight,
                bias,
                cin,
                cout,
            },
            Cache::Conv { input },
        ) => {
            let need_w = groups[weight].trainable;
            let need_b = groups[bias].trainable;
            if need_b {
                let mut db = vec![0.0; cout];
                let plane = g.plane();
                for n in 0..g.n {
                    for (c, acc) in db.iter_mut().enumerate() {
                        let off = (n * cout + c) * plane;
                        *acc += g.data[off..off + plane].iter().sum::<f64>();
                    }
                }
                grads.accumulate(bias, db);
            }
            let (dw, dx) = conv_backward(
                &input,
                &groups[weight].data,
                &g,
                cin,
                cout,
                need_w,
                want_input,
            );
            if let Some(dw) = dw {
                grads.accumulate(weight, dw);
            }
            dx
        }
        (
            &Op::BatchNorm { gamma, beta, .. },
            Cache::BatchNorm {
                xhat,
                inv_std,
                batch_stats,
            },
        ) => {
            let gamma_v = &groups[gamma].data;
            let plane = g.plane();
            let count = (g.n * plane) as f64;
            let mut dgamma = vec![0.0; g.c];
            let mut dbeta = vec![0.0; g.c];
            for n in 0..g.n {
                for c in 0..g.c {
                    let off = (n * g.c + c) * plane;
                    for k in off..off + plane {
                        dgamma[c] += g.data[k] * xhat.data[k];
                        dbeta[c] += g.data[k];
                    }
                }
            }
            let dx = want_input.then(|| {
                let mut dx = Tensor::zeros(g.n, g.c, g.h, g.w);
                for n in 0..g.n {
                    for c in 0..g.c {
                        let off = (n * g.c + c) * plane;
                        let scale = gamma_v[c] * inv_std[c];
                        if batch_stats {
                            let mean_dy = dbeta[c] / count;
                            let mean_dy_xhat = dgamma[c] / count;
                            for k in off..off + plane {
                                dx.data[k] = scale * (g.data[k] - mean_dy - xhat.data[k] * mean_dy_xhat);
                            }
                        } else {
                            for k in off..off + plane {
                                dx.data[k] = scale * g.data[k];
                            }
                        }
                    }
                }
                dx
            });
            if groups[gamma].trainable {
                grads.accumulate(gamma, dgamma);
            }
            if groups[beta].trainable {
                grads.accumulate(beta, dbeta);
            }
            dx
        }
        (Op::Relu, Cache::Relu { output }) => want_input.then(|| {
            let mut dx = g;
            dx.data
                .iter_mut()
                .zip(&output.data)
                .for_each(|(d, &o)| if o <= 0.0 { *d = 0.0 });
            dx
        }),
        (Op::MaxPool, Cache::MaxPool { argmax, in_h, in_w }) => want_input.then(|| {
            let mut dx = Tensor::zeros(g.n, g.c, in_h, in_w);
            for (k, &src) in argmax.iter().enumerate() {
                dx.data[src] += g.data[k];
            }
            dx
        }),
        (Op::Upsample, Cache::Upsample) => want_input.then(|| {
            let (ih, iw) = (g.h / 2, g.w / 2);
            let mut dx = Tensor::zeros(g.n, g.c, ih, iw);
            for nc in 0..g.n * g.c {
                let src = &g.data[nc * g.plane()..(nc + 1) * g.plane()];
                let dst = &mut dx.data[nc * ih * iw..(nc + 1) * ih * iw];
                for oy in 0..g.h {
                    for ox in 0..g.w {
                        dst[(oy / 2) * iw + ox / 2] += src[oy * g.w + ox];
                    }
                }
            }
            dx
        }),
        (Op::Sigmoid, Cache::Sigmoid { output }) => want_input.then(|| {
            let mut dx = g;
            dx.data
                .iter_mut()
                .zip(&output.data)
                .for_each(|(d, &s)| *d *= s * (1.0 - s));
            dx
        }),
        (Op::GlobalAvgPool, Cache::GlobalAvgPool { h, w }) => want_input.then(|| {
            let plane = h * w;
            let mut dx = Tensor::zeros(g.n, g.c, h, w);
            for nc in 0..g.n * g.c {
                let v = g.data[nc] / plane as f64;
                dx.data[nc * plane..(nc + 1) * plane].iter_mut().for_each(|d| *d = v);
            }
            dx
        }),
        (
            &Op::Dense {
                weight,
                bias,
                fin,
                fout,
            },
            Cache::Dense { input },
        ) => {
            if groups[bias].trainable {
                let mut db = vec![0.0; fout];
                for n in 0..g.n {
                    db.iter_mut()
                        .zip(&g.data[n * fout..(n + 1) * fout])
                        .for_each(|(a, b)| *a += b);
                }
                grads.accumulate(bias, db);
            }
            if groups[weight].trainable {
                // dW (fout x fin) = g^T (fout x n) * x (n x fin)
                let mut dw = vec![0.0; fout * fin];
                unsafe {
                    dgemm(
                        fout, g.n, fin, 1.0,
                        g.data.as_ptr(), 1, fout as isize,
                        input.data.as_ptr(), fin as isize, 1,
                        0.0,
                        dw.as_mut_ptr(), fin as isize, 1,
                    );
                }
                grads.accumulate(weight, dw);
            }
            want_input.then(|| {
                let w = &groups[weight].data;
                let mut dx = Tensor::zeros(input.n, input.c, input.h, input.w);
                // dx (n x fin) = g (n x fout) * W (fout x fin)
                unsafe {
                    dgemm(
                        g.n, fout, fin, 1.0,
                        g.data.as_ptr(), fout as isize, 1,
                        w.as_ptr(), fin as isize, 1,
                        0.0,
                        dx.data.as_mut_ptr(), fin as isize, 1,
                    );
                }
                dx
            })
        }
        _ => unreachable!("tape does not match network"),
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let plane = x.plane();
    let count = (x.n * plane) as f64;
    let mut mean = vec![0.0; x.c];
    for n in 0..x.n {
        for (c, m) in mean.iter_mut().enumerate() {
            let off = (n * x.c + c) * plane;
            *m += x.data[off..off + plane].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; x.c];
    for n in 0..x.n {
        for (c, v) in var.iter_mut().enumerate() {
            let off = (n * x.c + c) * plane;
            let m = mean[c];
            *v += x.data[off..off + plane].iter().map(|a| (a - m) * (a - m)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// Unrolls 3x3 neighbourhoods of one sample into a `(cin*9) x (h*w)` matrix.
fn im2col(sample: &[f64], cin: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &sample[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        *d = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, out: &mut [f64]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &Tensor, weight: &[f64], bias: &[f64], cout: usize) -> Tensor {
    let (cin, h, w) = (x.c, x.h, x.w);
    let hw = h * w;
    let k = cin * 9;
    let mut y = Tensor::zeros(x.n, cout, h, w);
    let mut cols = vec![0.0; k * hw];
    for n in 0..x.n {
        im2col(x.sample(n), cin, h, w, &mut cols);
        let out = y.sample_mut(n);
        for (c, b) in bias.iter().enumerate() {
            out[c * hw..(c + 1) * hw].fill(*b);
        }
        unsafe {
            dgemm(
                cout, k, hw, 1.0,
                weight.as_ptr(), k as isize, 1,
                cols.as_ptr(), hw as isize, 1,
                1.0,
                out.as_mut_ptr(), hw as isize, 1,
            );
        }
    }
    y
}

fn conv_backward(
    x: &Tensor,
    weight: &[f64],
    g: &Tensor,
    cin: usize,
    cout: usize,
    need_w: bool,
    need_x: bool,
) -> (Option<Vec<f64>>, Option<Tensor>) {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let k = cin * 9;
    let mut dw = need_w.then(|| vec![0.0; cout * k]);
    let mut dx = need_x.then(|| Tensor::zeros(x.n, cin, h, w));
    let mut cols = vec![0.0; k * hw];
    for n in 0..x.n {
        let gs = g.sample(n);
        if let Some(dw) = dw.as_mut() {
            im2col(x.sample(n), cin, h, w, &mut cols);
            unsafe {
                dgemm(
                    cout, hw, k, 1.0,
                    gs.as_ptr(), hw as isize, 1,
                    cols.as_ptr(), 1, hw as isize,
                    1.0,
                    dw.as_mut_ptr(), k as isize, 1,
                );
            }
        }
        if let Some(dx) = dx.as_mut() {
            unsafe {
                dgemm(
                    k, cout, hw, 1.0,
                    weight.as_ptr(), 1, k as isize,
                    gs.as_ptr(), hw as isize, 1,
                    0.0,
                    cols.as_mut_ptr(), hw as isize, 1,
                );
            }
            col2im(&cols, cin, h, w, dx.sample_mut(n));
        }
    }
    (dw, dx)
}
