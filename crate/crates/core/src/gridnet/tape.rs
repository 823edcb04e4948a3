//! Reverse-mode differentiation over a fixed set of tensor operations.

use super::tensor::{self, Tensor4};
use crate::error::Result;

/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-3;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Depthwise {
        x: Var,
        k: usize,
    },
    Conv3 {
        x: Var,
        k: usize,
    },
    Pointwise {
        x: Var,
        k: usize,
        b: Option<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Inference-mode batch norm: a fixed affine map per channel.
    Affine {
        x: Var,
        gamma: usize,
        inv_std: Vec<f64>,
        xhat: Vec<f64>,
        beta: usize,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    Upsample {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Pad {
        x: Var,
    },
    Crop {
        x: Var,
    },
}

struct Node {
    value: Tensor4,
    op: Op,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Records the forward pass; parameters are read from the slice of
/// parameter tensors passed to each op, referenced by index.
pub struct Tape<'p> {
    params: &'p [Vec<f64>],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Vec<f64>]) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor4, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, x: Tensor4) -> Var {
        self.push(x, Op::Input)
    }

    pub fn depthwise(&mut self, x: Var, k: usize) -> Var {
        let y = tensor::depthwise3(self.value(x), &self.params[k]);
        self.push(y, Op::Depthwise { x, k })
    }

    pub fn conv3(&mut self, x: Var, k: usize, c_out: usize) -> Var {
        let y = tensor::conv3(self.value(x), &self.params[k], c_out);
        self.push(y, Op::Conv3 { x, k })
    }

    pub fn pointwise(&mut self, x: Var, k: usize, b: Option<usize>, c_out: usize) -> Var {
        let bias = b.map(|i| self.params[i].as_slice());
        let y = tensor::pointwise(self.value(x), &self.params[k], bias, c_out);
        self.push(y, Op::Pointwise { x, k, b })
    }

    /// Training-mode batch norm over `(n, h, w)` per channel.
    pub fn batch_norm(&mut self, x: Var, gamma: usize, beta: usize) -> (Var, BatchStats) {
        let xv = self.value(x);
        let c = xv.c;
        let m = xv.pixels() as f64;
        let mut mean = vec![0.0; c];
        for px in xv.data.chunks_exact(c) {
            mean.iter_mut().zip(px).for_each(|(a, v)| *a += v);
        }
        mean.iter_mut().for_each(|a| *a /= m);
        let mut var = vec![0.0; c];
        for px in xv.data.chunks_exact(c) {
            for ch in 0..c {
                let d = px[ch] - mean[ch];
                var[ch] += d * d;
            }
        }
        var.iter_mut().for_each(|a| *a /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = xv.data.clone();
        for px in xhat.chunks_exact_mut(c) {
            for ch in 0..c {
                px[ch] = (px[ch] - mean[ch]) * inv_std[ch];
            }
        }
        let y = affine(xv, &xhat, &self.params[gamma], &self.params[beta]);
        let var_out = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        (var_out, BatchStats { mean, var })
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_infer(&mut self, x: Var, gamma: usize, beta: usize, mean: &[f64], var: &[f64]) -> Var {
        let xv = self.value(x);
        let c = xv.c;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = xv.data.clone();
        for px in xhat.chunks_exact_mut(c) {
            for ch in 0..c {
                px[ch] = (px[ch] - mean[ch]) * inv_std[ch];
            }
        }
        let y = affine(xv, &xhat, &self.params[gamma], &self.params[beta]);
        self.push(
            y,
            Op::Affine {
                x,
                gamma,
                inv_std,
                xhat,
                beta,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = tensor::relu(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        let (y, arg) = tensor::max_pool2(self.value(x))?;
        Ok(self.push(y, Op::MaxPool { x, arg }))
    }

    pub fn upsample(&mut self, x: Var) -> Var {
        let y = tensor::upsample2(self.value(x));
        self.push(y, Op::Upsample { x })
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::concat(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat { a, b }))
    }

    pub fn pad_to(&mut self, x: Var, h: usize, w: usize) -> Var {
        if (self.value(x).h, self.value(x).w) == (h, w) {
            return x;
        }
        let y = tensor::pad_to(self.value(x), h, w);
        self.push(y, Op::Pad { x })
    }

    pub fn crop_to(&mut self, x: Var, h: usize, w: usize) -> Var {
        if (self.value(x).h, self.value(x).w) == (h, w) {
            return x;
        }
        let y = tensor::crop_to(self.value(x), h, w);
        self.push(y, Op::Crop { x })
    }

    /// Back-propagates `seed = ∂loss/∂out` and returns gradients for every
    /// parameter tensor (zeros for unused ones).
    pub fn backward(&self, out: Var, seed: &[f64]) -> Vec<Vec<f64>> {
        let mut pgrad: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.len()]).collect();
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed.to_vec());
        for id in (0..=out.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                let n = self.nodes[v.0].value.len();
                let g = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                f(g);
            };
            match &node.op {
                Op::Input => {}
                Op::Depthwise { x, k } => {
                    let xv = &self.nodes[x.0].value;
                    acc(*x, &mut |dx| {
                        tensor::depthwise3_backward(xv, &self.params[*k], &dy, dx, &mut pgrad[*k])
                    });
                }
                Op::Conv3 { x, k } => {
                    let xv = &self.nodes[x.0].value;
                    let c_out = node.value.c;
                    acc(*x, &mut |dx| {
                        tensor::conv3_backward(xv, &self.params[*k], c_out, &dy, dx, &mut pgrad[*k])
                    });
                }
                Op::Pointwise { x, k, b } => {
                    let xv = &self.nodes[x.0].value;
                    let c_out = node.value.c;
                    let mut db = b.map(|i| std::mem::take(&mut pgrad[i]));
                    let mut dk = std::mem::take(&mut pgrad[*k]);
                    acc(*x, &mut |dx| {
                        tensor::pointwise_backward(xv, &self.params[*k], c_out, &dy, dx, &mut dk, db.as_deref_mut())
                    });
                    pgrad[*k] = dk;
                    if let (Some(i), Some(d)) = (b, db) {
                        pgrad[*i] = d;
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let c = node.value.c;
                    let m = node.value.pixels() as f64;
                    let g = &self.params[*gamma];
                    let mut sum_dxhat = vec![0.0; c];
                    let mut sum_dxhat_xhat = vec![0.0; c];
                    for (dyp, xp) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            pgrad[*gamma][ch] += dyp[ch] * xp[ch];
                            pgrad[*beta][ch] += dyp[ch];
                            let dxh = dyp[ch] * g[ch];
                            sum_dxhat[ch] += dxh;
                            sum_dxhat_xhat[ch] += dxh * xp[ch];
                        }
                    }
                    acc(*x, &mut |dx| {
                        for ((dxp, dyp), xp) in dx.chunks_exact_mut(c).zip(dy.chunks_exact(c)).zip(xhat.chunks_exact(c))
                        {
                            for ch in 0..c {
                                let dxh = dyp[ch] * g[ch];
                                dxp[ch] += inv_std[ch] / m * (m * dxh - sum_dxhat[ch] - xp[ch] * sum_dxhat_xhat[ch]);
                            }
                        }
                    });
                }
                Op::Affine {
                    x,
                    gamma,
                    inv_std,
                    xhat,
                    beta,
                } => {
                    let c = node.value.c;
                    let g = &self.params[*gamma];
                    for (dyp, xp) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            pgrad[*gamma][ch] += dyp[ch] * xp[ch];
                            pgrad[*beta][ch] += dyp[ch];
                        }
                    }
                    acc(*x, &mut |dx| {
                        for (dxp, dyp) in dx.chunks_exact_mut(c).zip(dy.chunks_exact(c)) {
                            for ch in 0..c {
                                dxp[ch] += dyp[ch] * g[ch] * inv_std[ch];
                            }
                        }
                    });
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[x.0].value.data;
                    acc(*x, &mut |dx| {
                        for ((d, g), v) in dx.iter_mut().zip(&dy).zip(xv) {
                            if *v > 0.0 {
                                *d += g;
                            }
                        }
                    });
                }
                Op::MaxPool { x, arg } => {
                    acc(*x, &mut |dx| {
                        for (g, &a) in dy.iter().zip(arg) {
                            dx[a] += g;
                        }
                    });
                }
                Op::Upsample { x } => {
                    let xv = &self.nodes[x.0].value;
                    acc(*x, &mut |dx| tensor::upsample2_backward(xv, &dy, dx));
                }
                Op::Concat { a, b } => {
                    let (ca, cb) = (self.nodes[a.0].value.c, self.nodes[b.0].value.c);
                    let c = ca + cb;
                    acc(*a, &mut |da| {
                        for (d, g) in da.chunks_exact_mut(ca).zip(dy.chunks_exact(c)) {
                            d.iter_mut().zip(&g[..ca]).for_each(|(x, y)| *x += y);
                        }
                    });
                    acc(*b, &mut |db| {
                        for (d, g) in db.chunks_exact_mut(cb).zip(dy.chunks_exact(c)) {
                            d.iter_mut().zip(&g[ca..]).for_each(|(x, y)| *x += y);
                        }
                    });
                }
                Op::Pad { x } => {
                    let xv = &self.nodes[x.0].value;
                    let padded = &node.value;
                    let grad = Tensor4 {
                        data: dy.clone(),
                        ..padded.clone()
                    };
                    let cropped = tensor::crop_to(&grad, xv.h, xv.w);
                    acc(*x, &mut |dx| {
                        dx.iter_mut().zip(&cropped.data).for_each(|(a, b)| *a += b)
                    });
                }
                Op::Crop { x } => {
                    let xv = &self.nodes[x.0].value;
                    let grad = Tensor4 {
                        data: dy.clone(),
                        ..node.value.clone()
                    };
                    let padded = tensor::pad_to(&grad, xv.h, xv.w);
                    acc(*x, &mut |dx| dx.iter_mut().zip(&padded.data).for_each(|(a, b)| *a += b));
                }
            }
        }
        pgrad
    }
}

fn affine(x: &Tensor4, xhat: &[f64], gamma: &[f64], beta: &[f64]) -> Tensor4 {
    let c = x.c;
    let mut y = x.clone();
    for (yp, xp) in y.data.chunks_exact_mut(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            yp[ch] = gamma[ch] * xp[ch] + beta[ch];
        }
    }
    y
}
