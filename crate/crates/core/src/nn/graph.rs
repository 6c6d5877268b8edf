use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayViewMut2, Axis, Zip};

use super::kernels;
use super::layers::{BatchNorm, Conv2d};
use super::params::{Gradients, ParamStore, StatsId};
use super::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, tape recorded.
    Train,
    /// Running statistics, tape recorded.
    Eval,
    /// Running statistics, nothing cached for backward.
    Inference,
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        layer: Conv2d,
        /// Per-sample column matrices; empty for 1x1 kernels or in inference.
        cols: Vec<Array2<f64>>,
    },
    BatchNorm {
        x: Var,
        layer: BatchNorm,
        xhat: Tensor,
        inv_std: Array1<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    /// `c * tanh(x / c)`.
    SoftClamp {
        x: Var,
        c: f64,
    },
    MaxPool {
        x: Var,
        arg: Vec<u32>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    MulMap {
        x: Var,
        map: Var,
    },
    SpatialActivation {
        x: Var,
        gain: f64,
    },
    Scale {
        x: Var,
        k: f64,
    },
    Exp(Var),
    Add(Var, Var),
    Mul(Var, Var),
    GlobalAvgPool(Var),
    Broadcast(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single forward evaluation whose operations can be replayed backwards.
pub struct Graph<'a> {
    store: &'a ParamStore,
    mode: Mode,
    nodes: Vec<Node>,
    stat_updates: Vec<(StatsId, Array1<f64>, Array1<f64>)>,
}

fn as_mat(t: &Tensor, n: usize) -> ArrayView2<'_, f64> {
    let (_, c, h, w) = t.dim();
    let plane = t.index_axis(Axis(0), n);
    plane.into_shape_with_order((c, h * w)).expect("contiguous tensor")
}

fn as_mat_mut(t: &mut Tensor, n: usize) -> ArrayViewMut2<'_, f64> {
    let (_, c, h, w) = t.dim();
    let plane = t.index_axis_mut(Axis(0), n);
    plane.into_shape_with_order((c, h * w)).expect("contiguous tensor")
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            store,
            mode,
            nodes: Vec::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn recording(&self) -> bool {
        self.mode != Mode::Inference
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Running-statistic updates gathered by batch-norm layers in train mode.
    pub fn take_stat_updates(&mut self) -> Vec<(StatsId, Array1<f64>, Array1<f64>)> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Constant input; gradients are not propagated into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        assert!(value.is_standard_layout(), "graph inputs must be contiguous");
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, x: Var, layer: &Conv2d) -> Var {
        let (n, c, h, w) = self.value(x).dim();
        assert_eq!(c, layer.in_channels, "conv input channels");
        let k = layer.kernel;
        let weight = self.store.param(layer.weight).value.view();
        let wmat = weight.into_shape_with_order((layer.out_channels, c * k * k)).unwrap();
        let mut y = Array4::<f64>::zeros((n, layer.out_channels, h, w));
        let mut cols_cache = Vec::new();
        let xv = &self.nodes[x.0].value;
        for i in 0..n {
            let mut ymat = as_mat_mut(&mut y, i);
            if k == 1 {
                general_mat_mul(1.0, &wmat, &as_mat(xv, i), 0.0, &mut ymat);
            } else {
                let mut cols = Array2::<f64>::zeros((c * k * k, h * w));
                let src = xv.index_axis(Axis(0), i);
                kernels::im2col(src.as_slice().unwrap(), c, h, w, k, cols.as_slice_mut().unwrap());
                general_mat_mul(1.0, &wmat, &cols, 0.0, &mut ymat);
                if self.mode != Mode::Inference {
                    cols_cache.push(cols);
                }
            }
            if let Some(b) = layer.bias {
                let bias = &self.store.param(b).value;
                for (mut row, &bv) in ymat.outer_iter_mut().zip(bias.iter()) {
                    row += bv;
                }
            }
        }
        self.push(
            y,
            Op::Conv {
                x,
                layer: *layer,
                cols: cols_cache,
            },
            true,
        )
    }

    pub fn batch_norm(&mut self, x: Var, layer: &BatchNorm) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = xv.dim();
        assert_eq!(c, layer.channels, "batch-norm channels");
        let gamma = &self.store.param(layer.gamma).value;
        let beta = &self.store.param(layer.beta).value;
        let batch_stats = self.mode == Mode::Train;
        let (mean, var) = if batch_stats {
            let m = (n * h * w) as f64;
            let mut mean = Array1::zeros(c);
            let mut var = Array1::zeros(c);
            for ch in 0..c {
                let lane = xv.slice(s![.., ch, .., ..]);
                let mu = lane.sum() / m;
                let v = lane.fold(0.0, |acc, &t| acc + (t - mu) * (t - mu)) / m;
                mean[ch] = mu;
                var[ch] = v;
            }
            let unbiased = if m > 1.0 { &var * (m / (m - 1.0)) } else { var.clone() };
            self.stat_updates.push((layer.stats, mean.clone(), unbiased));
            (mean, var)
        } else {
            let r = self.store.running(layer.stats);
            (r.mean.clone(), r.var.clone())
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BatchNorm::EPS).sqrt());
        let mut xhat = xv.clone();
        for ch in 0..c {
            let (mu, is) = (mean[ch], inv_std[ch]);
            xhat.slice_mut(s![.., ch, .., ..]).mapv_inplace(|t| (t - mu) * is);
        }
        let mut y = xhat.clone();
        for ch in 0..c {
            let (g, b) = (gamma[ch], beta[ch]);
            y.slice_mut(s![.., ch, .., ..]).mapv_inplace(|t| g * t + b);
        }
        let xhat = if self.recording() { xhat } else { Tensor::zeros((0, 0, 0, 0)) };
        self.push(
            y,
            Op::BatchNorm {
                x,
                layer: *layer,
                xhat,
                inv_std,
                batch_stats,
            },
            true,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(y, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.ng(x);
        self.push(y, Op::Sigmoid(x), ng)
    }

    /// Smooth bound to (-c, c): `c * tanh(x / c)`.
    pub fn soft_clamp(&mut self, x: Var, c: f64) -> Var {
        assert!(c > 0.0);
        let y = self.value(x).mapv(|v| c * (v / c).tanh());
        let ng = self.ng(x);
        self.push(y, Op::SoftClamp { x, c }, ng)
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dim();
        assert!(h >= 2 && w >= 2, "max pooling needs at least 2x2, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Array4::<f64>::zeros((n, c, oh, ow));
        let mut arg = vec![0u32; n * c * oh * ow];
        let xs = xv.as_slice().unwrap();
        let ys = y.as_slice_mut().unwrap();
        for p in 0..n * c {
            kernels::max_pool2(
                &xs[p * h * w..(p + 1) * h * w],
                h,
                w,
                &mut ys[p * oh * ow..(p + 1) * oh * ow],
                &mut arg[p * oh * ow..(p + 1) * oh * ow],
            );
        }
        let ng = self.ng(x);
        self.push(y, Op::MaxPool { x, arg }, ng)
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        if factor == 1 {
            return x;
        }
        let xv = self.value(x);
        let (n, c, h, w) = xv.dim();
        let mut y = Array4::<f64>::zeros((n, c, h * factor, w * factor));
        let xs = xv.as_slice().unwrap();
        let ys = y.as_slice_mut().unwrap();
        let (ip, op) = (h * w, h * w * factor * factor);
        for p in 0..n * c {
            kernels::upsample(&xs[p * ip..(p + 1) * ip], h, w, factor, &mut ys[p * op..(p + 1) * op]);
        }
        let ng = self.ng(x);
        self.push(y, Op::Upsample { x, factor }, ng)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("concat shapes");
        let y = if y.is_standard_layout() { y } else { y.as_standard_layout().into_owned() };
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(y, Op::Concat(parts.to_vec()), ng)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let y = self.value(x).slice(s![.., start..start + len, .., ..]).to_owned();
        let ng = self.ng(x);
        self.push(y, Op::Slice { x, start }, ng)
    }

    /// Multiplies every channel of `x` by the single-channel `map`.
    pub fn mul_map(&mut self, x: Var, map: Var) -> Var {
        let xv = self.value(x);
        let mv = self.value(map);
        assert_eq!(mv.dim().1, 1, "map must have one channel");
        let y = xv * mv;
        let ng = self.ng(x) || self.ng(map);
        self.push(y, Op::MulMap { x, map }, ng)
    }

    /// Elementwise `gain * (exp(-(x - 1/2)^2) - exp(-1/4)) + 1`.
    pub fn spatial_activation(&mut self, x: Var, gain: f64) -> Var {
        let y = self.value(x).mapv(|v| crate::hcnet::activation_value(v, gain));
        let ng = self.ng(x);
        self.push(y, Op::SpatialActivation { x, gain }, ng)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let y = self.value(x) * k;
        let ng = self.ng(x);
        self.push(y, Op::Scale { x, k }, ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(f64::exp);
        let ng = self.ng(x);
        self.push(y, Op::Exp(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Mul(a, b), ng)
    }

    /// `(N, C, H, W) -> (N, C, 1, 1)`
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dim();
        let mut y = Array4::<f64>::zeros((n, c, 1, 1));
        for i in 0..n {
            for ch in 0..c {
                y[[i, ch, 0, 0]] = xv.slice(s![i, ch, .., ..]).sum() / (h * w) as f64;
            }
        }
        let ng = self.ng(x);
        self.push(y, Op::GlobalAvgPool(x), ng)
    }

    /// `(N, L, 1, 1) -> (N, L, h, w)` by spatial replication.
    pub fn broadcast_spatial(&mut self, z: Var, h: usize, w: usize) -> Var {
        let zv = self.value(z);
        let (n, l, zh, zw) = zv.dim();
        assert_eq!((zh, zw), (1, 1), "broadcast source must be 1x1");
        let y = Array4::from_shape_fn((n, l, h, w), |(i, c, _, _)| zv[[i, c, 0, 0]]);
        let ng = self.ng(z);
        self.push(y, Op::Broadcast(z), ng)
    }

    /// Reverse sweep. `seeds` are `dLoss/dvalue` for terminal nodes.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        assert!(self.recording(), "backward on an inference graph");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.dim(), self.value(v).dim(), "seed shape");
            accumulate(&mut grads, v, g);
        }
        let mut pg = self.store.zero_grads();
        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Conv { x, layer, cols } => self.conv_backward(*x, layer, cols, &dy, &mut grads, &mut pg),
                Op::BatchNorm {
                    x,
                    layer,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (n, c, h, w) = dy.dim();
                    let m = (n * h * w) as f64;
                    let gamma = &self.store.param(layer.gamma).value;
                    let mut dgamma = Array1::zeros(c);
                    let mut dbeta = Array1::zeros(c);
                    let mut dx = Tensor::zeros(dy.dim());
                    for ch in 0..c {
                        let dyc = dy.slice(s![.., ch, .., ..]);
                        let xh = xhat.slice(s![.., ch, .., ..]);
                        let sum_dy = dyc.sum();
                        let sum_dy_xh = Zip::from(&dyc).and(&xh).fold(0.0, |a, &d, &t| a + d * t);
                        dgamma[ch] = sum_dy_xh;
                        dbeta[ch] = sum_dy;
                        if self.ng(*x) {
                            let k = gamma[ch] * inv_std[ch];
                            let mut dxc = dx.slice_mut(s![.., ch, .., ..]);
                            if *batch_stats {
                                Zip::from(&mut dxc).and(&dyc).and(&xh).for_each(|o, &d, &t| {
                                    *o = k * (d - sum_dy / m - t * sum_dy_xh / m);
                                });
                            } else {
                                Zip::from(&mut dxc).and(&dyc).for_each(|o, &d| *o = k * d);
                            }
                        }
                    }
                    *pg.get_mut(layer.gamma) += &dgamma;
                    *pg.get_mut(layer.beta) += &dbeta;
                    if self.ng(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Relu(x) => {
                    let mut dx = dy;
                    Zip::from(&mut dx).and(&node.value).for_each(|d, &y| {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = dy;
                    Zip::from(&mut dx).and(&node.value).for_each(|d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut grads, *x, dx);
                }
                Op::SoftClamp { x, c } => {
                    let mut dx = dy;
                    Zip::from(&mut dx).and(&node.value).for_each(|d, &y| {
                        let t = y / *c;
                        *d *= 1.0 - t * t;
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool { x, arg } => {
                    let (n, c, h, w) = self.value(*x).dim();
                    let mut dx = Tensor::zeros((n, c, h, w));
                    let dxs = dx.as_slice_mut().unwrap();
                    let dys = dy.as_slice().unwrap();
                    let (ip, op) = (h * w, (h / 2) * (w / 2));
                    for p in 0..n * c {
                        for o in 0..op {
                            dxs[p * ip + arg[p * op + o] as usize] += dys[p * op + o];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample { x, factor } => {
                    let (n, c, h, w) = self.value(*x).dim();
                    let mut dx = Tensor::zeros((n, c, h, w));
                    let dxs = dx.as_slice_mut().unwrap();
                    let dys = dy.as_slice().unwrap();
                    let (ip, op) = (h * w, h * w * factor * factor);
                    for p in 0..n * c {
                        kernels::upsample_adjoint(&dys[p * op..(p + 1) * op], h, w, *factor, &mut dxs[p * ip..(p + 1) * ip]);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let c = self.value(p).dim().1;
                        if self.ng(p) {
                            accumulate(&mut grads, p, dy.slice(s![.., start..start + c, .., ..]).to_owned());
                        }
                        start += c;
                    }
                }
                Op::Slice { x, start } => {
                    let mut dx = Tensor::zeros(self.value(*x).dim());
                    let len = dy.dim().1;
                    dx.slice_mut(s![.., *start..*start + len, .., ..]).assign(&dy);
                    accumulate(&mut grads, *x, dx);
                }
                Op::MulMap { x, map } => {
                    let xv = self.value(*x);
                    let mv = self.value(*map);
                    if self.ng(*map) {
                        let dmap = (&dy * xv).sum_axis(Axis(1)).insert_axis(Axis(1));
                        accumulate(&mut grads, *map, dmap);
                    }
                    if self.ng(*x) {
                        accumulate(&mut grads, *x, &dy * mv);
                    }
                }
                Op::SpatialActivation { x, gain } => {
                    let mut dx = dy;
                    let g = *gain;
                    Zip::from(&mut dx).and(self.value(*x)).for_each(|d, &v| {
                        let t = v - 0.5;
                        *d *= g * (-t * t).exp() * (-2.0 * t);
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Scale { x, k } => accumulate(&mut grads, *x, dy * *k),
                Op::Exp(x) => accumulate(&mut grads, *x, dy * &node.value),
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, dy.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, dy);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, &dy * self.value(*b));
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, &dy * self.value(*a));
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let (n, c, h, w) = self.value(*x).dim();
                    let inv = 1.0 / (h * w) as f64;
                    let dx = Array4::from_shape_fn((n, c, h, w), |(i, ch, _, _)| dy[[i, ch, 0, 0]] * inv);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Broadcast(z) => {
                    let dz = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).insert_axis(Axis(2)).insert_axis(Axis(3));
                    accumulate(&mut grads, *z, dz);
                }
            }
        }
        pg
    }

    fn conv_backward(
        &self,
        x: Var,
        layer: &Conv2d,
        cols: &[Array2<f64>],
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
        pg: &mut Gradients,
    ) {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dim();
        let k = layer.kernel;
        let kk = c * k * k;
        let weight = self.store.param(layer.weight).value.view();
        let wmat = weight.into_shape_with_order((layer.out_channels, kk)).unwrap();
        let mut dw = Array2::<f64>::zeros((layer.out_channels, kk));
        let need_dx = self.ng(x);
        let mut dx = if need_dx { Tensor::zeros((n, c, h, w)) } else { Tensor::zeros((0, 0, 0, 0)) };
        let mut dcols = if need_dx && k > 1 { Array2::<f64>::zeros((kk, h * w)) } else { Array2::zeros((0, 0)) };
        for i in 0..n {
            let dymat = as_mat(dy, i);
            if k == 1 {
                general_mat_mul(1.0, &dymat, &as_mat(xv, i).t(), 1.0, &mut dw);
                if need_dx {
                    general_mat_mul(1.0, &wmat.t(), &dymat, 0.0, &mut as_mat_mut(&mut dx, i));
                }
            } else {
                general_mat_mul(1.0, &dymat, &cols[i].t(), 1.0, &mut dw);
                if need_dx {
                    general_mat_mul(1.0, &wmat.t(), &dymat, 0.0, &mut dcols);
                    let mut plane = dx.index_axis_mut(Axis(0), i);
                    kernels::col2im(dcols.as_slice().unwrap(), c, h, w, k, plane.as_slice_mut().unwrap());
                }
            }
        }
        *pg.get_mut(layer.weight) += &dw.into_shape_with_order(layer.out_channels * kk).unwrap();
        if let Some(b) = layer.bias {
            let db = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
            *pg.get_mut(b) += &db;
        }
        if need_dx {
            accumulate(grads, x, dx);
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}
