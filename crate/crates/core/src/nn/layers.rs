use rand::Rng;

use super::{gemm, Init, ParamBuilder, Tensor};

const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub(crate) struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    weight: usize,
    bias: Option<usize>,
}

impl Conv2d {
    pub fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
    ) -> Self {
        pb.push_scope(name);
        let fan_in = (cin * kernel * kernel) as f64;
        let weight = pb.alloc(
            "weight",
            vec![cout, cin, kernel, kernel],
            true,
            Init::Normal((2.0 / fan_in).sqrt()),
        );
        let bias = with_bias.then(|| pb.alloc("bias", vec![cout], true, Init::Const(0.0)));
        pb.pop_scope();
        Conv2d {
            cin,
            cout,
            kernel,
            stride,
            pad,
            weight,
            bias,
        }
    }

    fn out_dim(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let p = oh * ow;
        let mut col = vec![0.0; self.cin * k * k * p];
        for c in 0..self.cin {
            let plane = x.plane(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * p;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src = iy as usize * x.width;
                        let dst = row + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.width as isize {
                                col[dst + ox] = plane[src + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Tensor {
        let k = self.kernel;
        let p = oh * ow;
        let mut dx = Tensor::zeros(self.cin, h, w);
        for c in 0..self.cin {
            let base = c * h * w;
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * p;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = base + iy as usize * w;
                        let src = row + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dx.data[dst + ix as usize] += col[src + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> (Tensor, Vec<f64>) {
        debug_assert_eq!(x.channels, self.cin);
        let (oh, ow) = (self.out_dim(x.height), self.out_dim(x.width));
        let p = oh * ow;
        let ckk = self.cin * self.kernel * self.kernel;
        let col = if self.is_pointwise() {
            x.data.clone()
        } else {
            self.im2col(x, oh, ow)
        };
        let w = &params[self.weight..self.weight + self.cout * ckk];
        let mut y = Tensor::zeros(self.cout, oh, ow);
        gemm(self.cout, ckk, p, w, false, &col, false, 0.0, &mut y.data);
        if let Some(b) = self.bias {
            for (o, chunk) in y.data.chunks_mut(p).enumerate() {
                let bo = params[b + o];
                chunk.iter_mut().for_each(|v| *v += bo);
            }
        }
        (y, col)
    }

    pub fn backward(
        &self,
        params: &[f64],
        col: &[f64],
        in_shape: (usize, usize),
        dy: &Tensor,
        grads: &mut [f64],
    ) -> Tensor {
        let (h, w) = in_shape;
        let (oh, ow) = (dy.height, dy.width);
        let p = oh * ow;
        let ckk = self.cin * self.kernel * self.kernel;
        if let Some(b) = self.bias {
            for (o, chunk) in dy.data.chunks(p).enumerate() {
                grads[b + o] += chunk.iter().sum::<f64>();
            }
        }
        gemm(
            self.cout,
            p,
            ckk,
            &dy.data,
            false,
            col,
            true,
            1.0,
            &mut grads[self.weight..self.weight + self.cout * ckk],
        );
        let wts = &params[self.weight..self.weight + self.cout * ckk];
        let mut dcol = vec![0.0; ckk * p];
        gemm(ckk, self.cout, p, wts, true, &dy.data, false, 0.0, &mut dcol);
        if self.is_pointwise() {
            Tensor {
                channels: self.cin,
                height: h,
                width: w,
                data: dcol,
            }
        } else {
            self.col2im(&dcol, h, w, oh, ow)
        }
    }
}

/// Batch normalization with frozen running statistics; only the affine
/// scale and shift train.
#[derive(Clone, Debug)]
pub(crate) struct BatchNorm {
    channels: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

impl BatchNorm {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, channels: usize) -> Self {
        pb.push_scope(name);
        let gamma = pb.alloc("weight", vec![channels], true, Init::Const(1.0));
        let beta = pb.alloc("bias", vec![channels], true, Init::Const(0.0));
        let mean = pb.alloc("running_mean", vec![channels], false, Init::Const(0.0));
        let var = pb.alloc("running_var", vec![channels], false, Init::Const(1.0));
        pb.pop_scope();
        BatchNorm {
            channels,
            gamma,
            beta,
            mean,
            var,
        }
    }

    fn inv_std(&self, params: &[f64], c: usize) -> f64 {
        1.0 / (params[self.var + c] + BN_EPS).sqrt()
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> (Tensor, Vec<f64>) {
        let n = x.height * x.width;
        let mut y = x.clone();
        let mut xhat = vec![0.0; x.data.len()];
        for c in 0..self.channels {
            let (g, b, m) = (
                params[self.gamma + c],
                params[self.beta + c],
                params[self.mean + c],
            );
            let is = self.inv_std(params, c);
            for i in c * n..(c + 1) * n {
                let h = (x.data[i] - m) * is;
                xhat[i] = h;
                y.data[i] = g * h + b;
            }
        }
        (y, xhat)
    }

    pub fn backward(&self, params: &[f64], xhat: &[f64], dy: &Tensor, grads: &mut [f64]) -> Tensor {
        let n = dy.height * dy.width;
        let mut dx = dy.clone();
        for c in 0..self.channels {
            let r = c * n..(c + 1) * n;
            grads[self.gamma + c] += dy.data[r.clone()]
                .iter()
                .zip(&xhat[r.clone()])
                .map(|(d, h)| d * h)
                .sum::<f64>();
            grads[self.beta + c] += dy.data[r.clone()].iter().sum::<f64>();
            let k = params[self.gamma + c] * self.inv_std(params, c);
            dx.data[r].iter_mut().for_each(|v| *v *= k);
        }
        dx
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Pool {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Pool {
    fn out_dim(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn max_forward(&self, x: &Tensor) -> (Tensor, Vec<usize>) {
        let (oh, ow) = (self.out_dim(x.height), self.out_dim(x.width));
        let mut y = Tensor::zeros(x.channels, oh, ow);
        let mut arg = vec![0usize; y.data.len()];
        for c in 0..x.channels {
            let base = c * x.height * x.width;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = base;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= x.width as isize {
                                continue;
                            }
                            let i = base + iy as usize * x.width + ix as usize;
                            if x.data[i] > best {
                                best = x.data[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (c * oh + oy) * ow + ox;
                    y.data[o] = best;
                    arg[o] = best_i;
                }
            }
        }
        (y, arg)
    }

    pub fn max_backward(&self, arg: &[usize], in_shape: (usize, usize, usize), dy: &Tensor) -> Tensor {
        let mut dx = Tensor::zeros(in_shape.0, in_shape.1, in_shape.2);
        for (o, &i) in arg.iter().enumerate() {
            dx.data[i] += dy.data[o];
        }
        dx
    }

    /// Average pooling without padding.
    pub fn avg_forward(&self, x: &Tensor) -> Tensor {
        let (oh, ow) = (self.out_dim(x.height), self.out_dim(x.width));
        let norm = 1.0 / (self.kernel * self.kernel) as f64;
        let mut y = Tensor::zeros(x.channels, oh, ow);
        for c in 0..x.channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ky in 0..self.kernel {
                        let row = (c * x.height + oy * self.stride + ky) * x.width + ox * self.stride;
                        s += x.data[row..row + self.kernel].iter().sum::<f64>();
                    }
                    y.data[(c * oh + oy) * ow + ox] = s * norm;
                }
            }
        }
        y
    }

    pub fn avg_backward(&self, in_shape: (usize, usize, usize), dy: &Tensor) -> Tensor {
        let (ch, h, w) = in_shape;
        let norm = 1.0 / (self.kernel * self.kernel) as f64;
        let mut dx = Tensor::zeros(ch, h, w);
        for c in 0..ch {
            for oy in 0..dy.height {
                for ox in 0..dy.width {
                    let g = dy.data[(c * dy.height + oy) * dy.width + ox] * norm;
                    for ky in 0..self.kernel {
                        let row = (c * h + oy * self.stride + ky) * w + ox * self.stride;
                        dx.data[row..row + self.kernel].iter_mut().for_each(|v| *v += g);
                    }
                }
            }
        }
        dx
    }
}

/// A node in a backbone graph. Residual and dense blocks nest sequences.
#[derive(Clone, Debug)]
pub(crate) enum Node {
    Conv(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool(Pool),
    AvgPool(Pool),
    /// `relu(main(x) + shortcut(x))`; an empty shortcut is the identity.
    Residual {
        main: Vec<Node>,
        shortcut: Vec<Node>,
    },
    /// Each layer sees the concatenation of the block input and all previous
    /// layer outputs; the block emits the full concatenation.
    Dense { layers: Vec<Vec<Node>> },
}

pub(crate) enum Cache {
    Conv { col: Vec<f64>, in_hw: (usize, usize) },
    BatchNorm { xhat: Vec<f64> },
    Relu { out: Tensor },
    MaxPool { arg: Vec<usize>, in_shape: (usize, usize, usize) },
    AvgPool { in_shape: (usize, usize, usize) },
    Residual { main: Vec<Cache>, shortcut: Vec<Cache>, out: Tensor },
    Dense { layers: Vec<Vec<Cache>>, in_channels: usize },
}

fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    }
}

fn relu(mut x: Tensor) -> Tensor {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

fn relu_backward(out: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, o) in dx.data.iter_mut().zip(&out.data) {
        if *o <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

pub(crate) fn forward_seq(nodes: &[Node], params: &[f64], x: &Tensor) -> (Tensor, Vec<Cache>) {
    let mut caches = Vec::with_capacity(nodes.len());
    let mut cur = x.clone();
    for node in nodes {
        let (next, cache) = forward_node(node, params, cur);
        caches.push(cache);
        cur = next;
    }
    (cur, caches)
}

fn forward_node(node: &Node, params: &[f64], x: Tensor) -> (Tensor, Cache) {
    match node {
        Node::Conv(conv) => {
            let in_hw = (x.height, x.width);
            let (y, col) = conv.forward(params, &x);
            (y, Cache::Conv { col, in_hw })
        }
        Node::BatchNorm(bn) => {
            let (y, xhat) = bn.forward(params, &x);
            (y, Cache::BatchNorm { xhat })
        }
        Node::Relu => {
            let y = relu(x);
            (y.clone(), Cache::Relu { out: y })
        }
        Node::MaxPool(p) => {
            let in_shape = x.shape();
            let (y, arg) = p.max_forward(&x);
            (y, Cache::MaxPool { arg, in_shape })
        }
        Node::AvgPool(p) => {
            let in_shape = x.shape();
            (p.avg_forward(&x), Cache::AvgPool { in_shape })
        }
        Node::Residual { main, shortcut } => {
            let (mut y, main_c) = forward_seq(main, params, &x);
            let (s, short_c) = forward_seq(shortcut, params, &x);
            y.data.iter_mut().zip(&s.data).for_each(|(a, b)| *a += b);
            let out = relu(y);
            (
                out.clone(),
                Cache::Residual {
                    main: main_c,
                    shortcut: short_c,
                    out,
                },
            )
        }
        Node::Dense { layers } => {
            let in_channels = x.channels;
            let mut feats = x;
            let mut caches = Vec::with_capacity(layers.len());
            for layer in layers {
                let (new, c) = forward_seq(layer, params, &feats);
                caches.push(c);
                feats = concat(&feats, &new);
            }
            (
                feats,
                Cache::Dense {
                    layers: caches,
                    in_channels,
                },
            )
        }
    }
}

pub(crate) fn backward_seq(
    nodes: &[Node],
    caches: &[Cache],
    params: &[f64],
    dy: Tensor,
    grads: &mut [f64],
) -> Tensor {
    let mut g = dy;
    for (node, cache) in nodes.iter().zip(caches).rev() {
        g = backward_node(node, cache, params, g, grads);
    }
    g
}

fn backward_node(node: &Node, cache: &Cache, params: &[f64], dy: Tensor, grads: &mut [f64]) -> Tensor {
    match (node, cache) {
        (Node::Conv(conv), Cache::Conv { col, in_hw }) => conv.backward(params, col, *in_hw, &dy, grads),
        (Node::BatchNorm(bn), Cache::BatchNorm { xhat }) => bn.backward(params, xhat, &dy, grads),
        (Node::Relu, Cache::Relu { out }) => relu_backward(out, &dy),
        (Node::MaxPool(p), Cache::MaxPool { arg, in_shape }) => p.max_backward(arg, *in_shape, &dy),
        (Node::AvgPool(p), Cache::AvgPool { in_shape }) => p.avg_backward(*in_shape, &dy),
        (
            Node::Residual { main, shortcut },
            Cache::Residual {
                main: mc,
                shortcut: sc,
                out,
            },
        ) => {
            let d = relu_backward(out, &dy);
            let mut dx = backward_seq(main, mc, params, d.clone(), grads);
            let ds = backward_seq(shortcut, sc, params, d, grads);
            dx.data.iter_mut().zip(&ds.data).for_each(|(a, b)| *a += b);
            dx
        }
        (Node::Dense { layers }, Cache::Dense { layers: lc, in_channels }) => {
            let hw = dy.height * dy.width;
            let mut g = dy;
            for (layer, c) in layers.iter().zip(lc).rev() {
                let growth_start = g.channels - layer_out_channels(layer);
                let d_new = Tensor {
                    channels: g.channels - growth_start,
                    height: g.height,
                    width: g.width,
                    data: g.data[growth_start * hw..].to_vec(),
                };
                g.data.truncate(growth_start * hw);
                g.channels = growth_start;
                let d_in = backward_seq(layer, c, params, d_new, grads);
                g.data.iter_mut().zip(&d_in.data).for_each(|(a, b)| *a += b);
            }
            debug_assert_eq!(g.channels, *in_channels);
            g
        }
        _ => unreachable!("cache does not match node"),
    }
}

fn layer_out_channels(layer: &[Node]) -> usize {
    layer
        .iter()
        .rev()
        .find_map(|n| match n {
            Node::Conv(c) => Some(c.cout),
            _ => None,
        })
        .expect("dense layer ends in a convolution")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(c, h, w, data).unwrap()
    }

    /// Checks input and parameter gradients of `nodes` against central
    /// differences of the scalar `sum(y * probe)`.
    fn check_seq(nodes: &[Node], mut params: ParamSet, x: Tensor, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (y, caches) = forward_seq(nodes, &params.values, &x);
        let probe: Vec<f64> = (0..y.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut grads = vec![0.0; params.len()];
        let dy = Tensor {
            data: probe.clone(),
            ..y.clone()
        };
        let dx = backward_seq(nodes, &caches, &params.values, dy, &mut grads);
        let objective = |p: &[f64], x: &Tensor| -> f64 {
            let (y, _) = forward_seq(nodes, p, x);
            y.data.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in (0..x.data.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (objective(&params.values, &xp) - objective(&params.values, &xm)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-5 * (1.0 + fd.abs()), "dx[{i}] {fd} vs {}", dx.data[i]);
        }
        let mask = params.trainable_mask();
        for i in (0..params.len()).step_by(5) {
            let orig = params.values[i];
            params.values[i] = orig + h;
            let fp = objective(&params.values, &x);
            params.values[i] = orig - h;
            let fm = objective(&params.values, &x);
            params.values[i] = orig;
            let fd = if mask[i] { (fp - fm) / (2.0 * h) } else { 0.0 };
            assert!((fd - grads[i]).abs() < 1e-5 * (1.0 + fd.abs()), "dp[{i}] {fd} vs {}", grads[i]);
        }
    }

    #[test]
    fn conv_pool_bn_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pb = ParamBuilder::new(&mut rng);
        let nodes = vec![
            Node::Conv(Conv2d::new(&mut pb, "c1", 2, 3, 3, 2, 1, true)),
            Node::BatchNorm(BatchNorm::new(&mut pb, "bn", 3)),
            Node::AvgPool(Pool { kernel: 2, stride: 2, pad: 0 }),
            Node::Conv(Conv2d::new(&mut pb, "c2", 3, 2, 1, 1, 0, false)),
        ];
        let mut params = pb.finish();
        // Non-trivial frozen statistics.
        let mean = params.slot("bn.running_mean").unwrap().offset;
        let var = params.slot("bn.running_var").unwrap().offset;
        params.values[mean] = 0.2;
        params.values[var + 1] = 2.5;
        let x = random_tensor(&mut rng, 2, 9, 9);
        check_seq(&nodes, params, x, 11);
    }

    #[test]
    fn residual_and_dense_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pb = ParamBuilder::new(&mut rng);
        let main = vec![
            Node::Conv(Conv2d::new(&mut pb, "m1", 2, 3, 3, 1, 1, false)),
            Node::BatchNorm(BatchNorm::new(&mut pb, "mbn", 3)),
            Node::Relu,
            Node::Conv(Conv2d::new(&mut pb, "m2", 3, 4, 1, 1, 0, false)),
        ];
        let shortcut = vec![Node::Conv(Conv2d::new(&mut pb, "s", 2, 4, 1, 1, 0, false))];
        let dense = Node::Dense {
            layers: vec![
                vec![Node::Relu, Node::Conv(Conv2d::new(&mut pb, "d1", 4, 2, 3, 1, 1, false))],
                vec![Node::Relu, Node::Conv(Conv2d::new(&mut pb, "d2", 6, 2, 3, 1, 1, false))],
            ],
        };
        let nodes = vec![
            Node::Residual { main, shortcut },
            dense,
            Node::MaxPool(Pool { kernel: 3, stride: 2, pad: 1 }),
        ];
        let params = pb.finish();
        let x = random_tensor(&mut rng, 2, 6, 6);
        check_seq(&nodes, params, x, 13);
    }
}
