use rand::Rng as _;

use super::layers::{
    bn_backward, bn_forward_eval, bn_forward_train, concat_channels, conv_backward, conv_forward, maxpool_backward,
    maxpool_forward, relu_backward_inplace, relu_inplace, split_channels, Activations, ConvGeom, PoolGeom,
};
use super::params::{ModelParameters, ParamKind};
use super::{real, ArchitectureConfig, Real};
use crate::error::{Error, Result};
use crate::seed;

const POOL_S2: PoolGeom = PoolGeom { k: 3, stride: 2, pad: 1 };
const POOL_S1: PoolGeom = PoolGeom { k: 3, stride: 1, pad: 1 };
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
struct UnitIdx {
    w: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
}

impl UnitIdx {
    fn geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom::new(self.in_c, self.out_c, self.k, self.stride, self.k / 2, h, w)
    }
}

#[derive(Debug, Clone)]
struct BlockIdx {
    b1: UnitIdx,
    b2: [UnitIdx; 2],
    b3: [UnitIdx; 3],
    b4: UnitIdx,
    widths: [usize; 4],
    pool_after: bool,
}

#[derive(Debug, Clone)]
struct Plan {
    stem: UnitIdx,
    blocks: Vec<BlockIdx>,
    dense_w: usize,
    dense_b: usize,
    features: usize,
}

type Layout = Vec<(String, Vec<usize>, ParamKind)>;

fn build_plan(arch: &ArchitectureConfig) -> (Plan, Layout) {
    let mut layout: Layout = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, kind| {
        layout.push((name, shape, kind));
        layout.len() - 1
    };
    let mut unit = |prefix: &str, in_c: usize, out_c: usize, k: usize, stride: usize| UnitIdx {
        w: push(format!("{prefix}.conv.weight"), vec![out_c, in_c, k, k], ParamKind::Weight),
        gamma: push(format!("{prefix}.bn.gamma"), vec![out_c], ParamKind::Affine),
        beta: push(format!("{prefix}.bn.beta"), vec![out_c], ParamKind::Affine),
        mean: push(format!("{prefix}.bn.running_mean"), vec![out_c], ParamKind::RunningStat),
        var: push(format!("{prefix}.bn.running_var"), vec![out_c], ParamKind::RunningStat),
        in_c,
        out_c,
        k,
        stride,
    };
    let stem = unit("stem", 3, arch.stem_channels, 3, 2);
    let mut c = arch.stem_channels;
    let mut blocks = Vec::new();
    for (i, b) in arch.blocks.iter().enumerate() {
        let p = format!("block{i}");
        let b1 = unit(&format!("{p}.b1"), c, b.b1, 1, 1);
        let b2 = [unit(&format!("{p}.b2.reduce"), c, b.b2_reduce, 1, 1), unit(&format!("{p}.b2.conv"), b.b2_reduce, b.b2, 3, 1)];
        let b3 = [
            unit(&format!("{p}.b3.reduce"), c, b.b3_reduce, 1, 1),
            unit(&format!("{p}.b3.conv1"), b.b3_reduce, b.b3, 3, 1),
            unit(&format!("{p}.b3.conv2"), b.b3, b.b3, 3, 1),
        ];
        let b4 = unit(&format!("{p}.b4.proj"), c, b.pool_proj, 1, 1);
        blocks.push(BlockIdx { b1, b2, b3, b4, widths: [b.b1, b.b2, b.b3, b.pool_proj], pool_after: b.pool_after });
        c = b.out_channels();
    }
    let dense_w = push("dense.weight".into(), vec![arch.num_classes, c], ParamKind::Weight);
    let dense_b = push("dense.bias".into(), vec![arch.num_classes], ParamKind::Affine);
    (Plan { stem, blocks, dense_w, dense_b, features: c }, layout)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout mask drawn from `dropout_seed`.
    Train { dropout_seed: u64 },
    /// Running statistics, no dropout.
    Eval,
}

#[derive(Debug, Clone)]
struct UnitTape<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mean: Vec<T>,
    var_unbiased: Vec<T>,
    out: Activations<T>,
}

#[derive(Debug, Clone)]
struct BlockTape<T> {
    input: Activations<T>,
    b1: UnitTape<T>,
    b2: [UnitTape<T>; 2],
    b3: [UnitTape<T>; 3],
    pool_out: Activations<T>,
    pool_arg: Vec<u32>,
    b4: UnitTape<T>,
    down_arg: Option<Vec<u32>>,
}

#[derive(Debug, Clone)]
struct Tape<T> {
    input: Activations<T>,
    stem: UnitTape<T>,
    stem_arg: Vec<u32>,
    blocks: Vec<BlockTape<T>>,
    /// `(c, h, w)` of the map fed to global average pooling.
    final_shape: (usize, usize, usize),
    mask: Vec<T>,
    dropped: Vec<T>,
}

/// Result of a forward pass; carries the tape needed for backward in
/// training mode.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub n: usize,
    pub num_classes: usize,
    pub logits: Vec<T>,
    pub probs: Vec<T>,
    tape: Option<Tape<T>>,
}

impl<T: Real> Forward<T> {
    pub fn probs_row(&self, i: usize) -> &[T] {
        &self.probs[i * self.num_classes..(i + 1) * self.num_classes]
    }
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    pub arch: ArchitectureConfig,
    pub params: ModelParameters<T>,
    plan: Plan,
}

/// Mean cross-entropy with probabilities clamped below at 1e-12.
pub fn cross_entropy_loss<T: Real>(probs: &[T], labels: &[usize], num_classes: usize) -> T {
    let floor: T = real(PROB_FLOOR);
    let mut s = T::zero();
    for (i, &l) in labels.iter().enumerate() {
        s += -probs[i * num_classes + l].max(floor).ln();
    }
    s / real(labels.len() as f64)
}

/// `l2 * sum(w^2)` over conv and dense weights.
pub fn l2_penalty<T: Real>(params: &ModelParameters<T>, l2: T) -> T {
    let mut s = T::zero();
    for t in params.tensors.iter().filter(|t| t.kind == ParamKind::Weight) {
        s += t.data.iter().map(|&w| w * w).sum::<T>();
    }
    l2 * s
}

fn softmax_rows<T: Real>(logits: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, dst) in logits.chunks(c).zip(out.chunks_mut(c)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (d, &l) in dst.iter_mut().zip(row) {
            *d = (l - m).exp();
            s += *d;
        }
        for d in dst.iter_mut() {
            *d = *d / s;
        }
    }
    out
}

impl<T: Real> Network<T> {
    /// He-uniform conv weights, Glorot-uniform dense weights, unit
    /// batch-norm scale, zero shifts and biases.
    pub fn new(arch: ArchitectureConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (plan, layout) = build_plan(&arch);
        let mut params = ModelParameters { tensors: Vec::new() };
        for (name, shape, kind) in layout {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let limit = if name == "dense.weight" {
                    (6.0 / (fan_in + shape[0]) as f64).sqrt()
                } else {
                    (6.0 / fan_in as f64).sqrt()
                };
                let mut rng = seed::rng(seed, "init", &[name.as_bytes()]);
                (0..n).map(|_| real(rng.random_range(-limit..limit))).collect()
            } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
                vec![T::one(); n]
            } else {
                vec![T::zero(); n]
            };
            params.push(name, shape, kind, data);
        }
        Ok(Network { arch, params, plan })
    }

    /// Wraps existing parameters, checking names and shapes.
    pub fn from_parameters(arch: ArchitectureConfig, params: ModelParameters<T>) -> Result<Self> {
        arch.validate()?;
        let (plan, layout) = build_plan(&arch);
        if layout.len() != params.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "architecture expects {} tensors, found {}",
                layout.len(),
                params.tensors.len()
            )));
        }
        for ((name, shape, _), t) in layout.iter().zip(&params.tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("tensor {} does not match architecture ({name} {shape:?})", t.name)));
            }
        }
        Ok(Network { arch, params, plan })
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    /// Sets the final dense layer to zero, which makes every output uniform.
    pub fn zero_dense(&mut self) {
        for i in [self.plan.dense_w, self.plan.dense_b] {
            self.params.tensors[i].data.fill(T::zero());
        }
    }

    pub fn forward(&self, x: &Activations<T>, mode: Mode) -> Result<Forward<T>> {
        self.forward_with(&self.params, x, mode)
    }

    /// Class probabilities in evaluation mode, `N x classes`.
    pub fn predict(&self, x: &Activations<T>) -> Result<Vec<T>> {
        Ok(self.forward(x, Mode::Eval)?.probs)
    }

    fn unit_forward(
        &self,
        p: &ModelParameters<T>,
        u: &UnitIdx,
        x: &Activations<T>,
        train: bool,
    ) -> (Activations<T>, Option<UnitTape<T>>) {
        let g = u.geom(x.h, x.w);
        let z = conv_forward(x, &p.tensors[u.w].data, &g);
        let eps: T = real(self.arch.bn_eps);
        let (gamma, beta) = (&p.tensors[u.gamma].data, &p.tensors[u.beta].data);
        if train {
            let bn = bn_forward_train(&z, gamma, beta, eps);
            let mut out = bn.out;
            relu_inplace(&mut out);
            let tape = UnitTape { xhat: bn.xhat, inv_std: bn.inv_std, mean: bn.mean, var_unbiased: bn.var_unbiased, out: out.clone() };
            (out, Some(tape))
        } else {
            let mut z = z;
            bn_forward_eval(&mut z, gamma, beta, &p.tensors[u.mean].data, &p.tensors[u.var].data, eps);
            relu_inplace(&mut z);
            (z, None)
        }
    }

    /// Forward pass with an explicit parameter set (same layout as `self`).
    pub fn forward_with(&self, p: &ModelParameters<T>, x: &Activations<T>, mode: Mode) -> Result<Forward<T>> {
        if x.c != 3 || x.n == 0 || x.h == 0 || x.w == 0 {
            return Err(Error::invalid(format!("expected a non-empty 3-channel batch, got {}x{}x{}x{}", x.n, x.c, x.h, x.w)));
        }
        let train = matches!(mode, Mode::Train { .. });
        let (stem_out, stem_tape) = self.unit_forward(p, &self.plan.stem, x, train);
        let (mut cur, stem_arg) = maxpool_forward(&stem_out, POOL_S2);
        let mut block_tapes = Vec::new();
        for b in &self.plan.blocks {
            let (o1, t1) = self.unit_forward(p, &b.b1, &cur, train);
            let (r2, t2a) = self.unit_forward(p, &b.b2[0], &cur, train);
            let (o2, t2b) = self.unit_forward(p, &b.b2[1], &r2, train);
            let (r3, t3a) = self.unit_forward(p, &b.b3[0], &cur, train);
            let (m3, t3b) = self.unit_forward(p, &b.b3[1], &r3, train);
            let (o3, t3c) = self.unit_forward(p, &b.b3[2], &m3, train);
            let (pool_out, pool_arg) = maxpool_forward(&cur, POOL_S1);
            let (o4, t4) = self.unit_forward(p, &b.b4, &pool_out, train);
            let cat = concat_channels(&[&o1, &o2, &o3, &o4]);
            let (next, down_arg) = if b.pool_after {
                let (o, a) = maxpool_forward(&cat, POOL_S2);
                (o, Some(a))
            } else {
                (cat, None)
            };
            if train {
                block_tapes.push(BlockTape {
                    input: std::mem::replace(&mut cur, next),
                    b1: t1.expect("train tape"),
                    b2: [t2a.expect("train tape"), t2b.expect("train tape")],
                    b3: [t3a.expect("train tape"), t3b.expect("train tape"), t3c.expect("train tape")],
                    pool_out,
                    pool_arg,
                    b4: t4.expect("train tape"),
                    down_arg,
                });
            } else {
                cur = next;
            }
        }

        let (n, c, plane) = (cur.n, cur.c, cur.plane());
        let inv_plane: T = real(1.0 / plane as f64);
        let pooled: Vec<T> = cur.data.chunks(plane).map(|ch| ch.iter().copied().sum::<T>() * inv_plane).collect();
        let (mask, dropped) = match mode {
            Mode::Train { dropout_seed } if self.arch.dropout_rate > 0.0 => {
                let keep = 1.0 - self.arch.dropout_rate;
                let scale: T = real(1.0 / keep);
                let mut rng = seed::rng(dropout_seed, "dropout", &[]);
                let mask: Vec<T> =
                    (0..pooled.len()).map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() }).collect();
                let dropped = pooled.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
                (mask, dropped)
            }
            _ => (vec![T::one(); pooled.len()], pooled),
        };

        let k = self.arch.num_classes;
        let (w, bias) = (&p.tensors[self.plan.dense_w].data, &p.tensors[self.plan.dense_b].data);
        let mut logits = vec![T::zero(); n * k];
        for b in 0..n {
            let f = &dropped[b * c..(b + 1) * c];
            for j in 0..k {
                let mut s = bias[j];
                for (&wi, &fi) in w[j * c..(j + 1) * c].iter().zip(f) {
                    s += wi * fi;
                }
                logits[b * k + j] = s;
            }
        }
        let probs = softmax_rows(&logits, k);
        let tape = if train {
            Some(Tape {
                input: x.clone(),
                stem: stem_tape.expect("train tape"),
                stem_arg,
                blocks: block_tapes,
                final_shape: (c, cur.h, cur.w),
                mask,
                dropped,
            })
        } else {
            None
        };
        Ok(Forward { n, num_classes: k, logits, probs, tape })
    }

    fn unit_backward(
        &self,
        p: &ModelParameters<T>,
        u: &UnitIdx,
        tape: &UnitTape<T>,
        x_in: &Activations<T>,
        mut d: Activations<T>,
        grads: &mut [Vec<T>],
    ) -> Activations<T> {
        relu_backward_inplace(&mut d, &tape.out);
        let (dz, dgamma, dbeta) = bn_backward(&d, &tape.xhat, &tape.inv_std, &p.tensors[u.gamma].data);
        let (dx, dw) = conv_backward(x_in, &p.tensors[u.w].data, &u.geom(x_in.h, x_in.w), &dz);
        grads[u.w] = dw;
        grads[u.gamma] = dgamma;
        grads[u.beta] = dbeta;
        dx
    }

    /// Gradients of mean cross-entropy plus `l2 * sum(w^2)` with respect
    /// to every tensor of `p` (zero for running statistics). `fwd` must come
    /// from `forward_with(p, .., Mode::Train { .. })`.
    pub fn backward(&self, p: &ModelParameters<T>, fwd: &Forward<T>, labels: &[usize], l2: T) -> Result<Vec<Vec<T>>> {
        let tape = fwd.tape.as_ref().ok_or_else(|| Error::invalid("backward needs a training-mode forward pass"))?;
        if labels.len() != fwd.n || labels.iter().any(|&l| l >= fwd.num_classes) {
            return Err(Error::invalid("labels do not match the forward batch"));
        }
        let (n, k) = (fwd.n, fwd.num_classes);
        let (c, fh, fw) = tape.final_shape;
        let mut grads = p.zeros_like();
        let inv_n: T = real(1.0 / n as f64);

        let mut dlogits = fwd.probs.clone();
        for (b, &l) in labels.iter().enumerate() {
            dlogits[b * k + l] -= T::one();
        }
        for v in &mut dlogits {
            *v *= inv_n;
        }
        let w = &p.tensors[self.plan.dense_w].data;
        let mut dw = vec![T::zero(); k * c];
        let mut db = vec![T::zero(); k];
        let mut dfeat = vec![T::zero(); n * c];
        for b in 0..n {
            let f = &tape.dropped[b * c..(b + 1) * c];
            for j in 0..k {
                let g = dlogits[b * k + j];
                db[j] += g;
                for i in 0..c {
                    dw[j * c + i] += g * f[i];
                    dfeat[b * c + i] += g * w[j * c + i];
                }
            }
        }
        grads[self.plan.dense_w] = dw;
        grads[self.plan.dense_b] = db;

        let plane = fh * fw;
        let inv_plane: T = real(1.0 / plane as f64);
        let mut d = Activations::zeros(n, c, fh, fw);
        for (i, ch) in d.data.chunks_mut(plane).enumerate() {
            ch.fill(dfeat[i] * tape.mask[i] * inv_plane);
        }

        for (b, bt) in self.plan.blocks.iter().zip(&tape.blocks).rev() {
            if let Some(arg) = &bt.down_arg {
                let (h, w) = (bt.input.h, bt.input.w);
                d = maxpool_backward(&d, arg, h, w);
            }
            let mut parts = split_channels(&d, &b.widths).into_iter();
            let (d1, d2, d3, d4) = (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap());
            let x = &bt.input;
            let mut dx = self.unit_backward(p, &b.b1, &bt.b1, x, d1, &mut grads);

            let t = self.unit_backward(p, &b.b2[1], &bt.b2[1], &bt.b2[0].out, d2, &mut grads);
            let t = self.unit_backward(p, &b.b2[0], &bt.b2[0], x, t, &mut grads);
            add_assign(&mut dx, &t);

            let t = self.unit_backward(p, &b.b3[2], &bt.b3[2], &bt.b3[1].out, d3, &mut grads);
            let t = self.unit_backward(p, &b.b3[1], &bt.b3[1], &bt.b3[0].out, t, &mut grads);
            let t = self.unit_backward(p, &b.b3[0], &bt.b3[0], x, t, &mut grads);
            add_assign(&mut dx, &t);

            let t = self.unit_backward(p, &b.b4, &bt.b4, &bt.pool_out, d4, &mut grads);
            let t = maxpool_backward(&t, &bt.pool_arg, x.h, x.w);
            add_assign(&mut dx, &t);
            d = dx;
        }
        let so = &tape.stem.out;
        let d = maxpool_backward(&d, &tape.stem_arg, so.h, so.w);
        self.unit_backward(p, &self.plan.stem, &tape.stem, &tape.input, d, &mut grads);

        if l2 != T::zero() {
            let two_l2 = l2 + l2;
            for (g, t) in grads.iter_mut().zip(&p.tensors) {
                if t.kind == ParamKind::Weight {
                    for (gi, &wi) in g.iter_mut().zip(&t.data) {
                        *gi += two_l2 * wi;
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// averages: `r = m * r + (1 - m) * batch`.
    pub fn update_running_stats(&mut self, fwd: &Forward<T>) -> Result<()> {
        let tape = fwd.tape.as_ref().ok_or_else(|| Error::invalid("running statistics need a training-mode pass"))?;
        let m: T = real(self.arch.bn_momentum);
        let one_m = T::one() - m;
        let mut pairs: Vec<(UnitIdx, &UnitTape<T>)> = vec![(self.plan.stem, &tape.stem)];
        for (b, bt) in self.plan.blocks.iter().zip(&tape.blocks) {
            pairs.push((b.b1, &bt.b1));
            pairs.extend(b.b2.iter().copied().zip(bt.b2.iter()));
            pairs.extend(b.b3.iter().copied().zip(bt.b3.iter()));
            pairs.push((b.b4, &bt.b4));
        }
        for (u, t) in pairs {
            for (r, &v) in self.params.tensors[u.mean].data.iter_mut().zip(&t.mean) {
                *r = m * *r + one_m * v;
            }
            for (r, &v) in self.params.tensors[u.var].data.iter_mut().zip(&t.var_unbiased) {
                *r = m * *r + one_m * v;
            }
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.plan.features
    }
}

fn add_assign<T: Real>(a: &mut Activations<T>, b: &Activations<T>) {
    for (x, &y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
}
