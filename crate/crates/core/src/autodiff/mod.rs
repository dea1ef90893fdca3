//! Reverse-mode automatic differentiation over dynamic-rank `f64` tensors.
//!
//! The tape is define-by-run: each operation evaluates eagerly and records the
//! node it produced, so a forward pass builds the graph as a side effect.
//! [`Tape::backward`] then walks the nodes in reverse creation order and
//! accumulates gradients for every node that (transitively) depends on a
//! parameter.
//!
//! Structured operations (convolutions, normalisation, softmax, pooling)
//! expect the layout `[batch, channels, spatial...]` with two or three spatial
//! axes; pointwise and reduction ops accept any shape.  Scalars are tensors of
//! shape `[1]`.
//!
//! Everything here is `f64`.  The models this crate trains are small enough
//! that the extra width costs little, and it keeps finite-difference gradient
//! checks tight.

mod adam;
pub mod check;
pub mod conv;
mod store;

pub use adam::{Adam, AdamConfig};
pub use store::{ParamId, ParamStore};

use ndarray::{ArrayD, IxDyn};
use std::collections::HashMap;

/// Dynamic-rank `f64` tensor.
pub type TensorD = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Var(usize);

/// Geometry of a (transposed) convolution.  Kernels are cubic: `ksize` applies
/// to every spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const fn new(ksize: usize, stride: usize, pad: usize) -> Self {
        ConvSpec { ksize, stride, pad }
    }

    /// 3x3(x3), stride 1, padding 1: preserves resolution.
    pub const K3S1: ConvSpec = ConvSpec::new(3, 1, 1);
    /// 3x3(x3), stride 2, padding 1: halves resolution (even inputs).
    pub const K3S2: ConvSpec = ConvSpec::new(3, 2, 1);
    /// 1x1(x1) pointwise.
    pub const K1: ConvSpec = ConvSpec::new(1, 1, 0);
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone)]
struct NormCache {
    /// One `(mean, invstd)` per normalisation group.
    groups: Vec<(f64, f64)>,
}

enum BnStats {
    Batch(NormCache),
    Fixed { mean: Vec<f64>, invstd: Vec<f64> },
}

struct DiceCache {
    /// Per foreground class `c = 1..C`: `(intersection, union)` where
    /// `intersection = sum p_c over true-c voxels` and
    /// `union = sum p_c + |true c|`.
    per_class: Vec<(f64, f64)>,
}

enum Op {
    Leaf,
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// `x * gate` where `gate` has a single channel broadcast over `x`'s channels.
    MulChannelGate { x: Var, gate: Var },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid { x: Var },
    Softplus { x: Var },
    Ln { x: Var },
    Square { x: Var },
    ConcatChannels { parts: Vec<Var> },
    SliceChannels { x: Var, start: usize, len: usize },
    AvgPool { x: Var, factor: usize },
    SumAll { x: Var },
    MeanAll { x: Var },
    ChannelMean { x: Var },
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    ConvTranspose { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    InstanceNorm { x: Var, gamma: Var, beta: Var, cache: NormCache },
    BatchNorm { x: Var, gamma: Var, beta: Var, stats: BnStats },
    SoftmaxChannels { x: Var },
    CrossEntropyMean { logits: Var, labels: ArrayD<u8>, probs: TensorD },
    SoftDice { probs: Var, labels: ArrayD<u8>, smooth: f64, cache: DiceCache },
}

struct Node {
    value: TensorD,
    needs_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    slots: Vec<Option<TensorD>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&TensorD> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }
}

/// Define-by-run gradient tape.
pub struct Tape {
    nodes: Vec<Node>,
    param_uses: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_uses: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &TensorD {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: TensorD, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// A value with no gradient path.
    pub fn constant(&mut self, t: TensorD) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Leaf backed by a stored parameter.  Repeated calls with the same id on
    /// one tape return the same node, so gradients from multiple uses
    /// accumulate there.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_uses.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), true, Op::Leaf);
        self.param_uses.insert(id, v);
        v
    }

    /// Copies the value of `v` into a fresh constant: blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).mapv(|v| v * c);
        let ng = self.needs_grad(x);
        self.push(value, ng, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).mapv(|v| v + c);
        let ng = self.needs_grad(x);
        self.push(value, ng, Op::AddScalar { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(value, ng, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(value, ng, Op::Mul { a, b })
    }

    /// `x[n,c,...] * gate[n,0,...]` — gate broadcast across channels.
    pub fn mul_channel_gate(&mut self, x: Var, gate: Var) -> Var {
        let (xs, gs) = (self.shape(x).to_vec(), self.shape(gate).to_vec());
        assert!(xs.len() >= 3 && gs.len() == xs.len(), "gate: rank mismatch");
        assert_eq!(gs[1], 1, "gate must have one channel");
        assert_eq!(gs[0], xs[0], "gate: batch mismatch");
        assert_eq!(&gs[2..], &xs[2..], "gate: spatial mismatch");
        let (n, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        let xv = self.value(x).as_slice().unwrap();
        let gv = self.value(gate).as_slice().unwrap();
        let mut out = vec![0.0; n * c * s];
        for bi in 0..n {
            for ci in 0..c {
                let xo = (bi * c + ci) * s;
                let go = bi * s;
                for si in 0..s {
                    out[xo + si] = xv[xo + si] * gv[go + si];
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&xs), out).unwrap();
        let ng = self.needs_grad(x) || self.needs_grad(gate);
        self.push(value, ng, Op::MulChannelGate { x, gate })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).mapv(|v| if v >= 0.0 { v } else { slope * v });
        let ng = self.needs_grad(x);
        self.push(value, ng, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid_scalar);
        let ng = self.needs_grad(x);
        self.push(value, ng, Op::Sigmoid { x })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        let ng = self.needs_grad(x);
        self.push(value, ng, Op::Softplus { x })
    }

    /// Natural log; caller guarantees positivity.
    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::ln);
        let ng = self.needs_grad(x);
        self.push(value, ng, Op::Ln { x })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * v);
        let ng = self.needs_grad(x);
        self.push(value, ng, Op::Square { x })
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no inputs");
        let first = self.shape(parts[0]).to_vec();
        let n = first[0];
        let s: usize = first[2..].iter().product();
        let mut c_total = 0;
        for &p in parts {
            let sh = self.shape(p);
            assert_eq!(sh[0], n, "concat: batch mismatch");
            assert_eq!(&sh[2..], &first[2..], "concat: spatial mismatch");
            c_total += sh[1];
        }
        let mut out_shape = first.clone();
        out_shape[1] = c_total;
        let mut out = vec![0.0; n * c_total * s];
        let mut c_off = 0;
        for &p in parts {
            let c_p = self.shape(p)[1];
            let pv = self.value(p).as_slice().unwrap();
            for bi in 0..n {
                let src = bi * c_p * s;
                let dst = (bi * c_total + c_off) * s;
                out[dst..dst + c_p * s].copy_from_slice(&pv[src..src + c_p * s]);
            }
            c_off += c_p;
        }
        let value = ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap();
        let ng = parts.iter().any(|&p| self.needs_grad(p));
        self.push(value, ng, Op::ConcatChannels { parts: parts.to_vec() })
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        assert!(start + len <= c, "slice: channel range out of bounds");
        let xv = self.value(x).as_slice().unwrap();
        let mut out_shape = xs.clone();
        out_shape[1] = len;
        let mut out = vec![0.0; n * len * s];
        for bi in 0..n {
            let src = (bi * c + start) * s;
            let dst = bi * len * s;
            out[dst..dst + len * s].copy_from_slice(&xv[src..src + len * s]);
        }
        let value = ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap();
        let ng = self.needs_grad(x);
        self.push(value, ng, Op::SliceChannels { x, start, len })
    }

    /// Mean pooling by an integer factor along every spatial axis.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Var {
        assert!(factor >= 1);
        if factor == 1 {
            // Identity; still record a node so the contract is uniform.
            let value = self.value(x).clone();
            let ng = self.needs_grad(x);
            return self.push(value, ng, Op::AvgPool { x, factor });
        }
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let in_sp = &xs[2..];
        for &d in in_sp {
            assert_eq!(d % factor, 0, "avg_pool: size not divisible by factor");
        }
        let out_sp: Vec<usize> = in_sp.iter().map(|&d| d / factor).collect();
        let mut out_shape = vec![n, c];
        out_shape.extend_from_slice(&out_sp);
        let xv = self.value(x).as_slice().unwrap();
        let s_in: usize = in_sp.iter().product();
        let s_out: usize = out_sp.iter().product();
        let window = factor.pow(in_sp.len() as u32) as f64;
        let mut out = vec![0.0; n * c * s_out];
        for nc in 0..n * c {
            let src = &xv[nc * s_in..(nc + 1) * s_in];
            let dst = &mut out[nc * s_out..(nc + 1) * s_out];
            pool_sum(src, dst, in_sp, &out_sp, factor);
            for v in dst.iter_mut() {
                *v /= window;
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap();
        let ng = self.needs_grad(x);
        self.push(value, ng, Op::AvgPool { x, factor })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = ArrayD::from_shape_vec(IxDyn(&[1]), vec![self.value(x).sum()]).unwrap();
        let ng = self.needs_grad(x);
        self.push(value, ng, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let len = self.value(x).len() as f64;
        let value =
            ArrayD::from_shape_vec(IxDyn(&[1]), vec![self.value(x).sum() / len]).unwrap();
        let ng = self.needs_grad(x);
        self.push(value, ng, Op::MeanAll { x })
    }

    /// Mean across the channel axis, keeping a singleton channel.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        let xv = self.value(x).as_slice().unwrap();
        let mut out_shape = xs.clone();
        out_shape[1] = 1;
        let mut out = vec![0.0; n * s];
        for bi in 0..n {
            for ci in 0..c {
                let src = (bi * c + ci) * s;
                for si in 0..s {
                    out[bi * s + si] += xv[src + si];
                }
            }
            for si in 0..s {
                out[bi * s + si] /= c as f64;
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap();
        let ng = self.needs_grad(x);
        self.push(value, ng, Op::ChannelMean { x })
    }

    /// Convolution with weight `[c_out, c_in, k^d]` and optional bias `[c_out]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let value = conv::conv_forward(
            self.value(x),
            self.value(w),
            b.map(|bv| self.value(bv)),
            spec,
        );
        let ng = self.needs_grad(x)
            || self.needs_grad(w)
            || b.map(|bv| self.needs_grad(bv)).unwrap_or(false);
        self.push(value, ng, Op::Conv { x, w, b, spec })
    }

    /// Transposed convolution with weight `[c_in, c_out, k^d]`.  Geometry is
    /// fixed to kernel 3, stride 2, padding 1, output padding 1, which exactly
    /// doubles every spatial size.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        assert_eq!(spec, ConvSpec::K3S2, "conv_transpose supports k3/s2/p1 only");
        let xs = self.shape(x).to_vec();
        let big_sp: Vec<usize> = xs[2..].iter().map(|&d| d * 2).collect();
        let value = conv::conv_grad_input(self.value(x), self.value(w), spec, &big_sp);
        let mut value = value;
        if let Some(bv) = b {
            conv::add_bias(&mut value, self.value(bv));
        }
        let ng = self.needs_grad(x)
            || self.needs_grad(w)
            || b.map(|bv| self.needs_grad(bv)).unwrap_or(false);
        self.push(value, ng, Op::ConvTranspose { x, w, b, spec })
    }

    /// Normalises each `(sample, channel)` slice over its spatial extent.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        assert_eq!(self.shape(gamma), &[c], "instance_norm: gamma shape");
        assert_eq!(self.shape(beta), &[c], "instance_norm: beta shape");
        let xv = self.value(x).as_slice().unwrap();
        let gv = self.value(gamma).as_slice().unwrap();
        let bv = self.value(beta).as_slice().unwrap();
        let mut out = vec![0.0; xv.len()];
        let mut groups = Vec::with_capacity(n * c);
        for bi in 0..n {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                let (mean, invstd) = moments(&xv[off..off + s], eps);
                groups.push((mean, invstd));
                let (g, be) = (gv[ci], bv[ci]);
                for si in 0..s {
                    out[off + si] = g * (xv[off + si] - mean) * invstd + be;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&xs), out).unwrap();
        let ng = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        self.push(value, ng, Op::InstanceNorm { x, gamma, beta, cache: NormCache { groups } })
    }

    /// Batch norm in training mode: per-channel statistics over batch and
    /// spatial axes.  Returns the biased batch statistics so the caller can
    /// maintain running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, BatchStats) {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        assert_eq!(self.shape(gamma), &[c], "batch_norm: gamma shape");
        assert_eq!(self.shape(beta), &[c], "batch_norm: beta shape");
        let xv = self.value(x).as_slice().unwrap();
        let gv = self.value(gamma).as_slice().unwrap();
        let bev = self.value(beta).as_slice().unwrap();
        let m = (n * s) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut sum = 0.0;
            for bi in 0..n {
                let off = (bi * c + ci) * s;
                for si in 0..s {
                    sum += xv[off + si];
                }
            }
            let mu = sum / m;
            let mut sq = 0.0;
            for bi in 0..n {
                let off = (bi * c + ci) * s;
                for si in 0..s {
                    let d = xv[off + si] - mu;
                    sq += d * d;
                }
            }
            mean[ci] = mu;
            var[ci] = sq / m;
        }
        let mut out = vec![0.0; xv.len()];
        let mut groups = Vec::with_capacity(c);
        for ci in 0..c {
            let invstd = 1.0 / (var[ci] + eps).sqrt();
            groups.push((mean[ci], invstd));
            for bi in 0..n {
                let off = (bi * c + ci) * s;
                for si in 0..s {
                    out[off + si] = gv[ci] * (xv[off + si] - mean[ci]) * invstd + bev[ci];
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&xs), out).unwrap();
        let ng = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        let v = self.push(
            value,
            ng,
            Op::BatchNorm { x, gamma, beta, stats: BnStats::Batch(NormCache { groups }) },
        );
        (v, BatchStats { mean, var })
    }

    /// Batch norm in inference mode, using frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        assert_eq!(running_mean.len(), c);
        assert_eq!(running_var.len(), c);
        let xv = self.value(x).as_slice().unwrap();
        let gv = self.value(gamma).as_slice().unwrap();
        let bev = self.value(beta).as_slice().unwrap();
        let invstd: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; xv.len()];
        for bi in 0..n {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                for si in 0..s {
                    out[off + si] =
                        gv[ci] * (xv[off + si] - running_mean[ci]) * invstd[ci] + bev[ci];
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&xs), out).unwrap();
        let ng = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        self.push(
            value,
            ng,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                stats: BnStats::Fixed { mean: running_mean.to_vec(), invstd },
            },
        )
    }

    /// Channel-axis softmax at every `(sample, position)`.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        let xv = self.value(x).as_slice().unwrap();
        let mut out = vec![0.0; xv.len()];
        softmax_into(xv, &mut out, n, c, s);
        let value = ArrayD::from_shape_vec(IxDyn(&xs), out).unwrap();
        let ng = self.needs_grad(x);
        self.push(value, ng, Op::SoftmaxChannels { x })
    }

    /// Mean over batch and positions of the negative log-softmax probability
    /// of the true class.  `labels` has the logits' shape minus the channel
    /// axis, with values in `0..c`.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &ArrayD<u8>) -> Var {
        let xs = self.shape(logits).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        let mut expect = vec![n];
        expect.extend_from_slice(&xs[2..]);
        assert_eq!(labels.shape(), &expect[..], "cross_entropy: label shape");
        let xv = self.value(logits).as_slice().unwrap();
        let lv = labels.as_slice().unwrap();
        let mut probs = vec![0.0; xv.len()];
        softmax_into(xv, &mut probs, n, c, s);
        let mut loss = 0.0;
        for bi in 0..n {
            for si in 0..s {
                let cls = lv[bi * s + si] as usize;
                assert!(cls < c, "cross_entropy: label {cls} out of {c} classes");
                let p = probs[(bi * c + cls) * s + si];
                loss -= p.max(1e-300).ln();
            }
        }
        loss /= (n * s) as f64;
        let value = ArrayD::from_shape_vec(IxDyn(&[1]), vec![loss]).unwrap();
        let probs = ArrayD::from_shape_vec(IxDyn(&xs), probs).unwrap();
        let ng = self.needs_grad(logits);
        self.push(value, ng, Op::CrossEntropyMean { logits, labels: labels.clone(), probs })
    }

    /// Soft Dice loss over foreground classes `1..c` given channel
    /// probabilities (e.g. a softmax output):
    /// `1 - mean_c (2*I_c + smooth) / (sum p_c + |true c| + smooth)`.
    pub fn soft_dice(&mut self, probs: Var, labels: &ArrayD<u8>, smooth: f64) -> Var {
        let xs = self.shape(probs).to_vec();
        let (n, c) = (xs[0], xs[1]);
        assert!(c >= 2, "soft_dice needs at least one foreground class");
        let s: usize = xs[2..].iter().product();
        let mut expect = vec![n];
        expect.extend_from_slice(&xs[2..]);
        assert_eq!(labels.shape(), &expect[..], "soft_dice: label shape");
        let pv = self.value(probs).as_slice().unwrap();
        let lv = labels.as_slice().unwrap();
        let mut per_class = Vec::with_capacity(c - 1);
        let mut dice_sum = 0.0;
        for cls in 1..c {
            let mut inter = 0.0;
            let mut psum = 0.0;
            let mut gsum = 0.0;
            for bi in 0..n {
                let off = (bi * c + cls) * s;
                for si in 0..s {
                    let p = pv[off + si];
                    psum += p;
                    if lv[bi * s + si] as usize == cls {
                        inter += p;
                        gsum += 1.0;
                    }
                }
            }
            let union = psum + gsum;
            per_class.push((inter, union));
            dice_sum += (2.0 * inter + smooth) / (union + smooth);
        }
        let loss = 1.0 - dice_sum / (c - 1) as f64;
        let value = ArrayD::from_shape_vec(IxDyn(&[1]), vec![loss]).unwrap();
        let ng = self.needs_grad(probs);
        self.push(
            value,
            ng,
            Op::SoftDice { probs, labels: labels.clone(), smooth, cache: DiceCache { per_class } },
        )
    }

    /// Backpropagates from a scalar node.  Panics if `root` is not scalar;
    /// returns empty gradients if nothing upstream requires them.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut slots: Vec<Option<TensorD>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[root.0] = Some(ArrayD::from_elem(IxDyn(self.shape(root)), 1.0));
        for i in (0..=root.0).rev() {
            if slots[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let (head, tail) = slots.split_at_mut(i);
            let g = tail[0].take().unwrap();
            self.backprop_node(i, &g, head);
            tail[0] = Some(g);
        }
        Gradients { slots }
    }

    /// Collects gradients per parameter id, aligned with `store` indices.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Option<TensorD>> {
        let mut out: Vec<Option<TensorD>> = (0..store.len()).map(|_| None).collect();
        for (&pid, &var) in &self.param_uses {
            if let Some(g) = grads.get(var) {
                out[pid.index()] = Some(g.clone());
            }
        }
        out
    }

    fn backprop_node(&self, i: usize, g: &TensorD, grads: &mut [Option<TensorD>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Scale { x, c } => {
                if self.needs_grad(*x) {
                    add_into(&mut grads[x.0], &g.mapv(|v| v * c));
                }
            }
            Op::AddScalar { x } => {
                if self.needs_grad(*x) {
                    add_ref(&mut grads[x.0], g);
                }
            }
            Op::Add { a, b } => {
                if self.needs_grad(*a) {
                    add_ref(&mut grads[a.0], g);
                }
                if self.needs_grad(*b) {
                    add_ref(&mut grads[b.0], g);
                }
            }
            Op::Mul { a, b } => {
                if self.needs_grad(*a) {
                    add_into(&mut grads[a.0], &(g * self.value(*b)));
                }
                if self.needs_grad(*b) {
                    add_into(&mut grads[b.0], &(g * self.value(*a)));
                }
            }
            Op::MulChannelGate { x, gate } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let s: usize = xs[2..].iter().product();
                let gv = g.as_slice().unwrap();
                if self.needs_grad(*x) {
                    let gatev = self.value(*gate).as_slice().unwrap();
                    let mut gx = vec![0.0; n * c * s];
                    for bi in 0..n {
                        for ci in 0..c {
                            let off = (bi * c + ci) * s;
                            for si in 0..s {
                                gx[off + si] = gv[off + si] * gatev[bi * s + si];
                            }
                        }
                    }
                    let gx = ArrayD::from_shape_vec(IxDyn(xs), gx).unwrap();
                    add_into(&mut grads[x.0], &gx);
                }
                if self.needs_grad(*gate) {
                    let xv = self.value(*x).as_slice().unwrap();
                    let mut gg = vec![0.0; n * s];
                    for bi in 0..n {
                        for ci in 0..c {
                            let off = (bi * c + ci) * s;
                            for si in 0..s {
                                gg[bi * s + si] += gv[off + si] * xv[off + si];
                            }
                        }
                    }
                    let gg =
                        ArrayD::from_shape_vec(IxDyn(self.shape(*gate)), gg).unwrap();
                    add_into(&mut grads[gate.0], &gg);
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.needs_grad(*x) {
                    let xv = self.value(*x);
                    let mut gx = g.clone();
                    gx.zip_mut_with(xv, |gi, &vi| {
                        if vi < 0.0 {
                            *gi *= slope;
                        }
                    });
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::Sigmoid { x } => {
                if self.needs_grad(*x) {
                    let y = &node.value;
                    let mut gx = g.clone();
                    gx.zip_mut_with(y, |gi, &yi| *gi *= yi * (1.0 - yi));
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::Softplus { x } => {
                if self.needs_grad(*x) {
                    let mut gx = g.clone();
                    gx.zip_mut_with(self.value(*x), |gi, &vi| *gi *= sigmoid_scalar(vi));
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::Ln { x } => {
                if self.needs_grad(*x) {
                    let mut gx = g.clone();
                    gx.zip_mut_with(self.value(*x), |gi, &vi| *gi /= vi);
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::Square { x } => {
                if self.needs_grad(*x) {
                    let mut gx = g.clone();
                    gx.zip_mut_with(self.value(*x), |gi, &vi| *gi *= 2.0 * vi);
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::ConcatChannels { parts } => {
                let out_shape = node.value.shape();
                let n = out_shape[0];
                let c_total = out_shape[1];
                let s: usize = out_shape[2..].iter().product();
                let gv = g.as_slice().unwrap();
                let mut c_off = 0;
                for &p in parts {
                    let c_p = self.shape(p)[1];
                    if self.needs_grad(p) {
                        let mut gp = vec![0.0; n * c_p * s];
                        for bi in 0..n {
                            let src = (bi * c_total + c_off) * s;
                            let dst = bi * c_p * s;
                            gp[dst..dst + c_p * s].copy_from_slice(&gv[src..src + c_p * s]);
                        }
                        let gp = ArrayD::from_shape_vec(IxDyn(self.shape(p)), gp).unwrap();
                        add_into(&mut grads[p.0], &gp);
                    }
                    c_off += c_p;
                }
            }
            Op::SliceChannels { x, start, len } => {
                if self.needs_grad(*x) {
                    let xs = self.shape(*x);
                    let (n, c) = (xs[0], xs[1]);
                    let s: usize = xs[2..].iter().product();
                    let gv = g.as_slice().unwrap();
                    let mut gx = vec![0.0; n * c * s];
                    for bi in 0..n {
                        let dst = (bi * c + start) * s;
                        let src = bi * len * s;
                        gx[dst..dst + len * s].copy_from_slice(&gv[src..src + len * s]);
                    }
                    let gx = ArrayD::from_shape_vec(IxDyn(xs), gx).unwrap();
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::AvgPool { x, factor } => {
                if self.needs_grad(*x) {
                    if *factor == 1 {
                        add_ref(&mut grads[x.0], g);
                        return;
                    }
                    let xs = self.shape(*x);
                    let (n, c) = (xs[0], xs[1]);
                    let in_sp = &xs[2..];
                    let out_sp: Vec<usize> = in_sp.iter().map(|&d| d / factor).collect();
                    let s_in: usize = in_sp.iter().product();
                    let s_out: usize = out_sp.iter().product();
                    let window = factor.pow(in_sp.len() as u32) as f64;
                    let gv = g.as_slice().unwrap();
                    let mut gx = vec![0.0; n * c * s_in];
                    for nc in 0..n * c {
                        let src = &gv[nc * s_out..(nc + 1) * s_out];
                        let dst = &mut gx[nc * s_in..(nc + 1) * s_in];
                        unpool_broadcast(src, dst, in_sp, &out_sp, *factor, 1.0 / window);
                    }
                    let gx = ArrayD::from_shape_vec(IxDyn(xs), gx).unwrap();
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::SumAll { x } => {
                if self.needs_grad(*x) {
                    let gs = g.as_slice().unwrap()[0];
                    let gx = ArrayD::from_elem(IxDyn(self.shape(*x)), gs);
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::MeanAll { x } => {
                if self.needs_grad(*x) {
                    let len = self.value(*x).len() as f64;
                    let gs = g.as_slice().unwrap()[0] / len;
                    let gx = ArrayD::from_elem(IxDyn(self.shape(*x)), gs);
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::ChannelMean { x } => {
                if self.needs_grad(*x) {
                    let xs = self.shape(*x);
                    let (n, c) = (xs[0], xs[1]);
                    let s: usize = xs[2..].iter().product();
                    let gv = g.as_slice().unwrap();
                    let mut gx = vec![0.0; n * c * s];
                    for bi in 0..n {
                        for ci in 0..c {
                            let off = (bi * c + ci) * s;
                            for si in 0..s {
                                gx[off + si] = gv[bi * s + si] / c as f64;
                            }
                        }
                    }
                    let gx = ArrayD::from_shape_vec(IxDyn(xs), gx).unwrap();
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::Conv { x, w, b, spec } => {
                if self.needs_grad(*x) {
                    let in_sp: Vec<usize> = self.shape(*x)[2..].to_vec();
                    let gx = conv::conv_grad_input(g, self.value(*w), *spec, &in_sp);
                    add_into(&mut grads[x.0], &gx);
                }
                if self.needs_grad(*w) {
                    let gw = conv::conv_grad_weight(self.value(*x), g, *spec);
                    add_into(&mut grads[w.0], &gw);
                }
                if let Some(bv) = b {
                    if self.needs_grad(*bv) {
                        let gb = conv::sum_batch_spatial(g);
                        add_into(&mut grads[bv.0], &gb);
                    }
                }
            }
            Op::ConvTranspose { x, w, b, spec } => {
                if self.needs_grad(*x) {
                    let gx = conv::conv_forward(g, self.value(*w), None, *spec);
                    add_into(&mut grads[x.0], &gx);
                }
                if self.needs_grad(*w) {
                    let gw = conv::conv_grad_weight(g, self.value(*x), *spec);
                    add_into(&mut grads[w.0], &gw);
                }
                if let Some(bv) = b {
                    if self.needs_grad(*bv) {
                        let gb = conv::sum_batch_spatial(g);
                        add_into(&mut grads[bv.0], &gb);
                    }
                }
            }
            Op::InstanceNorm { x, gamma, beta, cache } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let s: usize = xs[2..].iter().product();
                self.norm_backward(
                    g,
                    *x,
                    *gamma,
                    *beta,
                    grads,
                    |bi, ci| cache.groups[bi * c + ci],
                    n,
                    c,
                    s,
                    false,
                );
            }
            Op::BatchNorm { x, gamma, beta, stats } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let s: usize = xs[2..].iter().product();
                match stats {
                    BnStats::Batch(cache) => self.norm_backward(
                        g,
                        *x,
                        *gamma,
                        *beta,
                        grads,
                        |_, ci| cache.groups[ci],
                        n,
                        c,
                        s,
                        true,
                    ),
                    BnStats::Fixed { mean, invstd } => {
                        let gv = g.as_slice().unwrap();
                        let xv = self.value(*x).as_slice().unwrap();
                        let gammav = self.value(*gamma).as_slice().unwrap();
                        if self.needs_grad(*x) {
                            let mut gx = vec![0.0; gv.len()];
                            for bi in 0..n {
                                for ci in 0..c {
                                    let off = (bi * c + ci) * s;
                                    let k = gammav[ci] * invstd[ci];
                                    for si in 0..s {
                                        gx[off + si] = gv[off + si] * k;
                                    }
                                }
                            }
                            let gx = ArrayD::from_shape_vec(IxDyn(xs), gx).unwrap();
                            add_into(&mut grads[x.0], &gx);
                        }
                        if self.needs_grad(*gamma) || self.needs_grad(*beta) {
                            let mut gg = vec![0.0; c];
                            let mut gb = vec![0.0; c];
                            for bi in 0..n {
                                for ci in 0..c {
                                    let off = (bi * c + ci) * s;
                                    for si in 0..s {
                                        let xh = (xv[off + si] - mean[ci]) * invstd[ci];
                                        gg[ci] += gv[off + si] * xh;
                                        gb[ci] += gv[off + si];
                                    }
                                }
                            }
                            if self.needs_grad(*gamma) {
                                let t = ArrayD::from_shape_vec(IxDyn(&[c]), gg).unwrap();
                                add_into(&mut grads[gamma.0], &t);
                            }
                            if self.needs_grad(*beta) {
                                let t = ArrayD::from_shape_vec(IxDyn(&[c]), gb).unwrap();
                                add_into(&mut grads[beta.0], &t);
                            }
                        }
                    }
                }
            }
            Op::SoftmaxChannels { x } => {
                if self.needs_grad(*x) {
                    let xs = self.shape(*x);
                    let (n, c) = (xs[0], xs[1]);
                    let s: usize = xs[2..].iter().product();
                    let pv = node.value.as_slice().unwrap();
                    let gv = g.as_slice().unwrap();
                    let mut gx = vec![0.0; gv.len()];
                    for bi in 0..n {
                        for si in 0..s {
                            let mut dot = 0.0;
                            for ci in 0..c {
                                let idx = (bi * c + ci) * s + si;
                                dot += gv[idx] * pv[idx];
                            }
                            for ci in 0..c {
                                let idx = (bi * c + ci) * s + si;
                                gx[idx] = pv[idx] * (gv[idx] - dot);
                            }
                        }
                    }
                    let gx = ArrayD::from_shape_vec(IxDyn(xs), gx).unwrap();
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::CrossEntropyMean { logits, labels, probs } => {
                if self.needs_grad(*logits) {
                    let xs = self.shape(*logits);
                    let (n, c) = (xs[0], xs[1]);
                    let s: usize = xs[2..].iter().product();
                    let scale = g.as_slice().unwrap()[0] / (n * s) as f64;
                    let lv = labels.as_slice().unwrap();
                    let pv = probs.as_slice().unwrap();
                    let mut gx = vec![0.0; pv.len()];
                    for bi in 0..n {
                        for si in 0..s {
                            let cls = lv[bi * s + si] as usize;
                            for ci in 0..c {
                                let idx = (bi * c + ci) * s + si;
                                let onehot = if ci == cls { 1.0 } else { 0.0 };
                                gx[idx] = scale * (pv[idx] - onehot);
                            }
                        }
                    }
                    let gx = ArrayD::from_shape_vec(IxDyn(xs), gx).unwrap();
                    add_into(&mut grads[logits.0], &gx);
                }
            }
            Op::SoftDice { probs, labels, smooth, cache } => {
                if self.needs_grad(*probs) {
                    let xs = self.shape(*probs);
                    let (n, c) = (xs[0], xs[1]);
                    let s: usize = xs[2..].iter().product();
                    let scale = g.as_slice().unwrap()[0] / (c - 1) as f64;
                    let lv = labels.as_slice().unwrap();
                    let mut gx = vec![0.0; n * c * s];
                    for cls in 1..c {
                        let (inter, union) = cache.per_class[cls - 1];
                        let den = union + smooth;
                        let num = 2.0 * inter + smooth;
                        for bi in 0..n {
                            let off = (bi * c + cls) * s;
                            for si in 0..s {
                                let ind =
                                    if lv[bi * s + si] as usize == cls { 1.0 } else { 0.0 };
                                // d(1 - dice_c)/dp = -(2*ind*den - num) / den^2
                                gx[off + si] =
                                    -scale * (2.0 * ind * den - num) / (den * den);
                            }
                        }
                    }
                    let gx = ArrayD::from_shape_vec(IxDyn(xs), gx).unwrap();
                    add_into(&mut grads[probs.0], &gx);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        g: &TensorD,
        x: Var,
        gamma: Var,
        beta: Var,
        grads: &mut [Option<TensorD>],
        group_stats: impl Fn(usize, usize) -> (f64, f64),
        n: usize,
        c: usize,
        s: usize,
        per_channel_groups: bool,
    ) {
        let gv = g.as_slice().unwrap();
        let xv = self.value(x).as_slice().unwrap();
        let gammav = self.value(gamma).as_slice().unwrap();
        let mut ggamma = vec![0.0; c];
        let mut gbeta = vec![0.0; c];
        let mut gx = if self.needs_grad(x) { vec![0.0; gv.len()] } else { Vec::new() };

        // Group sums: per (n, c) for instance norm, per c for batch norm.
        let run = |sums: &mut [(f64, f64)]| {
            for bi in 0..n {
                for ci in 0..c {
                    let off = (bi * c + ci) * s;
                    let (mean, invstd) = group_stats(bi, ci);
                    let gi = if per_channel_groups { ci } else { bi * c + ci };
                    for si in 0..s {
                        let xh = (xv[off + si] - mean) * invstd;
                        sums[gi].0 += gv[off + si];
                        sums[gi].1 += gv[off + si] * xh;
                    }
                }
            }
        };
        let n_groups = if per_channel_groups { c } else { n * c };
        let m = if per_channel_groups { (n * s) as f64 } else { s as f64 };
        let mut sums = vec![(0.0, 0.0); n_groups];
        run(&mut sums);

        for bi in 0..n {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                let (mean, invstd) = group_stats(bi, ci);
                let gi = if per_channel_groups { ci } else { bi * c + ci };
                let (s1, s2) = sums[gi];
                for si in 0..s {
                    let xh = (xv[off + si] - mean) * invstd;
                    ggamma[ci] += gv[off + si] * xh;
                    gbeta[ci] += gv[off + si];
                    if !gx.is_empty() {
                        gx[off + si] = gammav[ci]
                            * invstd
                            * (gv[off + si] - s1 / m - xh * s2 / m);
                    }
                }
            }
        }
        if self.needs_grad(x) {
            let t = ArrayD::from_shape_vec(IxDyn(self.shape(x)), gx).unwrap();
            add_into(&mut grads[x.0], &t);
        }
        if self.needs_grad(gamma) {
            let t = ArrayD::from_shape_vec(IxDyn(&[c]), ggamma).unwrap();
            add_into(&mut grads[gamma.0], &t);
        }
        if self.needs_grad(beta) {
            let t = ArrayD::from_shape_vec(IxDyn(&[c]), gbeta).unwrap();
            add_into(&mut grads[beta.0], &t);
        }
    }
}

fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn moments(xs: &[f64], eps: f64) -> (f64, f64) {
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
    (mean, 1.0 / (var + eps).sqrt())
}

fn softmax_into(xv: &[f64], out: &mut [f64], n: usize, c: usize, s: usize) {
    for bi in 0..n {
        for si in 0..s {
            let mut mx = f64::NEG_INFINITY;
            for ci in 0..c {
                mx = mx.max(xv[(bi * c + ci) * s + si]);
            }
            let mut z = 0.0;
            for ci in 0..c {
                let idx = (bi * c + ci) * s + si;
                let e = (xv[idx] - mx).exp();
                out[idx] = e;
                z += e;
            }
            for ci in 0..c {
                out[(bi * c + ci) * s + si] /= z;
            }
        }
    }
}

/// Sum over `factor`-sized windows, writing into the pooled grid.
fn pool_sum(src: &[f64], dst: &mut [f64], in_sp: &[usize], out_sp: &[usize], factor: usize) {
    match in_sp.len() {
        2 => {
            let (iw, ow) = (in_sp[1], out_sp[1]);
            for (iy, row) in src.chunks(iw).enumerate() {
                let oy = iy / factor;
                for (ix, &v) in row.iter().enumerate() {
                    dst[oy * ow + ix / factor] += v;
                }
            }
        }
        3 => {
            let (ih, iw) = (in_sp[1], in_sp[2]);
            let (oh, ow) = (out_sp[1], out_sp[2]);
            for (iz, plane) in src.chunks(ih * iw).enumerate() {
                let oz = iz / factor;
                for (iy, row) in plane.chunks(iw).enumerate() {
                    let oy = iy / factor;
                    for (ix, &v) in row.iter().enumerate() {
                        dst[(oz * oh + oy) * ow + ix / factor] += v;
                    }
                }
            }
        }
        d => panic!("avg_pool supports 2 or 3 spatial axes, got {d}"),
    }
}

/// Spread each pooled value (times `scale`) back over its window.
fn unpool_broadcast(
    src: &[f64],
    dst: &mut [f64],
    in_sp: &[usize],
    out_sp: &[usize],
    factor: usize,
    scale: f64,
) {
    match in_sp.len() {
        2 => {
            let (iw, ow) = (in_sp[1], out_sp[1]);
            for (iy, row) in dst.chunks_mut(iw).enumerate() {
                let oy = iy / factor;
                for (ix, v) in row.iter_mut().enumerate() {
                    *v += src[oy * ow + ix / factor] * scale;
                }
            }
        }
        3 => {
            let (ih, iw) = (in_sp[1], in_sp[2]);
            let (oh, ow) = (out_sp[1], out_sp[2]);
            for (iz, plane) in dst.chunks_mut(ih * iw).enumerate() {
                let oz = iz / factor;
                for (iy, row) in plane.chunks_mut(iw).enumerate() {
                    let oy = iy / factor;
                    for (ix, v) in row.iter_mut().enumerate() {
                        *v += src[(oz * oh + oy) * ow + ix / factor] * scale;
                    }
                }
            }
        }
        d => panic!("avg_pool supports 2 or 3 spatial axes, got {d}"),
    }
}

fn add_ref(slot: &mut Option<TensorD>, g: &TensorD) {
    match slot {
        Some(t) => *t += g,
        None => *slot = Some(g.clone()),
    }
}

fn add_into(slot: &mut Option<TensorD>, g: &TensorD) {
    add_ref(slot, g)
}
