//! The segmentor network: a U-shaped encoder/decoder whose decoder ingests
//! compressed "messages" from the other modalities' encoders.
//!
//! Each modality owns one [`Segmentor`].  Its encoder produces a 4-stage
//! [`MessageBundle`] (one tensor per resolution level); every other
//! segmentor's decoder taps those bundles through a cross-modality gate:
//! attention weights select message content, per-message 1x1 convolutions
//! emit a Gaussian code (mu, sigma), a reparameterized sample kappa is drawn,
//! and channel-aligned codes are summed back onto the local features.  The
//! Gaussian bottleneck is what the training losses regularize, so the gate
//! exposes every (mu, sigma, kappa) triple it creates.
//!
//! Gradients flow through messages into the sending encoders — the
//! segmentors train jointly.  The one exception: the local features entering
//! the attention computation are detached, so the code path cannot reshape
//! the receiver's own representation to please the gate.

use crate::autodiff::{ConvSpec, ParamId, ParamStore, Tape, TensorD, Var};
use crate::config::{ArchitectureConfig, NormKind};
use crate::{CimlError, Result};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write as IoWrite};
use std::path::Path;

/// Negative slope of every LeakyReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Epsilon inside all normalization denominators.
pub const NORM_EPS: f64 = 1e-5;
/// Floor added to softplus when producing standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Running-statistics momentum for batch normalization.
const BN_MOMENTUM: f64 = 0.1;

/// Per-stage encoder outputs offered to the other segmentors.
/// `stages[s-1]` has channels `C * 2^(s-1)` at spatial extent `(P / 2^s)^d`.
#[derive(Clone)]
pub struct MessageBundle {
    pub stages: Vec<Var>,
}

/// One Gaussian code emitted by the gate for one (stage, message) pair.
#[derive(Clone, Copy)]
pub struct GaussianLatent {
    /// Decoder stage the code was produced at (4 = deepest, 1 = shallowest).
    pub stage: usize,
    /// Index into the incoming-message list.
    pub message_index: usize,
    pub mu: Var,
    /// Strictly positive (softplus + floor).
    pub sigma: Var,
    /// `mu + sigma * eps` under the active noise source.
    pub kappa: Var,
}

/// Everything a forward pass produces.
pub struct SegmentorOutput {
    /// `[N, O, P^d]` class logits.
    pub logits: Var,
    /// All Gaussian codes, deepest stage first.
    pub latents: Vec<GaussianLatent>,
    /// Per-stage attention maps `[N, K, (P/2^s)^d]`, deepest stage first.
    pub attention_maps: Vec<Var>,
    /// This segmentor's own outgoing messages.
    pub messages: MessageBundle,
}

/// Encoder activations a decoder needs: the full-resolution features of each
/// stage (skip connections) and the downsampled stage outputs (messages).
pub struct EncoderFeatures {
    /// `pre[s-1]`: stage-s features before downsampling,
    /// channels `C * 2^(s-1)` at `(P / 2^(s-1))^d`.
    pub pre: Vec<Var>,
    pub messages: MessageBundle,
}

/// Where reparameterization noise comes from.
pub enum NoiseSource {
    /// No noise: `kappa = mu` (the inference convention).
    Mean,
    /// Fresh standard-normal draws from the held generator.
    Sample(ChaCha8Rng),
    /// Standard-normal noise derived from this seed and the (stage, message)
    /// site, so repeated forwards see identical noise.
    Fixed(u64),
    /// Caller-supplied noise per (stage, message_index).
    Supplied(BTreeMap<(usize, usize), TensorD>),
}

impl NoiseSource {
    pub fn sample(seed: u64) -> Self {
        NoiseSource::Sample(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Noise tensor for one gate site, or `None` to use the mean.
    fn eps(&mut self, stage: usize, message: usize, shape: &[usize]) -> Result<Option<TensorD>> {
        match self {
            NoiseSource::Mean => Ok(None),
            NoiseSource::Sample(rng) => Ok(Some(standard_normal(rng, shape))),
            NoiseSource::Fixed(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(site_seed(*seed, stage, message));
                Ok(Some(standard_normal(&mut rng, shape)))
            }
            NoiseSource::Supplied(map) => {
                let eps = map.get(&(stage, message)).ok_or_else(|| {
                    CimlError::Validation(format!(
                        "no supplied noise for stage {stage}, message {message}"
                    ))
                })?;
                if eps.shape() != shape {
                    return Err(CimlError::Shape(format!(
                        "supplied noise for stage {stage}, message {message}: \
                         shape {:?}, expected {shape:?}",
                        eps.shape()
                    )));
                }
                Ok(Some(eps.clone()))
            }
        }
    }
}

fn standard_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> TensorD {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product agree")
}

/// Mixes a site index into a seed (splitmix64 finalizer) so each gate site
/// gets an independent, order-free noise stream.
fn site_seed(seed: u64, stage: usize, message: usize) -> u64 {
    let mut z = seed ^ ((stage as u64) << 40) ^ ((message as u64) << 20);
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

struct ConvLayer {
    w: ParamId,
    b: ParamId,
    spec: ConvSpec,
}

impl ConvLayer {
    fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        t.conv(x, w, Some(b), self.spec)
    }
}

struct TransposeLayer {
    w: ParamId,
    b: ParamId,
}

impl TransposeLayer {
    fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        t.conv_transpose(x, w, Some(b), ConvSpec::K3S2)
    }
}

struct NormLayer {
    kind: NormKind,
    gamma: ParamId,
    beta: ParamId,
    /// Batch norm only: running (mean, var), stored as frozen parameters.
    running: Option<(ParamId, ParamId)>,
}

impl NormLayer {
    fn forward(&self, t: &mut Tape, store: &mut ParamStore, x: Var, train: bool) -> Var {
        let gamma = t.param(store, self.gamma);
        let beta = t.param(store, self.beta);
        match self.kind {
            NormKind::Instance => t.instance_norm(x, gamma, beta, NORM_EPS),
            NormKind::Batch => {
                let (rm_id, rv_id) = self.running.expect("batch norm has running stats");
                if train {
                    let (y, stats) = t.batch_norm_train(x, gamma, beta, NORM_EPS);
                    let rm = store.value_mut(rm_id);
                    for (o, n) in rm.iter_mut().zip(&stats.mean) {
                        *o = (1.0 - BN_MOMENTUM) * *o + BN_MOMENTUM * n;
                    }
                    let rv = store.value_mut(rv_id);
                    for (o, n) in rv.iter_mut().zip(&stats.var) {
                        *o = (1.0 - BN_MOMENTUM) * *o + BN_MOMENTUM * n;
                    }
                    y
                } else {
                    let rm = store.value(rm_id).iter().copied().collect::<Vec<f64>>();
                    let rv = store.value(rv_id).iter().copied().collect::<Vec<f64>>();
                    t.batch_norm_eval(x, gamma, beta, NORM_EPS, &rm, &rv)
                }
            }
        }
    }
}

/// Parameter construction: He-style normal init scaled for LeakyReLU fan-in,
/// zero biases, unit/zero affine norm parameters.
struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    dims: usize,
    norm: NormKind,
}

impl Init<'_> {
    fn he(&mut self, shape: &[usize], fan_in: usize) -> TensorD {
        let gain = 2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE);
        let std = (gain / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> =
            (0..n).map(|_| std * self.rng.sample::<f64, _>(StandardNormal)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product agree")
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, spec: ConvSpec) -> Result<ConvLayer> {
        let k_vol = spec.ksize.pow(self.dims as u32);
        let mut w_shape = vec![c_out, c_in];
        w_shape.extend(std::iter::repeat(spec.ksize).take(self.dims));
        let w = self.he(&w_shape, c_in * k_vol);
        let w = self.store.add(&format!("{name}.weight"), w, true)?;
        let b = self.store.add(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[c_out])), true)?;
        Ok(ConvLayer { w, b, spec })
    }

    fn transpose(&mut self, name: &str, c_in: usize, c_out: usize) -> Result<TransposeLayer> {
        let k = ConvSpec::K3S2.ksize;
        let k_vol = k.pow(self.dims as u32);
        let mut w_shape = vec![c_in, c_out];
        w_shape.extend(std::iter::repeat(k).take(self.dims));
        let w = self.he(&w_shape, c_out * k_vol);
        let w = self.store.add(&format!("{name}.weight"), w, true)?;
        let b = self.store.add(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[c_out])), true)?;
        Ok(TransposeLayer { w, b })
    }

    fn norm(&mut self, name: &str, ch: usize) -> Result<NormLayer> {
        let gamma =
            self.store.add(&format!("{name}.gamma"), ArrayD::ones(IxDyn(&[ch])), true)?;
        let beta =
            self.store.add(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[ch])), true)?;
        let running = match self.norm {
            NormKind::Instance => None,
            NormKind::Batch => Some((
                self.store.add(
                    &format!("{name}.running_mean"),
                    ArrayD::zeros(IxDyn(&[ch])),
                    false,
                )?,
                self.store.add(
                    &format!("{name}.running_var"),
                    ArrayD::ones(IxDyn(&[ch])),
                    false,
                )?,
            )),
        };
        Ok(NormLayer { kind: self.norm, gamma, beta, running })
    }
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

/// One encoder stage: a channel-adjusting convolution at full stage
/// resolution, then a stride-2 convolution halving each spatial axis.
struct DownBlock {
    conv_a: ConvLayer,
    norm_a: NormLayer,
    conv_b: ConvLayer,
    norm_b: NormLayer,
}

impl DownBlock {
    fn forward(&self, t: &mut Tape, store: &mut ParamStore, x: Var, train: bool) -> (Var, Var) {
        let y = self.conv_a.forward(t, store, x);
        let y = self.norm_a.forward(t, store, y, train);
        let pre = t.leaky_relu(y, LEAKY_SLOPE);
        let y = self.conv_b.forward(t, store, pre);
        let y = self.norm_b.forward(t, store, y, train);
        let post = t.leaky_relu(y, LEAKY_SLOPE);
        (pre, post)
    }
}

/// Per-stage cross-modality gate parameters.
struct GateStage {
    att_conv_a: ConvLayer,
    att_norm: NormLayer,
    att_conv_b: ConvLayer,
    /// One 1x1 convolution triple per incoming message.
    mu: Vec<ConvLayer>,
    sigma: Vec<ConvLayer>,
    align: Vec<ConvLayer>,
}

/// One decoder stage: transpose convolution doubling resolution, then a
/// convolution folding in the skip connection.
struct UpBlock {
    transpose: TransposeLayer,
    norm_t: NormLayer,
    conv: ConvLayer,
    norm_c: NormLayer,
}

// ---------------------------------------------------------------------------
// Segmentor
// ---------------------------------------------------------------------------

/// One modality's full network.
pub struct Segmentor {
    config: ArchitectureConfig,
    n_messages: usize,
    n_outputs: usize,
    downs: Vec<DownBlock>,
    /// Gate parameters per decoder stage, deepest (stage 4) first.
    /// Empty when the segmentor receives no messages.
    gates: Vec<GateStage>,
    ups: Vec<UpBlock>,
    out_conv: ConvLayer,
}

impl Segmentor {
    /// Builds and initializes all parameters under `prefix` in `store`.
    ///
    /// `n_messages` is the number of incoming message bundles (other
    /// modalities); zero yields a plain encoder-decoder with no gate
    /// parameters.  `n_outputs` counts segmentation channels including
    /// background.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        config: &ArchitectureConfig,
        n_messages: usize,
        n_outputs: usize,
    ) -> Result<Self> {
        config.validate()?;
        if n_outputs < 2 {
            return Err(CimlError::Validation(format!(
                "segmentor needs at least background + one class, got {n_outputs} channels"
            )));
        }
        let c = config.base_channels;
        let mut init =
            Init { store, rng, dims: config.spatial_dims, norm: config.norm };

        let mut downs = Vec::with_capacity(4);
        for s in 1..=4usize {
            let c_in = if s == 1 { 1 } else { c << (s - 2) };
            let c_out = c << (s - 1);
            let name = format!("{prefix}.encoder.down{s}");
            downs.push(DownBlock {
                conv_a: init.conv(&format!("{name}.conv_a"), c_in, c_out, ConvSpec::K3S1)?,
                norm_a: init.norm(&format!("{name}.norm_a"), c_out)?,
                conv_b: init.conv(&format!("{name}.conv_b"), c_out, c_out, ConvSpec::K3S2)?,
                norm_b: init.norm(&format!("{name}.norm_b"), c_out)?,
            });
        }

        let mut gates = Vec::new();
        if n_messages > 0 {
            for step in 1..=4usize {
                let stage = 5 - step;
                let mc = c << (stage - 1);
                let lc = Self::local_channels(c, step);
                let k1 = n_messages + 1;
                let name = format!("{prefix}.gate.stage{stage}");
                let mut mu = Vec::with_capacity(n_messages);
                let mut sigma = Vec::with_capacity(n_messages);
                let mut align = Vec::with_capacity(n_messages);
                for j in 0..n_messages {
                    mu.push(init.conv(&format!("{name}.mu.{j}"), mc, mc, ConvSpec::K1)?);
                    sigma.push(init.conv(&format!("{name}.sigma.{j}"), mc, mc, ConvSpec::K1)?);
                    align.push(init.conv(&format!("{name}.align.{j}"), mc, lc, ConvSpec::K1)?);
                }
                gates.push(GateStage {
                    att_conv_a: init.conv(
                        &format!("{name}.attention.conv_a"),
                        k1,
                        4 * k1,
                        ConvSpec::K3S1,
                    )?,
                    att_norm: init.norm(&format!("{name}.attention.norm"), 4 * k1)?,
                    att_conv_b: init.conv(
                        &format!("{name}.attention.conv_b"),
                        4 * k1,
                        n_messages,
                        ConvSpec::K1,
                    )?,
                    mu,
                    sigma,
                    align,
                });
            }
        }

        let mut ups = Vec::with_capacity(4);
        for step in 1..=4usize {
            let lc = Self::local_channels(c, step);
            let t_in = if step == 1 { 2 * lc } else { lc };
            let t_out = c << (4 - step);
            let name = format!("{prefix}.decoder.up{step}");
            ups.push(UpBlock {
                transpose: init.transpose(&format!("{name}.transpose"), t_in, t_out)?,
                norm_t: init.norm(&format!("{name}.norm_t"), t_out)?,
                conv: init.conv(&format!("{name}.conv"), 2 * t_out, t_out, ConvSpec::K3S1)?,
                norm_c: init.norm(&format!("{name}.norm_c"), t_out)?,
            });
        }

        let out_conv = init.conv(&format!("{prefix}.output"), c, n_outputs, ConvSpec::K3S1)?;

        Ok(Segmentor {
            config: config.clone(),
            n_messages,
            n_outputs,
            downs,
            gates,
            ups,
            out_conv,
        })
    }

    /// Channels of the local decoder feature entering gate step `step`
    /// (step 1 sees the bottleneck, later steps see the previous up-block).
    fn local_channels(c: usize, step: usize) -> usize {
        if step == 1 {
            8 * c
        } else {
            c << (5 - step)
        }
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn n_messages(&self) -> usize {
        self.n_messages
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    /// Expected shape of the stage-`s` message for batch size `n`.
    pub fn stage_shape(&self, n: usize, stage: usize) -> Vec<usize> {
        let mut shape = vec![n, self.config.stage_channels(stage)];
        shape.extend(
            std::iter::repeat(self.config.stage_size(stage)).take(self.config.spatial_dims),
        );
        shape
    }

    /// Runs the encoder on a `[N, 1, P^d]` patch.
    pub fn encode(
        &self,
        t: &mut Tape,
        store: &mut ParamStore,
        patch: Var,
        train: bool,
    ) -> Result<EncoderFeatures> {
        let shape = t.shape(patch).to_vec();
        let d = self.config.spatial_dims;
        let p = self.config.patch_size;
        if shape.len() != d + 2 || shape[1] != 1 || shape[2..].iter().any(|&s| s != p) {
            return Err(CimlError::Shape(format!(
                "encoder input must be [N, 1, {p}^{d}], got {shape:?}"
            )));
        }
        let mut pre = Vec::with_capacity(4);
        let mut stages = Vec::with_capacity(4);
        let mut x = patch;
        for down in &self.downs {
            let (a, b) = down.forward(t, store, x, train);
            pre.push(a);
            stages.push(b);
            x = b;
        }
        Ok(EncoderFeatures { pre, messages: MessageBundle { stages } })
    }

    /// Attention over incoming messages at one decoder stage: every input is
    /// channel-averaged to one plane, the planes are stacked and passed
    /// through two convolutions, and a sigmoid yields one weight map per
    /// message, each value strictly inside (0, 1).
    ///
    /// The local features are detached here: attention (and everything the
    /// gate derives from it) must not steer the receiving encoder.
    pub fn cig_attention(
        &self,
        t: &mut Tape,
        store: &mut ParamStore,
        stage: usize,
        local: Var,
        messages: &[Var],
        train: bool,
    ) -> Result<Var> {
        if messages.is_empty() {
            return Err(CimlError::Domain("attention needs at least one message".into()));
        }
        if messages.len() != self.n_messages {
            return Err(CimlError::Validation(format!(
                "gate built for {} messages, got {}",
                self.n_messages,
                messages.len()
            )));
        }
        let spatial = t.shape(local)[2..].to_vec();
        for (j, &m) in messages.iter().enumerate() {
            if t.shape(m)[2..] != spatial[..] || t.shape(m)[0] != t.shape(local)[0] {
                return Err(CimlError::Shape(format!(
                    "message {j} shape {:?} does not sit at local resolution {spatial:?}",
                    t.shape(m)
                )));
            }
        }
        let gate = &self.gates[4 - stage];
        let local_frozen = t.detach(local);
        let mut planes = Vec::with_capacity(messages.len() + 1);
        planes.push(t.channel_mean(local_frozen));
        for &m in messages {
            planes.push(t.channel_mean(m));
        }
        let x = t.concat_channels(&planes);
        let x = gate.att_conv_a.forward(t, store, x);
        let x = gate.att_norm.forward(t, store, x, train);
        let x = t.leaky_relu(x, LEAKY_SLOPE);
        let x = gate.att_conv_b.forward(t, store, x);
        Ok(t.sigmoid(x))
    }

    /// The full gate at one decoder stage: attention-weighted messages are
    /// encoded as Gaussian codes, sampled via `kappa = mu + sigma * eps`,
    /// channel-aligned, and summed onto the local features.
    ///
    /// Returns the fused tensor, the attention map, and one latent per
    /// message.
    pub fn cig_filter(
        &self,
        t: &mut Tape,
        store: &mut ParamStore,
        stage: usize,
        local: Var,
        messages: &[Var],
        noise: &mut NoiseSource,
        train: bool,
    ) -> Result<(Var, Var, Vec<GaussianLatent>)> {
        let attention = self.cig_attention(t, store, stage, local, messages, train)?;
        let gate = &self.gates[4 - stage];
        let mut fused = local;
        let mut latents = Vec::with_capacity(messages.len());
        for (j, &m) in messages.iter().enumerate() {
            let weight = t.slice_channels(attention, j, 1);
            let gated = t.mul_channel_gate(m, weight);
            let mu = gate.mu[j].forward(t, store, gated);
            let raw = gate.sigma[j].forward(t, store, gated);
            let sp = t.softplus(raw);
            let sigma = t.add_scalar(sp, SIGMA_FLOOR);
            let kappa = match noise.eps(stage, j, t.shape(mu))? {
                None => mu,
                Some(e) => {
                    let e = t.constant(e);
                    let scaled = t.mul(sigma, e);
                    t.add(mu, scaled)
                }
            };
            let aligned = gate.align[j].forward(t, store, kappa);
            fused = t.add(fused, aligned);
            latents.push(GaussianLatent { stage, message_index: j, mu, sigma, kappa });
        }
        Ok((fused, attention, latents))
    }

    /// Runs the decoder over previously computed encoder features.
    ///
    /// `incoming` carries one bundle per sending modality (possibly empty).
    /// Decoder step `i` gates stage `5-i` messages into the local features,
    /// upsamples by transpose convolution, and folds in the stage's
    /// full-resolution skip.  The deepest step concatenates (bottleneck,
    /// fused) before upsampling; later steps feed the fused tensor directly.
    pub fn decode(
        &self,
        t: &mut Tape,
        store: &mut ParamStore,
        feats: &EncoderFeatures,
        incoming: &[MessageBundle],
        noise: &mut NoiseSource,
        train: bool,
    ) -> Result<SegmentorOutput> {
        if incoming.len() != self.n_messages {
            return Err(CimlError::Validation(format!(
                "segmentor built for {} incoming bundles, got {}",
                self.n_messages,
                incoming.len()
            )));
        }
        let n = t.shape(feats.messages.stages[0])[0];
        for (b_idx, bundle) in incoming.iter().enumerate() {
            if bundle.stages.len() != 4 {
                return Err(CimlError::Validation(format!(
                    "bundle {b_idx} has {} stages, expected 4",
                    bundle.stages.len()
                )));
            }
            for stage in 1..=4usize {
                let want = self.stage_shape(n, stage);
                let got = t.shape(bundle.stages[stage - 1]);
                if *got != want[..] {
                    return Err(CimlError::Shape(format!(
                        "bundle {b_idx} stage {stage}: shape {got:?}, expected {want:?}"
                    )));
                }
            }
        }

        let mut latents = Vec::new();
        let mut attention_maps = Vec::new();
        let mut u = feats.messages.stages[3];
        for step in 1..=4usize {
            let stage = 5 - step;
            let fused = if self.n_messages == 0 {
                u
            } else {
                let msgs: Vec<Var> =
                    incoming.iter().map(|b| b.stages[stage - 1]).collect();
                let (fused, attention, lats) =
                    self.cig_filter(t, store, stage, u, &msgs, noise, train)?;
                attention_maps.push(attention);
                latents.extend(lats);
                fused
            };
            let tin = if step == 1 { t.concat_channels(&[u, fused]) } else { fused };
            let up = &self.ups[step - 1];
            let y = up.transpose.forward(t, store, tin);
            let y = up.norm_t.forward(t, store, y, train);
            let y = t.leaky_relu(y, LEAKY_SLOPE);
            let y = t.concat_channels(&[y, feats.pre[stage - 1]]);
            let y = up.conv.forward(t, store, y);
            let y = up.norm_c.forward(t, store, y, train);
            u = t.leaky_relu(y, LEAKY_SLOPE);
        }
        let logits = self.out_conv.forward(t, store, u);
        Ok(SegmentorOutput {
            logits,
            latents,
            attention_maps,
            messages: feats.messages.clone(),
        })
    }

    /// Encoder + decoder in one call.
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &mut ParamStore,
        patch: Var,
        incoming: &[MessageBundle],
        noise: &mut NoiseSource,
        train: bool,
    ) -> Result<SegmentorOutput> {
        let feats = self.encode(t, store, patch, train)?;
        self.decode(t, store, &feats, incoming, noise, train)
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"CIMLCKPT";

#[derive(serde::Serialize, serde::Deserialize)]
struct CkptHeader {
    manifest: serde_json::Value,
    tensors: Vec<CkptTensor>,
    payload_sha256: String,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CkptTensor {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    trainable: bool,
}

/// Writes every parameter in `store` (weights and frozen statistics alike)
/// as float32 into a single self-describing archive, atomically.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    manifest: serde_json::Value,
) -> Result<()> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut payload: Vec<u8> = Vec::new();
    for id in store.ids() {
        let value = store.value(id);
        tensors.push(CkptTensor {
            name: store.name(id).to_string(),
            shape: value.shape().to_vec(),
            offset: payload.len(),
            trainable: store.trainable(id),
        });
        for &v in value.iter() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let sha = hex_digest(&payload);
    let header = CkptHeader { manifest, tensors, payload_sha256: sha };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| CimlError::Validation(format!("checkpoint header: {e}")))?;

    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| CimlError::io(&tmp, &e))?;
        f.write_all(CKPT_MAGIC).map_err(|e| CimlError::io(&tmp, &e))?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())
            .map_err(|e| CimlError::io(&tmp, &e))?;
        f.write_all(&header_bytes).map_err(|e| CimlError::io(&tmp, &e))?;
        f.write_all(&payload).map_err(|e| CimlError::io(&tmp, &e))?;
        f.sync_all().map_err(|e| CimlError::io(&tmp, &e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| CimlError::io(path, &e))?;
    Ok(())
}

/// Reads an archive back as named tensors plus its manifest.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(serde_json::Value, Vec<(String, TensorD, bool)>)> {
    let mut f = std::fs::File::open(path).map_err(|e| CimlError::io(path, &e))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|e| CimlError::io(path, &e))?;
    if &magic != CKPT_MAGIC {
        return Err(CimlError::Validation(format!(
            "{} is not a checkpoint archive",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes).map_err(|e| CimlError::io(path, &e))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes).map_err(|e| CimlError::io(path, &e))?;
    let header: CkptHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| CimlError::Validation(format!("checkpoint header: {e}")))?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload).map_err(|e| CimlError::io(path, &e))?;
    if hex_digest(&payload) != header.payload_sha256 {
        return Err(CimlError::Validation(format!(
            "{}: payload checksum mismatch",
            path.display()
        )));
    }

    let mut out = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let count: usize = t.shape.iter().product();
        let end = t.offset + 4 * count;
        if end > payload.len() {
            return Err(CimlError::Validation(format!(
                "checkpoint tensor {} overruns payload",
                t.name
            )));
        }
        let data: Vec<f64> = payload[t.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let tensor = ArrayD::from_shape_vec(IxDyn(&t.shape), data)
            .map_err(|e| CimlError::Validation(format!("tensor {}: {e}", t.name)))?;
        out.push((t.name, tensor, t.trainable));
    }
    Ok((header.manifest, out))
}

/// Loads an archive into an existing store whose parameter names and shapes
/// must match exactly.  Returns the manifest.
pub fn load_checkpoint_into(path: &Path, store: &mut ParamStore) -> Result<serde_json::Value> {
    let (manifest, tensors) = load_checkpoint(path)?;
    if tensors.len() != store.len() {
        return Err(CimlError::Validation(format!(
            "checkpoint has {} tensors, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, tensor, _) in tensors {
        let id = store.lookup(&name).ok_or_else(|| {
            CimlError::Validation(format!("checkpoint tensor {name} not present in model"))
        })?;
        if store.value(id).shape() != tensor.shape() {
            return Err(CimlError::Shape(format!(
                "checkpoint tensor {name}: shape {:?}, model expects {:?}",
                tensor.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = tensor;
    }
    Ok(manifest)
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
