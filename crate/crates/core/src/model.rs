//! The full-skip-connection encoder-decoder family.
//!
//! Six encoder levels E0..E5 halve the resolution from E0 to E5. The decoder
//! seeds at D4 = upscale(E5) and climbs back to full resolution. At decoder
//! levels j=1..4 an adaptive concatenation block fuses resampled encoder
//! features E1..E4 (full-skip), just E_j (same-skip), or nothing (no-skip)
//! into the decoder feature, followed by squeeze-excitation gating, a fusing
//! convolution and relu. A sigmoid head bounds depth to (0, max_depth_m).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FscnError, Result};
use crate::tensor::{Graph, NodeId, Scalar, Shape, Tensor};

/// Which encoder features reach which decoder levels.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// The decoder is a plain upscale chain; nothing is routed.
    NoSkip,
    /// Only E_j reaches D_j.
    SameSkip,
    /// Every E1..E4 reaches every D_j, j=1..4.
    FullSkip,
}

impl SkipMode {
    pub fn label(&self) -> &'static str {
        match self {
            SkipMode::NoSkip => "no-skip",
            SkipMode::SameSkip => "same-skip",
            SkipMode::FullSkip => "full-skip",
        }
    }
}

fn default_skip_mode() -> SkipMode {
    SkipMode::FullSkip
}
fn default_base_channels() -> usize {
    16
}
fn default_channel_schedule() -> [usize; 6] {
    [16, 24, 32, 48, 64, 96]
}
fn default_true() -> bool {
    true
}
fn default_se_reduction() -> usize {
    16
}
fn default_max_depth() -> f64 {
    10.0
}
fn default_input_h() -> usize {
    64
}
fn default_input_w() -> usize {
    128
}

/// Architecture description; serializes to the `model` section of the run
/// config JSON.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_skip_mode")]
    pub skip_mode: SkipMode,
    /// Encoder stem width; must equal `channel_schedule[0]`.
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    /// Channels of E0..E5 (and of D0..D4 at matching levels).
    #[serde(default = "default_channel_schedule")]
    pub channel_schedule: [usize; 6],
    /// When false, the learnable concatenation weights are dropped and the
    /// skip blocks are concatenated unweighted.
    #[serde(default = "default_true")]
    pub use_concat_weights: bool,
    /// When false, the squeeze-excitation stage is the identity.
    #[serde(default = "default_true")]
    pub use_se: bool,
    #[serde(default = "default_se_reduction")]
    pub se_reduction: usize,
    #[serde(default = "default_max_depth")]
    pub max_depth_m: f64,
    #[serde(default = "default_input_h")]
    pub input_h: usize,
    #[serde(default = "default_input_w")]
    pub input_w: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            skip_mode: default_skip_mode(),
            base_channels: default_base_channels(),
            channel_schedule: default_channel_schedule(),
            use_concat_weights: true,
            use_se: true,
            se_reduction: default_se_reduction(),
            max_depth_m: default_max_depth(),
            input_h: default_input_h(),
            input_w: default_input_w(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_schedule.iter().any(|&c| c == 0) {
            return Err(FscnError::Config(
                "channel_schedule entries must be positive".into(),
            ));
        }
        if self.base_channels != self.channel_schedule[0] {
            return Err(FscnError::Config(format!(
                "base_channels ({}) must equal channel_schedule[0] ({})",
                self.base_channels, self.channel_schedule[0]
            )));
        }
        if self.se_reduction == 0 {
            return Err(FscnError::Config("se_reduction must be >= 1".into()));
        }
        if !(self.max_depth_m > 0.0) {
            return Err(FscnError::Config("max_depth_m must be > 0".into()));
        }
        if self.input_h == 0 || self.input_h % 32 != 0 || self.input_w == 0 || self.input_w % 32 != 0
        {
            return Err(FscnError::Config(format!(
                "input_h/input_w must be positive and divisible by 32, got {}x{}",
                self.input_h, self.input_w
            )));
        }
        Ok(())
    }
}

/// One named learnable tensor. `decay` marks participation in weight decay
/// (conv weights yes; biases and concatenation weights no).
#[derive(Clone, Debug)]
pub struct ParamEntry<S: Scalar> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub decay: bool,
}

/// All learnables of a model, in declaration order. The order is the wire
/// order of checkpoints, so it must stay stable.
#[derive(Clone, Debug)]
pub struct ParamSet<S: Scalar> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn add(&mut self, name: String, tensor: Tensor<S>, decay: bool) -> usize {
        self.entries.push(ParamEntry {
            name,
            tensor,
            decay,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<S>] {
        &mut self.entries
    }

    /// Total number of learnable scalars.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvRef {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct StageRefs {
    down: ConvRef,
    same: ConvRef,
}

/// Learnable state of one adaptive concatenation block: the concatenation
/// weights, the squeeze-excitation bottleneck, and the fusing convolution.
#[derive(Clone, Debug)]
pub struct AcmState {
    alphas: Vec<usize>,
    se: Option<(ConvRef, ConvRef)>,
    fuse: ConvRef,
}

impl AcmState {
    pub fn n_alphas(&self) -> usize {
        self.alphas.len()
    }

    pub fn se_refs(&self) -> Option<(ConvRef, ConvRef)> {
        self.se
    }
}

/// An instantiated, parameterized network.
#[derive(Clone, Debug)]
pub struct FscnModel<S: Scalar> {
    config: ModelConfig,
    params: ParamSet<S>,
    stem: ConvRef,
    stages: Vec<StageRefs>,
    upscales: Vec<ConvRef>,
    /// acms[j-1] is the block at decoder level j; empty in no-skip mode.
    acms: Vec<AcmState>,
    head: ConvRef,
}

/// Deterministically build a model from a config and seed. Conv weights are
/// Xavier-uniform with limit sqrt(6 / (fan_in + fan_out)), biases zero, and
/// concatenation weights uniform on [0, 1).
pub fn build_model<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<FscnModel<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::default();
    let cs = config.channel_schedule;

    let conv = |params: &mut ParamSet<S>,
                rng: &mut ChaCha8Rng,
                name: &str,
                cout: usize,
                cin: usize,
                k: usize|
     -> ConvRef {
        let fan_in = (cin * k * k) as f64;
        let fan_out = (cout * k * k) as f64;
        let limit = (6.0 / (fan_in + fan_out)).sqrt();
        let data: Vec<S> = (0..cout * cin * k * k)
            .map(|_| S::from_f64(rng.gen_range(-limit..limit)))
            .collect();
        let w = Tensor::from_vec(Shape::new(cout, cin, k, k), data).expect("conv weight layout");
        let wi = params.add(format!("{name}.weight"), w, true);
        let bi = params.add(
            format!("{name}.bias"),
            Tensor::zeros(Shape::new(1, cout, 1, 1)),
            false,
        );
        ConvRef { w: wi, b: bi }
    };

    let stem = conv(&mut params, &mut rng, "encoder.stem", cs[0], 3, 3);
    let mut stages = Vec::with_capacity(5);
    for k in 1..=5 {
        let down = conv(
            &mut params,
            &mut rng,
            &format!("encoder.stage{k}.down"),
            cs[k],
            cs[k - 1],
            3,
        );
        let same = conv(
            &mut params,
            &mut rng,
            &format!("encoder.stage{k}.same"),
            cs[k],
            cs[k],
            3,
        );
        stages.push(StageRefs { down, same });
    }

    // Upscale convs, ordered by target level: D4 first, D0 last.
    let mut upscales = Vec::with_capacity(5);
    for j in (0..=4).rev() {
        upscales.push(conv(
            &mut params,
            &mut rng,
            &format!("decoder.up{j}"),
            cs[j],
            cs[j + 1],
            3,
        ));
    }

    let mut acms = Vec::new();
    if config.skip_mode != SkipMode::NoSkip {
        for j in 1..=4 {
            let sources: Vec<usize> = match config.skip_mode {
                SkipMode::FullSkip => vec![1, 2, 3, 4],
                SkipMode::SameSkip => vec![j],
                SkipMode::NoSkip => unreachable!(),
            };
            let concat_in: usize = sources.iter().map(|&i| cs[i]).sum::<usize>() + cs[j];
            let mut alphas = Vec::new();
            if config.use_concat_weights {
                for &i in &sources {
                    let a = Tensor::scalar(S::from_f64(rng.gen_range(0.0..1.0)));
                    alphas.push(params.add(format!("acm{j}.alpha{i}"), a, false));
                }
            }
            let se = if config.use_se {
                let hidden = (concat_in / config.se_reduction).max(4);
                let reduce = conv(
                    &mut params,
                    &mut rng,
                    &format!("acm{j}.se_reduce"),
                    hidden,
                    concat_in,
                    1,
                );
                let expand = conv(
                    &mut params,
                    &mut rng,
                    &format!("acm{j}.se_expand"),
                    concat_in,
                    hidden,
                    1,
                );
                Some((reduce, expand))
            } else {
                None
            };
            let fuse = conv(
                &mut params,
                &mut rng,
                &format!("acm{j}.fuse"),
                cs[j],
                concat_in,
                3,
            );
            acms.push(AcmState { alphas, se, fuse });
        }
    }

    let head = conv(&mut params, &mut rng, "head", 1, cs[0], 1);

    Ok(FscnModel {
        config: config.clone(),
        params,
        stem,
        stages,
        upscales,
        acms,
        head,
    })
}

impl<S: Scalar> FscnModel<S> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    /// Exact count of learnable scalars, concatenation weights included.
    pub fn param_count(&self) -> usize {
        self.params.total_scalars()
    }

    pub fn acm_states(&self) -> &[AcmState] {
        &self.acms
    }

    /// Insert every parameter as a graph leaf, in declaration order.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Vec<NodeId> {
        self.params
            .entries
            .iter()
            .map(|e| g.leaf(e.tensor.clone().with_requires_grad(trainable)))
            .collect()
    }

    /// Copy gradients computed by `Graph::backward` back onto the parameter
    /// tensors, in the same order `bind` produced.
    pub fn store_grads(&mut self, g: &Graph<S>, bound: &[NodeId]) {
        for (entry, &id) in self.params.entries.iter_mut().zip(bound) {
            entry.tensor.set_grad(g.grad(id).map(|s| s.to_vec()));
        }
    }

    fn conv(
        &self,
        g: &mut Graph<S>,
        ids: &[NodeId],
        r: ConvRef,
        x: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        g.conv2d(x, ids[r.w], ids[r.b], stride, pad)
    }

    /// Run the encoder, returning features E0..E5. E_k lives at resolution
    /// (H / 2^k, W / 2^k) with `channel_schedule[k]` channels.
    pub fn encoder_forward(
        &self,
        g: &mut Graph<S>,
        ids: &[NodeId],
        x: NodeId,
    ) -> Result<[NodeId; 6]> {
        let xs = g.shape(x);
        let expect = (3, self.config.input_h, self.config.input_w);
        if (xs.c, xs.h, xs.w) != expect {
            return Err(FscnError::shape(
                "encoder input",
                format!("(n, {}, {}, {})", expect.0, expect.1, expect.2),
                xs.to_string(),
            ));
        }
        let e0 = self.conv(g, ids, self.stem, x, 1, 1)?;
        let mut features = [e0; 6];
        let mut prev = e0;
        for (k, stage) in self.stages.iter().enumerate() {
            let down = self.conv(g, ids, stage.down, prev, 2, 1)?;
            let down = g.relu(down);
            let same = self.conv(g, ids, stage.same, down, 1, 1)?;
            let same = g.relu(same);
            features[k + 1] = same;
            prev = same;
        }
        Ok(features)
    }

    /// Squeeze-excitation: gate each channel by
    /// sigmoid(expand(relu(reduce(global_avg_pool(x))))).
    pub fn se_forward(
        &self,
        g: &mut Graph<S>,
        ids: &[NodeId],
        se: &(ConvRef, ConvRef),
        x: NodeId,
    ) -> Result<NodeId> {
        let pooled = g.global_avg_pool(x);
        let reduced = self.conv(g, ids, se.0, pooled, 1, 0)?;
        let reduced = g.relu(reduced);
        let expanded = self.conv(g, ids, se.1, reduced, 1, 0)?;
        let gates = g.sigmoid(expanded);
        g.scale_channels(x, gates)
    }

    /// Adaptive concatenation at one decoder level: weight each resampled
    /// encoder block, concatenate with the decoder feature, gate, fuse, relu.
    /// Skips must already live at the decoder feature's resolution.
    pub fn acm_forward(
        &self,
        g: &mut Graph<S>,
        ids: &[NodeId],
        acm: &AcmState,
        skips: &[NodeId],
        d: NodeId,
    ) -> Result<NodeId> {
        let ds = g.shape(d);
        for &s in skips {
            let ss = g.shape(s);
            if (ss.h, ss.w) != (ds.h, ds.w) {
                return Err(FscnError::shape(
                    "acm skip resolution",
                    format!("{}x{}", ds.h, ds.w),
                    format!("{}x{}", ss.h, ss.w),
                ));
            }
        }
        let mut parts = Vec::with_capacity(skips.len() + 1);
        if self.config.use_concat_weights {
            debug_assert_eq!(acm.alphas.len(), skips.len());
            for (&s, &ai) in skips.iter().zip(&acm.alphas) {
                parts.push(g.scalar_mul(s, ids[ai])?);
            }
        } else {
            parts.extend_from_slice(skips);
        }
        parts.push(d);
        let dprime = g.concat_channels(&parts)?;
        let gated = match &acm.se {
            Some(se) => self.se_forward(g, ids, se, dprime)?,
            None => dprime,
        };
        let fused = self.conv(g, ids, acm.fuse, gated, 1, 1)?;
        let out = g.relu(fused);
        debug_assert_eq!(g.shape(out), ds);
        Ok(out)
    }

    /// Double the resolution, then a 3x3 conv into the next level's channel
    /// count, then relu.
    pub fn upscale_forward(
        &self,
        g: &mut Graph<S>,
        ids: &[NodeId],
        up: ConvRef,
        x: NodeId,
    ) -> Result<NodeId> {
        let xs = g.shape(x);
        let up_x = g.resample(x, xs.h * 2, xs.w * 2)?;
        let y = self.conv(g, ids, up, up_x, 1, 1)?;
        Ok(g.relu(y))
    }

    /// Upscale-conv refs by target level, D4 first. Exposed for block-level
    /// gradient checks.
    pub fn upscale_refs(&self) -> &[ConvRef] {
        &self.upscales
    }

    /// Full forward pass: (n, 3, H, W) -> depth (n, 1, H, W) in
    /// (0, max_depth_m).
    pub fn forward(&self, g: &mut Graph<S>, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
        let features = self.encoder_forward(g, ids, x)?;
        let mut d = self.upscale_forward(g, ids, self.upscales[0], features[5])?;
        for j in (1..=4).rev() {
            let f = match self.config.skip_mode {
                SkipMode::NoSkip => d,
                mode => {
                    let ds = g.shape(d);
                    let sources: Vec<usize> = match mode {
                        SkipMode::FullSkip => vec![1, 2, 3, 4],
                        SkipMode::SameSkip => vec![j],
                        SkipMode::NoSkip => unreachable!(),
                    };
                    let skips = sources
                        .iter()
                        .map(|&i| g.resample(features[i], ds.h, ds.w))
                        .collect::<Result<Vec<_>>>()?;
                    self.acm_forward(g, ids, &self.acms[j - 1], &skips, d)?
                }
            };
            d = self.upscale_forward(g, ids, self.upscales[5 - j], f)?;
        }
        let logits = self.conv(g, ids, self.head, d, 1, 0)?;
        let gate = g.sigmoid(logits);
        Ok(g.affine(gate, self.config.max_depth_m, 0.0))
    }

    /// Forward without gradient tracking; returns the depth map.
    pub fn predict(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let ids = self.bind(&mut g, false);
        let input = g.constant(x.clone());
        let out = self.forward(&mut g, &ids, input)?;
        Ok(g.tensor(out))
    }
}
