//! The speaker embedding network: a cascade of 2D-convolutional local
//! feature extractor (LFE) stages with frequency-wise squeeze-excitation,
//! a 1D-convolutional global feature extractor (GFE) with a Res2Net stage,
//! channel-dependent attentive statistics pooling, and a linear projection
//! to the speaker embedding.

mod blocks;
mod checkpoint;
mod params;

pub use blocks::{
    cas_attention_weights, cas_pooling, fwse_forward, gfe_forward, lfe_block_forward, ForwardCtx,
    BN_EPS,
};
pub use checkpoint::{checkpoint_to_bytes, load_checkpoint, model_from_bytes, save_checkpoint};
pub use params::{ParamEntry, ParamStore};

use crate::audio::{stft_features, FeatureKind, FeatureMap, Waveform};
use crate::error::{Error, Result};
use crate::rng::{fill_normal, subrng};
use crate::tensor::{BnStats, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

fn default_res2net_kernel() -> usize {
    3
}
fn default_embedding_dim() -> usize {
    192
}
fn default_input_bins() -> usize {
    256
}
fn default_striding() -> bool {
    true
}
fn default_fwse_hidden() -> usize {
    32
}

/// Network topology. `lfe_stages` lists (num_blocks, channels, freq_stride)
/// per stage; the stride is applied by the first block of its stage.
/// `striding_enabled = false` runs every convolution at stride 1 for
/// receptive-field analysis without touching the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ecapa2Config {
    pub lfe_stages: Vec<(usize, usize, usize)>,
    pub gfe_channels: usize,
    pub res2net_scale: usize,
    #[serde(default = "default_res2net_kernel")]
    pub res2net_kernel: usize,
    pub cas_attention_dim: usize,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_input_bins")]
    pub input_bins: usize,
    #[serde(default = "default_striding")]
    pub striding_enabled: bool,
    #[serde(default = "default_fwse_hidden")]
    pub fwse_hidden: usize,
}

impl Default for Ecapa2Config {
    /// Desk-scale topology that trains on one machine in minutes.
    fn default() -> Self {
        Ecapa2Config {
            lfe_stages: vec![(2, 32, 1), (2, 48, 2), (2, 64, 2)],
            gfe_channels: 256,
            res2net_scale: 4,
            res2net_kernel: 3,
            cas_attention_dim: 64,
            embedding_dim: 192,
            input_bins: 256,
            striding_enabled: true,
            fwse_hidden: 32,
        }
    }
}

impl Ecapa2Config {
    pub fn validate(&self) -> Result<()> {
        if self.lfe_stages.is_empty() {
            return Err(Error::Usage("config needs at least one LFE stage".to_string()));
        }
        for &(blocks, channels, stride) in &self.lfe_stages {
            if blocks == 0 || channels == 0 {
                return Err(Error::Usage(format!(
                    "LFE stage with {blocks} blocks and {channels} channels"
                )));
            }
            if !(stride == 1 || stride == 2) {
                return Err(Error::Usage(format!("freq stride {stride} not in {{1, 2}}")));
            }
        }
        if self.gfe_channels == 0 || self.res2net_scale == 0 {
            return Err(Error::Usage("gfe channels and res2net scale must be positive".to_string()));
        }
        if self.gfe_channels % self.res2net_scale != 0 {
            return Err(Error::Usage(format!(
                "gfe channels {} not divisible by res2net scale {}",
                self.gfe_channels, self.res2net_scale
            )));
        }
        if self.res2net_kernel == 0 || self.res2net_kernel % 2 == 0 {
            return Err(Error::Usage(format!(
                "res2net kernel {} must be odd",
                self.res2net_kernel
            )));
        }
        if self.cas_attention_dim == 0
            || self.embedding_dim == 0
            || self.input_bins == 0
            || self.fwse_hidden == 0
        {
            return Err(Error::Usage("zero-sized config dimension".to_string()));
        }
        let caps = [
            (self.lfe_stages.len(), 64, "LFE stages"),
            (self.lfe_stages.iter().map(|s| s.0).max().unwrap_or(0), 64, "blocks per stage"),
            (self.lfe_stages.iter().map(|s| s.1).max().unwrap_or(0), 8192, "LFE channels"),
            (self.gfe_channels, 8192, "gfe channels"),
            (self.input_bins, 8192, "input bins"),
            (self.embedding_dim, 8192, "embedding dim"),
            (self.cas_attention_dim, 4096, "attention dim"),
            (self.fwse_hidden, 4096, "fwse hidden dim"),
            (self.res2net_kernel, 31, "res2net kernel"),
        ];
        for (value, cap, what) in caps {
            if value > cap {
                return Err(Error::Usage(format!("{what} {value} exceeds the cap of {cap}")));
            }
        }
        Ok(())
    }

    /// Feature kind implied by the input height.
    pub fn feature_kind(&self) -> Result<FeatureKind> {
        match self.input_bins {
            256 => Ok(FeatureKind::Fft256),
            80 => Ok(FeatureKind::Mel80),
            other => Err(Error::Usage(format!(
                "no feature frontend produces {other} bins"
            ))),
        }
    }

    /// Frequency extent after each stage, honoring the striding switch.
    pub fn stage_freq_bins(&self) -> Vec<usize> {
        let mut f = self.input_bins;
        let mut out = Vec::new();
        for &(_, _, stride) in &self.lfe_stages {
            if self.striding_enabled && stride > 1 {
                f = (f - 1) / stride + 1;
            }
            out.push(f);
        }
        out
    }

    /// Channel count entering the GFE after frequency flattening.
    pub fn gfe_input_channels(&self) -> usize {
        let last_ch = self.lfe_stages.last().map(|s| s.1).unwrap_or(1);
        last_ch * self.stage_freq_bins().last().copied().unwrap_or(self.input_bins)
    }
}

/// A 192-dimensional (by default) speaker embedding with utterance
/// bookkeeping for duration-aware scoring.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub duration_s: f64,
    pub utterance_id: String,
}

impl Embedding {
    /// Unit-norm copy of the vector.
    pub fn normalized(&self) -> Result<Vec<f64>> {
        let norm = self.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Numeric(format!(
                "embedding for '{}' has vanishing norm",
                self.utterance_id
            )));
        }
        Ok(self.vector.iter().map(|x| x / norm).collect())
    }
}

/// Everything a caller needs from one forward pass.
pub struct ForwardOut {
    /// The embedding vector node, shape [embedding_dim].
    pub embedding: Var,
    /// Pre-pooling frame-level features, shape [gfe_channels, T].
    pub prepool: Var,
    /// Trainable parameters bound into this graph, in bind order.
    pub leaves: Vec<(String, Var)>,
    /// Batch statistics per batch-norm layer (training mode only).
    pub bn_stats: Vec<(String, BnStats)>,
}

/// The network: a validated config plus its parameter store.
#[derive(Clone, Debug)]
pub struct Ecapa2Model {
    pub config: Ecapa2Config,
    pub params: ParamStore,
}

/// How one parameter is filled at initialization.
pub(crate) enum InitKind {
    Zeros,
    Ones,
    Randn { fan_in: usize, gain: f64 },
}

/// One entry of the network's parameter layout.
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub init: InitKind,
}

/// The complete parameter layout implied by a config, in registration
/// order. Initialization builds tensors from it and the checkpoint loader
/// verifies stored tensors against it.
pub(crate) fn architecture(config: &Ecapa2Config) -> Vec<ParamSpec> {
    let mut specs: Vec<ParamSpec> = Vec::new();
    let randn = |name: String, shape: Vec<usize>, fan_in: usize, gain: f64| ParamSpec {
        name,
        shape,
        trainable: true,
        init: InitKind::Randn { fan_in, gain },
    };
    let flat = |name: String, shape: Vec<usize>, trainable: bool, init: InitKind| ParamSpec {
        name,
        shape,
        trainable,
        init,
    };
    let mut bn = |specs: &mut Vec<ParamSpec>, prefix: &str, c: usize| {
        specs.push(flat(format!("{prefix}.gamma"), vec![c], true, InitKind::Ones));
        specs.push(flat(format!("{prefix}.beta"), vec![c], true, InitKind::Zeros));
        specs.push(flat(format!("{prefix}.running_mean"), vec![c], false, InitKind::Zeros));
        specs.push(flat(format!("{prefix}.running_var"), vec![c], false, InitKind::Ones));
    };

    let mut in_c = 1usize;
    let mut f = config.input_bins;
    let h = config.fwse_hidden;
    for (s, &(blocks, ch, stride)) in config.lfe_stages.iter().enumerate() {
        for b in 0..blocks {
            let p = format!("lfe.{s}.{b}");
            let block_in = in_c;
            let block_stride = if b == 0 && config.striding_enabled { stride } else { 1 };
            specs.push(randn(format!("{p}.conv1.kernel"), vec![ch, block_in, 3, 3], block_in * 9, 2.0));
            bn(&mut specs, &format!("{p}.bn1"), ch);
            specs.push(randn(format!("{p}.conv2.kernel"), vec![ch, ch, 3, 3], ch * 9, 2.0));
            bn(&mut specs, &format!("{p}.bn2"), ch);
            specs.push(randn(format!("{p}.conv3.kernel"), vec![ch, ch, 3, 3], ch * 9, 2.0));
            bn(&mut specs, &format!("{p}.bn3"), ch);
            if block_stride > 1 {
                f = (f - 1) / block_stride + 1;
            }
            specs.push(flat(format!("{p}.fwse.pos"), vec![f], true, InitKind::Zeros));
            specs.push(randn(format!("{p}.fwse.w1"), vec![h, f], f, 2.0));
            specs.push(flat(format!("{p}.fwse.b1"), vec![h], true, InitKind::Zeros));
            specs.push(randn(format!("{p}.fwse.w2"), vec![f, h], h, 1.0));
            specs.push(flat(format!("{p}.fwse.b2"), vec![f], true, InitKind::Zeros));
            if block_in != ch || block_stride != 1 {
                specs.push(randn(format!("{p}.proj.kernel"), vec![ch, block_in, 1, 1], block_in, 1.0));
            }
            in_c = ch;
        }
    }

    let gfe_in = in_c * f;
    let d = config.gfe_channels;
    specs.push(randn("gfe.in.kernel".to_string(), vec![d, gfe_in, 1], gfe_in, 2.0));
    bn(&mut specs, "gfe.in.bn", d);
    let width = d / config.res2net_scale;
    let k = config.res2net_kernel;
    for i in 0..config.res2net_scale {
        specs.push(randn(format!("gfe.res2net.{i}.kernel"), vec![width, width, k], width * k, 2.0));
    }
    bn(&mut specs, "gfe.res2net.bn", d);
    specs.push(randn("gfe.out.kernel".to_string(), vec![d, d, 1], d, 2.0));
    bn(&mut specs, "gfe.out.bn", d);

    let a = config.cas_attention_dim;
    specs.push(randn("cas.w1".to_string(), vec![a, 3 * d], 3 * d, 1.0));
    specs.push(flat("cas.b1".to_string(), vec![a], true, InitKind::Zeros));
    specs.push(randn("cas.w2".to_string(), vec![d, a], a, 1.0));
    specs.push(flat("cas.b2".to_string(), vec![d], true, InitKind::Zeros));

    specs.push(randn("head.weight".to_string(), vec![config.embedding_dim, 2 * d], 2 * d, 1.0));
    specs.push(flat("head.bias".to_string(), vec![config.embedding_dim], true, InitKind::Zeros));
    specs
}

impl Ecapa2Model {
    /// Randomly initialized model: He-scaled kernels for ReLU layers,
    /// inverse-square-root fan-in elsewhere, zeroed biases and positional
    /// encodings, identity batch norm.
    pub fn new(config: Ecapa2Config, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = subrng(seed, &[0x6d6f_de1]);
        let mut store = ParamStore::new();
        for spec in architecture(&config) {
            let tensor = match spec.init {
                InitKind::Zeros => Tensor::zeros(&spec.shape),
                InitKind::Ones => Tensor::full(&spec.shape, 1.0),
                InitKind::Randn { fan_in, gain } => {
                    let std = (gain / fan_in as f64).sqrt();
                    let mut t = Tensor::zeros(&spec.shape);
                    fill_normal(&mut t.data, std, &mut rng);
                    t
                }
            };
            store.insert(&spec.name, tensor, spec.trainable)?;
        }
        Ok(Ecapa2Model { config, params: store })
    }

    /// Trainable parameter count.
    pub fn num_params(&self) -> usize {
        self.params.num_trainable()
    }

    /// Full forward pass from an input leaf of shape [1, input_bins, T].
    pub fn forward(&self, g: &mut Graph, input: Var, train: bool) -> Result<ForwardOut> {
        let shape = g.shape(input).to_vec();
        if shape.len() != 3 || shape[0] != 1 || shape[1] != self.config.input_bins {
            return Err(Error::Shape(format!(
                "forward expects [1, {}, T], got {shape:?}",
                self.config.input_bins
            )));
        }
        let mut ctx = ForwardCtx::new(g, &self.params, train);
        let mut x = input;
        let mut in_c = 1usize;
        for (s, &(blocks, ch, stride)) in self.config.lfe_stages.iter().enumerate() {
            for b in 0..blocks {
                let p = format!("lfe.{s}.{b}");
                let block_stride =
                    if b == 0 && self.config.striding_enabled { stride } else { 1 };
                x = lfe_block_forward(&mut ctx, x, &p, in_c, ch, block_stride)?;
                in_c = ch;
            }
        }
        let sh = ctx.g.shape(x).to_vec();
        let flat = ctx.g.reshape(x, &[sh[0] * sh[1], sh[2]])?;
        let prepool = gfe_forward(
            &mut ctx,
            flat,
            "gfe",
            self.config.gfe_channels,
            self.config.res2net_scale,
            self.config.res2net_kernel,
        )?;
        let pooled = cas_pooling(&mut ctx, prepool, "cas")?;

        let w = ctx.param("head.weight")?;
        let b = ctx.param("head.bias")?;
        let row = ctx.g.reshape(pooled, &[1, 2 * self.config.gfe_channels])?;
        let proj = ctx.g.matmul_nt(row, w)?;
        let brow = ctx.g.reshape(b, &[1, self.config.embedding_dim])?;
        let out = ctx.g.add(proj, brow)?;
        let embedding = ctx.g.reshape(out, &[self.config.embedding_dim])?;
        Ok(ForwardOut {
            embedding,
            prepool,
            leaves: ctx.leaves,
            bn_stats: ctx.bn_stats,
        })
    }

    /// Eval-mode embedding of a prepared feature map.
    pub fn embed_features(&self, feat: &FeatureMap, utterance_id: &str) -> Result<Embedding> {
        if feat.f != self.config.input_bins {
            return Err(Error::Shape(format!(
                "feature map has {} bins, model expects {}",
                feat.f, self.config.input_bins
            )));
        }
        let duration_s = 0.025 + (feat.t.saturating_sub(1)) as f64 * 0.010;
        if duration_s < 0.5 {
            return Err(Error::Data(format!(
                "utterance of {duration_s:.3} s is shorter than the 0.5 s minimum"
            )));
        }
        let mut g = Graph::new();
        let input = g.leaf_from(&feat.bins, &[1, feat.f, feat.t], false)?;
        let fwd = self.forward(&mut g, input, false)?;
        let vector = g.data(fwd.embedding).to_vec();
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding for '{utterance_id}'")));
        }
        Ok(Embedding { vector, duration_s, utterance_id: utterance_id.to_string() })
    }

    /// Eval-mode embedding straight from audio.
    pub fn embed_waveform(&self, w: &Waveform, utterance_id: &str) -> Result<Embedding> {
        if w.duration_s() < 0.5 {
            return Err(Error::Data(format!(
                "utterance of {:.3} s is shorter than the 0.5 s minimum",
                w.duration_s()
            )));
        }
        let feat = stft_features(w, self.config.feature_kind()?)?;
        let mut e = self.embed_features(&feat, utterance_id)?;
        e.duration_s = w.duration_s();
        Ok(e)
    }

    /// Blend fresh batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(String, BnStats)], momentum: f64) -> Result<()> {
        for (prefix, s) in stats {
            let rm = self.params.get_mut(&format!("{prefix}.running_mean"))?;
            for (r, &m) in rm.tensor.data.iter_mut().zip(&s.mean) {
                *r = momentum * *r + (1.0 - momentum) * m;
            }
            let rv = self.params.get_mut(&format!("{prefix}.running_var"))?;
            for (r, &v) in rv.tensor.data.iter_mut().zip(&s.var) {
                *r = momentum * *r + (1.0 - momentum) * v;
            }
        }
        Ok(())
    }
}
