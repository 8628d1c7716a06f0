//! Network building blocks: fwSE gating, LFE 2D stages, the GFE TDNN, and
//! CAS pooling. Each block is a pure function over graph variables plus a
//! forward context that binds stored parameters into the graph.

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{BnStats, Graph, Var};
use std::collections::HashMap;

pub const BN_EPS: f64 = 1e-5;
pub const VAR_EPS: f64 = 1e-9;

/// Per-forward bookkeeping: binds named parameters to graph leaves (once
/// each), collects the bound leaves for gradient readout, and captures
/// batch-norm statistics in training mode for the running averages.
pub struct ForwardCtx<'a> {
    pub g: &'a mut Graph,
    store: &'a ParamStore,
    pub train: bool,
    bound: HashMap<String, Var>,
    pub leaves: Vec<(String, Var)>,
    pub bn_stats: Vec<(String, BnStats)>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore, train: bool) -> Self {
        ForwardCtx {
            g,
            store,
            train,
            bound: HashMap::new(),
            leaves: Vec::new(),
            bn_stats: Vec::new(),
        }
    }

    /// Bind a stored parameter as a graph leaf, reusing the leaf when the
    /// same parameter appears twice so gradients accumulate in one place.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let entry = self.store.get(name)?;
        let rg = entry.trainable && self.train;
        let v = self.g.leaf_from(&entry.tensor.data, &entry.tensor.shape, rg)?;
        self.bound.insert(name.to_string(), v);
        if entry.trainable {
            self.leaves.push((name.to_string(), v));
        }
        Ok(v)
    }

    /// Bind a vector parameter reshaped to a column for broadcasting.
    fn param_col(&mut self, name: &str) -> Result<Var> {
        let v = self.param(name)?;
        let n = self.g.data(v).len();
        self.g.reshape(v, &[n, 1])
    }

    /// Batch norm dispatch: batch statistics (recorded for the running
    /// averages) in training mode, stored running statistics in eval mode.
    pub fn bn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        if self.train {
            let (out, stats) = self.g.batch_norm_train(x, gamma, beta, BN_EPS)?;
            self.bn_stats.push((prefix.to_string(), stats));
            Ok(out)
        } else {
            let rm = self.store.get(&format!("{prefix}.running_mean"))?.tensor.data.clone();
            let rv = self.store.get(&format!("{prefix}.running_var"))?.tensor.data.clone();
            self.g.batch_norm_eval(x, gamma, beta, &rm, &rv, BN_EPS)
        }
    }

    fn bn_relu(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let n = self.bn(prefix, x)?;
        self.g.relu(n)
    }
}

/// Frequency-wise squeeze-excitation: squeeze to one descriptor per
/// frequency bin (mean over channels and time, plus a learnable positional
/// encoding), run a two-layer bottleneck, and rescale every frequency row
/// of the input by its sigmoid gate.
pub fn fwse_forward(ctx: &mut ForwardCtx, x: Var, prefix: &str) -> Result<Var> {
    let shape = ctx.g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("fwse expects [C,F,T], got {shape:?}")));
    }
    let f = shape[1];
    let pos = ctx.param(&format!("{prefix}.pos"))?;
    if ctx.g.data(pos).len() != f {
        return Err(Error::Shape(format!(
            "fwse positional encoding has {} entries for {f} bins",
            ctx.g.data(pos).len()
        )));
    }
    let over_c = ctx.g.mean_axis(x, 0)?;
    let squeezed = ctx.g.mean_axis(over_c, 1)?;
    let with_pos = ctx.g.add(squeezed, pos)?;
    let s_col = ctx.g.reshape(with_pos, &[f, 1])?;

    let w1 = ctx.param(&format!("{prefix}.w1"))?;
    let b1 = ctx.param_col(&format!("{prefix}.b1"))?;
    let h1 = ctx.g.matmul(w1, s_col)?;
    let h1 = ctx.g.add(h1, b1)?;
    let h1 = ctx.g.relu(h1)?;
    let w2 = ctx.param(&format!("{prefix}.w2"))?;
    let b2 = ctx.param_col(&format!("{prefix}.b2"))?;
    let e = ctx.g.matmul(w2, h1)?;
    let e = ctx.g.add(e, b2)?;
    let gates = ctx.g.sigmoid(e)?;
    let gates = ctx.g.reshape(gates, &[1, f, 1])?;
    ctx.g.mul(x, gates)
}

/// One LFE block: three 3x3 convolutions (the middle one optionally
/// strided in frequency), each with batch norm and ReLU, then fwSE, plus a
/// residual connection projected by a 1x1 convolution when the shape
/// changes.
pub fn lfe_block_forward(
    ctx: &mut ForwardCtx,
    x: Var,
    prefix: &str,
    in_channels: usize,
    out_channels: usize,
    freq_stride: usize,
) -> Result<Var> {
    let k1 = ctx.param(&format!("{prefix}.conv1.kernel"))?;
    let c1 = ctx.g.conv2d(x, k1, 1, 1, 1, 1)?;
    let c1 = ctx.bn_relu(&format!("{prefix}.bn1"), c1)?;

    let k2 = ctx.param(&format!("{prefix}.conv2.kernel"))?;
    let c2 = ctx.g.conv2d(c1, k2, freq_stride, 1, 1, 1)?;
    let c2 = ctx.bn_relu(&format!("{prefix}.bn2"), c2)?;

    let k3 = ctx.param(&format!("{prefix}.conv3.kernel"))?;
    let c3 = ctx.g.conv2d(c2, k3, 1, 1, 1, 1)?;
    let c3 = ctx.bn_relu(&format!("{prefix}.bn3"), c3)?;

    let gated = fwse_forward(ctx, c3, &format!("{prefix}.fwse"))?;

    let shortcut = if in_channels != out_channels || freq_stride != 1 {
        let kp = ctx.param(&format!("{prefix}.proj.kernel"))?;
        ctx.g.conv2d(x, kp, freq_stride, 1, 0, 0)?
    } else {
        x
    };
    ctx.g.add(gated, shortcut)
}

/// The GFE TDNN: a pointwise projection, a Res2Net 3-tap stage, and a
/// pointwise output layer, with batch norm and ReLU after each.
pub fn gfe_forward(
    ctx: &mut ForwardCtx,
    x: Var,
    prefix: &str,
    channels: usize,
    scale: usize,
    kernel: usize,
) -> Result<Var> {
    if channels % scale != 0 {
        return Err(Error::Usage(format!(
            "{channels} channels not divisible by res2net scale {scale}"
        )));
    }
    let kin = ctx.param(&format!("{prefix}.in.kernel"))?;
    let a = ctx.g.conv1d(x, kin, 1, 1, 0)?;
    let a = ctx.bn_relu(&format!("{prefix}.in.bn"), a)?;

    let width = channels / scale;
    let pad = (kernel - 1) / 2;
    let mut groups = Vec::with_capacity(scale);
    let mut prev: Option<Var> = None;
    for i in 0..scale {
        let xi = ctx.g.slice_axis(a, 0, i * width, width)?;
        let xi = match prev {
            Some(p) => ctx.g.add(xi, p)?,
            None => xi,
        };
        let ki = ctx.param(&format!("{prefix}.res2net.{i}.kernel"))?;
        let yi = ctx.g.conv1d(xi, ki, 1, 1, pad)?;
        groups.push(yi);
        prev = Some(yi);
    }
    let merged = ctx.g.concat(&groups, 0)?;
    let merged = ctx.bn_relu(&format!("{prefix}.res2net.bn"), merged)?;

    let kout = ctx.param(&format!("{prefix}.out.kernel"))?;
    let b = ctx.g.conv1d(merged, kout, 1, 1, 0)?;
    ctx.bn_relu(&format!("{prefix}.out.bn"), b)
}

/// Per-channel soft attention weights over time, from a bottleneck that
/// sees the features alongside their broadcast temporal mean and standard
/// deviation. Rows sum to 1.
pub fn cas_attention_weights(ctx: &mut ForwardCtx, h: Var, prefix: &str) -> Result<Var> {
    let shape = ctx.g.shape(h).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("cas pooling expects [D,T], got {shape:?}")));
    }
    let (d, t) = (shape[0], shape[1]);
    if t < 2 {
        return Err(Error::Geometry(format!(
            "cas pooling needs at least 2 frames, got {t}"
        )));
    }
    let mean = ctx.g.mean_axis(h, 1)?;
    let mean_col = ctx.g.reshape(mean, &[d, 1])?;
    let centered = ctx.g.sub(h, mean_col)?;
    let sq = ctx.g.mul(centered, centered)?;
    let var = ctx.g.mean_axis(sq, 1)?;
    let var = ctx.g.add_scalar(var, VAR_EPS)?;
    let std = ctx.g.sqrt(var)?;
    let std_col = ctx.g.reshape(std, &[d, 1])?;
    let mean_b = ctx.g.broadcast_to(mean_col, &[d, t])?;
    let std_b = ctx.g.broadcast_to(std_col, &[d, t])?;
    let attin = ctx.g.concat(&[h, mean_b, std_b], 0)?;

    let w1 = ctx.param(&format!("{prefix}.w1"))?;
    let b1 = ctx.param_col(&format!("{prefix}.b1"))?;
    let z = ctx.g.matmul(w1, attin)?;
    let z = ctx.g.add(z, b1)?;
    let z = ctx.g.tanh(z)?;
    let w2 = ctx.param(&format!("{prefix}.w2"))?;
    let b2 = ctx.param_col(&format!("{prefix}.b2"))?;
    let logits = ctx.g.matmul(w2, z)?;
    let logits = ctx.g.add(logits, b2)?;
    ctx.g.softmax(logits, 1)
}

/// Channel-dependent attentive statistics pooling: the output stacks the
/// attention-weighted mean and standard deviation per channel.
pub fn cas_pooling(ctx: &mut ForwardCtx, h: Var, prefix: &str) -> Result<Var> {
    let alpha = cas_attention_weights(ctx, h, prefix)?;
    let ah = ctx.g.mul(alpha, h)?;
    let mu = ctx.g.sum_axis(ah, 1)?;
    let h2 = ctx.g.mul(h, h)?;
    let ah2 = ctx.g.mul(alpha, h2)?;
    let m2 = ctx.g.sum_axis(ah2, 1)?;
    let mu2 = ctx.g.mul(mu, mu)?;
    let var_att = ctx.g.sub(m2, mu2)?;
    let var_att = ctx.g.add_scalar(var_att, VAR_EPS)?;
    let sigma = ctx.g.sqrt(var_att)?;
    ctx.g.concat(&[mu, sigma], 0)
}
