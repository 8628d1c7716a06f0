//! Independent oracles shared by the integration suites.
//!
//! Everything here is deliberately written from first principles, with
//! different loop structures than the library code, so agreement between the
//! two is evidence rather than tautology.

#![allow(dead_code)]

/// Literal 1D cross-correlation over an explicitly padded copy of the input.
pub fn naive_conv1d(
    x: &[f64],
    c_in: usize,
    t_in: usize,
    kern: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Vec<f64> {
    let t_pad = t_in + 2 * padding;
    let mut padded = vec![0.0; c_in * t_pad];
    for ci in 0..c_in {
        for t in 0..t_in {
            padded[ci * t_pad + padding + t] = x[ci * t_in + t];
        }
    }
    let span = dilation * (k - 1) + 1;
    let t_out = (t_pad - span) / stride + 1;
    let mut out = vec![0.0; c_out * t_out];
    for co in 0..c_out {
        for j in 0..t_out {
            let mut acc = 0.0;
            for ci in 0..c_in {
                for kk in 0..k {
                    let kv = kern[(co * c_in + ci) * k + kk];
                    acc += kv * padded[ci * t_pad + j * stride + kk * dilation];
                }
            }
            out[co * t_out + j] = acc;
        }
    }
    out
}

/// Literal 2D cross-correlation over an explicitly padded copy of the input.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    c_in: usize,
    f_in: usize,
    t_in: usize,
    kern: &[f64],
    c_out: usize,
    kf: usize,
    kt: usize,
    stride_f: usize,
    stride_t: usize,
    pad_f: usize,
    pad_t: usize,
) -> Vec<f64> {
    let fp = f_in + 2 * pad_f;
    let tp = t_in + 2 * pad_t;
    let mut padded = vec![0.0; c_in * fp * tp];
    for ci in 0..c_in {
        for f in 0..f_in {
            for t in 0..t_in {
                padded[(ci * fp + pad_f + f) * tp + pad_t + t] = x[(ci * f_in + f) * t_in + t];
            }
        }
    }
    let f_out = (fp - kf) / stride_f + 1;
    let t_out = (tp - kt) / stride_t + 1;
    let mut out = vec![0.0; c_out * f_out * t_out];
    for co in 0..c_out {
        for fo in 0..f_out {
            for to in 0..t_out {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for a in 0..kf {
                        for b in 0..kt {
                            let kv = kern[((co * c_in + ci) * kf + a) * kt + b];
                            acc += kv
                                * padded[(ci * fp + fo * stride_f + a) * tp + to * stride_t + b];
                        }
                    }
                }
                out[(co * f_out + fo) * t_out + to] = acc;
            }
        }
    }
    out
}

/// Central finite differences of a scalar function of several flat inputs.
pub fn central_diff(
    eval: &mut dyn FnMut(&[Vec<f64>]) -> f64,
    inputs: &[Vec<f64>],
    h: f64,
) -> Vec<Vec<f64>> {
    let mut work: Vec<Vec<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let orig = work[i][j];
            work[i][j] = orig + h;
            let up = eval(&work);
            work[i][j] = orig - h;
            let down = eval(&work);
            work[i][j] = orig;
            g[j] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Worst relative error between analytic and numeric gradients, with the
/// denominator floored so near-zero entries do not explode the ratio.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs()).max(1e-6);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

/// Trinomial coefficients: the L-fold self-convolution of the box kernel
/// [1,1,1], centered. Length 2L+1; exact in f64 for L <= 34.
pub fn trinomial_row(levels: usize) -> Vec<f64> {
    let mut row = vec![1.0];
    for _ in 0..levels {
        let mut next = vec![0.0; row.len() + 2];
        for (i, &v) in row.iter().enumerate() {
            next[i] += v;
            next[i + 1] += v;
            next[i + 2] += v;
        }
        row = next;
    }
    row
}

/// Expected input-gradient magnitude pattern for `levels` stacked all-ones
/// k=3 linear conv layers, seeded at `center` of a length-`len` axis.
pub fn box_erf_1d(levels: usize, len: usize, center: usize) -> Vec<f64> {
    let row = trinomial_row(levels);
    let mut out = vec![0.0; len];
    for (i, &v) in row.iter().enumerate() {
        let offset = i as isize - levels as isize;
        let pos = center as isize + offset;
        if pos >= 0 && (pos as usize) < len {
            out[pos as usize] += v;
        }
    }
    out
}

/// Separable 2D analogue: outer product of two 1D box-convolution profiles.
pub fn box_erf_2d(levels: usize, f_len: usize, t_len: usize, cf: usize, ct: usize) -> Vec<f64> {
    let fprof = box_erf_1d(levels, f_len, cf);
    let tprof = box_erf_1d(levels, t_len, ct);
    let mut out = vec![0.0; f_len * t_len];
    for f in 0..f_len {
        for t in 0..t_len {
            out[f * t_len + t] = fprof[f] * tprof[t];
        }
    }
    out
}

/// Scale a map so its maximum is 1 (no-op on an all-zero map).
pub fn normalize_max1(v: &mut [f64]) {
    let hi = v.iter().cloned().fold(0.0f64, f64::max);
    if hi > 0.0 {
        v.iter_mut().for_each(|x| *x /= hi);
    }
}

/// (FAR, FRR) with the accept-if-score-at-least-threshold rule.
pub fn far_frr(scores: &[f64], labels: &[bool], thr: f64) -> (f64, f64) {
    let mut fa = 0usize;
    let mut fr = 0usize;
    let mut n_t = 0usize;
    let mut n_n = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        if l {
            n_t += 1;
            if s < thr {
                fr += 1;
            }
        } else {
            n_n += 1;
            if s >= thr {
                fa += 1;
            }
        }
    }
    (fa as f64 / n_n as f64, fr as f64 / n_t as f64)
}

/// All candidate thresholds: below everything, every midpoint between
/// adjacent distinct scores, above everything.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut s = scores.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    s.dedup();
    let mut out = Vec::with_capacity(s.len() + 1);
    out.push(s[0] - 1.0);
    for w in s.windows(2) {
        out.push((w[0] + w[1]) / 2.0);
    }
    out.push(s[s.len() - 1] + 1.0);
    out
}

/// Brute-force EER: (FAR+FRR)/2 at the threshold minimizing |FAR-FRR|,
/// fraction in [0, 1].
pub fn brute_eer(scores: &[f64], labels: &[bool]) -> f64 {
    let mut best_gap = f64::INFINITY;
    let mut best = 0.0;
    for thr in candidate_thresholds(scores) {
        let (far, frr) = far_frr(scores, labels, thr);
        let gap = (far - frr).abs();
        if gap < best_gap {
            best_gap = gap;
            best = (far + frr) / 2.0;
        }
    }
    best
}

/// Brute-force normalized MinDCF over every midpoint threshold.
pub fn brute_min_dcf(
    scores: &[f64],
    labels: &[bool],
    p_target: f64,
    c_fa: f64,
    c_miss: f64,
) -> f64 {
    let norm = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    let mut best = f64::INFINITY;
    for thr in candidate_thresholds(scores) {
        let (far, frr) = far_frr(scores, labels, thr);
        let cost = c_miss * p_target * frr + c_fa * (1.0 - p_target) * far;
        best = best.min(cost / norm);
    }
    best
}

use ecapa2::rng::{rng_from, subseed};
use ecapa2::tensor::{Graph, Var};
use rand::seq::SliceRandom;
use rand::Rng;

/// Sampling recipe for one gradient-check input.
#[derive(Clone)]
pub struct InputSpec {
    pub shape: Vec<usize>,
    pub lo: f64,
    pub hi: f64,
    pub min_abs: f64,
}

impl InputSpec {
    pub fn unit(shape: &[usize]) -> Self {
        InputSpec { shape: shape.to_vec(), lo: -1.0, hi: 1.0, min_abs: 0.0 }
    }

    pub fn range(shape: &[usize], lo: f64, hi: f64) -> Self {
        InputSpec { shape: shape.to_vec(), lo, hi, min_abs: 0.0 }
    }

    /// Uniform on [-1,1] but kept at least `min_abs` away from zero, for ops
    /// with a kink there.
    pub fn away_from_zero(shape: &[usize], min_abs: f64) -> Self {
        InputSpec { shape: shape.to_vec(), lo: -1.0, hi: 1.0, min_abs }
    }
}

pub fn sample_inputs(specs: &[InputSpec], seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from(seed);
    specs
        .iter()
        .map(|s| {
            let n: usize = s.shape.iter().product();
            (0..n)
                .map(|_| {
                    let mut x = s.lo + (s.hi - s.lo) * rng.gen::<f64>();
                    if x.abs() < s.min_abs {
                        x = if x >= 0.0 { s.min_abs } else { -s.min_abs };
                    }
                    x
                })
                .collect()
        })
        .collect()
}

/// Check one graph builder against central finite differences (h = 1e-5).
///
/// The output is scalarized as sum(out * w) with fixed random weights so
/// every output cell contributes. Returns the worst relative error over all
/// input cells.
pub fn graph_grad_check(
    specs: &[InputSpec],
    seed: u64,
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
) -> f64 {
    let inputs = sample_inputs(specs, seed);
    grad_check_at(&inputs, specs, seed, build)
}

/// As [`graph_grad_check`], but with caller-supplied input values.
pub fn grad_check_at(
    inputs: &[Vec<f64>],
    specs: &[InputSpec],
    seed: u64,
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
) -> f64 {
    let out_numel = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(specs)
            .map(|(buf, s)| g.leaf_from(buf, &s.shape, false).unwrap())
            .collect();
        let out = build(&mut g, &vars);
        g.data(out).len()
    };
    let mut wrng = rng_from(subseed(seed, &[0x77]));
    let w: Vec<f64> = (0..out_numel).map(|_| 2.0 * wrng.gen::<f64>() - 1.0).collect();

    let mut analytic: Vec<Vec<f64>> = Vec::new();
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(specs)
            .map(|(buf, s)| g.leaf_from(buf, &s.shape, true).unwrap())
            .collect();
        let out = build(&mut g, &vars);
        let oshape = g.shape(out).to_vec();
        let wleaf = g.leaf_from(&w, &oshape, false).unwrap();
        let prod = g.mul(out, wleaf).unwrap();
        let scalar = g.sum(prod).unwrap();
        g.backward(scalar).unwrap();
        for &v in &vars {
            analytic.push(
                g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.data(v).len()]),
            );
        }
    }

    let mut eval = |bufs: &[Vec<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = bufs
            .iter()
            .zip(specs)
            .map(|(buf, s)| g.leaf_from(buf, &s.shape, false).unwrap())
            .collect();
        let out = build(&mut g, &vars);
        let oshape = g.shape(out).to_vec();
        let wleaf = g.leaf_from(&w, &oshape, false).unwrap();
        let prod = g.mul(out, wleaf).unwrap();
        let scalar = g.sum(prod).unwrap();
        g.value(scalar).unwrap()
    };
    let numeric = central_diff(&mut eval, inputs, 1e-5);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Gradient checks for every differentiable op, at one seed.
/// Returns (op name, worst relative error) pairs.
pub fn op_grad_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let u = InputSpec::unit;

    out.push((
        "add_bcast",
        graph_grad_check(&[u(&[2, 3]), u(&[3])], seed, &|g, v| g.add(v[0], v[1]).unwrap()),
    ));
    out.push((
        "sub_bcast",
        graph_grad_check(&[u(&[2, 3]), u(&[2, 1])], seed, &|g, v| g.sub(v[0], v[1]).unwrap()),
    ));
    out.push((
        "mul_bcast",
        graph_grad_check(&[u(&[2, 1, 4]), u(&[3, 1])], seed, &|g, v| g.mul(v[0], v[1]).unwrap()),
    ));
    out.push((
        "div",
        graph_grad_check(
            &[u(&[2, 3]), InputSpec::range(&[2, 3], 0.5, 1.5)],
            seed,
            &|g, v| g.div(v[0], v[1]).unwrap(),
        ),
    ));
    out.push((
        "div_bcast",
        graph_grad_check(
            &[u(&[3, 4]), InputSpec::range(&[3, 1], 0.5, 1.5)],
            seed,
            &|g, v| g.div(v[0], v[1]).unwrap(),
        ),
    ));
    out.push((
        "add_scalar",
        graph_grad_check(&[u(&[5])], seed, &|g, v| g.add_scalar(v[0], 0.7).unwrap()),
    ));
    out.push((
        "mul_scalar",
        graph_grad_check(&[u(&[5])], seed, &|g, v| g.mul_scalar(v[0], -1.3).unwrap()),
    ));
    out.push((
        "relu",
        graph_grad_check(&[InputSpec::away_from_zero(&[7], 0.05)], seed, &|g, v| {
            g.relu(v[0]).unwrap()
        }),
    ));
    out.push((
        "sigmoid",
        graph_grad_check(&[InputSpec::range(&[6], -2.0, 2.0)], seed, &|g, v| {
            g.sigmoid(v[0]).unwrap()
        }),
    ));
    out.push((
        "tanh",
        graph_grad_check(&[InputSpec::range(&[6], -2.0, 2.0)], seed, &|g, v| {
            g.tanh(v[0]).unwrap()
        }),
    ));
    out.push((
        "exp",
        graph_grad_check(&[InputSpec::range(&[6], -2.0, 2.0)], seed, &|g, v| {
            g.exp(v[0]).unwrap()
        }),
    ));
    out.push((
        "log",
        graph_grad_check(&[InputSpec::range(&[6], 0.2, 3.0)], seed, &|g, v| {
            g.log(v[0]).unwrap()
        }),
    ));
    out.push((
        "sqrt",
        graph_grad_check(&[InputSpec::range(&[6], 0.2, 3.0)], seed, &|g, v| {
            g.sqrt(v[0]).unwrap()
        }),
    ));
    out.push(("neg", graph_grad_check(&[u(&[6])], seed, &|g, v| g.neg(v[0]).unwrap())));
    out.push(("sum", graph_grad_check(&[u(&[2, 3])], seed, &|g, v| g.sum(v[0]).unwrap())));
    out.push(("mean", graph_grad_check(&[u(&[2, 3])], seed, &|g, v| g.mean(v[0]).unwrap())));
    out.push((
        "sum_axis",
        graph_grad_check(&[u(&[2, 3, 4])], seed, &|g, v| g.sum_axis(v[0], 1).unwrap()),
    ));
    out.push((
        "mean_axis",
        graph_grad_check(&[u(&[2, 3, 4])], seed, &|g, v| g.mean_axis(v[0], 2).unwrap()),
    ));
    out.push(("max_axis", max_axis_grad_check(seed)));
    out.push((
        "softmax",
        graph_grad_check(&[InputSpec::range(&[2, 5], -2.0, 2.0)], seed, &|g, v| {
            g.softmax(v[0], 1).unwrap()
        }),
    ));
    out.push((
        "reshape",
        graph_grad_check(&[u(&[2, 6])], seed, &|g, v| g.reshape(v[0], &[3, 4]).unwrap()),
    ));
    out.push((
        "broadcast_to",
        graph_grad_check(&[u(&[3, 1])], seed, &|g, v| {
            g.broadcast_to(v[0], &[3, 4]).unwrap()
        }),
    ));
    out.push((
        "concat",
        graph_grad_check(&[u(&[2, 3]), u(&[1, 3]), u(&[2, 3])], seed, &|g, v| {
            g.concat(&[v[0], v[1], v[2]], 0).unwrap()
        }),
    ));
    out.push((
        "slice_axis",
        graph_grad_check(&[u(&[3, 5])], seed, &|g, v| g.slice_axis(v[0], 1, 1, 3).unwrap()),
    ));
    out.push((
        "matmul",
        graph_grad_check(&[u(&[3, 4]), u(&[4, 2])], seed, &|g, v| {
            g.matmul(v[0], v[1]).unwrap()
        }),
    ));
    out.push((
        "matmul_nt",
        graph_grad_check(&[u(&[3, 4]), u(&[2, 4])], seed, &|g, v| {
            g.matmul_nt(v[0], v[1]).unwrap()
        }),
    ));
    out.push((
        "pick",
        graph_grad_check(&[u(&[3, 4])], seed, &|g, v| g.pick(v[0], &[2, 0, 3]).unwrap()),
    ));
    out.push((
        "scatter_cols",
        graph_grad_check(&[u(&[3])], seed, &|g, v| {
            g.scatter_cols(v[0], &[1, 0, 2], 4).unwrap()
        }),
    ));
    out.push((
        "conv1d",
        graph_grad_check(&[u(&[2, 7]), u(&[3, 2, 3])], seed, &|g, v| {
            g.conv1d(v[0], v[1], 2, 1, 1).unwrap()
        }),
    ));
    out.push((
        "conv1d_dilated",
        graph_grad_check(&[u(&[2, 9]), u(&[2, 2, 3])], seed, &|g, v| {
            g.conv1d(v[0], v[1], 1, 2, 2).unwrap()
        }),
    ));
    out.push((
        "conv2d",
        graph_grad_check(&[u(&[2, 5, 6]), u(&[3, 2, 3, 3])], seed, &|g, v| {
            g.conv2d(v[0], v[1], 2, 1, 1, 1).unwrap()
        }),
    ));
    out.push((
        "batch_norm",
        graph_grad_check(
            &[
                u(&[3, 7]),
                InputSpec::range(&[3], 0.5, 1.5),
                InputSpec::range(&[3], -0.5, 0.5),
            ],
            seed,
            &|g, v| g.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0,
        ),
    ));
    out
}

/// max_axis needs well-separated entries so finite differences never step
/// across a tie; inputs are a shuffled grid with 0.1 spacing.
fn max_axis_grad_check(seed: u64) -> f64 {
    let shape = [3usize, 4usize];
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| 0.1 * i as f64 - 0.55).collect();
    let mut rng = rng_from(subseed(seed, &[0x3a]));
    vals.shuffle(&mut rng);
    let specs = [InputSpec::unit(&shape)];
    grad_check_at(&[vals], &specs, seed, &|g, v| g.max_axis(v[0], 1).unwrap())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            r[p] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - ma;
        let db = rb[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}
