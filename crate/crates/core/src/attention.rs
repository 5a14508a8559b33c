//! Self-attention heads, multi-head layers and the configurable network.
//!
//! A block is, with every toggle on:
//!
//! ```text
//! H   = X + MHA(LN₁(X))
//! out = H + FF(LN₂(H))
//! ```
//!
//! `use_skip` drops both additions, `use_ff` drops the feed-forward half and
//! `use_layernorm` drops both norms. With all three off the block is the pure
//! self-attention layer `concat_h(P_h X W_{V,h}) W_O`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::normalize::{normalize, stochasticity_deviation, Normalized, NormalizerKind, SinkhornParams};
use crate::par::{self, Exec};
use crate::rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    #[serde(rename = "W_Q")]
    pub w_q: Mat,
    #[serde(rename = "W_K")]
    pub w_k: Mat,
    #[serde(rename = "W_V")]
    pub w_v: Mat,
    pub b_q: Vec<f64>,
    pub b_k: Vec<f64>,
    pub b_v: Vec<f64>,
}

impl HeadWeights {
    pub fn d(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_qk(&self) -> usize {
        self.w_q.cols()
    }

    pub fn d_v(&self) -> usize {
        self.w_v.cols()
    }

    /// `W_Q W_Kᵀ`, the `d×d` bilinear form behind the scores.
    pub fn w_qk(&self) -> Result<Mat> {
        self.w_q.matmul(&self.w_k.transpose())
    }

    pub fn has_zero_bias(&self) -> bool {
        self.b_q.iter().chain(&self.b_k).chain(&self.b_v).all(|&b| b == 0.0)
    }

    pub fn zero_bias(mut self) -> Self {
        self.b_q.iter_mut().chain(&mut self.b_k).chain(&mut self.b_v).for_each(|b| *b = 0.0);
        self
    }

    /// Gaussian weights with standard deviation `std`, zero biases.
    pub fn random(rng: &mut impl Rng, d: usize, d_qk: usize, d_v: usize, std: f64) -> Self {
        Self {
            w_q: rng::gaussian(rng, d, d_qk, std),
            w_k: rng::gaussian(rng, d, d_qk, std),
            w_v: rng::gaussian(rng, d, d_v, std),
            b_q: vec![0.0; d_qk],
            b_k: vec![0.0; d_qk],
            b_v: vec![0.0; d_v],
        }
    }

    fn check(&self, d: usize, d_qk: usize, d_v: usize) -> Result<()> {
        let ok = self.w_q.shape() == (d, d_qk)
            && self.w_k.shape() == (d, d_qk)
            && self.w_v.shape() == (d, d_v)
            && self.b_q.len() == d_qk
            && self.b_k.len() == d_qk
            && self.b_v.len() == d_v;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "head weights do not match d={d}, d_qk={d_qk}, d_v={d_v}"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    #[serde(rename = "W1")]
    pub w1: Mat,
    pub b1: Vec<f64>,
    #[serde(rename = "W2")]
    pub w2: Mat,
    pub b2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            offset: vec![0.0; d],
        }
    }
}

/// The two norms of a block: before attention and before the feed-forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockNorms {
    pub attn: LayerNormParams,
    pub ff: LayerNormParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    /// `(H·d_v)×d`; rows `h·d_v..(h+1)·d_v` belong to head `h`.
    #[serde(rename = "W_O")]
    pub w_o: Mat,
    pub ff: FeedForward,
    pub ln: BlockNorms,
}

impl LayerWeights {
    /// Rows of `W_O` that multiply head `h`'s output.
    pub fn w_o_block(&self, h: usize) -> Mat {
        let dv = self.heads[h].d_v();
        self.w_o.row_block(h * dv, (h + 1) * dv)
    }

    /// `W_{V,h} W_{O,h}`, the `d×d` value-output map of head `h`.
    pub fn head_value_output(&self, h: usize) -> Result<Mat> {
        self.heads[h].w_v.matmul(&self.w_o_block(h))
    }

    pub fn random(rng: &mut impl Rng, cfg: &NetConfig, std: f64) -> Self {
        let heads = (0..cfg.heads)
            .map(|_| HeadWeights::random(rng, cfg.d, cfg.d_qk, cfg.d_v, std))
            .collect();
        Self {
            heads,
            w_o: rng::gaussian(rng, cfg.heads * cfg.d_v, cfg.d, std),
            ff: FeedForward {
                w1: rng::gaussian(rng, cfg.d, cfg.d_ff, std),
                b1: vec![0.0; cfg.d_ff],
                w2: rng::gaussian(rng, cfg.d_ff, cfg.d, (cfg.d_ff as f64).sqrt().recip()),
                b2: vec![0.0; cfg.d],
            },
            ln: BlockNorms {
                attn: LayerNormParams::identity(cfg.d),
                ff: LayerNormParams::identity(cfg.d),
            },
        }
    }

    fn check(&self, cfg: &NetConfig) -> Result<()> {
        if self.heads.len() != cfg.heads {
            return Err(Error::invalid(format!(
                "layer has {} heads, config says {}",
                self.heads.len(),
                cfg.heads
            )));
        }
        for h in &self.heads {
            h.check(cfg.d, cfg.d_qk, cfg.d_v)?;
        }
        let ok = self.w_o.shape() == (cfg.heads * cfg.d_v, cfg.d)
            && self.ff.w1.shape() == (cfg.d, cfg.d_ff)
            && self.ff.b1.len() == cfg.d_ff
            && self.ff.w2.shape() == (cfg.d_ff, cfg.d)
            && self.ff.b2.len() == cfg.d
            && [&self.ln.attn, &self.ln.ff]
                .iter()
                .all(|l| l.gain.len() == cfg.d && l.offset.len() == cfg.d);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("layer weights do not match the config"))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub use_skip: bool,
    pub use_ff: bool,
    pub use_layernorm: bool,
}

impl Toggles {
    pub const PURE: Toggles = Toggles {
        use_skip: false,
        use_ff: false,
        use_layernorm: false,
    };
    pub const FULL: Toggles = Toggles {
        use_skip: true,
        use_ff: true,
        use_layernorm: true,
    };
}

/// The four inference-time configurations of a trained network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    San,
    SanSkip,
    SanFf,
    Transformer,
}

impl Setting {
    pub const ALL: [Setting; 4] = [Setting::San, Setting::SanSkip, Setting::SanFf, Setting::Transformer];

    pub fn label(self) -> &'static str {
        match self {
            Setting::San => "san",
            Setting::SanSkip => "san_skip",
            Setting::SanFf => "san_ff",
            Setting::Transformer => "transformer",
        }
    }

    /// Skip and feed-forward switches for this setting. Layer norm is a
    /// property of the trained weights and is passed through unchanged.
    pub fn toggles(self, use_layernorm: bool) -> Toggles {
        let (use_skip, use_ff) = match self {
            Setting::San => (false, false),
            Setting::SanSkip => (true, false),
            Setting::SanFf => (false, true),
            Setting::Transformer => (true, true),
        };
        Toggles {
            use_skip,
            use_ff,
            use_layernorm,
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|x| x.label() == s)
            .ok_or_else(|| Error::invalid(format!("unknown setting '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub layers: usize,
    pub heads: usize,
    pub n: usize,
    pub d: usize,
    pub d_qk: usize,
    pub d_v: usize,
    pub d_ff: usize,
    pub normalizer: NormalizerKind,
    #[serde(default)]
    pub sinkhorn: SinkhornParams,
    pub toggles: Toggles,
}

impl NetConfig {
    /// `d_qk = d_v = d / heads`.
    pub fn new(
        layers: usize,
        heads: usize,
        n: usize,
        d: usize,
        d_ff: usize,
        normalizer: NormalizerKind,
        toggles: Toggles,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!("d={d} is not divisible by heads={heads}")));
        }
        let cfg = Self {
            layers,
            heads,
            n,
            d,
            d_qk: d / heads,
            d_v: d / heads,
            d_ff,
            normalizer,
            sinkhorn: SinkhornParams::default(),
            toggles,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.layers, self.heads, self.n, self.d, self.d_qk, self.d_v, self.d_ff];
        if dims.contains(&0) {
            return Err(Error::invalid("all network dimensions must be >= 1"));
        }
        if self.d_qk * self.heads != self.d || self.d_v * self.heads != self.d {
            return Err(Error::invalid(format!(
                "d_qk = d_v = d / H required (d={}, H={}, d_qk={}, d_v={})",
                self.d, self.heads, self.d_qk, self.d_v
            )));
        }
        self.sinkhorn.validate()
    }

    pub fn with_toggles(&self, toggles: Toggles) -> Self {
        Self {
            toggles,
            ..self.clone()
        }
    }

    pub fn with_setting(&self, setting: Setting) -> Self {
        self.with_toggles(setting.toggles(self.toggles.use_layernorm))
    }

    /// Random layers, every weight `N(0, std²)` except the second FF matrix
    /// (scaled by `1/√d_ff`); biases zero, norms identity.
    pub fn random_layers(&self, rng: &mut impl Rng, std: f64) -> Vec<LayerWeights> {
        (0..self.layers).map(|_| LayerWeights::random(rng, self, std)).collect()
    }

    /// Standard deviation `1/√d` used for untrained analyses.
    pub fn default_init_std(&self) -> f64 {
        (self.d as f64).sqrt().recip()
    }
}

/// Attention matrices and layer outputs recorded during one forward pass.
#[derive(Clone, Debug)]
pub struct AttnStore {
    pub normalizer: NormalizerKind,
    pub sinkhorn: SinkhornParams,
    /// `p[layer][head][batch]`, each `n×n`.
    pub p: Vec<Vec<Vec<Mat>>>,
    /// Same indexing as `p`.
    pub converged: Vec<Vec<Vec<bool>>>,
    /// `outputs[layer][batch]`, each `n×d`.
    pub outputs: Vec<Vec<Mat>>,
}

impl AttnStore {
    pub fn layers(&self) -> usize {
        self.p.len()
    }

    pub fn heads(&self) -> usize {
        self.p.first().map_or(0, Vec::len)
    }

    pub fn batch(&self) -> usize {
        self.p.first().and_then(|h| h.first()).map_or(0, Vec::len)
    }

    pub fn final_outputs(&self) -> &[Mat] {
        self.outputs.last().map_or(&[], Vec::as_slice)
    }

    pub fn all_converged(&self) -> bool {
        self.converged.iter().flatten().flatten().all(|&c| c)
    }

    /// Checks every recorded `P` against its normalizer: rows sum to one for
    /// softmax; for Sinkhorn the columns are exact and the rows are within
    /// the configured tolerance.
    pub fn check_stochasticity(&self) -> std::result::Result<(), String> {
        for (l, heads) in self.p.iter().enumerate() {
            for (h, batch) in heads.iter().enumerate() {
                for (b, p) in batch.iter().enumerate() {
                    let (row_dev, col_dev) = stochasticity_deviation(p);
                    let ok = match self.normalizer {
                        NormalizerKind::SoftmaxRows => row_dev <= 1e-12,
                        NormalizerKind::Sinkhorn => {
                            col_dev <= 1e-9
                                && (row_dev <= self.sinkhorn.tol || !self.converged[l][h][b])
                        }
                    };
                    if !ok {
                        return Err(format!(
                            "P[{l}][{h}][{b}]: row_dev={row_dev:e} col_dev={col_dev:e}"
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `(X W_Q + 1b_Qᵀ)(X W_K + 1b_Kᵀ)ᵀ / √d_qk`.
pub fn attention_logits(x: &Mat, h: &HeadWeights, d_qk: usize) -> Result<Mat> {
    if x.cols() != h.d() || h.d_qk() != d_qk {
        return Err(Error::ShapeMismatch {
            op: "attention_logits",
            left: x.shape(),
            right: h.w_q.shape(),
        });
    }
    let q = x.matmul(&h.w_q)?.add_row_broadcast(&h.b_q)?;
    let k = x.matmul(&h.w_k)?.add_row_broadcast(&h.b_k)?;
    Ok(q.matmul(&k.transpose())?.scale((d_qk as f64).sqrt().recip()))
}

/// One head's output with the attention matrix that produced it.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub out: Mat,
    pub attn: Normalized,
}

/// `SA_h(X) = P X W_V + 1 b_Vᵀ`.
pub fn sa_head(
    x: &Mat,
    h: &HeadWeights,
    kind: NormalizerKind,
    params: &SinkhornParams,
) -> Result<HeadOutput> {
    let logits = attention_logits(x, h, h.d_qk())?;
    let attn = normalize(&logits, kind, params)?;
    let out = attn.p.matmul(x)?.matmul(&h.w_v)?.add_row_broadcast(&h.b_v)?;
    Ok(HeadOutput { out, attn })
}

/// Concatenates head outputs along features and projects with `W_O`.
pub fn mha_layer(x: &Mat, lw: &LayerWeights, cfg: &NetConfig) -> Result<(Mat, Vec<Normalized>)> {
    if x.cols() != cfg.d {
        return Err(Error::ShapeMismatch {
            op: "mha_layer",
            left: x.shape(),
            right: (cfg.n, cfg.d),
        });
    }
    let mut outs = Vec::with_capacity(lw.heads.len());
    let mut attn = Vec::with_capacity(lw.heads.len());
    for h in &lw.heads {
        let o = sa_head(x, h, cfg.normalizer, &cfg.sinkhorn)?;
        outs.push(o.out);
        attn.push(o.attn);
    }
    Ok((Mat::hcat(&outs)?.matmul(&lw.w_o)?, attn))
}

/// Per-row layer normalization with learned gain and offset.
pub fn layer_norm_rows(x: &Mat, ln: &LayerNormParams) -> Mat {
    let d = x.cols() as f64;
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = (var + LAYER_NORM_EPS).sqrt().recip();
        for (k, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * ln.gain[k] + ln.offset[k];
        }
    }
    out
}

/// `relu(X W1 + 1b1ᵀ) W2 + 1b2ᵀ`.
pub fn feed_forward(x: &Mat, ff: &FeedForward) -> Result<Mat> {
    let hidden = x.matmul(&ff.w1)?.add_row_broadcast(&ff.b1)?.map(|v| v.max(0.0));
    hidden.matmul(&ff.w2)?.add_row_broadcast(&ff.b2)
}

/// One block under `cfg.toggles`.
pub fn block_forward(x: &Mat, lw: &LayerWeights, cfg: &NetConfig) -> Result<(Mat, Vec<Normalized>)> {
    let t = cfg.toggles;
    let attn_in = if t.use_layernorm {
        layer_norm_rows(x, &lw.ln.attn)
    } else {
        x.clone()
    };
    let (a, attn) = mha_layer(&attn_in, lw, cfg)?;
    let h = if t.use_skip { x.add(&a)? } else { a };
    if !t.use_ff {
        return Ok((h, attn));
    }
    let ff_in = if t.use_layernorm {
        layer_norm_rows(&h, &lw.ln.ff)
    } else {
        h.clone()
    };
    let f = feed_forward(&ff_in, &lw.ff)?;
    let out = if t.use_skip { h.add(&f)? } else { f };
    Ok((out, attn))
}

/// Per-element trace: attention per layer per head, output per layer.
struct Trace {
    attn: Vec<Vec<Normalized>>,
    outputs: Vec<Mat>,
}

fn forward_one(x: &Mat, net: &[LayerWeights], cfg: &NetConfig) -> Result<Trace> {
    if x.shape() != (cfg.n, cfg.d) {
        return Err(Error::ShapeMismatch {
            op: "san_forward",
            left: x.shape(),
            right: (cfg.n, cfg.d),
        });
    }
    let mut cur = x.clone();
    let mut attn = Vec::with_capacity(net.len());
    let mut outputs = Vec::with_capacity(net.len());
    for lw in net {
        let (next, a) = block_forward(&cur, lw, cfg)?;
        attn.push(a);
        outputs.push(next.clone());
        cur = next;
    }
    Ok(Trace { attn, outputs })
}

/// Runs the `L` blocks on every batch element and records all attention
/// matrices and layer outputs.
pub fn san_forward(batch: &[Mat], net: &[LayerWeights], cfg: &NetConfig) -> Result<AttnStore> {
    san_forward_with(Exec::default(), batch, net, cfg)
}

pub fn san_forward_with(
    exec: Exec,
    batch: &[Mat],
    net: &[LayerWeights],
    cfg: &NetConfig,
) -> Result<AttnStore> {
    cfg.validate()?;
    if net.len() != cfg.layers {
        return Err(Error::invalid(format!(
            "{} layers of weights for a {}-layer config",
            net.len(),
            cfg.layers
        )));
    }
    for lw in net {
        lw.check(cfg)?;
    }
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let traces = par::try_map_indexed(exec, batch.len(), |b| forward_one(&batch[b], net, cfg))?;

    let (layers, heads, bsz) = (cfg.layers, cfg.heads, batch.len());
    let mut p = vec![vec![Vec::with_capacity(bsz); heads]; layers];
    let mut converged = vec![vec![Vec::with_capacity(bsz); heads]; layers];
    let mut outputs = vec![Vec::with_capacity(bsz); layers];
    for trace in traces {
        for (l, (layer_attn, out)) in trace.attn.into_iter().zip(trace.outputs).enumerate() {
            for (h, a) in layer_attn.into_iter().enumerate() {
                p[l][h].push(a.p);
                converged[l][h].push(a.converged);
            }
            outputs[l].push(out);
        }
    }
    let n_unconverged = converged.iter().flatten().flatten().filter(|c| !**c).count();
    if n_unconverged > 0 {
        log::warn!("san_forward: {n_unconverged} attention matrices did not reach the Sinkhorn tolerance");
    }
    Ok(AttnStore {
        normalizer: cfg.normalizer,
        sinkhorn: cfg.sinkhorn,
        p,
        converged,
        outputs,
    })
}

/// Token/position embeddings of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub token: Mat,
    pub position: Mat,
}

/// Linear classification head applied after max pooling over tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    #[serde(rename = "W")]
    pub w: Mat,
    pub b: Vec<f64>,
}

/// Weight checkpoint. Untrained networks carry only `config` and `layers`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub layers: Vec<LayerWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Embedding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<Classifier>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<crate::train::ToyTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.layers {
            return Err(Error::invalid("checkpoint layer count does not match its config"));
        }
        for lw in &self.layers {
            lw.check(&self.config)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
