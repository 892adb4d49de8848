//! Dual-task network for joint segmentation and T2 regression.
//!
//! Two parallel encoders process the stacked echo images: a bottleneck CNN
//! that halves resolution per stage for segmentation, and a patch-token
//! transformer for quantification. After every stage the branches exchange
//! information through a coupling block that aligns channels with 1x1
//! convolutions and resolutions with bilinear resizing, adding each branch's
//! projection into the other. A four-depth decoder emits class logits at
//! every scale (all upsampled to input resolution for supervision), and a
//! refinement decoder turns the final tokens into a sigmoid-bounded map in
//! (0, 1), denormalized to milliseconds downstream.
//!
//! Either branch can be ablated; the parameters of an ablated branch are
//! never loaded into the graph, so they receive no gradient and training
//! leaves them untouched.

use crate::autodiff::graph::{Graph, NodeId};
use crate::autodiff::nn::{self, AttnWeights};
use crate::autodiff::optim::{kaiming_init, normal_init, ParamStore};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::relaxometry::T2Map;
use crate::seed_mix;
use crate::types::SegMap;
use serde::{Deserialize, Serialize};

const LN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;
/// Denormalization factor: a sigmoid output of 1 maps to 200 ms.
pub const T2_SCALE_MS: f64 = 200.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input side length; divisible by `patch` and by 8.
    pub side: usize,
    /// Input channels, one per echo time.
    pub in_channels: usize,
    pub patch: usize,
    /// Token embedding width; divisible by `heads`.
    pub dim: usize,
    pub heads: usize,
    /// Transformer blocks per coupling stage.
    pub depth: [usize; 3],
    /// CNN channels after each stage.
    pub cnn_channels: [usize; 3],
    pub num_classes: usize,
    /// Dropout probability in the T2 decoder.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            side: 64,
            in_channels: 3,
            patch: 8,
            dim: 48,
            heads: 4,
            depth: [2, 2, 2],
            cnn_channels: [16, 32, 64],
            num_classes: 4,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || self.patch == 0 || self.side % self.patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "side {} must be a positive multiple of patch {}",
                self.side, self.patch
            )));
        }
        if self.side % 8 != 0 {
            return Err(Error::InvalidArgument(format!(
                "side {} must be divisible by 8 (three halving stages)",
                self.side
            )));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "embed dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            return Err(Error::InvalidArgument(
                "need at least 1 input channel and 2 classes".into(),
            ));
        }
        if self.depth.iter().any(|&d| d == 0) || self.cnn_channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidArgument(
                "stage depths and channel counts must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Tokens per side of the patch grid.
    pub fn grid(&self) -> usize {
        self.side / self.patch
    }

    /// Total token count.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Branch selection. An ablated branch contributes nothing to the forward
/// pass and the coupling block passes the surviving branch through unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    SegOnly,
    QuantOnly,
}

impl Ablation {
    pub fn has_seg(self) -> bool {
        self != Ablation::QuantOnly
    }

    pub fn has_quant(self) -> bool {
        self != Ablation::SegOnly
    }
}

/// Forward-pass outputs. `seg_logits` is ordered coarse to fine and every
/// entry is already upsampled to input resolution; `t2_pred` holds values in
/// (0, 1).
#[derive(Debug, Clone)]
pub struct DualOutput {
    pub seg_logits: Option<Vec<NodeId>>,
    pub t2_pred: Option<NodeId>,
}

/// Decoder channel widths per level (coarse to fine).
fn decoder_widths(cfg: &ModelConfig) -> [usize; 4] {
    let [c0, c1, c2] = cfg.cnn_channels;
    [c2, c1, c0, c0]
}

/// T2-decoder conv widths.
fn t2_widths(cfg: &ModelConfig) -> [usize; 3] {
    let [c0, c1, _] = cfg.cnn_channels;
    [c1, c0, c0]
}

fn bottleneck_mid(out_ch: usize) -> usize {
    (out_ch / 4).max(4)
}

struct Init {
    store: ParamStore,
    seed: u64,
    counter: u64,
}

impl Init {
    fn next_seed(&mut self) -> u64 {
        self.counter += 1;
        seed_mix(self.seed, self.counter)
    }

    fn conv(&mut self, name: &str, co: usize, ci: usize, k: usize) -> Result<()> {
        let s = self.next_seed();
        self.store.insert(name, kaiming_init([co, ci, k, k], ci * k * k, s))
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<()> {
        let s = self.next_seed();
        self.store.insert(name, kaiming_init([din, dout], din, s))
    }

    fn zeros(&mut self, name: &str, shape: impl Into<Vec<usize>>) -> Result<()> {
        self.store.insert(name, Tensor::zeros(shape))
    }

    fn ones(&mut self, name: &str, n: usize) -> Result<()> {
        self.store.insert(name, Tensor::full([n], 1.0))
    }

    fn norm_pair(&mut self, prefix: &str, n: usize) -> Result<()> {
        self.ones(&format!("{prefix}.g"), n)?;
        self.zeros(&format!("{prefix}.b"), [n])
    }

    fn bottleneck(&mut self, prefix: &str, ci: usize, co: usize, projected: bool) -> Result<()> {
        let mid = bottleneck_mid(co);
        self.conv(&format!("{prefix}.conv1.w"), mid, ci, 1)?;
        self.norm_pair(&format!("{prefix}.bn1"), mid)?;
        self.conv(&format!("{prefix}.conv2.w"), mid, mid, 3)?;
        self.norm_pair(&format!("{prefix}.bn2"), mid)?;
        self.conv(&format!("{prefix}.conv3.w"), co, mid, 1)?;
        self.norm_pair(&format!("{prefix}.bn3"), co)?;
        if projected {
            self.conv(&format!("{prefix}.down.w"), co, ci, 1)?;
            self.norm_pair(&format!("{prefix}.downbn"), co)?;
        }
        Ok(())
    }
}

/// Creates every parameter of the model, both branches included, with
/// deterministic per-tensor seeds. Insertion order is fixed, so two stores
/// built from the same arguments are identical.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut ini = Init { store: ParamStore::new(), seed, counter: 0 };
    let d = cfg.dim;
    let patch_len = cfg.in_channels * cfg.patch * cfg.patch;

    ini.linear("patch.proj.w", patch_len, d)?;
    {
        let s = ini.next_seed();
        ini.store.insert("patch.pos", normal_init([cfg.tokens(), d], 0.02, s))?;
    }
    for (i, &depth) in cfg.depth.iter().enumerate() {
        for j in 0..depth {
            let p = format!("tr{i}.{j}");
            ini.norm_pair(&format!("{p}.ln1"), d)?;
            for w in ["wq", "wk", "wv", "wo"] {
                ini.linear(&format!("{p}.attn.{w}"), d, d)?;
            }
            for b in ["bq", "bk", "bv", "bo"] {
                ini.zeros(&format!("{p}.attn.{b}"), [d])?;
            }
            ini.norm_pair(&format!("{p}.ln2"), d)?;
            ini.linear(&format!("{p}.mlp.w1"), d, 4 * d)?;
            ini.zeros(&format!("{p}.mlp.b1"), [4 * d])?;
            ini.linear(&format!("{p}.mlp.w2"), 4 * d, d)?;
            ini.zeros(&format!("{p}.mlp.b2"), [d])?;
        }
    }

    let [c0, _, c2] = cfg.cnn_channels;
    ini.conv("stem.conv.w", c0, cfg.in_channels, 3)?;
    ini.norm_pair("stem.bn", c0)?;
    let mut ci = c0;
    for (i, &co) in cfg.cnn_channels.iter().enumerate() {
        ini.bottleneck(&format!("cnn{i}.b0"), ci, co, true)?;
        ini.bottleneck(&format!("cnn{i}.b1"), co, co, false)?;
        ci = co;
    }

    for (i, &c) in cfg.cnn_channels.iter().enumerate() {
        ini.conv(&format!("fcm{i}.c2t.w"), d, c, 1)?;
        ini.conv(&format!("fcm{i}.t2c.w"), c, d, 1)?;
    }

    let dw = decoder_widths(cfg);
    let skips = [c2, cfg.cnn_channels[1], cfg.cnn_channels[0], c0];
    for lvl in 0..4 {
        let p = format!("dec{lvl}");
        if lvl == 0 {
            // Coarsest level reads the last stage directly; no upsampled path.
        } else {
            ini.conv(&format!("{p}.red.w"), dw[lvl], dw[lvl - 1], 1)?;
            ini.conv(&format!("{p}.skip.w"), dw[lvl], skips[lvl], 1)?;
        }
        let cin = if lvl == 0 { skips[0] } else { dw[lvl] };
        ini.conv(&format!("{p}.conv.w"), dw[lvl], cin, 3)?;
        ini.norm_pair(&format!("{p}.bn"), dw[lvl])?;
        ini.conv(&format!("{p}.head.w"), cfg.num_classes, dw[lvl], 3)?;
        ini.zeros(&format!("{p}.head.b"), [cfg.num_classes])?;
    }

    let tw = t2_widths(cfg);
    ini.conv("t2.fuse.w", d, c2, 1)?;
    let skip_ch = [cfg.cnn_channels[1], cfg.cnn_channels[0], c0];
    let mut tin = d;
    for (k, &w) in tw.iter().enumerate() {
        ini.conv(&format!("t2.skip{k}.w"), tin, skip_ch[k], 1)?;
        ini.conv(&format!("t2.c{k}.w"), w, tin, 3)?;
        ini.norm_pair(&format!("t2.bn{k}"), w)?;
        tin = w;
    }
    ini.conv("t2.out.w", 1, tw[2], 1)?;
    ini.zeros("t2.out.b", [1])?;
    Ok(ini.store)
}

/// Patch tokenization: non-overlapping patches linearly projected without a
/// bias, plus a learned positional embedding. x: [N,C,H,W] -> [N,T,D].
pub fn patch_embed(
    g: &mut Graph,
    x: NodeId,
    proj_w: NodeId,
    pos: NodeId,
    patch: usize,
) -> NodeId {
    let n = g.shape(x)[0];
    let flat = g.extract_patches(x, patch);
    let projected = g.matmul(flat, proj_w);
    let d = g.shape(projected)[1];
    let t = g.shape(projected)[0] / n;
    let tokens = g.reshape(projected, [n, t, d]);
    g.bias_batch(tokens, pos)
}

struct Builder<'a> {
    g: &'a mut Graph,
    store: &'a ParamStore,
    cfg: &'a ModelConfig,
}

impl Builder<'_> {
    fn p(&mut self, name: &str) -> NodeId {
        self.g.param(name, self.store)
    }

    fn conv_bn_relu(&mut self, x: NodeId, conv: &str, bn: &str, stride: usize, pad: usize) -> NodeId {
        let w = self.p(conv);
        let c = self.g.conv2d(x, w, stride, pad);
        let bng = self.p(&format!("{bn}.g"));
        let bnb = self.p(&format!("{bn}.b"));
        let n = self.g.batch_norm(c, bng, bnb, BN_EPS);
        self.g.relu(n)
    }

    fn bottleneck(&mut self, x: NodeId, prefix: &str, stride: usize, projected: bool) -> NodeId {
        let h = self.conv_bn_relu(x, &format!("{prefix}.conv1.w"), &format!("{prefix}.bn1"), 1, 0);
        let h = self.conv_bn_relu(h, &format!("{prefix}.conv2.w"), &format!("{prefix}.bn2"), stride, 1);
        let w3 = self.p(&format!("{prefix}.conv3.w"));
        let h = self.g.conv2d(h, w3, 1, 0);
        let bg = self.p(&format!("{prefix}.bn3.g"));
        let bb = self.p(&format!("{prefix}.bn3.b"));
        let h = self.g.batch_norm(h, bg, bb, BN_EPS);
        let short = if projected {
            let dw = self.p(&format!("{prefix}.down.w"));
            let s = self.g.conv2d(x, dw, stride, 0);
            let sg = self.p(&format!("{prefix}.downbn.g"));
            let sb = self.p(&format!("{prefix}.downbn.b"));
            self.g.batch_norm(s, sg, sb, BN_EPS)
        } else {
            x
        };
        let sum = self.g.add(h, short);
        self.g.relu(sum)
    }

    fn cnn_stage(&mut self, x: NodeId, i: usize) -> NodeId {
        let h = self.bottleneck(x, &format!("cnn{i}.b0"), 2, true);
        self.bottleneck(h, &format!("cnn{i}.b1"), 1, false)
    }

    fn transformer_block(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let g1 = self.p(&format!("{prefix}.ln1.g"));
        let b1 = self.p(&format!("{prefix}.ln1.b"));
        let n1 = self.g.layer_norm(x, g1, b1, LN_EPS);
        let aw = AttnWeights {
            wq: self.p(&format!("{prefix}.attn.wq")),
            bq: self.p(&format!("{prefix}.attn.bq")),
            wk: self.p(&format!("{prefix}.attn.wk")),
            bk: self.p(&format!("{prefix}.attn.bk")),
            wv: self.p(&format!("{prefix}.attn.wv")),
            bv: self.p(&format!("{prefix}.attn.bv")),
            wo: self.p(&format!("{prefix}.attn.wo")),
            bo: self.p(&format!("{prefix}.attn.bo")),
        };
        let att = nn::multi_head_attention(self.g, n1, self.cfg.heads, &aw).out;
        let x = self.g.add(x, att);
        let g2 = self.p(&format!("{prefix}.ln2.g"));
        let b2 = self.p(&format!("{prefix}.ln2.b"));
        let n2 = self.g.layer_norm(x, g2, b2, LN_EPS);
        let w1 = self.p(&format!("{prefix}.mlp.w1"));
        let bb1 = self.p(&format!("{prefix}.mlp.b1"));
        let h = nn::linear(self.g, n2, w1, Some(bb1));
        let h = self.g.relu(h);
        let w2 = self.p(&format!("{prefix}.mlp.w2"));
        let bb2 = self.p(&format!("{prefix}.mlp.b2"));
        let h = nn::linear(self.g, h, w2, Some(bb2));
        self.g.add(x, h)
    }

    fn transformer_stage(&mut self, mut x: NodeId, i: usize) -> NodeId {
        for j in 0..self.cfg.depth[i] {
            x = self.transformer_block(x, &format!("tr{i}.{j}"));
        }
        x
    }

    /// Bidirectional coupling. Both projections read the stage inputs, so
    /// either zero branch leaves the other exactly unchanged.
    fn fcm(&mut self, c: NodeId, tokens: NodeId, i: usize) -> (NodeId, NodeId) {
        let grid = self.cfg.grid();
        let (hc, wc) = (self.g.shape(c)[2], self.g.shape(c)[3]);
        let tok_grid = self.g.tokens_to_grid(tokens, grid, grid);
        let t2c = self.p(&format!("fcm{i}.t2c.w"));
        let to_c = self.g.conv2d(tok_grid, t2c, 1, 0);
        let to_c = self.g.bilinear_resize(to_c, hc, wc);
        let c_out = self.g.add(c, to_c);

        let pooled = self.g.bilinear_resize(c, grid, grid);
        let c2t = self.p(&format!("fcm{i}.c2t.w"));
        let to_t = self.g.conv2d(pooled, c2t, 1, 0);
        let to_t = self.g.grid_to_tokens(to_t);
        let t_out = self.g.add(tokens, to_t);
        (c_out, t_out)
    }

    /// One decoder level: optional upsampled-path reduction plus skip
    /// alignment, a conv block, and a logits head upsampled to full
    /// resolution.
    fn decoder_level(
        &mut self,
        prev: Option<NodeId>,
        skip: NodeId,
        lvl: usize,
    ) -> (NodeId, NodeId) {
        let p = format!("dec{lvl}");
        let x = match prev {
            None => skip,
            Some(prev) => {
                let (sh, sw) = (self.g.shape(skip)[2], self.g.shape(skip)[3]);
                let up = self.g.bilinear_resize(prev, sh, sw);
                let rw = self.p(&format!("{p}.red.w"));
                let red = self.g.conv2d(up, rw, 1, 0);
                let sw_ = self.p(&format!("{p}.skip.w"));
                let sk = self.g.conv2d(skip, sw_, 1, 0);
                self.g.add(red, sk)
            }
        };
        let feat = self.conv_bn_relu(x, &format!("{p}.conv.w"), &format!("{p}.bn"), 1, 1);
        let hw = self.p(&format!("{p}.head.w"));
        let logits = self.g.conv2d(feat, hw, 1, 1);
        let hb = self.p(&format!("{p}.head.b"));
        let logits = self.g.bias_channel(logits, hb);
        let side = self.cfg.side;
        let logits = if self.g.shape(logits)[2] == side {
            logits
        } else {
            self.g.bilinear_resize(logits, side, side)
        };
        (feat, logits)
    }

    /// Refinement decoder for the quantification branch. Starts at the token
    /// grid, fuses the coarsest coupled CNN feature, then upsamples toward
    /// full resolution. At each level the next finer coupled stage (finally
    /// the stem) is merged before the conv block, so every skip, including
    /// the full-resolution one, is spatially refined rather than passed
    /// straight to the head. `feats` is (stage features, stem); absent when
    /// the CNN branch is ablated.
    fn t2_decoder(
        &mut self,
        tokens: NodeId,
        feats: Option<(&[NodeId], NodeId)>,
        training: bool,
        seed: u64,
    ) -> NodeId {
        let grid = self.cfg.grid();
        let mut x = self.g.tokens_to_grid(tokens, grid, grid);
        if let Some((stages, _)) = feats {
            let rs = self.g.bilinear_resize(stages[2], grid, grid);
            let fw = self.p("t2.fuse.w");
            let fused = self.g.conv2d(rs, fw, 1, 0);
            x = self.g.add(x, fused);
        }
        x = self.g.dropout(x, self.cfg.dropout, seed, training);
        let side = self.cfg.side;
        for k in 0..3 {
            let (h, w) = (self.g.shape(x)[2], self.g.shape(x)[3]);
            if h < side {
                x = self.g.bilinear_resize(x, (2 * h).min(side), (2 * w).min(side));
            }
            if let Some((stages, stem)) = feats {
                let skip = match k {
                    0 => stages[1],
                    1 => stages[0],
                    _ => stem,
                };
                let (h, w) = (self.g.shape(x)[2], self.g.shape(x)[3]);
                let rs = self.g.bilinear_resize(skip, h, w);
                let sw = self.p(&format!("t2.skip{k}.w"));
                let aligned = self.g.conv2d(rs, sw, 1, 0);
                x = self.g.add(x, aligned);
            }
            x = self.conv_bn_relu(x, &format!("t2.c{k}.w"), &format!("t2.bn{k}"), 1, 1);
        }
        if self.g.shape(x)[2] != side {
            x = self.g.bilinear_resize(x, side, side);
        }
        let ow = self.p("t2.out.w");
        x = self.g.conv2d(x, ow, 1, 0);
        let ob = self.p("t2.out.b");
        x = self.g.bias_channel(x, ob);
        self.g.sigmoid(x)
    }
}

/// Runs the network on `x` (shape [N, in_channels, side, side], values in
/// [0, 1]). `dropout_seed` only matters when `training` is true.
pub fn forward(
    g: &mut Graph,
    store: &ParamStore,
    x: NodeId,
    cfg: &ModelConfig,
    ablation: Ablation,
    training: bool,
    dropout_seed: u64,
) -> DualOutput {
    cfg.validate().expect("forward on an invalid config");
    let sx = g.shape(x).to_vec();
    assert_eq!(
        sx[1..],
        [cfg.in_channels, cfg.side, cfg.side],
        "input {:?} does not match config {}x{}x{}",
        sx,
        cfg.in_channels,
        cfg.side,
        cfg.side
    );
    let mut b = Builder { g, store, cfg };

    let mut tokens = if ablation.has_quant() {
        let pw = b.p("patch.proj.w");
        let pos = b.p("patch.pos");
        Some(patch_embed(b.g, x, pw, pos, cfg.patch))
    } else {
        None
    };
    let mut cnn = if ablation.has_seg() {
        Some(b.conv_bn_relu(x, "stem.conv.w", "stem.bn", 1, 1))
    } else {
        None
    };
    let stem = cnn;

    let mut stage_feats = Vec::new();
    for i in 0..3 {
        if let Some(c) = cnn {
            cnn = Some(b.cnn_stage(c, i));
        }
        if let Some(t) = tokens {
            tokens = Some(b.transformer_stage(t, i));
        }
        if let (Some(c), Some(t)) = (cnn, tokens) {
            let (c2, t2) = b.fcm(c, t, i);
            cnn = Some(c2);
            tokens = Some(t2);
        }
        if let Some(c) = cnn {
            stage_feats.push(c);
        }
    }

    let seg_logits = if ablation.has_seg() {
        let stem = stem.expect("stem exists whenever the seg branch runs");
        let mut logits = Vec::with_capacity(4);
        let (mut feat, l) = b.decoder_level(None, stage_feats[2], 0);
        logits.push(l);
        for (lvl, &skip) in [stage_feats[1], stage_feats[0], stem].iter().enumerate() {
            let (f, l) = b.decoder_level(Some(feat), skip, lvl + 1);
            feat = f;
            logits.push(l);
        }
        Some(logits)
    } else {
        None
    };

    let t2_pred = tokens.map(|t| {
        let feats = match (stage_feats.as_slice(), stem) {
            (stages @ [_, _, _], Some(st)) => Some((stages, st)),
            _ => None,
        };
        b.t2_decoder(t, feats, training, dropout_seed)
    });
    DualOutput { seg_logits, t2_pred }
}

/// Deterministic eval-mode inference on a single input. Returns the argmax
/// segmentation of the finest scale (softmax is monotone, so the argmax is
/// taken on logits directly) and the T2 map denormalized to milliseconds.
pub fn infer(
    store: &ParamStore,
    cfg: &ModelConfig,
    x: &Tensor,
    ablation: Ablation,
) -> (Option<SegMap>, Option<T2Map>) {
    assert_eq!(
        x.shape(),
        &[1, cfg.in_channels, cfg.side, cfg.side],
        "infer expects a single input, got {:?}",
        x.shape()
    );
    let mut g = Graph::new();
    let xin = g.input(x.clone());
    let out = forward(&mut g, store, xin, cfg, ablation, false, 0);
    let side = cfg.side;
    let seg = out.seg_logits.map(|logits| {
        let finest = *logits.last().expect("decoder emits four scales");
        let z = g.value(finest).data();
        let hw = side * side;
        let mut labels = vec![0u8; hw];
        for (px, lab) in labels.iter_mut().enumerate() {
            let mut best = 0usize;
            for ci in 1..cfg.num_classes {
                if z[ci * hw + px] > z[best * hw + px] {
                    best = ci;
                }
            }
            *lab = best as u8;
        }
        SegMap::new(side, side, labels).expect("argmax labels are in range")
    });
    let t2 = out.t2_pred.map(|node| {
        let vals: Vec<f64> = g.value(node).data().iter().map(|v| v * T2_SCALE_MS).collect();
        let n = vals.len();
        T2Map::new(side, side, vals, vec![true; n]).expect("t2 head is full resolution")
    });
    (seg, t2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::optim::AdamConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            side: 32,
            in_channels: 2,
            patch: 8,
            dim: 16,
            heads: 2,
            depth: [1, 1, 1],
            cnn_channels: [8, 16, 32],
            num_classes: 4,
            dropout: 0.1,
        }
    }

    fn rand_input(cfg: &ModelConfig, n: usize, seed: u64) -> Tensor {
        let shape = [n, cfg.in_channels, cfg.side, cfg.side];
        let len: usize = shape.iter().product();
        let data = normal_init([len], 1.0, seed)
            .data()
            .iter()
            .map(|v| (v * 0.2 + 0.5).clamp(0.0, 1.0))
            .collect();
        Tensor::new(shape, data)
    }

    #[test]
    fn config_validation_catches_divisibility_violations() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = ModelConfig::default();
        c.side = 60;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.patch = 7;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.dim = 30;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_param_count_is_stable() {
        let cfg = ModelConfig::default();
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        assert_eq!(a.num_scalars(), b.num_scalars());
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
        let c = init_params(&cfg, 8).unwrap();
        assert_eq!(a.num_scalars(), c.num_scalars());
        assert!(a.iter().zip(c.iter()).any(|((_, ta), (_, tc))| ta != tc));
    }

    #[test]
    fn full_forward_emits_four_scales_and_a_bounded_map() {
        let cfg = tiny();
        let store = init_params(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let x = g.input(rand_input(&cfg, 2, 5));
        let out = forward(&mut g, &store, x, &cfg, Ablation::Full, true, 9);
        let logits = out.seg_logits.unwrap();
        assert_eq!(logits.len(), 4);
        for &l in &logits {
            assert_eq!(g.shape(l), &[2, 4, 32, 32]);
        }
        let t2 = out.t2_pred.unwrap();
        assert_eq!(g.shape(t2), &[2, 1, 32, 32]);
        assert!(g.value(t2).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn ablations_drop_the_matching_output() {
        let cfg = tiny();
        let store = init_params(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let x = g.input(rand_input(&cfg, 1, 5));
        let seg = forward(&mut g, &store, x, &cfg, Ablation::SegOnly, false, 0);
        assert!(seg.seg_logits.is_some());
        assert!(seg.t2_pred.is_none());
        let x2 = g.input(rand_input(&cfg, 1, 5));
        let quant = forward(&mut g, &store, x2, &cfg, Ablation::QuantOnly, false, 0);
        assert!(quant.seg_logits.is_none());
        assert!(quant.t2_pred.is_some());
    }

    #[test]
    fn full_forward_touches_every_parameter() {
        let cfg = tiny();
        let store = init_params(&cfg, 2).unwrap();
        let mut g = Graph::new();
        let x = g.input(rand_input(&cfg, 1, 3));
        let out = forward(&mut g, &store, x, &cfg, Ablation::Full, true, 4);
        let mut loss = g.mean_all(out.t2_pred.unwrap());
        for l in out.seg_logits.unwrap() {
            let m = g.mean_all(l);
            loss = g.add(loss, m);
        }
        let grads = g.backward(loss);
        let pg = g.param_grads(&grads);
        let got: Vec<&str> = pg.keys().map(|s| s.as_str()).collect();
        let want: Vec<&str> = store.names().collect();
        assert_eq!(got, want, "every parameter appears in the full forward pass");
    }

    #[test]
    fn ablated_branch_parameters_receive_no_updates() {
        let cfg = tiny();
        let mut store = init_params(&cfg, 2).unwrap();
        let before: Vec<(String, Tensor)> =
            store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let mut g = Graph::new();
        let x = g.input(rand_input(&cfg, 1, 3));
        let out = forward(&mut g, &store, x, &cfg, Ablation::SegOnly, true, 4);
        let mut loss = None;
        for l in out.seg_logits.unwrap() {
            let m = g.mean_all(l);
            loss = Some(match loss {
                None => m,
                Some(acc) => g.add(acc, m),
            });
        }
        let grads = g.backward(loss.unwrap());
        let pg = g.param_grads(&grads);
        for name in pg.keys() {
            assert!(
                !name.starts_with("patch.")
                    && !name.starts_with("tr")
                    && !name.starts_with("fcm")
                    && !name.starts_with("t2."),
                "quant-branch parameter {name} saw gradient under seg-only ablation"
            );
        }
        store.adam_step(&pg, &AdamConfig::default()).unwrap();
        for (name, old) in &before {
            let is_quant = name.starts_with("patch.")
                || name.starts_with("tr")
                || name.starts_with("fcm")
                || name.starts_with("t2.");
            let now = store.value(name).unwrap();
            if is_quant {
                assert_eq!(now, old, "{name} must stay frozen");
            }
        }
    }

    #[test]
    fn forward_is_deterministic_per_seed() {
        let cfg = tiny();
        let store = init_params(&cfg, 6).unwrap();
        let run = |seed: u64| {
            let mut g = Graph::new();
            let x = g.input(rand_input(&cfg, 1, 8));
            let out = forward(&mut g, &store, x, &cfg, Ablation::Full, true, seed);
            g.value(out.t2_pred.unwrap()).clone()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn infer_emits_valid_labels_and_windowed_t2() {
        let cfg = tiny();
        let store = init_params(&cfg, 11).unwrap();
        let x = rand_input(&cfg, 1, 13);
        let (seg, t2) = infer(&store, &cfg, &x, Ablation::Full);
        let seg = seg.unwrap();
        let t2 = t2.unwrap();
        assert!(seg.data.iter().all(|&l| (l as usize) < cfg.num_classes));
        assert!(t2.values_ms.iter().all(|&v| (0.0..=T2_SCALE_MS).contains(&v)));
        assert!(t2.valid.iter().all(|&v| v));
        let (seg2, t22) = infer(&store, &cfg, &x, Ablation::Full);
        assert_eq!(seg, seg2.unwrap());
        assert_eq!(t2, t22.unwrap());
    }

    #[test]
    fn zero_input_and_zero_positions_give_zero_tokens() {
        let cfg = tiny();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, cfg.in_channels, cfg.side, cfg.side]));
        let w = g.input(kaiming_init(
            [cfg.in_channels * cfg.patch * cfg.patch, cfg.dim],
            cfg.in_channels * cfg.patch * cfg.patch,
            3,
        ));
        let pos = g.input(Tensor::zeros([cfg.tokens(), cfg.dim]));
        let tok = patch_embed(&mut g, x, w, pos, cfg.patch);
        assert_eq!(g.shape(tok), &[1, cfg.tokens(), cfg.dim]);
        assert!(g.value(tok).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn token_count_matches_patch_arithmetic() {
        let mut cfg = tiny();
        cfg.side = 32;
        cfg.patch = 8;
        assert_eq!(cfg.tokens(), 16);
        assert_eq!(ModelConfig::default().tokens(), 64);
    }
}
