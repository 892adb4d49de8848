//! Computation tape with reverse-mode differentiation.
//!
//! Every op appends a node holding the op's output. [`Graph::backward`] walks
//! the tape in reverse insertion order, which is a valid reverse topological
//! order because inputs always precede their consumers.
//!
//! Contract violations (shape mismatches, non-finite op outputs) panic; they
//! indicate bugs, not recoverable conditions. Each op output is scanned for
//! NaN/Inf on insertion so a poisoned value can never propagate silently.

use super::kernels::{self as kern, Conv2dDims};
use super::optim::ParamStore;
use super::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    /// Input or constant; `Param` leaves additionally carry their store name.
    Leaf,
    Param(String),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Matmul(NodeId, NodeId),
    Bmm(NodeId, NodeId),
    BmmNt(NodeId, NodeId),
    Conv2d { x: NodeId, k: NodeId, dims: Conv2dDims },
    BiasLast { x: NodeId, b: NodeId },
    BiasChannel { x: NodeId, b: NodeId },
    BiasBatch { x: NodeId, b: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    BatchNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    SoftmaxLast(NodeId),
    Dropout { x: NodeId, mask: Vec<f64> },
    BilinearResize { x: NodeId, oh: usize, ow: usize },
    MeanAll(NodeId),
    SumAll(NodeId),
    Reshape(NodeId),
    ExtractPatches { x: NodeId, patch: usize },
    SplitHeads { x: NodeId, heads: usize },
    MergeHeads { x: NodeId, heads: usize },
    TokensToGrid(NodeId),
    GridToTokens(NodeId),
    CrossEntropyMean { logits: NodeId, labels: Vec<u8> },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Flat computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradient slots produced by [`Graph::backward`].
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.slots.get(id).and_then(|s| s.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        assert!(
            value.all_finite(),
            "non-finite output from {:?} node {} (error state)",
            op_name(&op),
            self.nodes.len()
        );
        self.nodes.push(Node { op, value, needs_grad });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Inserts a constant/input leaf. Gradients never flow into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Inserts a leaf bound to a named parameter (value copied from the store).
    pub fn param(&mut self, name: &str, store: &ParamStore) -> NodeId {
        let value = store
            .value(name)
            .unwrap_or_else(|| panic!("unknown parameter '{}'", name))
            .clone();
        self.push(Op::Param(name.to_string()), value, true)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{}: shapes {:?} vs {:?}",
            what,
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "add");
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), data, needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "sub");
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), data, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "mul");
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), data, needs)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "div");
        let data = zip_map(self.value(a), self.value(b), |x, y| x / y);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Div(a, b), data, needs)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = map(self.value(a), |x| x * c);
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), data, needs)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = map(self.value(a), |x| x + c);
        let needs = self.needs(a);
        self.push(Op::AddScalar(a), data, needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = map(self.value(a), |x| if x > 0.0 { x } else { 0.0 });
        let needs = self.needs(a);
        self.push(Op::Relu(a), data, needs)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data = map(self.value(a), sigmoid);
        let needs = self.needs(a);
        self.push(Op::Sigmoid(a), data, needs)
    }

    /// 2-D matrix product [m,k] x [k,p] -> [m,p].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul wants rank-2, got {:?} x {:?}", sa, sb);
        assert_eq!(sa[1], sb[0], "matmul inner dims {:?} x {:?}", sa, sb);
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros([m, p]);
        kern::mm_nn(self.value(a).data(), self.value(b).data(), m, k, p, out.data_mut());
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Matmul(a, b), out, needs)
    }

    /// Batched product [B,m,k] x [B,k,p] -> [B,m,p].
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3, "bmm wants rank-3, got {:?} x {:?}", sa, sb);
        assert!(sa[0] == sb[0] && sa[2] == sb[1], "bmm dims {:?} x {:?}", sa, sb);
        let (bsz, m, k, p) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Tensor::zeros([bsz, m, p]);
        for i in 0..bsz {
            kern::mm_nn(
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * k * p..(i + 1) * k * p],
                m,
                k,
                p,
                &mut out.data_mut()[i * m * p..(i + 1) * m * p],
            );
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Bmm(a, b), out, needs)
    }

    /// Batched product against a transposed right factor:
    /// [B,m,k] x [B,p,k] -> [B,m,p].
    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3, "bmm_nt wants rank-3, got {:?} x {:?}", sa, sb);
        assert!(sa[0] == sb[0] && sa[2] == sb[2], "bmm_nt dims {:?} x {:?}", sa, sb);
        let (bsz, m, k, p) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = Tensor::zeros([bsz, m, p]);
        for i in 0..bsz {
            kern::mm_nt(
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * p * k..(i + 1) * p * k],
                m,
                k,
                p,
                &mut out.data_mut()[i * m * p..(i + 1) * m * p],
            );
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::BmmNt(a, b), out, needs)
    }

    /// Zero-padded strided convolution. x: [N,Cin,H,W], k: [Cout,Cin,ks,ks].
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, pad: usize) -> NodeId {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        assert!(sx.len() == 4 && sk.len() == 4, "conv2d wants rank-4, got {:?}, {:?}", sx, sk);
        assert_eq!(sx[1], sk[1], "conv2d channels: input {:?} vs kernel {:?}", sx, sk);
        assert_eq!(sk[2], sk[3], "conv2d expects a square kernel, got {:?}", sk);
        let dims = Conv2dDims::new(sx[0], sx[1], sx[2], sx[3], sk[0], sk[2], stride, pad);
        let mut out = Tensor::zeros([dims.n, dims.cout, dims.hout, dims.wout]);
        kern::conv2d_fwd(self.value(x).data(), self.value(k).data(), &dims, out.data_mut());
        let needs = self.needs(x) || self.needs(k);
        self.push(Op::Conv2d { x, k, dims }, out, needs)
    }

    /// x[..., D] + b[D]
    pub fn bias_last(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        assert_eq!(sb.len(), 1, "bias_last bias must be rank-1, got {:?}", sb);
        let d = *sx.last().expect("bias_last on rank-0 tensor");
        assert_eq!(d, sb[0], "bias_last dims {:?} + {:?}", sx, sb);
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(&bd) {
                *o += bv;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        self.push(Op::BiasLast { x, b }, out, needs)
    }

    /// x[N,C,H,W] + b[C] broadcast over batch and space.
    pub fn bias_channel(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        assert_eq!(sx.len(), 4, "bias_channel wants rank-4 input, got {:?}", sx);
        assert_eq!(sb, vec![sx[1]], "bias_channel dims {:?} + {:?}", sx, sb);
        let hw = sx[2] * sx[3];
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (plane_idx, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let bv = bd[plane_idx % sx[1]];
            for o in plane.iter_mut() {
                *o += bv;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        self.push(Op::BiasChannel { x, b }, out, needs)
    }

    /// x[N, rest..] + b[rest..] broadcast over the leading batch axis.
    pub fn bias_batch(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        assert!(
            sx.len() >= 2 && sx[1..] == sb[..],
            "bias_batch dims {:?} + {:?}",
            sx,
            sb
        );
        let stride: usize = sb.iter().product();
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(stride) {
            for (o, &bv) in row.iter_mut().zip(&bd) {
                *o += bv;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        self.push(Op::BiasBatch { x, b }, out, needs)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    /// Population variance (divide by D) plus `eps` inside the square root.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().expect("layer_norm on rank-0 tensor");
        assert_eq!(self.shape(gain), &[d], "layer_norm gain shape");
        assert_eq!(self.shape(bias), &[d], "layer_norm bias shape");
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let g = self.value(gain).data().to_vec();
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            let (mean, rstd) = moments(row, eps);
            for (j, o) in row.iter_mut().enumerate() {
                *o = g[j] * ((*o - mean) * rstd) + bv[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(Op::LayerNorm { x, gain, bias, eps }, out, needs)
    }

    /// Batch normalization over (N,H,W) per channel, training statistics.
    pub fn batch_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 4, "batch_norm wants rank-4 input, got {:?}", sx);
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        assert!(n * h * w >= 2, "batch_norm needs at least 2 values per channel");
        assert_eq!(self.shape(gain), &[c], "batch_norm gain shape");
        assert_eq!(self.shape(bias), &[c], "batch_norm bias shape");
        assert!(eps > 0.0, "batch_norm eps must be positive");
        let g = self.value(gain).data().to_vec();
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        let hw = h * w;
        for ch in 0..c {
            let (mean, rstd) = channel_moments(out.data(), n, c, hw, ch, eps);
            for ni in 0..n {
                let base = (ni * c + ch) * hw;
                for o in &mut out.data_mut()[base..base + hw] {
                    *o = g[ch] * ((*o - mean) * rstd) + bv[ch];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(Op::BatchNorm { x, gain, bias, eps }, out, needs)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let sx = self.shape(a).to_vec();
        let d = *sx.last().expect("softmax on rank-0 tensor");
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let needs = self.needs(a);
        self.push(Op::SoftmaxLast(a), out, needs)
    }

    /// Inverted dropout: each element is zeroed with probability `p`, survivors
    /// are scaled by 1/(1-p). Identity when `training` is false or `p == 0`,
    /// in which case no node is added.
    pub fn dropout(&mut self, x: NodeId, p: f64, seed: u64, training: bool) -> NodeId {
        assert!((0.0..1.0).contains(&p), "dropout p must be in [0,1), got {}", p);
        if !training || p == 0.0 {
            return x;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let needs = self.needs(x);
        self.push(Op::Dropout { x, mask }, out, needs)
    }

    /// Bilinear resample of [N,C,H,W] to [N,C,oh,ow] (half-pixel centers).
    pub fn bilinear_resize(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 4, "bilinear_resize wants rank-4 input, got {:?}", sx);
        assert!(oh >= 1 && ow >= 1, "bilinear_resize target must be nonempty");
        let ys = kern::bilinear_axis(sx[2], oh);
        let xs = kern::bilinear_axis(sx[3], ow);
        let mut out = Tensor::zeros([sx[0], sx[1], oh, ow]);
        kern::bilinear_fwd(self.value(x).data(), sx[0] * sx[1], sx[2], sx[3], &ys, &xs, out.data_mut());
        let needs = self.needs(x);
        self.push(Op::BilinearResize { x, oh, ow }, out, needs)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let needs = self.needs(a);
        self.push(Op::MeanAll(a), Tensor::scalar(m), needs)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum::<f64>();
        let needs = self.needs(a);
        self.push(Op::SumAll(a), Tensor::scalar(s), needs)
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> NodeId {
        let out = self.value(a).clone().reshaped(shape);
        let needs = self.needs(a);
        self.push(Op::Reshape(a), out, needs)
    }

    /// [N,C,H,W] -> [N*T, C*p*p] where T = (H/p)*(W/p); patches scan
    /// row-major over the patch grid, elements scan (channel, dy, dx).
    pub fn extract_patches(&mut self, x: NodeId, patch: usize) -> NodeId {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 4, "extract_patches wants rank-4 input, got {:?}", sx);
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        assert!(
            patch >= 1 && h % patch == 0 && w % patch == 0,
            "patch size {} must divide spatial dims {}x{}",
            patch,
            h,
            w
        );
        let (gh, gw) = (h / patch, w / patch);
        let t = gh * gw;
        let pl = c * patch * patch;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * t * pl];
        for ni in 0..n {
            for ty in 0..gh {
                for tx in 0..gw {
                    let row = &mut out[((ni * t) + ty * gw + tx) * pl..][..pl];
                    for ci in 0..c {
                        for dy in 0..patch {
                            let src = ((ni * c + ci) * h + ty * patch + dy) * w + tx * patch;
                            for dx in 0..patch {
                                row[(ci * patch + dy) * patch + dx] = xd[src + dx];
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::ExtractPatches { x, patch }, Tensor::new([n * t, pl], out), needs)
    }

    /// [N,T,D] -> [N*heads, T, D/heads]
    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> NodeId {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 3, "split_heads wants rank-3 input, got {:?}", sx);
        let (n, t, d) = (sx[0], sx[1], sx[2]);
        assert!(heads >= 1 && d % heads == 0, "heads {} must divide embed dim {}", heads, d);
        let hd = d / heads;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * t * d];
        for ni in 0..n {
            for hi in 0..heads {
                for ti in 0..t {
                    let dst = ((ni * heads + hi) * t + ti) * hd;
                    let src = (ni * t + ti) * d + hi * hd;
                    out[dst..dst + hd].copy_from_slice(&xd[src..src + hd]);
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::SplitHeads { x, heads }, Tensor::new([n * heads, t, hd], out), needs)
    }

    /// [N*heads, T, hd] -> [N, T, hd*heads]; inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: NodeId, heads: usize) -> NodeId {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 3, "merge_heads wants rank-3 input, got {:?}", sx);
        let (nh, t, hd) = (sx[0], sx[1], sx[2]);
        assert!(heads >= 1 && nh % heads == 0, "batch {} not divisible by heads {}", nh, heads);
        let n = nh / heads;
        let d = hd * heads;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * t * d];
        for ni in 0..n {
            for hi in 0..heads {
                for ti in 0..t {
                    let src = ((ni * heads + hi) * t + ti) * hd;
                    let dst = (ni * t + ti) * d + hi * hd;
                    out[dst..dst + hd].copy_from_slice(&xd[src..src + hd]);
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::MergeHeads { x, heads }, Tensor::new([n, t, d], out), needs)
    }

    /// [N,T,D] -> [N,D,gh,gw] where T = gh*gw; token t sits at grid cell
    /// (t / gw, t % gw).
    pub fn tokens_to_grid(&mut self, x: NodeId, gh: usize, gw: usize) -> NodeId {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 3, "tokens_to_grid wants rank-3 input, got {:?}", sx);
        let (n, t, d) = (sx[0], sx[1], sx[2]);
        assert_eq!(t, gh * gw, "token count {} does not tile a {}x{} grid", t, gh, gw);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * d * t];
        for ni in 0..n {
            for ti in 0..t {
                for di in 0..d {
                    out[(ni * d + di) * t + ti] = xd[(ni * t + ti) * d + di];
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::TokensToGrid(x), Tensor::new([n, d, gh, gw], out), needs)
    }

    /// [N,D,gh,gw] -> [N, gh*gw, D]; inverse of [`Graph::tokens_to_grid`].
    pub fn grid_to_tokens(&mut self, x: NodeId) -> NodeId {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 4, "grid_to_tokens wants rank-4 input, got {:?}", sx);
        let (n, d, gh, gw) = (sx[0], sx[1], sx[2], sx[3]);
        let t = gh * gw;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * t * d];
        for ni in 0..n {
            for ti in 0..t {
                for di in 0..d {
                    out[(ni * t + ti) * d + di] = xd[(ni * d + di) * t + ti];
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::GridToTokens(x), Tensor::new([n, t, d], out), needs)
    }

    /// Mean over all pixels of the cross-entropy between softmax(logits) and
    /// integer labels. logits: [N,C,H,W], labels: N*H*W entries in 0..C.
    /// Fused with the softmax for numerical stability.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: &[u8]) -> NodeId {
        let sx = self.shape(logits).to_vec();
        assert_eq!(sx.len(), 4, "cross_entropy_mean wants rank-4 logits, got {:?}", sx);
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        assert_eq!(labels.len(), n * h * w, "label count {} for logits {:?}", labels.len(), sx);
        assert!(
            labels.iter().all(|&l| (l as usize) < c),
            "label out of range 0..{}",
            c
        );
        let zd = self.value(logits).data();
        let hw = h * w;
        let mut total = 0.0;
        for ni in 0..n {
            for px in 0..hw {
                let y = labels[ni * hw + px] as usize;
                let base = ni * c * hw + px;
                let mut mx = f64::NEG_INFINITY;
                for ci in 0..c {
                    mx = mx.max(zd[base + ci * hw]);
                }
                let mut sum = 0.0;
                for ci in 0..c {
                    sum += (zd[base + ci * hw] - mx).exp();
                }
                total += mx + sum.ln() - zd[base + y * hw];
            }
        }
        let value = Tensor::scalar(total / (n * hw) as f64);
        let needs = self.needs(logits);
        self.push(Op::CrossEntropyMean { logits, labels: labels.to_vec() }, value, needs)
    }

    /// Runs the chain rule backwards from a scalar loss node. Returns one
    /// gradient slot per node; every parameter node at or below `loss` gets a
    /// gradient of its own shape (zeros when the loss does not depend on it).
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[loss].value.numel(),
            1,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut slots: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));

        for i in (0..=loss).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                slots[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue; // keep leaf gradients for collection
            }
            let g = match slots[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut slots);
        }

        // Parameters untouched by the loss still deserve a (zero) gradient.
        for i in 0..=loss {
            if let Op::Param(_) = self.nodes[i].op {
                if slots[i].is_none() {
                    slots[i] = Some(Tensor::zeros(self.shape(i).to_vec()));
                }
            }
        }
        Gradients { slots }
    }

    /// Sums gradients per parameter name (a parameter may appear as several
    /// leaves when reused). Only parameters present in the graph are returned.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = grads
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                match out.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        out
    }

    fn propagate(&self, i: NodeId, g: &Tensor, slots: &mut Vec<Option<Tensor>>) {
        let value = |id: NodeId| self.value(id);
        macro_rules! grad_slot {
            ($id:expr) => {{
                let shape = self.shape($id).to_vec();
                slots[$id].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
            }};
        }
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    axpy(grad_slot!(*a), g.data(), 1.0);
                }
                if self.needs(*b) {
                    axpy(grad_slot!(*b), g.data(), 1.0);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    axpy(grad_slot!(*a), g.data(), 1.0);
                }
                if self.needs(*b) {
                    axpy(grad_slot!(*b), g.data(), -1.0);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let vb = value(*b).data();
                    for ((d, &gv), &bv) in grad_slot!(*a).iter_mut().zip(g.data()).zip(vb) {
                        *d += gv * bv;
                    }
                }
                if self.needs(*b) {
                    let va = value(*a).data();
                    for ((d, &gv), &av) in grad_slot!(*b).iter_mut().zip(g.data()).zip(va) {
                        *d += gv * av;
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (value(*a).data(), value(*b).data());
                if self.needs(*a) {
                    for ((d, &gv), &bv) in grad_slot!(*a).iter_mut().zip(g.data()).zip(vb) {
                        *d += gv / bv;
                    }
                }
                if self.needs(*b) {
                    let y = self.value(i).data();
                    let _ = va;
                    for (((d, &gv), &yv), &bv) in
                        grad_slot!(*b).iter_mut().zip(g.data()).zip(y).zip(vb)
                    {
                        *d -= gv * yv / bv;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    axpy(grad_slot!(*a), g.data(), *c);
                }
            }
            Op::AddScalar(a) => {
                if self.needs(*a) {
                    axpy(grad_slot!(*a), g.data(), 1.0);
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let va = value(*a).data();
                    for ((d, &gv), &xv) in grad_slot!(*a).iter_mut().zip(g.data()).zip(va) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let y = self.value(i).data();
                    for ((d, &gv), &yv) in grad_slot!(*a).iter_mut().zip(g.data()).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Matmul(a, b) => {
                let sa = self.shape(*a);
                let (m, k) = (sa[0], sa[1]);
                let p = self.shape(*b)[1];
                if self.needs(*a) {
                    kern::mm_nt(g.data(), value(*b).data(), m, p, k, grad_slot!(*a));
                }
                if self.needs(*b) {
                    kern::mm_tn(value(*a).data(), g.data(), k, m, p, grad_slot!(*b));
                }
            }
            Op::Bmm(a, b) => {
                let sa = self.shape(*a).to_vec();
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                let p = self.shape(*b)[2];
                if self.needs(*a) {
                    let vb = value(*b).data();
                    let da = grad_slot!(*a);
                    for bi in 0..bsz {
                        kern::mm_nt(
                            &g.data()[bi * m * p..(bi + 1) * m * p],
                            &vb[bi * k * p..(bi + 1) * k * p],
                            m,
                            p,
                            k,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
                if self.needs(*b) {
                    let va = value(*a).data();
                    let db = grad_slot!(*b);
                    for bi in 0..bsz {
                        kern::mm_tn(
                            &va[bi * m * k..(bi + 1) * m * k],
                            &g.data()[bi * m * p..(bi + 1) * m * p],
                            k,
                            m,
                            p,
                            &mut db[bi * k * p..(bi + 1) * k * p],
                        );
                    }
                }
            }
            Op::BmmNt(a, b) => {
                // c[bi] = a[bi] * b[bi]^T with a: [m,k], b: [p,k], g: [m,p]
                let sa = self.shape(*a).to_vec();
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                let p = self.shape(*b)[1];
                if self.needs(*a) {
                    let vb = value(*b).data();
                    let da = grad_slot!(*a);
                    for bi in 0..bsz {
                        kern::mm_nn(
                            &g.data()[bi * m * p..(bi + 1) * m * p],
                            &vb[bi * p * k..(bi + 1) * p * k],
                            m,
                            p,
                            k,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
                if self.needs(*b) {
                    let va = value(*a).data();
                    let db = grad_slot!(*b);
                    for bi in 0..bsz {
                        kern::mm_tn(
                            &g.data()[bi * m * p..(bi + 1) * m * p],
                            &va[bi * m * k..(bi + 1) * m * k],
                            p,
                            m,
                            k,
                            &mut db[bi * p * k..(bi + 1) * p * k],
                        );
                    }
                }
            }
            Op::Conv2d { x, k, dims } => {
                if self.needs(*x) {
                    kern::conv2d_bwd_input(value(*k).data(), g.data(), dims, grad_slot!(*x));
                }
                if self.needs(*k) {
                    kern::conv2d_bwd_kernel(value(*x).data(), g.data(), dims, grad_slot!(*k));
                }
            }
            Op::BiasLast { x, b } => {
                if self.needs(*x) {
                    axpy(grad_slot!(*x), g.data(), 1.0);
                }
                if self.needs(*b) {
                    let d = self.shape(*b)[0];
                    let db = grad_slot!(*b);
                    for row in g.data().chunks(d) {
                        for (o, &gv) in db.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::BiasChannel { x, b } => {
                if self.needs(*x) {
                    axpy(grad_slot!(*x), g.data(), 1.0);
                }
                if self.needs(*b) {
                    let c = self.shape(*b)[0];
                    let sx = self.shape(*x);
                    let hw = sx[2] * sx[3];
                    let db = grad_slot!(*b);
                    for (plane_idx, plane) in g.data().chunks(hw).enumerate() {
                        db[plane_idx % c] += plane.iter().sum::<f64>();
                    }
                }
            }
            Op::BiasBatch { x, b } => {
                if self.needs(*x) {
                    axpy(grad_slot!(*x), g.data(), 1.0);
                }
                if self.needs(*b) {
                    let stride = self.value(*b).numel();
                    let db = grad_slot!(*b);
                    for row in g.data().chunks(stride) {
                        axpy(db, row, 1.0);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let d = *self.shape(*x).last().unwrap();
                let xd = value(*x).data();
                let gd = value(*gain).data();
                let rows = xd.len() / d;
                let mut dx_row = vec![0.0; d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let xr = &xd[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let (mean, rstd) = moments(xr, *eps);
                    // dxhat = g * gain; dx = rstd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = gr[j] * gd[j];
                        s1 += dxhat;
                        s2 += dxhat * xhat;
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                        dx_row[j] = dxhat;
                    }
                    let (m1, m2) = (s1 / d as f64, s2 / d as f64);
                    if self.needs(*x) {
                        let dst = &mut grad_slot!(*x)[r * d..(r + 1) * d];
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * rstd;
                            dst[j] += rstd * (dx_row[j] - m1 - xhat * m2);
                        }
                    }
                }
                if self.needs(*gain) {
                    axpy(grad_slot!(*gain), &dgain, 1.0);
                }
                if self.needs(*bias) {
                    axpy(grad_slot!(*bias), &dbias, 1.0);
                }
            }
            Op::BatchNorm { x, gain, bias, eps } => {
                let sx = self.shape(*x).to_vec();
                let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                let m = (n * hw) as f64;
                let xd = value(*x).data();
                let gd = value(*gain).data();
                for ch in 0..c {
                    let (mean, rstd) = channel_moments(xd, n, c, hw, ch, *eps);
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    let mut dg = 0.0;
                    let mut db = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ch) * hw;
                        for j in 0..hw {
                            let xhat = (xd[base + j] - mean) * rstd;
                            let gv = g.data()[base + j];
                            let dxhat = gv * gd[ch];
                            s1 += dxhat;
                            s2 += dxhat * xhat;
                            dg += gv * xhat;
                            db += gv;
                        }
                    }
                    let (m1, m2) = (s1 / m, s2 / m);
                    if self.needs(*x) {
                        let dst = grad_slot!(*x);
                        for ni in 0..n {
                            let base = (ni * c + ch) * hw;
                            for j in 0..hw {
                                let xhat = (xd[base + j] - mean) * rstd;
                                let dxhat = g.data()[base + j] * gd[ch];
                                dst[base + j] += rstd * (dxhat - m1 - xhat * m2);
                            }
                        }
                    }
                    if self.needs(*gain) {
                        grad_slot!(*gain)[ch] += dg;
                    }
                    if self.needs(*bias) {
                        grad_slot!(*bias)[ch] += db;
                    }
                }
            }
            Op::SoftmaxLast(a) => {
                if self.needs(*a) {
                    let d = *self.shape(i).last().unwrap();
                    let y = self.value(i).data();
                    let da = grad_slot!(*a);
                    for r in 0..y.len() / d {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..d {
                            da[r * d + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    for ((d, &gv), &mv) in grad_slot!(*x).iter_mut().zip(g.data()).zip(mask) {
                        *d += gv * mv;
                    }
                }
            }
            Op::BilinearResize { x, oh, ow } => {
                if self.needs(*x) {
                    let sx = self.shape(*x).to_vec();
                    let ys = kern::bilinear_axis(sx[2], *oh);
                    let xs = kern::bilinear_axis(sx[3], *ow);
                    kern::bilinear_bwd(g.data(), sx[0] * sx[1], sx[2], sx[3], &ys, &xs, grad_slot!(*x));
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let n = self.value(*a).numel() as f64;
                    let gv = g.item() / n;
                    for d in grad_slot!(*a).iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let gv = g.item();
                    for d in grad_slot!(*a).iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    axpy(grad_slot!(*a), g.data(), 1.0);
                }
            }
            Op::ExtractPatches { x, patch } => {
                if self.needs(*x) {
                    let sx = self.shape(*x).to_vec();
                    let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                    let (gh, gw) = (h / patch, w / patch);
                    let t = gh * gw;
                    let pl = c * patch * patch;
                    let dx = grad_slot!(*x);
                    for ni in 0..n {
                        for ty in 0..gh {
                            for tx in 0..gw {
                                let row = &g.data()[((ni * t) + ty * gw + tx) * pl..][..pl];
                                for ci in 0..c {
                                    for dy in 0..*patch {
                                        let dst =
                                            ((ni * c + ci) * h + ty * patch + dy) * w + tx * patch;
                                        for dx_i in 0..*patch {
                                            dx[dst + dx_i] += row[(ci * patch + dy) * patch + dx_i];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::SplitHeads { x, heads } => {
                if self.needs(*x) {
                    let sx = self.shape(*x).to_vec();
                    let (n, t, d) = (sx[0], sx[1], sx[2]);
                    let hd = d / heads;
                    let dx = grad_slot!(*x);
                    for ni in 0..n {
                        for hi in 0..*heads {
                            for ti in 0..t {
                                let src = ((ni * heads + hi) * t + ti) * hd;
                                let dst = (ni * t + ti) * d + hi * hd;
                                for e in 0..hd {
                                    dx[dst + e] += g.data()[src + e];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, heads } => {
                if self.needs(*x) {
                    let sx = self.shape(*x).to_vec(); // [N*heads, T, hd]
                    let (nh, t, hd) = (sx[0], sx[1], sx[2]);
                    let n = nh / heads;
                    let d = hd * heads;
                    let dx = grad_slot!(*x);
                    for ni in 0..n {
                        for hi in 0..*heads {
                            for ti in 0..t {
                                let dst = ((ni * heads + hi) * t + ti) * hd;
                                let src = (ni * t + ti) * d + hi * hd;
                                for e in 0..hd {
                                    dx[dst + e] += g.data()[src + e];
                                }
                            }
                        }
                    }
                }
            }
            Op::TokensToGrid(x) => {
                if self.needs(*x) {
                    let sx = self.shape(*x).to_vec();
                    let (n, t, d) = (sx[0], sx[1], sx[2]);
                    let dx = grad_slot!(*x);
                    for ni in 0..n {
                        for ti in 0..t {
                            for di in 0..d {
                                dx[(ni * t + ti) * d + di] += g.data()[(ni * d + di) * t + ti];
                            }
                        }
                    }
                }
            }
            Op::GridToTokens(x) => {
                if self.needs(*x) {
                    let sx = self.shape(*x).to_vec();
                    let (n, d, t) = (sx[0], sx[1], sx[2] * sx[3]);
                    let dx = grad_slot!(*x);
                    for ni in 0..n {
                        for ti in 0..t {
                            for di in 0..d {
                                dx[(ni * d + di) * t + ti] += g.data()[(ni * t + ti) * d + di];
                            }
                        }
                    }
                }
            }
            Op::CrossEntropyMean { logits, labels } => {
                if self.needs(*logits) {
                    let sx = self.shape(*logits).to_vec();
                    let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                    let zd = value(*logits).data();
                    let scale = g.item() / (n * hw) as f64;
                    let dz = grad_slot!(*logits);
                    let mut probs = vec![0.0; c];
                    for ni in 0..n {
                        for px in 0..hw {
                            let base = ni * c * hw + px;
                            let mut mx = f64::NEG_INFINITY;
                            for ci in 0..c {
                                mx = mx.max(zd[base + ci * hw]);
                            }
                            let mut sum = 0.0;
                            for ci in 0..c {
                                let e = (zd[base + ci * hw] - mx).exp();
                                probs[ci] = e;
                                sum += e;
                            }
                            let y = labels[ni * hw + px] as usize;
                            for ci in 0..c {
                                let p = probs[ci] / sum;
                                let ind = if ci == y { 1.0 } else { 0.0 };
                                dz[base + ci * hw] += scale * (p - ind);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Matmul(..) => "matmul",
        Op::Bmm(..) => "bmm",
        Op::BmmNt(..) => "bmm_nt",
        Op::Conv2d { .. } => "conv2d",
        Op::BiasLast { .. } => "bias_last",
        Op::BiasChannel { .. } => "bias_channel",
        Op::BiasBatch { .. } => "bias_batch",
        Op::LayerNorm { .. } => "layer_norm",
        Op::BatchNorm { .. } => "batch_norm",
        Op::SoftmaxLast(..) => "softmax_last",
        Op::Dropout { .. } => "dropout",
        Op::BilinearResize { .. } => "bilinear_resize",
        Op::MeanAll(..) => "mean_all",
        Op::SumAll(..) => "sum_all",
        Op::Reshape(..) => "reshape",
        Op::ExtractPatches { .. } => "extract_patches",
        Op::SplitHeads { .. } => "split_heads",
        Op::MergeHeads { .. } => "merge_heads",
        Op::TokensToGrid(..) => "tokens_to_grid",
        Op::GridToTokens(..) => "grid_to_tokens",
        Op::CrossEntropyMean { .. } => "cross_entropy_mean",
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean and reciprocal standard deviation (population variance + eps).
fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn channel_moments(data: &[f64], n: usize, c: usize, hw: usize, ch: usize, eps: f64) -> (f64, f64) {
    let m = (n * hw) as f64;
    let mut sum = 0.0;
    for ni in 0..n {
        let base = (ni * c + ch) * hw;
        sum += data[base..base + hw].iter().sum::<f64>();
    }
    let mean = sum / m;
    let mut var = 0.0;
    for ni in 0..n {
        let base = (ni * c + ch) * hw;
        for &v in &data[base..base + hw] {
            var += (v - mean) * (v - mean);
        }
    }
    (mean, 1.0 / (var / m + eps).sqrt())
}
