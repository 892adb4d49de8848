//! Composite neural building blocks assembled from graph primitives.

use super::graph::{Graph, NodeId};

/// Affine map along the last axis: x[..., Din] * w[Din, Dout] + b.
/// Accepts rank-2 or rank-3 inputs; rank-3 is flattened through the product.
pub fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
    let sx = g.shape(x).to_vec();
    let din = *sx.last().expect("linear on rank-0 tensor");
    assert_eq!(g.shape(w)[0], din, "linear: x {:?} vs w {:?}", sx, g.shape(w));
    let dout = g.shape(w)[1];
    let rows: usize = sx[..sx.len() - 1].iter().product();
    let flat = if sx.len() == 2 { x } else { g.reshape(x, [rows, din]) };
    let mut y = g.matmul(flat, w);
    if let Some(b) = b {
        y = g.bias_last(y, b);
    }
    if sx.len() == 2 {
        y
    } else {
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = dout;
        g.reshape(y, out_shape)
    }
}

/// Projection weights of one attention layer (all [D,D] with [D] biases).
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

/// Attention output plus the post-softmax weights for inspection.
pub struct AttnOut {
    pub out: NodeId,
    /// [N*heads, T, T]; every row sums to 1.
    pub attn: NodeId,
}

/// Scaled dot-product multi-head self-attention over tokens [N, T, D].
/// Scores are scaled by 1/sqrt(D/heads) before the softmax.
pub fn multi_head_attention(g: &mut Graph, x: NodeId, heads: usize, w: &AttnWeights) -> AttnOut {
    let sx = g.shape(x).to_vec();
    assert_eq!(sx.len(), 3, "attention wants tokens [N,T,D], got {:?}", sx);
    let d = sx[2];
    assert!(d % heads == 0, "embed dim {} not divisible by {} heads", d, heads);
    let hd = d / heads;

    let q = linear(g, x, w.wq, Some(w.bq));
    let k = linear(g, x, w.wk, Some(w.bk));
    let v = linear(g, x, w.wv, Some(w.bv));

    let qh = g.split_heads(q, heads);
    let kh = g.split_heads(k, heads);
    let vh = g.split_heads(v, heads);

    let scores = g.bmm_nt(qh, kh);
    let scaled = g.scale(scores, 1.0 / (hd as f64).sqrt());
    let attn = g.softmax_last(scaled);
    let ctx = g.bmm(attn, vh);
    let merged = g.merge_heads(ctx, heads);
    let out = linear(g, merged, w.wo, Some(w.bo));
    AttnOut { out, attn }
}
