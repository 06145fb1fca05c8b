//! Domain Decoupling (DDM) and Mutual Similarity Lifting-Suppression (MSLS).
//!
//! DDM splits a backbone feature map into an identity stream F⁺ and a domain
//! stream F⁻ through half-channel IN/BN normalization and an SE-like channel
//! attention. MSLS purifies the domain stream: channel-wise cosine
//! similarities against the other levels decide which self-similarity entries
//! are lifted, a masked row softmax turns the lifted entries into mixing
//! weights, and a learnable β blends the mixed channels back residually.

use crate::error::{LdeError, Result};
use crate::graph::{BnBatchStats, Graph, NodeId};
use crate::tensor::Tensor;

/// Squeeze ratio of the attention MLP.
pub const ATTENTION_REDUCTION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Graph nodes of one DDM's parameters, leafed by the caller.
#[derive(Debug, Clone, Copy)]
pub struct DdmNodes {
    pub in_gamma: NodeId,
    pub in_beta: NodeId,
    pub bn_gamma: NodeId,
    pub bn_beta: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

pub struct DdmForward {
    pub f_prime: NodeId,
    pub f_plus: NodeId,
    pub f_minus: NodeId,
    pub attention: NodeId,
    /// Present in train mode; the BN half's batch statistics.
    pub bn_stats: Option<BnBatchStats>,
}

/// IN on channels [0, C/2), BN on [C/2, C), then the attention split
/// F⁺ = a⊙F′, F⁻ = (1−a)⊙F′.
pub fn ddm_forward(
    g: &mut Graph,
    f: NodeId,
    p: &DdmNodes,
    mode: Mode,
    bn_running: Option<(&[f64], &[f64])>,
    eps: f64,
) -> Result<DdmForward> {
    let shape = g.value(f).shape().to_vec();
    let [n, c, _, _] = shape[..] else {
        return Err(LdeError::shape(format!("ddm_forward wants NCHW, got {shape:?}")));
    };
    if c % 2 != 0 {
        return Err(LdeError::shape(format!("ddm_forward: channel count {c} must be even")));
    }
    if mode == Mode::Train && n < 2 {
        return Err(LdeError::shape("ddm_forward: train mode needs a batch of ≥ 2".to_string()));
    }
    let half = c / 2;
    let lo = g.slice_channels(f, 0, half)?;
    let hi = g.slice_channels(f, half, c)?;
    let in_half = g.instance_norm(lo, p.in_gamma, p.in_beta, eps)?;
    let (bn_half, bn_stats) = match mode {
        Mode::Train => {
            let (node, stats) = g.batch_norm_train(hi, p.bn_gamma, p.bn_beta, eps)?;
            (node, Some(stats))
        }
        Mode::Eval => {
            let (mean, var) = bn_running.ok_or_else(|| {
                LdeError::numeric("ddm_forward: eval mode with uninitialized BN running stats")
            })?;
            (g.batch_norm_eval(hi, p.bn_gamma, p.bn_beta, mean, var, eps)?, None)
        }
    };
    let f_prime = g.concat_channels(in_half, bn_half)?;

    let squeezed = g.global_avg_pool(f_prime)?;
    let hidden = g.linear(squeezed, p.w1, p.b1)?;
    let hidden = g.relu(hidden)?;
    let logits = g.linear(hidden, p.w2, p.b2)?;
    let attention = g.sigmoid(logits)?;
    let f_plus = g.mul_channels(f_prime, attention)?;
    let inverted = g.one_minus(attention)?;
    let f_minus = g.mul_channels(f_prime, inverted)?;
    Ok(DdmForward { f_prime, f_plus, f_minus, attention, bn_stats })
}

/// 1×1 convolution to the target channel count, then average pooling down to
/// the level-4 spatial grid. Level 4 itself bypasses this op.
pub fn project_ur(g: &mut Graph, f_minus: NodeId, kernel: NodeId, h4: usize, w4: usize) -> Result<NodeId> {
    let shape = g.value(f_minus).shape().to_vec();
    let [_, _, h, w] = shape[..] else {
        return Err(LdeError::shape(format!("project_ur wants NCHW, got {shape:?}")));
    };
    if h4 > h || w4 > w {
        return Err(LdeError::shape(format!(
            "project_ur: target {h4}×{w4} larger than source {h}×{w} (upsampling unsupported)"
        )));
    }
    let mapped = g.conv2d(f_minus, kernel, 1, 0)?;
    g.avg_pool_to(mapped, h4, w4)
}

/// Per-sample channel-wise cosine similarity: Q[n,i,j] between channel i of A
/// and channel j of B, each flattened spatially.
pub fn channel_similarity(g: &mut Graph, a: NodeId, b: NodeId, eps: f64) -> Result<NodeId> {
    let sa = g.value(a).shape().to_vec();
    let sb = g.value(b).shape().to_vec();
    if sa != sb {
        return Err(LdeError::shape(format!("channel_similarity: {sa:?} vs {sb:?}")));
    }
    let [n, c, h, w] = sa[..] else {
        return Err(LdeError::shape(format!("channel_similarity wants NCHW, got {sa:?}")));
    };
    let fa = g.reshape(a, &[n, c, h * w])?;
    let fb = g.reshape(b, &[n, c, h * w])?;
    let na = g.normalize_rows(fa, eps)?;
    let nb = g.normalize_rows(fb, eps)?;
    g.batch_matmul_bt(na, nb)
}

/// Batch-level mean of a per-sample similarity stack [N,C,C] → [C,C].
pub fn batch_mean_similarity(q: &Tensor) -> Result<Tensor> {
    let [n, c, c2] = *q.shape() else {
        return Err(LdeError::shape(format!("batch_mean_similarity wants [N,C,C], got {:?}", q.shape())));
    };
    if c != c2 {
        return Err(LdeError::shape(format!("batch_mean_similarity: non-square {c}×{c2}")));
    }
    let mut out = vec![0.0; c * c];
    for ni in 0..n {
        for (o, v) in out.iter_mut().zip(&q.data()[ni * c * c..(ni + 1) * c * c]) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= n as f64;
    }
    Tensor::new(vec![c, c], out)
}

/// Complementary lift/suppress masks, entries in {0,1}.
#[derive(Debug, Clone)]
pub struct MslsMasks {
    pub lift: Tensor,
    pub supp: Tensor,
}

impl MslsMasks {
    /// Suppression mask for `softmax_rows` over an [N,C,C] stack: true means
    /// masked out, replicated across the batch.
    pub fn suppressed_for_batch(&self, n: usize) -> Vec<bool> {
        let per: Vec<bool> = self.supp.data().iter().map(|&v| v != 0.0).collect();
        let mut out = Vec::with_capacity(n * per.len());
        for _ in 0..n {
            out.extend_from_slice(&per);
        }
        out
    }
}

/// mask_lift[i,j] = 1 iff Q_self[i,j] ≥ mean of the three mutual matrices at
/// [i,j]; mask_supp is its complement.
pub fn msls_masks(q_self: &Tensor, q_mutual: [&Tensor; 3]) -> Result<MslsMasks> {
    let [c, c2] = *q_self.shape() else {
        return Err(LdeError::shape(format!("msls_masks wants [C,C], got {:?}", q_self.shape())));
    };
    if c != c2 {
        return Err(LdeError::shape(format!("msls_masks: non-square {c}×{c2}")));
    }
    for m in &q_mutual {
        if m.shape() != q_self.shape() {
            return Err(LdeError::shape(format!(
                "msls_masks: mutual shape {:?} vs self {:?}",
                m.shape(),
                q_self.shape()
            )));
        }
    }
    for t in [q_self, q_mutual[0], q_mutual[1], q_mutual[2]] {
        if let Some(bad) = t.data().iter().find(|v| v.abs() > 1.0 + 1e-9) {
            return Err(LdeError::numeric(format!("msls_masks: similarity entry {bad} outside [−1, 1]")));
        }
    }
    let mut lift = vec![0.0; c * c];
    let mut supp = vec![0.0; c * c];
    for i in 0..c * c {
        // compare 3·self against the sum rather than self against the mean:
        // both sides round identically when all four entries are equal, so
        // the ≥-with-equality case stays exact
        let sum = q_mutual[0].data()[i] + q_mutual[1].data()[i] + q_mutual[2].data()[i];
        if 3.0 * q_self.data()[i] >= sum {
            lift[i] = 1.0;
        } else {
            supp[i] = 1.0;
        }
    }
    Ok(MslsMasks { lift: Tensor::new(vec![c, c], lift)?, supp: Tensor::new(vec![c, c], supp)? })
}

/// Q′ = row-softmax of Q_self with suppressed entries masked out; output
/// β·reshape(Q′ ⊗ flatten(F_UR)) + F_UR. Rows the masks fully suppress fall
/// back to a self-only lift of the diagonal entry.
pub fn msls_refine(
    g: &mut Graph,
    f_ur: NodeId,
    q_self: NodeId,
    masks: &MslsMasks,
    beta: NodeId,
) -> Result<NodeId> {
    let shape = g.value(f_ur).shape().to_vec();
    let [n, c, h, w] = shape[..] else {
        return Err(LdeError::shape(format!("msls_refine wants NCHW, got {shape:?}")));
    };
    if g.value(q_self).shape() != [n, c, c] {
        return Err(LdeError::shape(format!(
            "msls_refine: Q_self {:?} vs expected [{n}, {c}, {c}]",
            g.value(q_self).shape()
        )));
    }
    let mut suppressed = masks.suppressed_for_batch(n);
    let lift = masks.lift.data();
    for i in 0..c {
        if (0..c).all(|j| lift[i * c + j] == 0.0) {
            log::warn!("msls_refine: row {i} fully suppressed; falling back to self-only lift");
            for ni in 0..n {
                suppressed[(ni * c + i) * c + i] = false;
            }
        }
    }
    let q_prime = g.softmax_rows(q_self, Some(&suppressed))?;
    let flat = g.reshape(f_ur, &[n, c, h * w])?;
    let mixed = g.batch_matmul(q_prime, flat)?;
    let mixed = g.reshape(mixed, &[n, c, h, w])?;
    let scaled = g.mul_scalar_node(mixed, beta)?;
    g.add(scaled, f_ur)
}

/// Element-wise sum of exactly four identically shaped maps.
pub fn fuse_domain(g: &mut Graph, levels: &[NodeId]) -> Result<NodeId> {
    if levels.len() != 4 {
        return Err(LdeError::shape(format!("fuse_domain wants 4 tensors, got {}", levels.len())));
    }
    let shape = g.value(levels[0]).shape().to_vec();
    for &l in &levels[1..] {
        if g.value(l).shape() != shape {
            return Err(LdeError::shape(format!(
                "fuse_domain: shape {:?} vs {:?}",
                g.value(l).shape(),
                shape
            )));
        }
    }
    let s01 = g.add(levels[0], levels[1])?;
    let s23 = g.add(levels[2], levels[3])?;
    g.add(s01, s23)
}
