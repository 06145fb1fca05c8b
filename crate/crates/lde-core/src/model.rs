//! The desk-scale dual-stream backbone: a stem conv plus four stride-2
//! conv blocks, a DDM after every block, and the tapped domain branch
//! (project-to-UR → MSLS → fuse). Produces the identity embedding f⁺, the
//! domain embedding f⁻, and classifier logits.
//!
//! The identity stream feeds each block's F⁺ into the next block, so domain
//! information is progressively stripped; the domain stream consumes the
//! four F⁻ taps. Parameters live in a flat named map so the optimizer,
//! checkpoint format, and gradient plumbing all address tensors by name.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decouple::{self, DdmNodes, Mode};
use crate::error::{LdeError, Result};
use crate::expansion::HeadNodes;
use crate::graph::{BnBatchStats, Graph, NodeId, COSINE_EPS, NORM_EPS};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of blocks 1–4; the last equals C_ur and the embedding
    /// dim D.
    pub widths: [usize; 4],
    /// Identity count M of the classifier head.
    pub classes: usize,
    pub attention_ratio: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            height: 64,
            width: 64,
            widths: [16, 32, 64, 128],
            classes: 90,
            attention_ratio: decouple::ATTENTION_REDUCTION,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        self.widths[3]
    }

    /// Spatial size after block `level` (1-based); level 0 is the stem.
    pub fn level_spatial(&self, level: usize) -> (usize, usize) {
        (self.height >> level, self.width >> level)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(LdeError::config("model: in_channels must be ≥ 1"));
        }
        if self.classes < 2 {
            return Err(LdeError::config(format!(
                "model: classifier needs ≥ 2 classes, got {}",
                self.classes
            )));
        }
        if self.attention_ratio == 0 {
            return Err(LdeError::config("model: attention_ratio must be ≥ 1"));
        }
        for (i, &c) in self.widths.iter().enumerate() {
            if c < 2 || c % 2 != 0 {
                return Err(LdeError::config(format!(
                    "model: block {} width {c} must be even and ≥ 2 (DDM halves channels)",
                    i + 1
                )));
            }
            if c % self.attention_ratio != 0 {
                return Err(LdeError::config(format!(
                    "model: block {} width {c} not divisible by attention ratio {}",
                    i + 1,
                    self.attention_ratio
                )));
            }
        }
        // four exact halvings keep every level's grid divisible by level 4's,
        // which the domain-branch pooling requires
        if !self.height.is_multiple_of(16) || !self.width.is_multiple_of(16) {
            return Err(LdeError::config(format!(
                "model: input {}×{} must be divisible by 16 (four stride-2 blocks)",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Named parameter store: `tensors` are trainable, `buffers` are running
/// state (BN statistics) excluded from gradients.
#[derive(Debug, Clone, Default)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| LdeError::checkpoint(format!("missing parameter '{name}'")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| LdeError::checkpoint(format!("missing buffer '{name}'")))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.buffers
    }
}

fn he_normal(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() * std).collect()).expect("shape/len agree")
}

/// He-style fan-in init for conv/linear weights, zero biases, γ=1 / β=0 norm
/// affines, MSLS β=0. Deterministic under the rng's seed.
pub fn init_params(cfg: &ModelConfig, rng: &mut Rng) -> Result<Params> {
    cfg.validate()?;
    let mut p = Params::default();
    let r = cfg.attention_ratio;
    let c_ur = cfg.widths[3];

    let put = |map: &mut BTreeMap<String, Tensor>, name: &str, t: Tensor| {
        map.insert(name.to_string(), t);
    };

    put(
        &mut p.tensors,
        "stem.conv.w",
        he_normal(rng, &[cfg.widths[0], cfg.in_channels, 3, 3], cfg.in_channels * 9),
    );
    put(&mut p.tensors, "stem.conv.b", Tensor::zeros(&[cfg.widths[0]]));

    for i in 1..=4usize {
        let c_in = cfg.widths[i.saturating_sub(2)]; // block1 consumes the stem's widths[0]
        let c = cfg.widths[i - 1];
        let half = c / 2;
        put(&mut p.tensors, &format!("block{i}.conv.w"), he_normal(rng, &[c, c_in, 3, 3], c_in * 9));
        put(&mut p.tensors, &format!("block{i}.conv.b"), Tensor::zeros(&[c]));
        put(&mut p.tensors, &format!("block{i}.ddm.in_gamma"), Tensor::full(&[half], 1.0));
        put(&mut p.tensors, &format!("block{i}.ddm.in_beta"), Tensor::zeros(&[half]));
        put(&mut p.tensors, &format!("block{i}.ddm.bn_gamma"), Tensor::full(&[half], 1.0));
        put(&mut p.tensors, &format!("block{i}.ddm.bn_beta"), Tensor::zeros(&[half]));
        put(&mut p.tensors, &format!("block{i}.ddm.attn.w1"), he_normal(rng, &[c / r, c], c));
        put(&mut p.tensors, &format!("block{i}.ddm.attn.b1"), Tensor::zeros(&[c / r]));
        put(&mut p.tensors, &format!("block{i}.ddm.attn.w2"), he_normal(rng, &[c, c / r], c / r));
        put(&mut p.tensors, &format!("block{i}.ddm.attn.b2"), Tensor::zeros(&[c]));
        put(&mut p.buffers, &format!("block{i}.ddm.bn_mean"), Tensor::zeros(&[half]));
        put(&mut p.buffers, &format!("block{i}.ddm.bn_var"), Tensor::full(&[half], 1.0));
        put(&mut p.buffers, &format!("block{i}.ddm.bn_count"), Tensor::zeros(&[1]));
        if i < 4 {
            put(&mut p.tensors, &format!("proj{i}.w"), he_normal(rng, &[c_ur, c, 1, 1], c));
        }
    }
    put(&mut p.tensors, "msls.beta", Tensor::zeros(&[1]));
    put(&mut p.tensors, "head.w", he_normal(rng, &[cfg.classes, c_ur], c_ur));
    put(&mut p.tensors, "head.b", Tensor::zeros(&[cfg.classes]));
    Ok(p)
}

/// One block's DDM outputs, exposed for decoupling tests and diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct BlockFeatures {
    pub f_prime: NodeId,
    pub f_plus: NodeId,
    pub f_minus: NodeId,
    pub attention: NodeId,
}

pub struct ForwardArtifacts {
    pub blocks: Vec<BlockFeatures>,
    /// Pooled identity embedding [N,D].
    pub f_plus: NodeId,
    /// Pooled domain embedding [N,D].
    pub f_minus: NodeId,
    pub logits: NodeId,
    pub head: HeadNodes,
    /// Trainable leaf node per parameter name, for gradient routing.
    pub leaves: BTreeMap<String, NodeId>,
    /// Train mode only: per-DDM batch statistics keyed `block{i}.ddm`.
    pub bn_stats: BTreeMap<String, BnBatchStats>,
}

fn transpose_square(m: &Tensor) -> Tensor {
    let c = m.shape()[0];
    let md = m.data();
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            out[j * c + i] = md[i * c + j];
        }
    }
    Tensor::new(vec![c, c], out).expect("square stays square")
}

pub fn forward(
    g: &mut Graph,
    images: &Tensor,
    params: &Params,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<ForwardArtifacts> {
    cfg.validate()?;
    let [n, c_in, h, w] = *images.shape() else {
        return Err(LdeError::shape(format!("forward wants NCHW images, got {:?}", images.shape())));
    };
    if c_in != cfg.in_channels || h != cfg.height || w != cfg.width {
        return Err(LdeError::shape(format!(
            "forward: images [{n},{c_in},{h},{w}] vs configured [{},{},{}]",
            cfg.in_channels, cfg.height, cfg.width
        )));
    }
    if mode == Mode::Train && n < 2 {
        return Err(LdeError::shape(format!("forward: train mode needs a batch of ≥ 2, got {n}")));
    }
    let train = mode == Mode::Train;
    let mut leaves = BTreeMap::new();
    for (name, t) in params.tensors() {
        leaves.insert(name.clone(), g.leaf(t.clone(), train));
    }
    let leaf = |name: &str| -> NodeId { leaves[name] };

    let x = g.constant(images.clone());
    let mut cur = g.conv2d(x, leaf("stem.conv.w"), 1, 1)?;
    cur = g.add_channels(cur, leaf("stem.conv.b"))?;
    cur = g.relu(cur)?;

    let mut blocks = Vec::with_capacity(4);
    let mut taps = Vec::with_capacity(4);
    let mut bn_stats = BTreeMap::new();
    for i in 1..=4usize {
        let pre = format!("block{i}");
        let mut f = g.conv2d(cur, leaf(&format!("{pre}.conv.w")), 2, 1)?;
        f = g.add_channels(f, leaf(&format!("{pre}.conv.b")))?;
        f = g.relu(f)?;
        let ddm = DdmNodes {
            in_gamma: leaf(&format!("{pre}.ddm.in_gamma")),
            in_beta: leaf(&format!("{pre}.ddm.in_beta")),
            bn_gamma: leaf(&format!("{pre}.ddm.bn_gamma")),
            bn_beta: leaf(&format!("{pre}.ddm.bn_beta")),
            w1: leaf(&format!("{pre}.ddm.attn.w1")),
            b1: leaf(&format!("{pre}.ddm.attn.b1")),
            w2: leaf(&format!("{pre}.ddm.attn.w2")),
            b2: leaf(&format!("{pre}.ddm.attn.b2")),
        };
        let (mean_buf, var_buf);
        let running = if train {
            None
        } else {
            if params.buffer(&format!("{pre}.ddm.bn_count"))?.data()[0] == 0.0 {
                return Err(LdeError::numeric(format!(
                    "forward: eval mode with uninitialized BN running stats in {pre}.ddm"
                )));
            }
            mean_buf = params.buffer(&format!("{pre}.ddm.bn_mean"))?;
            var_buf = params.buffer(&format!("{pre}.ddm.bn_var"))?;
            Some((mean_buf.data(), var_buf.data()))
        };
        let out = decouple::ddm_forward(g, f, &ddm, mode, running, NORM_EPS)?;
        if let Some(stats) = out.bn_stats {
            bn_stats.insert(format!("{pre}.ddm"), stats);
        }
        blocks.push(BlockFeatures {
            f_prime: out.f_prime,
            f_plus: out.f_plus,
            f_minus: out.f_minus,
            attention: out.attention,
        });
        taps.push(out.f_minus);
        cur = out.f_plus;
    }

    // domain branch: project taps onto the UR grid (level 4 passes through)
    let (h4, w4) = cfg.level_spatial(4);
    let mut ur = Vec::with_capacity(4);
    for (i, &tap) in taps.iter().enumerate().take(3) {
        ur.push(decouple::project_ur(g, tap, leaf(&format!("proj{}.w", i + 1)), h4, w4)?);
    }
    ur.push(taps[3]);

    // per-level self similarity carries gradient; the mutual similarities
    // only shape the masks, so they are computed on detached copies
    let mut q_self = Vec::with_capacity(4);
    let mut mean_self = Vec::with_capacity(4);
    let mut detached = Vec::with_capacity(4);
    for &u in &ur {
        let q = decouple::channel_similarity(g, u, u, COSINE_EPS)?;
        mean_self.push(decouple::batch_mean_similarity(g.value(q))?);
        q_self.push(q);
        detached.push(g.constant(g.value(u).clone()));
    }
    let mut mean_mutual: BTreeMap<(usize, usize), Tensor> = BTreeMap::new();
    for i in 0..4 {
        for j in (i + 1)..4 {
            let q = decouple::channel_similarity(g, detached[i], detached[j], COSINE_EPS)?;
            let m = decouple::batch_mean_similarity(g.value(q))?;
            mean_mutual.insert((j, i), transpose_square(&m));
            mean_mutual.insert((i, j), m);
        }
    }
    let beta = leaf("msls.beta");
    let mut refined = Vec::with_capacity(4);
    for i in 0..4 {
        let others: Vec<&Tensor> = (0..4).filter(|&j| j != i).map(|j| &mean_mutual[&(i, j)]).collect();
        let masks = decouple::msls_masks(&mean_self[i], [others[0], others[1], others[2]])?;
        refined.push(decouple::msls_refine(g, ur[i], q_self[i], &masks, beta)?);
    }
    let fused = decouple::fuse_domain(g, &refined)?;

    let f_plus = g.global_avg_pool(cur)?;
    let f_minus = g.global_avg_pool(fused)?;
    let head = HeadNodes { w: leaf("head.w"), b: leaf("head.b") };
    let logits = g.linear(f_plus, head.w, head.b)?;
    Ok(ForwardArtifacts { blocks, f_plus, f_minus, logits, head, leaves, bn_stats })
}

/// Folds one step's batch statistics into the running BN buffers:
/// running' = (1−momentum)·running + momentum·batch.
pub fn update_bn_buffers(
    params: &mut Params,
    stats: &BTreeMap<String, BnBatchStats>,
    momentum: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(LdeError::config(format!("bn momentum {momentum} outside [0,1]")));
    }
    for (key, st) in stats {
        for (suffix, batch) in [("bn_mean", &st.mean), ("bn_var", &st.var)] {
            let name = format!("{key}.{suffix}");
            let buf = params
                .buffers
                .get_mut(&name)
                .ok_or_else(|| LdeError::checkpoint(format!("missing buffer '{name}'")))?;
            if buf.numel() != batch.len() {
                return Err(LdeError::shape(format!(
                    "buffer '{name}' holds {} values, batch stats have {}",
                    buf.numel(),
                    batch.len()
                )));
            }
            for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
        let count = params
            .buffers
            .get_mut(&format!("{key}.bn_count"))
            .ok_or_else(|| LdeError::checkpoint(format!("missing buffer '{key}.bn_count'")))?;
        count.data_mut()[0] += 1.0;
    }
    Ok(())
}

// ---- checkpoint container ----

const CKPT_MAGIC: &[u8; 8] = b"LDECKPT\0";
const CKPT_VERSION: u32 = 1;

/// Versioned container: JSON metadata plus named tensors in the binary dump
/// format.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let io = |e: std::io::Error| LdeError::checkpoint(format!("write failed: {e}"));
        w.write_all(CKPT_MAGIC).map_err(io)?;
        w.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io)?;
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| LdeError::checkpoint(format!("metadata serialization failed: {e}")))?;
        w.write_all(&(meta.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&meta).map_err(io)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes()).map_err(io)?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u64).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            t.write_to(w).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let io = |e: std::io::Error| LdeError::checkpoint(format!("read failed: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CKPT_MAGIC {
            return Err(LdeError::checkpoint("not a checkpoint file (bad magic)"));
        }
        let mut ver = [0u8; 4];
        r.read_exact(&mut ver).map_err(io)?;
        let version = u32::from_le_bytes(ver);
        if version != CKPT_VERSION {
            return Err(LdeError::checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CKPT_VERSION})"
            )));
        }
        let meta_len = read_u64(r).map_err(io)? as usize;
        if meta_len > 1 << 30 {
            return Err(LdeError::checkpoint(format!("implausible metadata length {meta_len}")));
        }
        let mut meta_buf = vec![0u8; meta_len];
        r.read_exact(&mut meta_buf).map_err(io)?;
        let meta = serde_json::from_slice(&meta_buf)
            .map_err(|e| LdeError::checkpoint(format!("corrupt metadata JSON: {e}")))?;
        let count = read_u64(r).map_err(io)? as usize;
        if count > 1 << 20 {
            return Err(LdeError::checkpoint(format!("implausible tensor count {count}")));
        }
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u64(r).map_err(io)? as usize;
            if name_len > 4096 {
                return Err(LdeError::checkpoint(format!("implausible tensor name length {name_len}")));
            }
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf).map_err(io)?;
            let name = String::from_utf8(name_buf)
                .map_err(|e| LdeError::checkpoint(format!("tensor name not UTF-8: {e}")))?;
            let t = Tensor::read_from(r)
                .map_err(|e| LdeError::checkpoint(format!("tensor '{name}': {e}")))?;
            tensors.insert(name, t);
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)
            .map_err(|e| LdeError::checkpoint(format!("cannot create {}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| LdeError::checkpoint(format!("flush {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| LdeError::checkpoint(format!("cannot open {}: {e}", path.display())))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

/// Packs config + params into a checkpoint; `extra` carries trainer state.
pub fn params_to_checkpoint(params: &Params, cfg: &ModelConfig, extra: serde_json::Value) -> Checkpoint {
    let meta = serde_json::json!({
        "config": cfg,
        "extra": extra,
    });
    let mut tensors = BTreeMap::new();
    for (name, t) in params.tensors() {
        tensors.insert(format!("param/{name}"), t.clone());
    }
    for (name, t) in params.buffers() {
        tensors.insert(format!("buffer/{name}"), t.clone());
    }
    Checkpoint { meta, tensors }
}

/// Recovers (config, params) and checks the parameter set is complete.
pub fn params_from_checkpoint(ckpt: &Checkpoint) -> Result<(ModelConfig, Params)> {
    let cfg: ModelConfig = serde_json::from_value(ckpt.meta["config"].clone())
        .map_err(|e| LdeError::checkpoint(format!("checkpoint config: {e}")))?;
    cfg.validate()?;
    let mut params = Params::default();
    for (name, t) in &ckpt.tensors {
        if let Some(stripped) = name.strip_prefix("param/") {
            params.tensors.insert(stripped.to_string(), t.clone());
        } else if let Some(stripped) = name.strip_prefix("buffer/") {
            params.buffers.insert(stripped.to_string(), t.clone());
        } else {
            return Err(LdeError::checkpoint(format!("unexpected tensor '{name}'")));
        }
    }
    let reference = init_params(&cfg, &mut Rng::new(cfg.seed))?;
    for (name, t) in reference.tensors() {
        let got = params.get(name)?;
        if got.shape() != t.shape() {
            return Err(LdeError::checkpoint(format!(
                "parameter '{name}' has shape {:?}, expected {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    for (name, t) in reference.buffers() {
        let got = params.buffer(name)?;
        if got.shape() != t.shape() {
            return Err(LdeError::checkpoint(format!(
                "buffer '{name}' has shape {:?}, expected {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    Ok((cfg, params))
}
