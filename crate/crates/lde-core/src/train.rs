//! Training loop: PK batch sampling, forward, total loss, Adam, cosine lr
//! schedule, BN/domain-statistics updates, checkpoint/resume, and metric
//! logging.
//!
//! One iteration is: sample batch → forward (train mode) → total loss with
//! the statistics gathered so far → backprop → Adam step → fold this batch's
//! BN stats and f⁻ moments in → advance the counter. Statistics therefore
//! lag the loss by one iteration and stay constant within a step.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_image, Record};
use crate::error::{LdeError, Result};
use crate::expansion::{analytic_lde_ce_node, DomainStats, LossConfig};
use crate::graph::Graph;
use crate::decouple::Mode;
use crate::model::{
    forward, init_params, params_from_checkpoint, params_to_checkpoint, update_bn_buffers,
    Checkpoint, ModelConfig, Params,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Identities per batch.
    pub p: usize,
    /// Instances per identity; batch size is `p * k_inst`.
    pub k_inst: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    /// Total iterations m.
    pub iters: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss: LossConfig,
    /// Momentum folding batch BN stats into the running buffers.
    pub bn_momentum: f64,
    /// Domain label of a record is `scene / scenes_per_domain`; 1 treats
    /// every scene as its own domain.
    pub scenes_per_domain: usize,
    /// Random horizontal flip augmentation.
    pub hflip: bool,
    /// Plain CE+triplet ablation: forces λ=0 and freezes `msls.beta` at its
    /// zero init, turning both expansion and lifting off.
    pub baseline: bool,
    /// Seeds batch sampling and augmentation (parameter init is seeded by
    /// the model config).
    pub seed: u64,
    /// Checkpoint every this many iterations; 0 = only on demand.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            p: 8,
            k_inst: 8,
            base_lr: 3.5e-4,
            final_lr: 7.7e-7,
            iters: 2000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossConfig::default(),
            bn_momentum: 0.1,
            scenes_per_domain: 2,
            hflip: true,
            baseline: false,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k_inst
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k_inst < 2 {
            return Err(LdeError::config(format!(
                "batch composition P={} K={} needs P >= 2 and K >= 2 for batch-hard triplets",
                self.p, self.k_inst
            )));
        }
        if self.iters == 0 {
            return Err(LdeError::config("iters must be positive"));
        }
        if !(self.base_lr > 0.0 && self.final_lr > 0.0 && self.final_lr <= self.base_lr) {
            return Err(LdeError::config(format!(
                "lr schedule needs 0 < final ({}) <= base ({})",
                self.final_lr, self.base_lr
            )));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(LdeError::config(format!("bn momentum {} outside (0,1]", self.bn_momentum)));
        }
        if self.scenes_per_domain == 0 {
            return Err(LdeError::config("scenes_per_domain must be positive"));
        }
        if self.loss.lambda < 0.0 || self.loss.triplet_margin < 0.0 {
            return Err(LdeError::config("lambda and margin must be nonnegative"));
        }
        Ok(())
    }

    /// Loss config actually used by a step (baseline forces λ=0).
    fn effective_loss(&self) -> LossConfig {
        let mut loss = self.loss.clone();
        if self.baseline {
            loss.lambda = 0.0;
        }
        loss
    }
}

/// Train records with their images resident in memory, plus the label maps
/// derived from them. Class indices are the rank of the pid among sorted
/// distinct train pids; domain labels divide scenes into consecutive groups.
pub struct TrainSet {
    pub records: Vec<Record>,
    pub images: Vec<Tensor>,
    pub classes: BTreeMap<usize, usize>,
    pub domains: Vec<usize>,
}

impl TrainSet {
    /// Builds the set from preloaded images (tests, mostly).
    pub fn from_parts(records: Vec<Record>, images: Vec<Tensor>, scenes_per_domain: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(LdeError::data("empty train set"));
        }
        if records.len() != images.len() {
            return Err(LdeError::data(format!(
                "{} records vs {} images",
                records.len(),
                images.len()
            )));
        }
        let shape = images[0].shape().to_vec();
        for (i, img) in images.iter().enumerate() {
            if img.shape() != shape {
                return Err(LdeError::shape(format!(
                    "image {i} has shape {:?}, expected {:?}",
                    img.shape(),
                    shape
                )));
            }
        }
        let mut pids: Vec<usize> = records.iter().map(|r| r.pid).collect();
        pids.sort_unstable();
        pids.dedup();
        let classes: BTreeMap<usize, usize> = pids.into_iter().zip(0..).collect();
        let domains = records.iter().map(|r| r.scene / scenes_per_domain).collect();
        Ok(TrainSet { records, images, classes, domains })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

/// Loads every record's image relative to `root`.
pub fn load_train_set(root: &Path, records: &[Record], scenes_per_domain: usize) -> Result<TrainSet> {
    let images: Vec<Tensor> = records
        .par_iter()
        .map(|rec| load_image(&root.join(&rec.path)))
        .collect::<Result<_>>()?;
    TrainSet::from_parts(records.to_vec(), images, scenes_per_domain)
}

/// Samples P distinct identities with K_inst instances each, as indices into
/// `records`. Identities with fewer than K_inst images are drawn with
/// replacement; the rest without.
pub fn pk_sample(records: &[Record], p: usize, k_inst: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let mut by_pid: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, rec) in records.iter().enumerate() {
        by_pid.entry(rec.pid).or_default().push(i);
    }
    if by_pid.len() < p {
        return Err(LdeError::data(format!(
            "pk_sample: {} identities in the train set, need P={p}",
            by_pid.len()
        )));
    }
    let mut pids: Vec<usize> = by_pid.keys().copied().collect();
    rng.shuffle(&mut pids);
    let mut batch = Vec::with_capacity(p * k_inst);
    for pid in pids.into_iter().take(p) {
        let group = &by_pid[&pid];
        if group.len() >= k_inst {
            let mut pool = group.clone();
            rng.shuffle(&mut pool);
            batch.extend_from_slice(&pool[..k_inst]);
        } else {
            for _ in 0..k_inst {
                batch.push(group[rng.range(group.len())]);
            }
        }
    }
    Ok(batch)
}

/// Cosine interpolation from base to final lr over the configured m.
pub fn lr_at(n: usize, cfg: &TrainConfig) -> f64 {
    let t = (n as f64 / cfg.iters as f64).clamp(0.0, 1.0);
    cfg.final_lr + 0.5 * (cfg.base_lr - cfg.final_lr) * (1.0 + (PI * t).cos())
}

/// Mirrors a [C,H,W] image along its width axis.
pub fn hflip_image(image: &Tensor) -> Result<Tensor> {
    let [c, h, w] = *image.shape() else {
        return Err(LdeError::shape(format!("hflip wants [C,H,W], got {:?}", image.shape())));
    };
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for ci in 0..c {
        for hi in 0..h {
            let row = (ci * h + hi) * w;
            for wi in 0..w {
                out[row + wi] = src[row + (w - 1 - wi)];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Horizontal flip with probability 1/2 when enabled; nothing else.
pub fn augment(image: &Tensor, rng: &mut Rng, hflip: bool) -> Result<Tensor> {
    if hflip && rng.uniform() < 0.5 {
        hflip_image(image)
    } else {
        Ok(image.clone())
    }
}

/// Loss components of one iteration, in the same units as the CSV log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub trace_term: f64,
    pub triplet: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub lr: f64,
    pub ce: f64,
    pub trace_term: f64,
    pub triplet: f64,
    pub total: f64,
}

impl TrainLogRow {
    pub fn csv_header() -> &'static str {
        "iteration,lr,ce,trace_term,triplet,total"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iteration, self.lr, self.ce, self.trace_term, self.triplet, self.total
        )
    }
}

pub struct TrainState {
    pub model_cfg: ModelConfig,
    pub cfg: TrainConfig,
    pub params: Params,
    adam_m: BTreeMap<String, Tensor>,
    adam_v: BTreeMap<String, Tensor>,
    /// Completed iterations.
    pub n: usize,
    /// Per-domain f⁻ moments, keyed by domain label.
    pub stats: BTreeMap<usize, DomainStats>,
    rng: Rng,
}

impl TrainState {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        model_cfg.validate()?;
        cfg.validate()?;
        let params = init_params(&model_cfg, &mut Rng::new(model_cfg.seed))?;
        let adam_m = params
            .tensors()
            .iter()
            .map(|(name, t)| (name.to_string(), Tensor::zeros(t.shape())))
            .collect::<BTreeMap<_, _>>();
        let adam_v = adam_m.clone();
        let rng = Rng::new(cfg.seed);
        Ok(TrainState { model_cfg, cfg, params, adam_m, adam_v, n: 0, stats: BTreeMap::new(), rng })
    }

    pub fn rng_mut(&mut self) -> &mut Rng {
        &mut self.rng
    }

    /// Full training snapshot: model params/buffers plus optimizer moments,
    /// domain statistics, iteration counter, and rng position.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let stat_counts: Vec<(usize, usize)> =
            self.stats.iter().map(|(dom, st)| (*dom, st.count())).collect();
        let extra = serde_json::json!({
            "train_config": self.cfg,
            "iteration": self.n,
            "rng": self.rng.state(),
            "stat_counts": stat_counts,
        });
        let mut ckpt = params_to_checkpoint(&self.params, &self.model_cfg, extra);
        for (name, t) in &self.adam_m {
            ckpt.tensors.insert(format!("opt/m/{name}"), t.clone());
        }
        for (name, t) in &self.adam_v {
            ckpt.tensors.insert(format!("opt/v/{name}"), t.clone());
        }
        for (dom, st) in &self.stats {
            let d = st.dim();
            ckpt.tensors.insert(
                format!("stats/{dom}/mean"),
                Tensor::new(vec![d], st.mean().to_vec()).expect("mean is D"),
            );
            ckpt.tensors.insert(
                format!("stats/{dom}/scatter"),
                Tensor::new(vec![d, d], st.scatter().to_vec()).expect("scatter is DxD"),
            );
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model_part = Checkpoint {
            meta: ckpt.meta.clone(),
            tensors: ckpt
                .tensors
                .iter()
                .filter(|(name, _)| name.starts_with("param/") || name.starts_with("buffer/"))
                .map(|(name, t)| (name.clone(), t.clone()))
                .collect(),
        };
        let (model_cfg, params) = params_from_checkpoint(&model_part)?;
        let extra = &ckpt.meta["extra"];
        let cfg: TrainConfig = serde_json::from_value(extra["train_config"].clone())
            .map_err(|e| LdeError::checkpoint(format!("train_config: {e}")))?;
        cfg.validate()?;
        let n: usize = serde_json::from_value(extra["iteration"].clone())
            .map_err(|e| LdeError::checkpoint(format!("iteration: {e}")))?;
        let rng_state = serde_json::from_value(extra["rng"].clone())
            .map_err(|e| LdeError::checkpoint(format!("rng state: {e}")))?;
        let stat_counts: Vec<(usize, usize)> = serde_json::from_value(extra["stat_counts"].clone())
            .map_err(|e| LdeError::checkpoint(format!("stat_counts: {e}")))?;

        let mut adam_m = BTreeMap::new();
        let mut adam_v = BTreeMap::new();
        for (name, t) in params.tensors() {
            let m = ckpt
                .tensors
                .get(&format!("opt/m/{name}"))
                .ok_or_else(|| LdeError::checkpoint(format!("missing optimizer moment for '{name}'")))?;
            let v = ckpt
                .tensors
                .get(&format!("opt/v/{name}"))
                .ok_or_else(|| LdeError::checkpoint(format!("missing optimizer moment for '{name}'")))?;
            if m.shape() != t.shape() || v.shape() != t.shape() {
                return Err(LdeError::checkpoint(format!("optimizer moment shape mismatch for '{name}'")));
            }
            adam_m.insert(name.to_string(), m.clone());
            adam_v.insert(name.to_string(), v.clone());
        }
        let mut stats = BTreeMap::new();
        for (dom, count) in stat_counts {
            let mean = ckpt
                .tensors
                .get(&format!("stats/{dom}/mean"))
                .ok_or_else(|| LdeError::checkpoint(format!("missing stats/{dom}/mean")))?;
            let scatter = ckpt
                .tensors
                .get(&format!("stats/{dom}/scatter"))
                .ok_or_else(|| LdeError::checkpoint(format!("missing stats/{dom}/scatter")))?;
            let st = DomainStats::from_moments(dom, count, mean.data().to_vec(), scatter.data().to_vec())?;
            stats.insert(dom, st);
        }
        Ok(TrainState {
            model_cfg,
            cfg,
            params,
            adam_m,
            adam_v,
            n,
            stats,
            rng: Rng::restore(&rng_state),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        TrainState::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Keeps only the model part of a training checkpoint, for consumers that
/// need parameters but not optimizer state (embedding export, evaluation).
pub fn model_part(ckpt: &Checkpoint) -> Checkpoint {
    Checkpoint {
        meta: ckpt.meta.clone(),
        tensors: ckpt
            .tensors
            .iter()
            .filter(|(name, _)| name.starts_with("param/") || name.starts_with("buffer/"))
            .map(|(name, t)| (name.clone(), t.clone()))
            .collect(),
    }
}

/// Eval-mode f⁺ embedding of every record, one forward per record so the
/// result cannot depend on batching. `root` anchors the records' relative
/// paths; missing images are reported together up front.
pub fn embed_records(
    root: &Path,
    records: &[Record],
    params: &Params,
    model_cfg: &ModelConfig,
) -> Result<Vec<Vec<f64>>> {
    let missing: Vec<&str> = records
        .iter()
        .filter(|r| !root.join(&r.path).is_file())
        .map(|r| r.path.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(LdeError::data(format!(
            "{} image(s) missing under {}: {}",
            missing.len(),
            root.display(),
            missing.join(", ")
        )));
    }
    records
        .par_iter()
        .map(|r| {
            let img = load_image(&root.join(&r.path))?;
            let [c, h, w] = *img.shape() else {
                return Err(LdeError::shape(format!("image tensor {:?} is not [C,H,W]", img.shape())));
            };
            let batched = Tensor::new(vec![1, c, h, w], img.data().to_vec())?;
            let mut g = Graph::new();
            let art = forward(&mut g, &batched, params, model_cfg, Mode::Eval)?;
            Ok(g.value(art.f_plus).data().to_vec())
        })
        .collect()
}

fn assemble_batch(
    state: &mut TrainState,
    set: &TrainSet,
    batch: &[usize],
) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
    let shape = set.images[batch[0]].shape();
    let [c, h, w] = *shape else {
        return Err(LdeError::shape(format!("train images must be [C,H,W], got {shape:?}")));
    };
    let mut data = Vec::with_capacity(batch.len() * c * h * w);
    let mut labels = Vec::with_capacity(batch.len());
    let mut domains = Vec::with_capacity(batch.len());
    for &idx in batch {
        let img = augment(&set.images[idx], &mut state.rng, state.cfg.hflip)?;
        data.extend_from_slice(img.data());
        let rec = &set.records[idx];
        labels.push(*set.classes.get(&rec.pid).ok_or_else(|| {
            LdeError::data(format!("pid {} missing from the class map", rec.pid))
        })?);
        domains.push(set.domains[idx]);
    }
    let images = Tensor::new(vec![batch.len(), c, h, w], data)?;
    Ok((images, labels, domains))
}

/// One optimization step over `batch` (indices into `set`). Returns the loss
/// parts; errors (rather than silently logging) on a non-finite loss.
pub fn train_step(state: &mut TrainState, set: &TrainSet, batch: &[usize]) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(LdeError::data("empty batch"));
    }
    // Catch drifted-to-NaN parameters (e.g. a damaged resume) up front with
    // a named error; deeper layers would only panic.
    for (name, t) in state.params.tensors() {
        if !t.is_finite() {
            return Err(LdeError::numeric(format!(
                "parameter '{name}' is non-finite at iteration {}",
                state.n
            )));
        }
    }
    let (images, labels, domains) = assemble_batch(state, set, batch)?;
    let mut g = Graph::new();
    let art = forward(&mut g, &images, &state.params, &state.model_cfg, Mode::Train)?;

    let loss_cfg = state.cfg.effective_loss();
    let stats_refs: Vec<&DomainStats> = state.stats.values().collect();
    let tri = g.batch_hard_triplet(art.f_plus, &labels, loss_cfg.triplet_margin)?;
    let lde_ce = analytic_lde_ce_node(&mut g, art.f_plus, &labels, &domains, &art.head, &stats_refs, &loss_cfg)?;
    let total = g.add(tri, lde_ce)?;

    // Plain CE for the log: same λ=0 short-circuit the loss itself uses.
    let ce_only_cfg = LossConfig { lambda: 0.0, ..loss_cfg.clone() };
    let ce_node =
        analytic_lde_ce_node(&mut g, art.f_plus, &labels, &domains, &art.head, &stats_refs, &ce_only_cfg)?;
    let parts = LossParts {
        ce: g.value(ce_node).item(),
        trace_term: g.value(lde_ce).item() - g.value(ce_node).item(),
        triplet: g.value(tri).item(),
        total: g.value(total).item(),
    };

    let mut grads = g.backward(total)?;
    if !parts.total.is_finite() {
        let grad_norm: f64 = art
            .leaves
            .values()
            .filter_map(|id| grads.get(*id))
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        return Err(LdeError::numeric(format!(
            "non-finite loss at iteration {}: ce={} trace_term={} triplet={} total={} grad_norm={}",
            state.n, parts.ce, parts.trace_term, parts.triplet, parts.total, grad_norm
        )));
    }

    // Adam with bias correction; t counts completed steps including this one.
    let lr = lr_at(state.n, &state.cfg);
    let t = (state.n + 1) as i32;
    let (b1, b2, eps) = (state.cfg.adam_beta1, state.cfg.adam_beta2, state.cfg.adam_eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, leaf) in &art.leaves {
        if state.cfg.baseline && name == "msls.beta" {
            continue;
        }
        let grad = grads.take(*leaf);
        let m = state.adam_m.get_mut(name).expect("moment exists for every param");
        let v = state.adam_v.get_mut(name).expect("moment exists for every param");
        let theta = state.params.tensors_mut().get_mut(name).expect("param exists");
        let gd = grad.as_ref().map(|t| t.data());
        let (md, vd, td) = (m.data_mut(), v.data_mut(), theta.data_mut());
        for i in 0..td.len() {
            let gi = gd.map_or(0.0, |gd| gd[i]);
            md[i] = b1 * md[i] + (1.0 - b1) * gi;
            vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
            td[i] -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + eps);
        }
    }

    update_bn_buffers(&mut state.params, &art.bn_stats, state.cfg.bn_momentum)?;

    // Fold this batch's f⁻ rows into the per-domain moments.
    let fm = g.value(art.f_minus);
    let d = fm.shape()[1];
    let mut rows_by_domain: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, &dom) in domains.iter().enumerate() {
        rows_by_domain.entry(dom).or_default().push(row);
    }
    for (dom, rows) in rows_by_domain {
        let mut data = Vec::with_capacity(rows.len() * d);
        for row in &rows {
            data.extend_from_slice(&fm.data()[row * d..(row + 1) * d]);
        }
        let chunk = Tensor::new(vec![rows.len(), d], data)?;
        state
            .stats
            .entry(dom)
            .or_insert_with(|| DomainStats::new(dom, d))
            .update(&chunk)?;
    }

    state.n += 1;
    Ok(parts)
}

/// Runs iterations `state.n..cfg.iters`, invoking `on_iter` after each step
/// (CSV writers and checkpoint hooks live there). Returns all log rows.
pub fn run<F>(state: &mut TrainState, set: &TrainSet, mut on_iter: F) -> Result<Vec<TrainLogRow>>
where
    F: FnMut(&TrainState, &TrainLogRow) -> Result<()>,
{
    if set.num_classes() != state.model_cfg.classes {
        return Err(LdeError::config(format!(
            "model head has {} classes but the train set has {} identities",
            state.model_cfg.classes,
            set.num_classes()
        )));
    }
    let mut rows = Vec::with_capacity(state.cfg.iters.saturating_sub(state.n));
    while state.n < state.cfg.iters {
        let iteration = state.n;
        let lr = lr_at(iteration, &state.cfg);
        let batch = pk_sample(&set.records, state.cfg.p, state.cfg.k_inst, &mut state.rng)?;
        let parts = train_step(state, set, &batch)?;
        let row = TrainLogRow {
            iteration,
            lr,
            ce: parts.ce,
            trace_term: parts.trace_term,
            triplet: parts.triplet,
            total: parts.total,
        };
        on_iter(state, &row)?;
        rows.push(row);
    }
    Ok(rows)
}
