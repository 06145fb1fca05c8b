//! Self-checks behind the `verify` subcommand. Every check regenerates its
//! own fixtures from a seed, measures one quantity, and compares it against
//! an explicit threshold, yielding one table row. Checks are deterministic
//! for a given argument set, so two runs print identical tables.
//!
//! The functions take explicit trial counts: the CLI drives them through
//! [`run_checks`] with the quick/full presets, while the acceptance tests
//! call them directly at their own scales.

use std::fmt;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{check_split_invariants, split, Protocol, Record, SplitRatios, Tod};
use crate::decouple::{ddm_forward, msls_masks, msls_refine, DdmNodes, Mode};
use crate::error::{LdeError, Result};
use crate::eval::{average_precision, evaluate, Cmc, EvalItem, EvalReport};
use crate::expansion::{
    analytic_lde_ce, analytic_lde_ce_node, ce_grad_f, ce_hessian_trace, mc_expanded_ce,
    mc_expanded_ce_paired, sample_directions, total_loss_node, ClassifierHead, DomainStats,
    LossConfig,
};
use crate::gradcheck::finite_diff_check_probed;
use crate::graph::{Graph, NodeId};
use crate::model::{forward, init_params, ModelConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

impl std::str::FromStr for Level {
    type Err = LdeError;

    fn from_str(s: &str) -> Result<Level> {
        match s {
            "quick" => Ok(Level::Quick),
            "full" => Ok(Level::Full),
            other => Err(LdeError::config(format!("unknown verify level '{other}' (expected quick or full)"))),
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Quick => "quick",
            Level::Full => "full",
        })
    }
}

/// Deliberate defects that can be injected into a check, used to
/// demonstrate that the suite actually detects the class of bug it claims
/// to guard against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flip the sign of the analytic trace term inside the MC-consistency
    /// check; `mc-analytic-consistency` must fail.
    TraceSign,
}

impl std::str::FromStr for Fault {
    type Err = LdeError;

    fn from_str(s: &str) -> Result<Fault> {
        match s {
            "trace-sign" => Ok(Fault::TraceSign),
            other => Err(LdeError::config(format!(
                "unknown fault '{other}' (expected trace-sign)"
            ))),
        }
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fault::TraceSign => "trace-sign",
        })
    }
}

/// One row of the verify table.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub measured: String,
    pub threshold: String,
    pub seconds: f64,
}

fn outcome(name: &'static str, passed: bool, measured: String, threshold: &str, t0: Instant) -> CheckOutcome {
    CheckOutcome {
        name,
        passed,
        measured,
        threshold: threshold.to_string(),
        seconds: t0.elapsed().as_secs_f64(),
    }
}

fn fail(name: &'static str, threshold: &str, t0: Instant, err: LdeError) -> CheckOutcome {
    outcome(name, false, format!("error: {err}"), threshold, t0)
}

fn par_instances<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

fn randn(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() * scale).collect()).expect("shape matches data")
}

/// Unit-scale PSD matrix AᵀA/D; exactly symmetric because the (i,j) and
/// (j,i) sums share term order.
fn psd_unit(rng: &mut Rng, d: usize) -> Tensor {
    let a = randn(rng, &[d, d], 1.0);
    let ad = a.data();
    let mut s = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for r in 0..d {
                acc += ad[r * d + i] * ad[r * d + j];
            }
            s[i * d + j] = acc / d as f64;
        }
    }
    Tensor::new(vec![d, d], s).expect("square")
}

fn scaled(t: &Tensor, s: f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect()).expect("same shape")
}

/// Stats whose covariance bit-equals `sigma`: count 64 is a power of two, so
/// scatter = 64·Σ divides back exactly.
fn stats_matching(sigmas: &[Tensor], rng: &mut Rng) -> Vec<DomainStats> {
    sigmas
        .iter()
        .enumerate()
        .map(|(j, sig)| {
            let d = sig.shape()[0];
            let count = 64usize;
            let mean = (0..d).map(|_| rng.normal()).collect();
            let scatter = sig.data().iter().map(|v| v * count as f64).collect();
            DomainStats::from_moments(j, count, mean, scatter).expect("symmetric scatter")
        })
        .collect()
}

/// Independently written per-sample CE of the linear softmax head.
fn ce_value(row: &[f64], head: &ClassifierHead, label: usize) -> f64 {
    let (m, d) = (head.classes(), head.dim());
    let (wd, bd) = (head.w.data(), head.b.data());
    let mut logits = vec![0.0; m];
    for (c, l) in logits.iter_mut().enumerate() {
        let mut s = bd[c];
        for j in 0..d {
            s += wd[c * d + j] * row[j];
        }
        *l = s;
    }
    let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn ce_mean_manual(f: &Tensor, labels: &[usize], head: &ClassifierHead) -> f64 {
    let d = head.dim();
    let total: f64 = f.data().chunks(d).zip(labels).map(|(row, &y)| ce_value(row, head, y)).sum();
    total / labels.len() as f64
}

/// A random loss instance within the small-domain regime the oracles target.
struct Toy {
    head: ClassifierHead,
    f: Tensor,
    labels: Vec<usize>,
    domains: Vec<usize>,
    sigma_units: Vec<Tensor>,
}

fn toy_instance(rng: &mut Rng, max_d: usize, max_m: usize, max_s: usize) -> Toy {
    let d = 2 + rng.range(max_d - 1);
    let m = 2 + rng.range(max_m - 1);
    let s = 1 + rng.range(max_s);
    let b = 2 + rng.range(5);
    let w = randn(rng, &[m, d], 0.8);
    let bias = randn(rng, &[m], 0.3);
    let head = ClassifierHead::new(w, bias).expect("valid head");
    let f = randn(rng, &[b, d], 1.0);
    let labels = (0..b).map(|_| rng.range(m)).collect();
    let domains = (0..b).map(|_| rng.range(s)).collect();
    let sigma_units = (0..s).map(|_| psd_unit(rng, d)).collect();
    Toy { head, f, labels, domains, sigma_units }
}

/// λ = 0 must reduce the analytic loss to plain mean CE to ≤ 1e-12.
pub fn check_lambda_zero(instances: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "lambda-zero-equivalence";
    const THR: &str = "max |Δ| ≤ 1e-12";
    let t0 = Instant::now();
    let res = par_instances(instances, |i| {
        let mut rng = Rng::with_stream(seed, i as u64 + 1);
        let toy = toy_instance(&mut rng, 8, 5, 3);
        let sigmas: Vec<Tensor> = toy.sigma_units.iter().map(|u| scaled(u, 0.5)).collect();
        let stats = stats_matching(&sigmas, &mut rng);
        let refs: Vec<&DomainStats> = stats.iter().collect();
        let cfg = LossConfig { lambda: 0.0, ..LossConfig::default() };
        let got = analytic_lde_ce(&toy.f, &toy.labels, &toy.domains, &toy.head, &refs, &cfg)?;
        let want = ce_mean_manual(&toy.f, &toy.labels, &toy.head);
        Ok((got - want).abs())
    });
    match res {
        Err(e) => fail(NAME, THR, t0, e),
        Ok(diffs) => {
            let max = diffs.iter().fold(0.0, |a: f64, &b| a.max(b));
            outcome(NAME, max <= 1e-12, format!("max |Δ| = {max:.2e} over {instances} instances"), THR, t0)
        }
    }
}

/// MC-vs-analytic consistency: at Σ-scale 0.01 the plain estimate must sit
/// within 3 standard errors of the analytic value, and across scales
/// {0.1, 0.01} the residual |MC − analytic| must scale like O(s²). The
/// residuals are measured with the antithetic estimator and carry their own
/// sampling noise, so the scaling test is a confidence-band one: the
/// 3-se interval of err(0.1)/err(0.01) must intersect [25, 400] (a factor of
/// 4 around the predicted 100). A resolved inconsistency still fails — a
/// sign-flipped trace term pins the ratio near 10 with a tight band.
/// `flip_trace_sign` injects exactly that mutation.
pub fn check_mc_taylor(instances: usize, k: usize, seed: u64, flip_trace_sign: bool) -> CheckOutcome {
    const NAME: &str = "mc-analytic-consistency";
    const THR: &str = "z ≤ 3; ratio band ∩ [25, 400]";
    let t0 = Instant::now();
    struct Row {
        z: f64,
        consistent: bool,
    }
    let res = par_instances(instances, |i| {
        let mut rng = Rng::with_stream(seed, i as u64 + 1);
        let toy = toy_instance(&mut rng, 8, 5, 3);
        let cfg = LossConfig { lambda: 1.0, k, jitter: 1e-12, ..LossConfig::default() };
        let cfg0 = LossConfig { lambda: 0.0, ..cfg.clone() };
        let mut err = [0.0f64; 2];
        let mut se = [0.0f64; 2];
        let mut z = 0.0f64;
        for (si, s) in [0.1f64, 0.01].into_iter().enumerate() {
            let sigmas: Vec<Tensor> = toy.sigma_units.iter().map(|u| scaled(u, s)).collect();
            let stats = stats_matching(&sigmas, &mut rng);
            let refs: Vec<&DomainStats> = stats.iter().collect();
            let mut analytic = analytic_lde_ce(&toy.f, &toy.labels, &toy.domains, &toy.head, &refs, &cfg)?;
            if flip_trace_sign {
                let ce = analytic_lde_ce(&toy.f, &toy.labels, &toy.domains, &toy.head, &refs, &cfg0)?;
                analytic = 2.0 * ce - analytic;
            }
            if si == 1 {
                let est = mc_expanded_ce(&toy.f, &toy.labels, &toy.head, &sigmas, &cfg, &mut rng)?;
                z = (est.value - analytic).abs() / est.std_error.max(f64::MIN_POSITIVE);
            }
            let paired = mc_expanded_ce_paired(&toy.f, &toy.labels, &toy.head, &sigmas, &cfg, &mut rng)?;
            err[si] = (paired.value - analytic).abs();
            se[si] = paired.std_error;
        }
        let lo_num = (err[0] - 3.0 * se[0]).max(0.0);
        let hi_num = err[0] + 3.0 * se[0];
        let lo_den = err[1] - 3.0 * se[1];
        let hi_den = err[1] + 3.0 * se[1];
        let ratio_lo = lo_num / hi_den.max(f64::MIN_POSITIVE);
        let ratio_hi = if lo_den > 0.0 { hi_num / lo_den } else { f64::INFINITY };
        Ok(Row { z, consistent: ratio_lo <= 400.0 && ratio_hi >= 25.0 })
    });
    match res {
        Err(e) => fail(NAME, THR, t0, e),
        Ok(rows) => {
            let max_z = rows.iter().map(|r| r.z).fold(0.0, f64::max);
            let consistent = rows.iter().filter(|r| r.consistent).count();
            outcome(
                NAME,
                max_z <= 3.0 && consistent == rows.len(),
                format!("max z = {max_z:.2}; O(s²) band holds for {consistent}/{} instances", rows.len()),
                THR,
                t0,
            )
        }
    }
}

/// E[∇CEᵀξ] = 0: the first-order term the expansion discards must vanish in
/// expectation. Mirrors the MC estimator's batch-mean/domain-sum structure.
pub fn check_first_order(instances: usize, k: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "first-order-cancellation";
    const THR: &str = "|mean| ≤ 3 se";
    let t0 = Instant::now();
    let res = par_instances(instances, |i| {
        let mut rng = Rng::with_stream(seed, i as u64 + 1);
        let toy = toy_instance(&mut rng, 8, 5, 3);
        let d = toy.head.dim();
        let b = toy.labels.len();
        let grads: Vec<Vec<f64>> = toy
            .f
            .data()
            .chunks(d)
            .zip(&toy.labels)
            .map(|(row, &y)| ce_grad_f(row, &toy.head, y))
            .collect();
        let mut x = vec![0.0f64; k];
        for unit in &toy.sigma_units {
            let sigma = scaled(unit, 0.01);
            let xi = sample_directions(&sigma, 1.0, k, 1e-12, &mut rng)?;
            let xid = xi.data();
            for (kk, xv) in x.iter_mut().enumerate() {
                let xrow = &xid[kk * d..(kk + 1) * d];
                let mut inc = 0.0;
                for g in &grads {
                    inc += g.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                }
                *xv += inc / b as f64;
            }
        }
        let mean = x.iter().sum::<f64>() / k as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64;
        let se = (var / k as f64).sqrt();
        Ok(mean.abs() / se.max(f64::MIN_POSITIVE))
    });
    match res {
        Err(e) => fail(NAME, THR, t0, e),
        Ok(zs) => {
            let max_z = zs.iter().fold(0.0, |a: f64, &b| a.max(b));
            outcome(NAME, max_z <= 3.0, format!("max |mean|/se = {max_z:.2} over {instances} instances"), THR, t0)
        }
    }
}

/// Closed-form tr(Σ∇²CE) against a finite-difference contraction through an
/// independently written CE. Σ = (c/D)·AᵀA is contracted row by row:
/// tr(HΣ) = (c/D)·Σ_r ‖a_r‖²·ûᵀHû with û = a_r/‖a_r‖.
pub fn check_hessian_trace(trials: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "hessian-trace-vs-fd";
    const THR: &str = "rel < 1e-4; tr ≥ −1e-10";
    let t0 = Instant::now();
    let res = par_instances(trials, |i| {
        let mut rng = Rng::with_stream(seed, i as u64 + 1);
        let d = 2 + rng.range(7);
        let m = 2 + rng.range(4);
        let head = ClassifierHead::new(randn(&mut rng, &[m, d], 0.6), randn(&mut rng, &[m], 0.2))?;
        let f = randn(&mut rng, &[d], 0.9);
        let a = randn(&mut rng, &[d, d], 1.0);
        let c = [1.0, 0.1, 0.01][rng.range(3)];
        let ad = a.data();
        let mut sig = vec![0.0; d * d];
        for p in 0..d {
            for q in 0..d {
                let mut acc = 0.0;
                for r in 0..d {
                    acc += ad[r * d + p] * ad[r * d + q];
                }
                sig[p * d + q] = acc * c / d as f64;
            }
        }
        let sigma = Tensor::new(vec![d, d], sig)?;
        let analytic = ce_hessian_trace(&f, &head, &sigma)?;

        let y = rng.range(m);
        let h = 1e-3;
        let base = ce_value(f.data(), &head, y);
        let mut fd = 0.0;
        let mut probe = vec![0.0; d];
        for r in 0..d {
            let row = &ad[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let mut at = |step: f64, probe: &mut [f64]| {
                for (j, pv) in probe.iter_mut().enumerate() {
                    *pv = f.data()[j] + step * row[j] / norm;
                }
                ce_value(probe, &head, y)
            };
            // 5-point stencil: O(h⁴) truncation keeps the roundoff/truncation
            // crossover far below the 1e-4 relative threshold
            let (p2, p1, m1, m2) = (at(2.0 * h, &mut probe), at(h, &mut probe), at(-h, &mut probe), at(-2.0 * h, &mut probe));
            let second = (-p2 + 16.0 * p1 - 30.0 * base + 16.0 * m1 - m2) / (12.0 * h * h);
            fd += (c / d as f64) * norm * norm * second;
        }
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
        Ok((rel, analytic))
    });
    match res {
        Err(e) => fail(NAME, THR, t0, e),
        Ok(rows) => {
            let max_rel = rows.iter().map(|r| r.0).fold(0.0, f64::max);
            let min_tr = rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
            outcome(
                NAME,
                max_rel < 1e-4 && min_tr >= -1e-10,
                format!("max rel = {max_rel:.2e}; min tr = {min_tr:.2e} over {trials} trials"),
                THR,
                t0,
            )
        }
    }
}

/// Backprop through the full dual-stream model against finite differences.
/// Two parts: the analytic expanded CE on a 2×3×16×16 batch, and the total
/// objective (which needs P=2, K=2 for a valid triplet batch) on 4×3×16×16.
/// `probes` bounds the coordinates checked per parameter tensor.
pub fn check_model_gradient(probes: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "model-grad-vs-fd";
    const THR: &str = "rel < 1e-4";
    let t0 = Instant::now();
    let run = || -> Result<(f64, f64, bool)> {
        let cfg = ModelConfig {
            in_channels: 3,
            height: 16,
            width: 16,
            widths: [4, 4, 8, 8],
            classes: 4,
            attention_ratio: 2,
            seed,
        };
        let mut rng = Rng::with_stream(seed, 1);
        let params = init_params(&cfg, &mut rng)?;
        let sigmas: Vec<Tensor> = (0..2).map(|_| scaled(&psd_unit(&mut rng, cfg.embed_dim()), 0.5)).collect();
        let stats = stats_matching(&sigmas, &mut rng);
        let refs: Vec<&DomainStats> = stats.iter().collect();
        let loss_cfg = LossConfig { lambda: 0.7, ..LossConfig::default() };
        let names: Vec<String> = params.tensors().keys().cloned().collect();
        let init: Vec<Tensor> = names.iter().map(|n| params.get(n).expect("listed name").clone()).collect();

        let mut max_rel = [0.0f64; 2];
        let mut all_passed = true;
        let cases: [(usize, Vec<usize>, Vec<usize>, bool); 2] = [
            (2, vec![0, 1], vec![0, 1], false),
            (4, vec![0, 0, 1, 1], vec![0, 1, 0, 1], true),
        ];
        for (ci, (b, labels, domains, with_triplet)) in cases.into_iter().enumerate() {
            let images = randn(&mut rng, &[b, 3, 16, 16], 1.0);
            let build = |ps: &[Tensor]| -> Result<(Graph, NodeId, Vec<NodeId>)> {
                let mut p = params.clone();
                for (name, t) in names.iter().zip(ps) {
                    p.tensors_mut().insert(name.clone(), t.clone());
                }
                let mut g = Graph::new();
                let art = forward(&mut g, &images, &p, &cfg, Mode::Train)?;
                let loss = if with_triplet {
                    total_loss_node(&mut g, art.f_plus, &labels, &domains, &art.head, &refs, &loss_cfg)?
                } else {
                    analytic_lde_ce_node(&mut g, art.f_plus, &labels, &domains, &art.head, &refs, &loss_cfg)?
                };
                let ids = names.iter().map(|n| art.leaves[n]).collect();
                Ok((g, loss, ids))
            };
            let report = finite_diff_check_probed(
                |ps| build(ps).map(|(g, l, _)| g.value(l).item()),
                |ps| {
                    let (g, l, ids) = build(ps)?;
                    let mut grads = g.backward(l)?;
                    Ok(ids
                        .iter()
                        .zip(ps)
                        .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
                        .collect())
                },
                &init,
                1e-5,
                1e-4,
                Some(probes),
            )?;
            max_rel[ci] = report.max_rel_err;
            all_passed &= report.passed;
        }
        Ok((max_rel[0], max_rel[1], all_passed))
    };
    match run() {
        Err(e) => fail(NAME, THR, t0, e),
        Ok((rel_ce, rel_total, passed)) => outcome(
            NAME,
            passed,
            format!("max rel = {rel_ce:.2e} (B=2 CE), {rel_total:.2e} (B=4 total)"),
            THR,
            t0,
        ),
    }
}

/// Decoupling identities: F⁺ + F⁻ reconstructs F′, the lift/suppress masks
/// partition exactly per the 3·Q_self ≥ ΣQ_mutual rule, and β = 0 makes the
/// lifting a value-exact identity.
pub fn check_decoupling(trials: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "decoupling-identities";
    const THR: &str = "|Δ| ≤ 1e-6; masks exact; β=0 identity";
    let t0 = Instant::now();
    let res = par_instances(trials, |i| {
        let mut rng = Rng::with_stream(seed, i as u64 + 1);
        let n = 2 + rng.range(2);
        let c = 2 * (1 + rng.range(4));
        let (h, w) = (1 + rng.range(4), 1 + rng.range(4));
        let half = c / 2;
        let hidden = (c / 2).max(1);
        let mut g = Graph::new();
        let f = g.leaf(randn(&mut rng, &[n, c, h, w], 1.0), true);
        let nodes = DdmNodes {
            in_gamma: g.leaf(randn(&mut rng, &[half], 0.7), true),
            in_beta: g.leaf(randn(&mut rng, &[half], 0.4), true),
            bn_gamma: g.leaf(randn(&mut rng, &[half], 0.7), true),
            bn_beta: g.leaf(randn(&mut rng, &[half], 0.4), true),
            w1: g.leaf(randn(&mut rng, &[hidden, c], 0.5), true),
            b1: g.leaf(randn(&mut rng, &[hidden], 0.1), true),
            w2: g.leaf(randn(&mut rng, &[c, hidden], 0.5), true),
            b2: g.leaf(randn(&mut rng, &[c], 0.1), true),
        };
        let dd = ddm_forward(&mut g, f, &nodes, Mode::Train, None, 1e-5)?;
        let fp = g.value(dd.f_plus).data().to_vec();
        let fm = g.value(dd.f_minus).data().to_vec();
        let fpr = g.value(dd.f_prime).data().to_vec();
        let recon = fp
            .iter()
            .zip(&fm)
            .zip(&fpr)
            .map(|((a, b), c)| (a + b - c).abs())
            .fold(0.0, f64::max);

        let unif = |rng: &mut Rng, cnt: usize| {
            Tensor::new(vec![c, c], (0..cnt).map(|_| rng.uniform() * 2.0 - 1.0).collect()).expect("square")
        };
        let qs = unif(&mut rng, c * c);
        let q1 = unif(&mut rng, c * c);
        let q2 = unif(&mut rng, c * c);
        let q3 = unif(&mut rng, c * c);
        let masks = msls_masks(&qs, [&q1, &q2, &q3])?;
        for idx in 0..c * c {
            let want = if 3.0 * qs.data()[idx] >= q1.data()[idx] + q2.data()[idx] + q3.data()[idx] {
                1.0
            } else {
                0.0
            };
            let (l, s) = (masks.lift.data()[idx], masks.supp.data()[idx]);
            if l != want || s != 1.0 - want || l + s != 1.0 {
                return Err(LdeError::numeric(format!("mask partition violated at entry {idx} (trial {i})")));
            }
        }

        let f2 = g.leaf(randn(&mut rng, &[n, c, h, w], 1.0), true);
        let q_node = g.leaf(randn(&mut rng, &[n, c, c], 0.5), true);
        let beta = g.leaf(Tensor::scalar(0.0), true);
        let refined = msls_refine(&mut g, f2, q_node, &masks, beta)?;
        if g.value(refined).data() != g.value(f2).data() {
            return Err(LdeError::numeric(format!("β=0 lifting is not the identity (trial {i})")));
        }
        Ok(recon)
    });
    match res {
        Err(e) => fail(NAME, THR, t0, e),
        Ok(recons) => {
            let max = recons.iter().fold(0.0, |a: f64, &b| a.max(b));
            outcome(NAME, max <= 1e-6, format!("max |F⁺+F⁻−F′| = {max:.2e} over {trials} trials"), THR, t0)
        }
    }
}

/// Chunked moment accumulation must match the one-shot covariance.
pub fn check_covariance_chunking(trials: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "covariance-chunking";
    const THR: &str = "rel ≤ 1e-8";
    let t0 = Instant::now();
    let res = par_instances(trials, |i| {
        let mut rng = Rng::with_stream(seed, i as u64 + 1);
        let d = 1 + rng.range(10);
        let n = 20 + rng.range(181);
        let spread = [1.0, 0.1, 10.0][rng.range(3)];
        let shift: Vec<f64> = (0..d).map(|_| rng.normal() * 2.0).collect();
        let rows: Vec<f64> = (0..n * d).map(|idx| rng.normal() * spread + shift[idx % d]).collect();
        let mut st = DomainStats::new(i, d);
        let mut off = 0;
        while off < n {
            let take = (1 + rng.range(17)).min(n - off);
            let batch = Tensor::new(vec![take, d], rows[off * d..(off + take) * d].to_vec())?;
            st.update(&batch)?;
            off += take;
        }
        let cov = st.covariance().expect("n > 0");

        let mut mu = vec![0.0; d];
        for row in rows.chunks(d) {
            for (m, v) in mu.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mu.iter_mut() {
            *m /= n as f64;
        }
        let mut direct = vec![0.0; d * d];
        for row in rows.chunks(d) {
            for p in 0..d {
                for q in 0..d {
                    direct[p * d + q] += (row[p] - mu[p]) * (row[q] - mu[q]);
                }
            }
        }
        for v in direct.iter_mut() {
            *v /= n as f64;
        }
        let denom = direct.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-12);
        let mut rel = cov
            .data()
            .iter()
            .zip(&direct)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / denom;
        let mean_denom = mu.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-12);
        let mean_rel = st
            .mean()
            .iter()
            .zip(&mu)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / mean_denom;
        rel = rel.max(mean_rel);
        Ok(rel)
    });
    match res {
        Err(e) => fail(NAME, THR, t0, e),
        Ok(rels) => {
            let max = rels.iter().fold(0.0, |a: f64, &b| a.max(b));
            outcome(NAME, max <= 1e-8, format!("max rel = {max:.2e} over {trials} trials"), THR, t0)
        }
    }
}

/// Cameras are affiliated with their scene (cam id = scene·4 + local), as a
/// physical camera network would be; otherwise almost every camera straddles
/// any scene partition and the protocols legitimately reject the manifest.
fn synth_manifest(rng: &mut Rng) -> Vec<Record> {
    let n_scenes = 2 + rng.range(5);
    let cams_per_scene = 2 + rng.range(2);
    let n_pids = 6 + rng.range(25);
    let mut recs = Vec::new();
    let mut ts = 1_700_000_000i64;
    for pid in 0..n_pids {
        let home = rng.range(n_scenes);
        let sightings = 2 + rng.range(5);
        for i in 0..sightings {
            let scene = if rng.uniform() < 0.7 { home } else { rng.range(n_scenes) };
            let tod = if (pid + i) % 2 == 0 { Tod::Day } else { Tod::Night };
            ts += 1 + rng.range(50) as i64;
            recs.push(Record {
                path: format!("img/{pid:04}_{i}.png"),
                pid,
                cam: scene * 4 + rng.range(cams_per_scene),
                scene,
                ts,
                tod,
            });
        }
    }
    recs
}

/// Random manifests through every protocol: all split invariants must hold
/// and a same-seed rerun must serialize byte-identically.
pub fn check_splits(manifests: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "split-invariants";
    const THR: &str = "0 violations; reruns byte-identical";
    let t0 = Instant::now();
    let res = par_instances(manifests, |i| {
        let mut rng = Rng::with_stream(seed, i as u64 + 1);
        let records = synth_manifest(&mut rng);
        let mut violations: Vec<String> = Vec::new();
        for proto in [Protocol::CloseScene, Protocol::OpenScene, Protocol::DayNight] {
            let split_seed = seed.wrapping_add(i as u64);
            match split(&records, proto, SplitRatios::default(), split_seed) {
                Err(e) => violations.push(format!("{proto}: {e}")),
                Ok(s1) => {
                    if let Err(msg) = check_split_invariants(&s1) {
                        violations.push(format!("{proto}: {msg}"));
                    }
                    let s2 = split(&records, proto, SplitRatios::default(), split_seed)?;
                    let b1 = serde_json::to_string(&s1).expect("serializable split");
                    let b2 = serde_json::to_string(&s2).expect("serializable split");
                    if b1 != b2 {
                        violations.push(format!("{proto}: rerun differs"));
                    }
                }
            }
        }
        Ok(violations)
    });
    match res {
        Err(e) => fail(NAME, THR, t0, e),
        Ok(per_manifest) => {
            let all: Vec<&String> = per_manifest.iter().flatten().collect();
            let measured = match all.first() {
                None => format!("{} splits clean", manifests * 3),
                Some(first) => format!("{} violations, first: {first}", all.len()),
            };
            outcome(NAME, all.is_empty(), measured, THR, t0)
        }
    }
}

fn reference_distance(q: &[f64], g: &[f64]) -> f64 {
    let qn = {
        let inv = 1.0 / q.iter().map(|v| v * v).sum::<f64>().sqrt();
        q.iter().map(|v| v * inv).collect::<Vec<_>>()
    };
    let gn = {
        let inv = 1.0 / g.iter().map(|v| v * v).sum::<f64>().sqrt();
        g.iter().map(|v| v * inv).collect::<Vec<_>>()
    };
    1.0 - qn.iter().zip(&gn).map(|(a, b)| a * b).sum::<f64>()
}

/// Exhaustive reference scorer for tiny galleries: selection-sort ranking,
/// per-position precision by prefix re-scan, first-hit scan for CMC. It
/// shares only the distance arithmetic with `evaluate` (same normalize-then-
/// dot rounding, so tie-free instances rank identically); ranking, junk
/// handling, AP, CMC, and aggregation are re-derived from definitions.
/// Returns None when every query lacks a usable positive.
pub fn reference_evaluate(queries: &[EvalItem], gallery: &[EvalItem]) -> Option<EvalReport> {
    let mut sum_ap = 0.0;
    let mut evaluated = 0usize;
    let mut dropped = 0usize;
    let (mut r1, mut r5, mut r10) = (0usize, 0usize, 0usize);
    for q in queries {
        let dist: Vec<f64> = gallery.iter().map(|g| reference_distance(&q.emb, &g.emb)).collect();
        let mut remaining: Vec<usize> = (0..gallery.len()).collect();
        let mut order = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0usize;
            for i in 1..remaining.len() {
                let (a, b) = (remaining[i], remaining[best]);
                if dist[a] < dist[b] || (dist[a] == dist[b] && a < b) {
                    best = i;
                }
            }
            order.push(remaining.remove(best));
        }
        let kept: Vec<usize> = order
            .into_iter()
            .filter(|&gi| !(gallery[gi].pid == q.pid && gallery[gi].cam == q.cam))
            .collect();
        let n_pos = kept.iter().filter(|&&gi| gallery[gi].pid == q.pid).count();
        if n_pos == 0 {
            dropped += 1;
            continue;
        }
        evaluated += 1;
        let mut ap = 0.0;
        for (pos0, &gi) in kept.iter().enumerate() {
            if gallery[gi].pid == q.pid {
                let hits_upto = kept[..=pos0].iter().filter(|&&j| gallery[j].pid == q.pid).count();
                ap += hits_upto as f64 / (pos0 + 1) as f64;
            }
        }
        sum_ap += ap / n_pos as f64;
        let first = kept.iter().position(|&gi| gallery[gi].pid == q.pid).expect("n_pos > 0") + 1;
        if first <= 1 {
            r1 += 1;
        }
        if first <= 5 {
            r5 += 1;
        }
        if first <= 10 {
            r10 += 1;
        }
    }
    if evaluated == 0 {
        return None;
    }
    let n = evaluated as f64;
    Some(EvalReport {
        map: sum_ap / n,
        cmc: Cmc { r1: r1 as f64 / n, r5: r5 as f64 / n, r10: r10 as f64 / n },
        num_queries: evaluated,
        num_dropped: dropped,
    })
}

/// `evaluate` against [`reference_evaluate`] on random instances with
/// galleries ≤ 8, plus the hand-computed AP fixture (positives at ranks 1
/// and 3 of 4 → AP = 5/6).
pub fn check_eval_oracle(instances: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "eval-vs-bruteforce";
    const THR: &str = "exact; |AP − 5/6| ≤ 1e-9";
    let t0 = Instant::now();
    let run = || -> Result<(usize, usize, f64)> {
        let mut mismatches = 0usize;
        let mut evaluable = 0usize;
        let mut rng = Rng::new(seed);
        for _ in 0..instances {
            let d = 1 + rng.range(4);
            let nq = 1 + rng.range(6);
            let ng = 1 + rng.range(8);
            let mk = |rng: &mut Rng| EvalItem {
                pid: rng.range(3),
                cam: rng.range(2),
                emb: (0..d).map(|_| rng.normal()).collect(),
            };
            let queries: Vec<EvalItem> = (0..nq).map(|_| mk(&mut rng)).collect();
            let gallery: Vec<EvalItem> = (0..ng).map(|_| mk(&mut rng)).collect();
            match reference_evaluate(&queries, &gallery) {
                Some(expected) => {
                    evaluable += 1;
                    let got = evaluate(&queries, &gallery)?;
                    if got.map != expected.map
                        || got.cmc != expected.cmc
                        || got.num_queries != expected.num_queries
                        || got.num_dropped != expected.num_dropped
                    {
                        mismatches += 1;
                    }
                }
                None => {
                    if evaluate(&queries, &gallery).is_ok() {
                        mismatches += 1;
                    }
                }
            }
        }
        let ap = average_precision(&[0, 1, 2, 3], &[true, false, true, false], &[false; 4])
            .ok_or_else(|| LdeError::numeric("AP fixture has positives yet scored None".to_string()))?;
        Ok((mismatches, evaluable, (ap - 5.0 / 6.0).abs()))
    };
    match run() {
        Err(e) => fail(NAME, THR, t0, e),
        Ok((mismatches, evaluable, ap_err)) => outcome(
            NAME,
            mismatches == 0 && evaluable > 0 && ap_err <= 1e-9,
            format!("{mismatches} mismatches over {instances} instances ({evaluable} evaluable); |AP − 5/6| = {ap_err:.1e}"),
            THR,
            t0,
        ),
    }
}

/// The verify suite. Quick keeps every Monte-Carlo run well under 10⁵
/// samples and finishes in well under a minute; full runs the complete
/// oracle set.
pub fn run_checks(level: Level) -> Vec<CheckOutcome> {
    run_checks_with(level, None)
}

/// Like [`run_checks`], but optionally injects a known defect so callers
/// can show the corresponding check catching it.
pub fn run_checks_with(level: Level, fault: Option<Fault>) -> Vec<CheckOutcome> {
    let quick = level == Level::Quick;
    let (mc_n, mc_k) = if quick { (4, 20_000) } else { (20, 100_000) };
    let (fo_n, fo_k) = if quick { (5, 20_000) } else { (20, 100_000) };
    let flip = fault == Some(Fault::TraceSign);
    vec![
        check_lambda_zero(1000, 0xA11C_E001),
        check_mc_taylor(mc_n, mc_k, 0xB0B_0002, flip),
        check_first_order(fo_n, fo_k, 0xC0FF_EE03),
        check_hessian_trace(if quick { 300 } else { 1000 }, 0xD1CE_0004),
        check_model_gradient(if quick { 6 } else { 24 }, 0xE7_0005),
        check_decoupling(if quick { 250 } else { 1000 }, 0xF00D_0006),
        check_covariance_chunking(if quick { 60 } else { 200 }, 0x10_0007),
        check_splits(if quick { 15 } else { 100 }, 0x5EED_0008),
        check_eval_oracle(if quick { 150 } else { 500 }, 0x9A11_E709),
    ]
}

pub fn all_passed(rows: &[CheckOutcome]) -> bool {
    rows.iter().all(|r| r.passed)
}

/// Fixed-width table: check → status → measured → threshold → time.
pub fn render_table(rows: &[CheckOutcome]) -> String {
    let header = ["check", "status", "measured", "threshold", "time"];
    let body: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.name.to_string(),
                if r.passed { "pass".to_string() } else { "FAIL".to_string() },
                r.measured.clone(),
                r.threshold.clone(),
                format!("{:.2}s", r.seconds),
            ]
        })
        .collect();
    let mut widths: [usize; 5] = header.map(str::len);
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let push_row = |cells: [&str; 5], out: &mut String| {
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            out.push_str(cell);
            if i + 1 < cells.len() {
                for _ in cell.chars().count()..w + 2 {
                    out.push(' ');
                }
            }
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    push_row(header, &mut out);
    for row in &body {
        push_row([&row[0], &row[1], &row[2], &row[3], &row[4]], &mut out);
    }
    out
}
