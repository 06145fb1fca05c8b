//! Annotation manifests, the three evaluation-protocol split generators, and
//! the synthetic multi-domain toy dataset.
//!
//! Manifests are JSON Lines with the six record fields. Splits are pure
//! functions of (records, protocol, ratios, seed) and guarantee:
//! identity-disjoint train/test everywhere, scene- and camera-disjointness
//! for `open_scene`, day-train/night-test with disjoint scenes for
//! `day_night`, and a cross-camera positive for every query. Records a
//! protocol cannot place are dropped with a stated reason rather than
//! silently discarded.
//!
//! The synthetic generator paints each identity as a fixed glyph figure
//! (a pure function of pid), then applies per-domain style (background hue,
//! illumination gamma, additive noise), per-scene/camera modulation, and a
//! night dimming factor. Everything derives from (config, seed), so repeated
//! runs are byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LdeError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tod {
    Day,
    Night,
}

/// One annotated image. `path` is relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub path: String,
    pub pid: usize,
    pub cam: usize,
    pub scene: usize,
    pub ts: i64,
    pub tod: Tod,
}

pub fn parse_manifest(path: &Path) -> Result<Vec<Record>> {
    let file = fs::File::open(path).map_err(|e| LdeError::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| LdeError::io(format!("{}:{lineno}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| LdeError::data(format!("manifest line {lineno}: {e}")))?;
        if rec.path.is_empty() {
            return Err(LdeError::data(format!("manifest line {lineno}: empty path")));
        }
        if !seen.insert(rec.path.clone()) {
            return Err(LdeError::data(format!(
                "manifest line {lineno}: duplicate path '{}'",
                rec.path
            )));
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[Record]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| LdeError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| LdeError::data(format!("record serialization: {e}")))?;
        writeln!(w, "{line}").map_err(|e| LdeError::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| LdeError::io(path.display().to_string(), e))
}

// ---- split protocols ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    CloseScene,
    OpenScene,
    DayNight,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Protocol::CloseScene => "close_scene",
            Protocol::OpenScene => "open_scene",
            Protocol::DayNight => "day_night",
        };
        f.write_str(s)
    }
}

impl FromStr for Protocol {
    type Err = LdeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "close_scene" => Ok(Protocol::CloseScene),
            "open_scene" => Ok(Protocol::OpenScene),
            "day_night" => Ok(Protocol::DayNight),
            other => Err(LdeError::config(format!(
                "unknown protocol '{other}' (expected close_scene, open_scene, or day_night)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitRatios {
    /// Fraction assigned to the train side: of identities for close_scene,
    /// of scenes for the other two protocols.
    pub train: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitResult {
    pub protocol: Protocol,
    pub seed: u64,
    pub train: Vec<Record>,
    pub query: Vec<Record>,
    pub gallery: Vec<Record>,
    /// (record, reason) pairs the protocol could not place.
    pub dropped: Vec<(Record, String)>,
}

impl SplitResult {
    pub fn summary(&self) -> serde_json::Value {
        let pids = |rs: &[Record]| rs.iter().map(|r| r.pid).collect::<BTreeSet<_>>().len();
        let scenes = |rs: &[Record]| rs.iter().map(|r| r.scene).collect::<BTreeSet<_>>();
        let mut test = self.query.clone();
        test.extend_from_slice(&self.gallery);
        serde_json::json!({
            "protocol": self.protocol,
            "seed": self.seed,
            "counts": {
                "train": self.train.len(),
                "query": self.query.len(),
                "gallery": self.gallery.len(),
                "dropped": self.dropped.len(),
            },
            "identities": { "train": pids(&self.train), "test": pids(&test) },
            "scenes": { "train": scenes(&self.train), "test": scenes(&test) },
            "dropped": self.dropped.iter()
                .map(|(r, why)| serde_json::json!({"path": r.path, "reason": why}))
                .collect::<Vec<_>>(),
        })
    }

    /// Writes train/query/gallery JSON-Lines plus summary.json into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| LdeError::io(dir.display().to_string(), e))?;
        write_manifest(&dir.join("train.jsonl"), &self.train)?;
        write_manifest(&dir.join("query.jsonl"), &self.query)?;
        write_manifest(&dir.join("gallery.jsonl"), &self.gallery)?;
        let path = dir.join("summary.json");
        let pretty = serde_json::to_string_pretty(&self.summary())
            .map_err(|e| LdeError::data(format!("summary serialization: {e}")))?;
        fs::write(&path, pretty + "\n").map_err(|e| LdeError::io(path.display().to_string(), e))
    }
}

fn check_ratio(ratios: &SplitRatios) -> Result<()> {
    if !(ratios.train > 0.0 && ratios.train < 1.0) {
        return Err(LdeError::config(format!(
            "split ratio {} outside (0, 1)",
            ratios.train
        )));
    }
    Ok(())
}

/// Deterministic split under (records, protocol, ratios, seed).
///
/// For scale reference: the original OWD dataset's published splits are
/// close-scene 951/1,902 train/test identities (20,700/40,412 samples),
/// open-scene 1,474/2,512 (64,358/72,589), day-night 1,598/1,283
/// (35,116/37,158). That dataset is not shipped; the counts document the
/// intended shape of each protocol.
pub fn split(records: &[Record], protocol: Protocol, ratios: SplitRatios, seed: u64) -> Result<SplitResult> {
    check_ratio(&ratios)?;
    if records.is_empty() {
        return Err(LdeError::protocol(format!("{protocol}: empty record list")));
    }
    let mut rng = Rng::new(seed);
    let mut dropped: Vec<(Record, String)> = Vec::new();
    let (train, test) = match protocol {
        Protocol::CloseScene => close_scene_sides(records, ratios, &mut rng)?,
        Protocol::OpenScene => {
            let scenes: BTreeSet<usize> = records.iter().map(|r| r.scene).collect();
            if scenes.len() < 2 {
                return Err(LdeError::protocol(format!(
                    "open_scene: needs ≥ 2 scenes, manifest has {}",
                    scenes.len()
                )));
            }
            let mut ordered: Vec<usize> = scenes.into_iter().collect();
            rng.shuffle(&mut ordered);
            let n_train = (ratios.train * ordered.len() as f64).round().clamp(1.0, ordered.len() as f64 - 1.0)
                as usize;
            let train_scenes: BTreeSet<usize> = ordered[..n_train].iter().copied().collect();
            scene_partition_sides(records, &train_scenes, false, ratios.train, &mut rng, &mut dropped)?
        }
        Protocol::DayNight => {
            let night_scenes: BTreeSet<usize> =
                records.iter().filter(|r| r.tod == Tod::Night).map(|r| r.scene).collect();
            if night_scenes.is_empty() {
                return Err(LdeError::protocol(
                    "day_night: manifest has no night records".to_string(),
                ));
            }
            let mut ordered: Vec<usize> = night_scenes.iter().copied().collect();
            rng.shuffle(&mut ordered);
            let n_test = ((1.0 - ratios.train) * ordered.len() as f64)
                .round()
                .clamp(1.0, ordered.len() as f64) as usize;
            let test_scenes: BTreeSet<usize> = ordered[..n_test].iter().copied().collect();
            let train_scenes: BTreeSet<usize> = records
                .iter()
                .map(|r| r.scene)
                .filter(|s| !test_scenes.contains(s))
                .collect();
            if train_scenes.is_empty() {
                return Err(LdeError::protocol(
                    "day_night: no scene left for the day-time train side".to_string(),
                ));
            }
            scene_partition_sides(records, &train_scenes, true, ratios.train, &mut rng, &mut dropped)?
        }
    };
    if train.is_empty() {
        return Err(LdeError::protocol(format!("{protocol}: no train records survive the partition")));
    }
    if test.is_empty() {
        return Err(LdeError::protocol(format!("{protocol}: no test records survive the partition")));
    }
    let (query, gallery) = select_queries(test, &mut rng);
    Ok(SplitResult { protocol, seed, train, query, gallery, dropped })
}

/// Identities split between sides; scenes and cameras stay shared.
fn close_scene_sides(records: &[Record], ratios: SplitRatios, rng: &mut Rng) -> Result<(Vec<Record>, Vec<Record>)> {
    let pids: BTreeSet<usize> = records.iter().map(|r| r.pid).collect();
    if pids.len() < 2 {
        return Err(LdeError::protocol(format!(
            "close_scene: needs ≥ 2 identities, manifest has {}",
            pids.len()
        )));
    }
    let mut ordered: Vec<usize> = pids.into_iter().collect();
    rng.shuffle(&mut ordered);
    let n_train =
        (ratios.train * ordered.len() as f64).round().clamp(1.0, ordered.len() as f64 - 1.0) as usize;
    let train_pids: BTreeSet<usize> = ordered[..n_train].iter().copied().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for r in records {
        if train_pids.contains(&r.pid) {
            train.push(r.clone());
        } else {
            test.push(r.clone());
        }
    }
    Ok((train, test))
}

/// Splits records by a scene partition, then repairs the cross-side leaks:
/// cameras observed on both sides are dropped entirely, and each identity is
/// assigned wholly to the side holding most of its records (ties alternate).
/// If majority voting empties a side — identities spread evenly across all
/// scenes — the identities are re-partitioned by ratio instead. With
/// `day_night` set, the train side keeps only day records and the test side
/// only night records.
fn scene_partition_sides(
    records: &[Record],
    train_scenes: &BTreeSet<usize>,
    day_night: bool,
    train_frac: f64,
    rng: &mut Rng,
    dropped: &mut Vec<(Record, String)>,
) -> Result<(Vec<Record>, Vec<Record>)> {
    let mut sided: Vec<(bool, Record)> = Vec::new(); // true = train side
    for r in records {
        let on_train = train_scenes.contains(&r.scene);
        if day_night {
            match (on_train, r.tod) {
                (true, Tod::Night) => {
                    dropped.push((r.clone(), "night record in a day-train scene".to_string()));
                    continue;
                }
                (false, Tod::Day) => {
                    dropped.push((r.clone(), "day record in a night-test scene".to_string()));
                    continue;
                }
                _ => {}
            }
        }
        sided.push((on_train, r.clone()));
    }

    let mut cam_sides: BTreeMap<usize, (bool, bool)> = BTreeMap::new();
    for (on_train, r) in &sided {
        let e = cam_sides.entry(r.cam).or_default();
        if *on_train {
            e.0 = true;
        } else {
            e.1 = true;
        }
    }
    let shared_cams: BTreeSet<usize> =
        cam_sides.iter().filter(|(_, (a, b))| *a && *b).map(|(c, _)| *c).collect();
    sided.retain(|(_, r)| {
        if shared_cams.contains(&r.cam) {
            dropped.push((r.clone(), format!("camera {} spans both sides of the scene partition", r.cam)));
            false
        } else {
            true
        }
    });
    if sided.is_empty() {
        return Err(LdeError::protocol(
            "scene partition leaves no usable records (every camera spans both sides)".to_string(),
        ));
    }

    let mut pid_counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (on_train, r) in &sided {
        let e = pid_counts.entry(r.pid).or_default();
        if *on_train {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    // ties alternate sides so an evenly straddling population cannot starve
    // either side
    let mut tie_to_train = true;
    let mut pid_to_train: BTreeMap<usize, bool> = pid_counts
        .iter()
        .map(|(&pid, &(tr, te))| {
            let side = match tr.cmp(&te) {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Less => false,
                std::cmp::Ordering::Equal => {
                    tie_to_train = !tie_to_train;
                    !tie_to_train
                }
            };
            (pid, side)
        })
        .collect();
    let starved = |assign: &BTreeMap<usize, bool>| {
        let keeps = |want_train: bool| {
            sided.iter().any(|(on_train, r)| *on_train == want_train && assign[&r.pid] == want_train)
        };
        !keeps(true) || !keeps(false)
    };
    if starved(&pid_to_train) {
        let mut ordered: Vec<usize> = pid_counts.keys().copied().collect();
        rng.shuffle(&mut ordered);
        let n_train =
            (train_frac * ordered.len() as f64).round().clamp(1.0, (ordered.len() - 1).max(1) as f64)
                as usize;
        pid_to_train = ordered.iter().enumerate().map(|(i, &pid)| (pid, i < n_train)).collect();
    }

    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (on_train, r) in sided {
        let wants_train = pid_to_train[&r.pid];
        if on_train == wants_train {
            if on_train {
                train.push(r);
            } else {
                test.push(r);
            }
        } else {
            let side = if wants_train { "train" } else { "test" };
            dropped.push((r, format!("identity assigned wholly to the {side} side")));
        }
    }
    Ok((train, test))
}

/// One query per (pid, scene) group; queries without a cross-camera positive
/// in the gallery are demoted to gallery until that guarantee holds.
fn select_queries(test: Vec<Record>, rng: &mut Rng) -> (Vec<Record>, Vec<Record>) {
    let mut groups: BTreeMap<(usize, usize), Vec<Record>> = BTreeMap::new();
    for r in test {
        groups.entry((r.pid, r.scene)).or_default().push(r);
    }
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for group in groups.values_mut() {
        group.sort_by(|a, b| a.path.cmp(&b.path));
        let pick = rng.range(group.len());
        for (i, r) in group.drain(..).enumerate() {
            if i == pick {
                query.push(r);
            } else {
                gallery.push(r);
            }
        }
    }
    query.sort_by(|a, b| a.path.cmp(&b.path));
    gallery.sort_by(|a, b| a.path.cmp(&b.path));
    // demotion can only enlarge the gallery, so iterate to a fixpoint
    loop {
        let has_positive = |q: &Record, gal: &[Record]| {
            gal.iter().any(|g| g.pid == q.pid && g.cam != q.cam)
        };
        let (keep, demote): (Vec<Record>, Vec<Record>) =
            query.into_iter().partition(|q| has_positive(q, &gallery));
        let done = demote.is_empty();
        gallery.extend(demote);
        query = keep;
        if done {
            break;
        }
        gallery.sort_by(|a, b| a.path.cmp(&b.path));
    }
    (query, gallery)
}

// ---- synthetic dataset ----

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    /// Background hue in degrees [0, 360).
    pub hue: f64,
    /// Illumination gamma; < 1 brightens, > 1 darkens.
    pub gamma: f64,
    /// Additive Gaussian pixel noise, std in [0,1] intensity units.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_domains: usize,
    pub ids_per_domain: usize,
    pub imgs_per_id: usize,
    /// Square image side in pixels.
    pub size: usize,
    pub scenes_per_domain: usize,
    pub cams_per_scene: usize,
    /// One style per domain.
    pub styles: Vec<DomainStyle>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_domains: 3,
            ids_per_domain: 30,
            imgs_per_id: 20,
            size: 64,
            scenes_per_domain: 2,
            cams_per_scene: 2,
            styles: vec![
                DomainStyle { hue: 10.0, gamma: 1.0, noise: 0.02 },
                DomainStyle { hue: 130.0, gamma: 0.7, noise: 0.04 },
                DomainStyle { hue: 250.0, gamma: 1.4, noise: 0.03 },
            ],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 2 {
            return Err(LdeError::config(format!(
                "synth: num_domains must be ≥ 2 (expansion needs a covariance source and \
                 evaluation a held-out domain), got {}",
                self.num_domains
            )));
        }
        if self.ids_per_domain == 0 || self.imgs_per_id < 2 {
            return Err(LdeError::config(
                "synth: needs ≥ 1 identity per domain and ≥ 2 images per identity".to_string(),
            ));
        }
        if self.size < 16 {
            return Err(LdeError::config(format!("synth: image size {} below minimum 16", self.size)));
        }
        if self.scenes_per_domain < 2 {
            return Err(LdeError::config(
                "synth: scenes_per_domain must be ≥ 2 so every identity crosses two scenes".to_string(),
            ));
        }
        if self.cams_per_scene < 2 {
            return Err(LdeError::config(
                "synth: cams_per_scene must be ≥ 2 so cross-camera positives exist".to_string(),
            ));
        }
        if self.styles.len() != self.num_domains {
            return Err(LdeError::config(format!(
                "synth: {} styles for {} domains",
                self.styles.len(),
                self.num_domains
            )));
        }
        for (i, st) in self.styles.iter().enumerate() {
            if !st.gamma.is_finite() || st.gamma <= 0.0 || st.noise < 0.0 {
                return Err(LdeError::config(format!(
                    "synth: style {i} needs gamma > 0 and noise ≥ 0 (gamma {}, noise {})",
                    st.gamma, st.noise
                )));
            }
        }
        Ok(())
    }

    pub fn total_images(&self) -> usize {
        self.num_domains * self.ids_per_domain * self.imgs_per_id
    }

    /// Domain of a scene id, under the generator's scene numbering.
    pub fn domain_of_scene(&self, scene: usize) -> usize {
        scene / self.scenes_per_domain
    }
}

/// Deterministic slot for image k of an identity: scene and camera cycle
/// fastest, day/night alternates above them.
fn slot(cfg: &SynthConfig, k: usize) -> (usize, usize, Tod) {
    let scene_idx = k % cfg.scenes_per_domain;
    let cam_idx = (k / cfg.scenes_per_domain) % cfg.cams_per_scene;
    let phase = k / (cfg.scenes_per_domain * cfg.cams_per_scene);
    let tod = if phase.is_multiple_of(2) { Tod::Day } else { Tod::Night };
    (scene_idx, cam_idx, tod)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

const GLYPH_SEED: u64 = 0x1de_617;
const NIGHT_DIM: f64 = 0.35;

struct Canvas {
    size: usize,
    /// Planar RGB, values in [0,1] until the final clamp.
    px: Vec<f64>,
}

impl Canvas {
    fn filled(size: usize, rgb: [f64; 3]) -> Self {
        let mut px = vec![0.0; 3 * size * size];
        for c in 0..3 {
            px[c * size * size..(c + 1) * size * size].fill(rgb[c]);
        }
        Canvas { size, px }
    }

    /// Fills an axis-aligned rect given in unit coordinates.
    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, rgb: [f64; 3]) {
        let s = self.size as f64;
        let (px0, px1) = (((x0 * s) as usize).min(self.size), ((x1 * s) as usize).min(self.size));
        let (py0, py1) = (((y0 * s) as usize).min(self.size), ((y1 * s) as usize).min(self.size));
        for (c, &v) in rgb.iter().enumerate() {
            for y in py0..py1 {
                let row = c * self.size * self.size + y * self.size;
                self.px[row + px0..row + px1].fill(v);
            }
        }
    }

    fn disc(&mut self, cx: f64, cy: f64, radius: f64, rgb: [f64; 3]) {
        let s = self.size as f64;
        let r2 = (radius * s) * (radius * s);
        for y in 0..self.size {
            for x in 0..self.size {
                let dx = x as f64 + 0.5 - cx * s;
                let dy = y as f64 + 0.5 - cy * s;
                if dx * dx + dy * dy <= r2 {
                    for (c, &v) in rgb.iter().enumerate() {
                        self.px[c * self.size * self.size + y * self.size + x] = v;
                    }
                }
            }
        }
    }
}

/// Draws the pid-determined figure: head, torso, legs, and an accessory
/// stripe, with colors and small placement jitter derived from pid alone.
fn render_identity(canvas: &mut Canvas, pid: usize) {
    let mut g = Rng::with_stream(GLYPH_SEED, pid as u64);
    let head = hsv_to_rgb(g.uniform() * 360.0, 0.7, 0.95);
    let torso = hsv_to_rgb(g.uniform() * 360.0, 0.85, 0.9);
    let legs = hsv_to_rgb(g.uniform() * 360.0, 0.8, 0.8);
    let stripe = hsv_to_rgb(g.uniform() * 360.0, 0.9, 1.0);
    let jx = (g.uniform() - 0.5) * 0.08;
    let torso_w = 0.24 + g.uniform() * 0.12;

    let cx = 0.5 + jx;
    canvas.disc(cx, 0.20, 0.09 + g.uniform() * 0.03, head);
    canvas.rect(cx - torso_w / 2.0, 0.30, cx + torso_w / 2.0, 0.62, torso);
    canvas.rect(cx - torso_w / 2.0, 0.62, cx - torso_w / 2.0 + 0.08, 0.92, legs);
    canvas.rect(cx + torso_w / 2.0 - 0.08, 0.62, cx + torso_w / 2.0, 0.92, legs);
    let stripe_y = 0.34 + g.uniform() * 0.2;
    canvas.rect(cx - torso_w / 2.0, stripe_y, cx + torso_w / 2.0, stripe_y + 0.05, stripe);
}

/// Renders one image as a [3,S,S] tensor in [0,1]. Pure in everything but
/// the per-image noise substream.
fn render_image(
    cfg: &SynthConfig,
    pid: usize,
    style: &DomainStyle,
    scene_idx: usize,
    cam_idx: usize,
    tod: Tod,
    noise_rng: &mut Rng,
) -> Tensor {
    let bg = hsv_to_rgb(style.hue, 0.45, 0.55 + 0.1 * scene_idx as f64);
    let mut canvas = Canvas::filled(cfg.size, bg);
    render_identity(&mut canvas, pid);
    let cam_gain = 1.0 + 0.06 * cam_idx as f64;
    let dim = if tod == Tod::Night { NIGHT_DIM } else { 1.0 };
    for v in canvas.px.iter_mut() {
        let lit = (*v * cam_gain * dim).clamp(0.0, 1.0).powf(style.gamma);
        let noisy = if style.noise > 0.0 { lit + noise_rng.normal() * style.noise } else { lit };
        *v = noisy.clamp(0.0, 1.0);
    }
    Tensor::new(vec![3, cfg.size, cfg.size], canvas.px).expect("canvas is 3×S×S")
}

fn to_png_bytes(t: &Tensor) -> Vec<u8> {
    let [_, hgt, wid] = *t.shape() else { unreachable!("render produces rank 3") };
    let plane = hgt * wid;
    let d = t.data();
    let mut img = image::RgbImage::new(wid as u32, hgt as u32);
    for y in 0..hgt {
        for x in 0..wid {
            let i = y * wid + x;
            let px = [
                (d[i] * 255.0).round() as u8,
                (d[plane + i] * 255.0).round() as u8,
                (d[2 * plane + i] * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let mut bytes = Vec::new();
    image::DynamicImage::ImageRgb8(img)
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .expect("in-memory PNG encode");
    bytes
}

/// Loads a generated PNG back as a [3,H,W] tensor in [0,1].
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| LdeError::data(format!("cannot read image {}: {e}", path.display())))?
        .into_rgb8();
    let (wid, hgt) = (img.width() as usize, img.height() as usize);
    let plane = hgt * wid;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * wid + x as usize;
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, hgt, wid], data)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSummary {
    pub images: usize,
    pub identities: usize,
    pub domains: usize,
    pub manifest: PathBuf,
}

/// Writes `images/` plus `manifest.jsonl` under `out_dir`. Byte-identical
/// across runs with the same (config, seed); image rendering parallelizes
/// over a per-image rng substream.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path, rng: &Rng) -> Result<GenSummary> {
    cfg.validate()?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| LdeError::io(img_dir.display().to_string(), e))?;

    struct Job {
        ordinal: usize,
        pid: usize,
        domain: usize,
        scene: usize,
        scene_idx: usize,
        cam: usize,
        cam_idx: usize,
        tod: Tod,
        rel_path: String,
    }
    let mut jobs = Vec::with_capacity(cfg.total_images());
    let mut ordinal = 0;
    for domain in 0..cfg.num_domains {
        for id_idx in 0..cfg.ids_per_domain {
            let pid = domain * cfg.ids_per_domain + id_idx;
            for k in 0..cfg.imgs_per_id {
                let (scene_idx, cam_idx, tod) = slot(cfg, k);
                let scene = domain * cfg.scenes_per_domain + scene_idx;
                let cam = scene * cfg.cams_per_scene + cam_idx;
                let tod_tag = match tod {
                    Tod::Day => "d",
                    Tod::Night => "n",
                };
                let rel_path = format!("images/p{pid:04}_s{scene}_c{cam}_{tod_tag}_{k:02}.png");
                jobs.push(Job { ordinal, pid, domain, scene, scene_idx, cam, cam_idx, tod, rel_path });
                ordinal += 1;
            }
        }
    }

    jobs.par_iter().try_for_each(|job| -> Result<()> {
        let mut noise_rng = rng.substream(job.ordinal as u64);
        let t = render_image(
            cfg,
            job.pid,
            &cfg.styles[job.domain],
            job.scene_idx,
            job.cam_idx,
            job.tod,
            &mut noise_rng,
        );
        let bytes = to_png_bytes(&t);
        let path = out_dir.join(&job.rel_path);
        fs::write(&path, bytes).map_err(|e| LdeError::io(path.display().to_string(), e))
    })?;

    let records: Vec<Record> = jobs
        .iter()
        .map(|j| Record {
            path: j.rel_path.clone(),
            pid: j.pid,
            cam: j.cam,
            scene: j.scene,
            ts: 1_700_000_000 + j.ordinal as i64 * 60,
            tod: j.tod,
        })
        .collect();
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    Ok(GenSummary {
        images: records.len(),
        identities: cfg.num_domains * cfg.ids_per_domain,
        domains: cfg.num_domains,
        manifest,
    })
}

// ---- invariant checking (shared by tests and the verify suite) ----

/// Validates every SplitResult contract; returns the violation description.
pub fn check_split_invariants(s: &SplitResult) -> std::result::Result<(), String> {
    let pids = |rs: &[Record]| rs.iter().map(|r| r.pid).collect::<BTreeSet<_>>();
    let scenes = |rs: &[Record]| rs.iter().map(|r| r.scene).collect::<BTreeSet<_>>();
    let cams = |rs: &[Record]| rs.iter().map(|r| r.cam).collect::<BTreeSet<_>>();
    let mut test = s.query.clone();
    test.extend_from_slice(&s.gallery);

    let train_pids = pids(&s.train);
    let test_pids = pids(&test);
    if let Some(p) = train_pids.intersection(&test_pids).next() {
        return Err(format!("pid {p} appears in both train and test"));
    }
    match s.protocol {
        Protocol::OpenScene => {
            if let Some(sc) = scenes(&s.train).intersection(&scenes(&test)).next() {
                return Err(format!("open_scene: scene {sc} on both sides"));
            }
            if let Some(c) = cams(&s.train).intersection(&cams(&test)).next() {
                return Err(format!("open_scene: camera {c} on both sides"));
            }
        }
        Protocol::DayNight => {
            if let Some(r) = s.train.iter().find(|r| r.tod != Tod::Day) {
                return Err(format!("day_night: non-day train record '{}'", r.path));
            }
            if let Some(r) = test.iter().find(|r| r.tod != Tod::Night) {
                return Err(format!("day_night: non-night test record '{}'", r.path));
            }
            if let Some(sc) = scenes(&s.train).intersection(&scenes(&test)).next() {
                return Err(format!("day_night: scene {sc} on both sides"));
            }
        }
        Protocol::CloseScene => {}
    }
    for q in &s.query {
        if !s.gallery.iter().any(|g| g.pid == q.pid && g.cam != q.cam) {
            return Err(format!("query '{}' lacks a cross-camera positive", q.path));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn rec(path: &str, pid: usize, cam: usize, scene: usize, tod: Tod) -> Record {
        Record { path: path.to_string(), pid, cam, scene, ts: 0, tod }
    }

    /// Manifest with guaranteed satisfiability for all three protocols:
    /// identities live in two home scenes, cameras are scene-local, and both
    /// day and night appear everywhere.
    fn rich_manifest(rng: &mut Rng) -> Vec<Record> {
        let scenes = 4 + rng.range(3);
        let cams_per_scene = 2 + rng.range(2);
        let pids = 8 + rng.range(8);
        let imgs = 6 + rng.range(6);
        let mut out = Vec::new();
        for pid in 0..pids {
            let home = pid % scenes;
            for k in 0..imgs {
                let scene = (home + k % 2) % scenes;
                let cam = scene * cams_per_scene + (k / 2) % cams_per_scene;
                let tod = if (k / 4) % 2 == 0 { Tod::Day } else { Tod::Night };
                out.push(rec(
                    &format!("img_{pid}_{k}.png"),
                    pid,
                    cam,
                    scene,
                    tod,
                ));
            }
        }
        out
    }

    #[test]
    fn one_camera_spanning_every_scene_is_a_protocol_error() {
        // Every record shares camera 0, so the cross-side repair drops all
        // of them; the protocol must report that, not panic.
        let records: Vec<Record> = (0..6)
            .map(|pid| rec(&format!("{pid}.png"), pid, 0, pid % 2, Tod::Day))
            .collect();
        let err = split(&records, Protocol::OpenScene, SplitRatios::default(), 5).unwrap_err();
        assert!(err.to_string().contains("camera"), "{err}");
    }

    #[test]
    fn manifest_roundtrip_and_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.jsonl");

        fs::write(&path, "").unwrap();
        assert!(parse_manifest(&path).unwrap().is_empty());

        let one = rec("a.png", 3, 1, 0, Tod::Day);
        write_manifest(&path, std::slice::from_ref(&one)).unwrap();
        let parsed = parse_manifest(&path).unwrap();
        assert_eq!(parsed, vec![one.clone()]);

        fs::write(&path, r#"{"path":"a.png","cam":1,"scene":0,"ts":0,"tod":"day"}"#).unwrap();
        let err = parse_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("pid"), "{err}");

        fs::write(
            &path,
            r#"{"path":"a.png","pid":1,"cam":1,"scene":0,"ts":0,"tod":"dusk"}"#,
        )
        .unwrap();
        let err = parse_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("dusk"), "{err}");

        write_manifest(&path, &[one.clone(), one]).unwrap();
        let err = parse_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("duplicate") && err.contains("line 2"), "{err}");
    }

    #[test]
    fn split_invariants_over_random_manifests() {
        let mut rng = Rng::new(500);
        for trial in 0..25 {
            let records = rich_manifest(&mut rng);
            for protocol in [Protocol::CloseScene, Protocol::OpenScene, Protocol::DayNight] {
                let s = split(&records, protocol, SplitRatios::default(), trial).unwrap();
                if let Err(why) = check_split_invariants(&s) {
                    panic!("trial {trial} {protocol}: {why}");
                }
                let placed = s.train.len() + s.query.len() + s.gallery.len() + s.dropped.len();
                assert_eq!(placed, records.len(), "trial {trial} {protocol}: record leak");
            }
        }
    }

    #[test]
    fn split_is_deterministic() {
        let mut rng = Rng::new(501);
        let records = rich_manifest(&mut rng);
        for protocol in [Protocol::CloseScene, Protocol::OpenScene, Protocol::DayNight] {
            let a = split(&records, protocol, SplitRatios::default(), 9).unwrap();
            let b = split(&records, protocol, SplitRatios::default(), 9).unwrap();
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        }
    }

    #[test]
    fn open_scene_partitions_scenes_exhaustively() {
        let mut records = Vec::new();
        for scene in 0..4 {
            for pid in 0..4 {
                for k in 0..2 {
                    records.push(rec(
                        &format!("s{scene}_p{pid}_{k}.png"),
                        scene * 4 + pid,
                        scene * 2 + k,
                        scene,
                        Tod::Day,
                    ));
                }
            }
        }
        let s = split(&records, Protocol::OpenScene, SplitRatios { train: 0.5 }, 3).unwrap();
        let train_scenes: BTreeSet<usize> = s.train.iter().map(|r| r.scene).collect();
        let mut test_scenes: BTreeSet<usize> = s.query.iter().map(|r| r.scene).collect();
        test_scenes.extend(s.gallery.iter().map(|r| r.scene));
        assert!(train_scenes.is_disjoint(&test_scenes));
        let mut all: BTreeSet<usize> = train_scenes;
        all.extend(test_scenes);
        assert_eq!(all, (0..4).collect::<BTreeSet<_>>());
        // identities never straddle scenes here, so nothing should drop
        assert!(s.dropped.is_empty(), "{:?}", s.dropped);
    }

    #[test]
    fn single_camera_pid_yields_no_query() {
        // pid 0 only ever seen by camera 0; pids 1/2 give the protocol
        // something to split
        let records = vec![
            rec("a0.png", 0, 0, 0, Tod::Day),
            rec("a1.png", 0, 0, 1, Tod::Day),
            rec("b0.png", 1, 0, 0, Tod::Day),
            rec("b1.png", 1, 1, 0, Tod::Day),
            rec("b2.png", 1, 0, 1, Tod::Day),
            rec("b3.png", 1, 1, 1, Tod::Day),
            rec("c0.png", 2, 0, 0, Tod::Day),
            rec("c1.png", 2, 1, 0, Tod::Day),
            rec("c2.png", 2, 0, 1, Tod::Day),
            rec("c3.png", 2, 1, 1, Tod::Day),
        ];
        for seed in 0..10 {
            let s = split(&records, Protocol::CloseScene, SplitRatios { train: 0.34 }, seed).unwrap();
            assert!(s.query.iter().all(|q| q.pid != 0), "seed {seed}");
            check_split_invariants(&s).unwrap();
        }
    }

    #[test]
    fn day_night_requires_night_records() {
        let records =
            vec![rec("a.png", 0, 0, 0, Tod::Day), rec("b.png", 1, 1, 1, Tod::Day)];
        let err = split(&records, Protocol::DayNight, SplitRatios::default(), 0).unwrap_err();
        assert!(err.to_string().contains("night"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn split_save_writes_expected_files() {
        let mut rng = Rng::new(502);
        let records = rich_manifest(&mut rng);
        let s = split(&records, Protocol::OpenScene, SplitRatios::default(), 1).unwrap();
        let dir = tempdir().unwrap();
        s.save(dir.path()).unwrap();
        for name in ["train.jsonl", "query.jsonl", "gallery.jsonl", "summary.json"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let train = parse_manifest(&dir.path().join("train.jsonl")).unwrap();
        assert_eq!(train, s.train);
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["counts"]["query"], s.query.len());
    }

    fn tiny_synth() -> SynthConfig {
        SynthConfig {
            num_domains: 2,
            ids_per_domain: 2,
            imgs_per_id: 10,
            size: 16,
            scenes_per_domain: 2,
            cams_per_scene: 2,
            styles: vec![
                DomainStyle { hue: 20.0, gamma: 1.0, noise: 0.0 },
                DomainStyle { hue: 200.0, gamma: 1.0, noise: 0.0 },
            ],
            seed: 7,
        }
    }

    #[test]
    fn synth_is_byte_identical_under_seed() {
        let cfg = tiny_synth();
        let (d1, d2) = (tempdir().unwrap(), tempdir().unwrap());
        synth_generate(&cfg, d1.path(), &Rng::new(cfg.seed)).unwrap();
        synth_generate(&cfg, d2.path(), &Rng::new(cfg.seed)).unwrap();
        let m1 = fs::read(d1.path().join("manifest.jsonl")).unwrap();
        let m2 = fs::read(d2.path().join("manifest.jsonl")).unwrap();
        assert_eq!(m1, m2);
        for entry in fs::read_dir(d1.path().join("images")).unwrap() {
            let p1 = entry.unwrap().path();
            let p2 = d2.path().join("images").join(p1.file_name().unwrap());
            assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap(), "{p1:?}");
        }
    }

    #[test]
    fn synth_every_pid_crosses_scenes_and_cams() {
        let cfg = tiny_synth();
        let dir = tempdir().unwrap();
        let summary = synth_generate(&cfg, dir.path(), &Rng::new(cfg.seed)).unwrap();
        assert_eq!(summary.images, cfg.total_images());
        let records = parse_manifest(&summary.manifest).unwrap();
        assert_eq!(records.len(), cfg.total_images());
        let mut scenes_of: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        let mut cams_of: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for r in &records {
            scenes_of.entry(r.pid).or_default().insert(r.scene);
            cams_of.entry(r.pid).or_default().insert(r.cam);
            assert!(dir.path().join(&r.path).exists(), "{}", r.path);
        }
        for (pid, scenes) in &scenes_of {
            assert!(scenes.len() >= 2, "pid {pid} in {} scene(s)", scenes.len());
            assert!(cams_of[pid].len() >= 2, "pid {pid} under one camera");
        }
    }

    #[test]
    fn noiseless_same_slot_images_are_pixel_identical() {
        // slots repeat every scenes×cams×2 images; k=0 and k=8 share
        // (scene, cam, tod) exactly
        let cfg = tiny_synth();
        let dir = tempdir().unwrap();
        synth_generate(&cfg, dir.path(), &Rng::new(cfg.seed)).unwrap();
        let a = fs::read(dir.path().join("images/p0000_s0_c0_d_00.png")).unwrap();
        let b = fs::read(dir.path().join("images/p0000_s0_c0_d_08.png")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gamma_darkens_mean_intensity() {
        let mut bright = tiny_synth();
        bright.styles[0].gamma = 0.5;
        let mut dark = tiny_synth();
        dark.styles[0].gamma = 2.0;
        let (d1, d2) = (tempdir().unwrap(), tempdir().unwrap());
        synth_generate(&bright, d1.path(), &Rng::new(1)).unwrap();
        synth_generate(&dark, d2.path(), &Rng::new(1)).unwrap();
        let mean_of = |dir: &Path| {
            let t = load_image(&dir.join("images/p0000_s0_c0_d_00.png")).unwrap();
            t.data().iter().sum::<f64>() / t.numel() as f64
        };
        assert!(mean_of(d1.path()) > mean_of(d2.path()));
    }

    #[test]
    fn load_image_roundtrips_quantized_values() {
        let cfg = tiny_synth();
        let dir = tempdir().unwrap();
        synth_generate(&cfg, dir.path(), &Rng::new(cfg.seed)).unwrap();
        let t = load_image(&dir.path().join("images/p0000_s0_c0_d_00.png")).unwrap();
        assert_eq!(t.shape(), [3, 16, 16]);
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn synth_config_validation() {
        let mut cfg = tiny_synth();
        cfg.num_domains = 1;
        cfg.styles.truncate(1);
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("≥ 2"), "{err}");
        let mut cfg = tiny_synth();
        cfg.styles.pop();
        assert!(cfg.validate().is_err());
    }
}
