//! Latent-space scoring of prior frames against the target set, top-δ and KNN
//! selection, the proprio and state-action baselines, and stage histograms of
//! what was retrieved.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use flowguide_numkit::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{FrameLabel, SegmentRef, Trajectory, Usefulness};
use crate::error::{Error, Result};
use crate::flowfield::horizon_partner;
use crate::flowvae::Rows;

/// Prior rows per scoring tile.
const PRIOR_TILE: usize = 64;
/// Target rows per scoring tile.
const TARGET_TILE: usize = 128;

pub const HIST_BINS: usize = 10;

/// One prior frame: where it lives and what the generator said about it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    pub trajectory: String,
    pub index: usize,
    pub traj_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<FrameLabel>,
}

/// Frame references for every frame, in trajectory-then-index order.
pub fn frame_refs(trajectories: &[Trajectory]) -> Vec<FrameRef> {
    trajectories
        .iter()
        .flat_map(|t| {
            t.frames.iter().enumerate().map(move |(i, f)| FrameRef {
                trajectory: t.id.clone(),
                index: i,
                traj_len: t.len(),
                label: f.label,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTable {
    /// `S(s_i)`, one per prior frame; always `≤ 0`.
    pub scores: Vec<f32>,
    pub frames: Vec<FrameRef>,
}

impl SimilarityTable {
    pub fn new(scores: Vec<f32>, frames: Vec<FrameRef>) -> Result<Self> {
        if scores.len() != frames.len() {
            return Err(Error::Dimension(format!(
                "{} scores for {} frames",
                scores.len(),
                frames.len()
            )));
        }
        Ok(Self { scores, frames })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Frame indices by descending score, then trajectory id, then frame index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.rank_cmp(a, b));
        order
    }

    fn rank_cmp(&self, a: usize, b: usize) -> Ordering {
        self.scores[b]
            .total_cmp(&self.scores[a])
            .then_with(|| self.frames[a].trajectory.cmp(&self.frames[b].trajectory))
            .then_with(|| self.frames[a].index.cmp(&self.frames[b].index))
    }
}

fn check_tables(prior: &Rows, target: &Rows) -> Result<()> {
    if prior.is_empty() || target.is_empty() {
        return Err(Error::Data("scoring needs non-empty prior and target tables".into()));
    }
    if prior.dim != target.dim {
        return Err(Error::Dimension(format!(
            "prior latents have Z={} but target latents have Z={}",
            prior.dim, target.dim
        )));
    }
    if prior.data.iter().chain(&target.data).any(|x| !x.is_finite()) {
        return Err(Error::Data("latent tables contain non-finite values".into()));
    }
    Ok(())
}

/// Squared L2 distance, summed in coordinate order.
#[inline]
pub fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// `S(s_i) = −min_j ‖p_i − t_j‖₂` for every prior row, computed exactly.
///
/// The scan is tiled over prior and target rows and split across workers
/// along the prior axis; each prior row owns its running minimum.
pub fn score_prior(prior: &Rows, target: &Rows) -> Result<Vec<f32>> {
    check_tables(prior, target)?;
    let z = prior.dim;
    let mut best = vec![f32::INFINITY; prior.len()];
    best.par_chunks_mut(PRIOR_TILE).enumerate().for_each(|(tile, out)| {
        let base = tile * PRIOR_TILE;
        for t0 in (0..target.len()).step_by(TARGET_TILE) {
            let t1 = (t0 + TARGET_TILE).min(target.len());
            let tblock = &target.data[t0 * z..t1 * z];
            for (i, slot) in out.iter_mut().enumerate() {
                let p = prior.row(base + i);
                for t in tblock.chunks_exact(z) {
                    let d = sq_dist(p, t);
                    if d < *slot {
                        *slot = d;
                    }
                }
            }
        }
    });
    // sqrt is monotone and correctly rounded, so this equals the minimum of the distances
    Ok(best.into_iter().map(|d| -d.sqrt()).collect())
}

/// `⌈δN⌉`, treating products within rounding noise of an integer as that integer.
pub fn threshold_rank(delta: f64, n: usize) -> usize {
    let x = delta * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    TopPercent,
    Knn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    FlowLatent,
    Proprio,
    StateActionVae,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::FlowLatent => "flow",
            Baseline::Proprio => "proprio",
            Baseline::StateActionVae => "savae",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub delta: f64,
    pub strategy: Strategy,
    pub knn_k: usize,
    pub baseline: Baseline,
    /// Seeded uniform subsample of prior frames scored; `None` scores all.
    #[serde(default)]
    pub candidate_cap: Option<usize>,
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            delta: 0.35,
            strategy: Strategy::TopPercent,
            knn_k: 10,
            baseline: Baseline::FlowLatent,
            candidate_cap: None,
            seed: 0,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1], got {}", self.delta)));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be at least 1".into()));
        }
        if self.candidate_cap == Some(0) {
            return Err(Error::Config("candidate_cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSegment {
    pub segment: SegmentRef,
    pub score: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<FrameLabel>,
    /// Target frames whose neighbour lists contained this frame (KNN only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selected_by: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TieEntry {
    pub trajectory: String,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub strategy: Strategy,
    pub baseline: Baseline,
    pub delta: Option<f64>,
    pub knn_k: Option<usize>,
    /// Score of the `⌈δN⌉`-th ranked frame (top-δ only).
    pub eta: Option<f32>,
    /// Number of prior frames that were scored.
    pub n: usize,
    pub k: usize,
    pub segments: Vec<RetrievedSegment>,
    /// Frames whose score equals `η`; excluded by the strict comparison.
    pub ties: Vec<TieEntry>,
    pub warnings: Vec<String>,
    /// Content hashes of the inputs (config, model, data), by name.
    pub hashes: BTreeMap<String, String>,
    pub seed: u64,
}

impl RetrievalResult {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segment_refs(&self) -> Vec<SegmentRef> {
        self.segments.iter().map(|s| s.segment.clone()).collect()
    }

    /// `(trajectory, start)` of every retrieved frame, sorted.
    pub fn frame_set(&self) -> Vec<(String, usize)> {
        let mut v: Vec<_> = self
            .segments
            .iter()
            .map(|s| (s.segment.trajectory.clone(), s.segment.start))
            .collect();
        v.sort();
        v
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn segment_for(f: &FrameRef, score: f32, k: usize) -> RetrievedSegment {
    RetrievedSegment {
        segment: SegmentRef::clamped(f.trajectory.clone(), f.index, k, f.traj_len),
        score,
        label: f.label,
        selected_by: Vec::new(),
    }
}

fn empty_result(strategy: Strategy, n: usize, k: usize) -> RetrievalResult {
    RetrievalResult {
        strategy,
        baseline: Baseline::FlowLatent,
        delta: None,
        knn_k: None,
        eta: None,
        n,
        k,
        segments: Vec::new(),
        ties: Vec::new(),
        warnings: Vec::new(),
        hashes: BTreeMap::new(),
        seed: 0,
    }
}

/// Frames scoring strictly above `η`, the `⌈δN⌉`-th ranked score.
pub fn select_top_percent(table: &SimilarityTable, delta: f64, k: usize) -> Result<RetrievalResult> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Config(format!("delta must lie in (0, 1], got {delta}")));
    }
    let n = table.len();
    let mut out = empty_result(Strategy::TopPercent, n, k);
    out.delta = Some(delta);
    if n == 0 {
        out.warnings.push("empty similarity table".into());
        return Ok(out);
    }
    if delta * (n as f64) < 1.0 {
        let msg = format!("delta*N = {:.3} < 1; nothing can score above the top frame", delta * n as f64);
        log::warn!("{msg}");
        out.warnings.push(msg);
    }
    let order = table.ranking();
    let m = threshold_rank(delta, n).clamp(1, n);
    let eta = table.scores[order[m - 1]];
    out.eta = Some(eta);
    for &i in &order {
        let s = table.scores[i];
        if s > eta {
            out.segments.push(segment_for(&table.frames[i], s, k));
        } else if s == eta {
            out.ties.push(TieEntry {
                trajectory: table.frames[i].trajectory.clone(),
                index: table.frames[i].index,
            });
        } else {
            break;
        }
    }
    Ok(out)
}

/// Union of each target row's `knn_k` nearest prior rows; ties in distance
/// break by trajectory id then frame index.
pub fn select_knn(
    prior: &Rows,
    target: &Rows,
    frames: &[FrameRef],
    knn_k: usize,
    k: usize,
) -> Result<RetrievalResult> {
    check_tables(prior, target)?;
    if frames.len() != prior.len() {
        return Err(Error::Dimension(format!(
            "{} frame references for {} prior rows",
            frames.len(),
            prior.len()
        )));
    }
    if knn_k == 0 {
        return Err(Error::Config("knn_k must be at least 1".into()));
    }
    let n = prior.len();
    let mut out = empty_result(Strategy::Knn, n, k);
    out.knn_k = Some(knn_k);
    let kk = if knn_k > n {
        let msg = format!("knn_k = {knn_k} exceeds the {n} prior frames; clamped");
        log::warn!("{msg}");
        out.warnings.push(msg);
        n
    } else {
        knn_k
    };
    let cmp = |d: &[f32], a: usize, b: usize| {
        d[a].total_cmp(&d[b])
            .then_with(|| frames[a].trajectory.cmp(&frames[b].trajectory))
            .then_with(|| frames[a].index.cmp(&frames[b].index))
    };
    let neighbours: Vec<Vec<usize>> = (0..target.len())
        .into_par_iter()
        .map(|j| {
            let t = target.row(j);
            let d: Vec<f32> = (0..n).map(|i| sq_dist(prior.row(i), t)).collect();
            let mut idx: Vec<usize> = (0..n).collect();
            if kk < n {
                idx.select_nth_unstable_by(kk - 1, |&a, &b| cmp(&d, a, b));
                idx.truncate(kk);
            }
            idx.sort_by(|&a, &b| cmp(&d, a, b));
            idx
        })
        .collect();
    let mut chosen: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (j, list) in neighbours.iter().enumerate() {
        for &i in list {
            chosen.entry(i).or_default().push(j);
        }
    }
    let ids: Vec<usize> = chosen.keys().copied().collect();
    let scores = score_prior(&Rows {
        dim: prior.dim,
        data: ids.iter().flat_map(|&i| prior.row(i).iter().copied()).collect(),
    }, target)?;
    let sub = SimilarityTable::new(scores, ids.iter().map(|&i| frames[i].clone()).collect())?;
    for r in sub.ranking() {
        let mut seg = segment_for(&sub.frames[r], sub.scores[r], k);
        seg.selected_by = chosen[&ids[r]].clone();
        out.segments.push(seg);
    }
    Ok(out)
}

/// Sorted indices of a seeded uniform subsample of size `cap` from `0..n`.
pub fn candidate_subsample(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if cap < n {
        let mut rng = Rng::with_stream(seed, 0x6361_6e64);
        rng.shuffle(&mut idx);
        idx.truncate(cap);
        idx.sort_unstable();
    }
    idx
}

/// Scores and selects according to `cfg` over precomputed feature rows.
pub fn retrieve(
    prior: &Rows,
    target: &Rows,
    frames: &[FrameRef],
    cfg: &RetrievalConfig,
    k: usize,
) -> Result<RetrievalResult> {
    cfg.validate()?;
    if frames.len() != prior.len() {
        return Err(Error::Dimension(format!(
            "{} frame references for {} prior rows",
            frames.len(),
            prior.len()
        )));
    }
    let (prior, frames) = match cfg.candidate_cap {
        Some(cap) if cap < prior.len() => {
            let keep = candidate_subsample(prior.len(), cap, cfg.seed);
            let rows = Rows {
                dim: prior.dim,
                data: keep.iter().flat_map(|&i| prior.row(i).iter().copied()).collect(),
            };
            (rows, keep.iter().map(|&i| frames[i].clone()).collect::<Vec<_>>())
        }
        _ => (prior.clone(), frames.to_vec()),
    };
    let mut out = match cfg.strategy {
        Strategy::TopPercent => {
            let table = SimilarityTable::new(score_prior(&prior, target)?, frames)?;
            select_top_percent(&table, cfg.delta, k)?
        }
        Strategy::Knn => select_knn(&prior, target, &frames, cfg.knn_k, k)?,
    };
    out.baseline = cfg.baseline;
    out.seed = cfg.seed;
    Ok(out)
}

/// Per-frame features `(proprio_t, pos_{t+k} − pos_t)` with `t+k` clamped to the
/// trajectory end; the position is the first two proprio entries.
pub fn proprio_features(trajectories: &[Trajectory], k: usize) -> Result<Rows> {
    let dim = trajectories.first().map(|t| t.frames[0].proprio.len()).unwrap_or(0);
    if dim < 2 {
        return Err(Error::Data("proprio retrieval needs at least a 2-D position in the proprio vector".into()));
    }
    let mut rows = Rows::new(dim + 2);
    for t in trajectories {
        for i in 0..t.len() {
            let p = &t.frames[i].proprio;
            let q = &t.frames[horizon_partner(i, k, t.len())].proprio;
            if p.len() != dim || q.len() != dim {
                return Err(Error::Data(format!("trajectory {} has inconsistent proprio width", t.id)));
            }
            let mut row = p.clone();
            row.push(q[0] - p[0]);
            row.push(q[1] - p[1]);
            rows.push(&row)?;
        }
    }
    Ok(rows)
}

/// `S(s_i)` over proprio features.
pub fn score_proprio(prior: &[Trajectory], target: &[Trajectory], k: usize) -> Result<Vec<f32>> {
    score_prior(&proprio_features(prior, k)?, &proprio_features(target, k)?)
}

/// Inputs for the state-action VAE: the image average-pooled by `pool` (channel
/// first, centred on zero) followed by the action divided per dimension by
/// `action_scale`.
pub fn state_action_features(trajectories: &[Trajectory], pool: usize, action_scale: &[f32]) -> Result<Rows> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::Data("no trajectories to featurize".into()))?;
    let f0 = &first.frames[0];
    if pool == 0 || f0.image.height() % pool != 0 || f0.image.width() % pool != 0 {
        return Err(Error::Config(format!(
            "pool factor {pool} does not divide the {}x{} image",
            f0.image.height(),
            f0.image.width()
        )));
    }
    if action_scale.len() != f0.action.len() || action_scale.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Config("action scale needs one positive entry per action dimension".into()));
    }
    let dim = f0.image.channels() * (f0.image.height() / pool) * (f0.image.width() / pool) + f0.action.len();
    let mut rows = Rows::new(dim);
    for t in trajectories {
        for f in &t.frames {
            let mut row = f.image.pooled_chw(pool);
            row.extend(f.action.iter().zip(action_scale).map(|(a, s)| a / s));
            rows.push(&row)?;
        }
    }
    Ok(rows)
}

/// Counts of retrieved frames per stage-progress bin and usefulness class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageHistogram {
    /// `counts[bin][usefulness code]`
    pub counts: [[usize; 3]; HIST_BINS],
}

impl StageHistogram {
    pub fn add(&mut self, label: &FrameLabel) {
        let bin = ((label.stage_progress * HIST_BINS as f32) as usize).min(HIST_BINS - 1);
        self.counts[bin][label.usefulness.code() as usize] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn count(&self, u: Usefulness) -> usize {
        self.counts.iter().map(|b| b[u.code() as usize]).sum()
    }

    /// Fraction of counted frames with usefulness `u`; zero when empty.
    pub fn share(&self, u: Usefulness) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.count(u) as f64 / t as f64,
        }
    }

    pub fn bin_total(&self, bin: usize) -> usize {
        self.counts[bin].iter().sum()
    }

    pub fn nonzero_bins(&self) -> usize {
        (0..HIST_BINS).filter(|&b| self.bin_total(b) > 0).count()
    }

    /// `bin,label,count` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin,label,count\n");
        for (b, row) in self.counts.iter().enumerate() {
            for u in Usefulness::ALL {
                let _ = writeln!(s, "{b},{},{}", u.name(), row[u.code() as usize]);
            }
        }
        s
    }

    /// Grouped bar chart, one group per bin.
    pub fn to_svg(&self, title: &str) -> String {
        const W: f64 = 640.0;
        const H: f64 = 320.0;
        const LEFT: f64 = 48.0;
        const BOTTOM: f64 = 40.0;
        const TOP: f64 = 32.0;
        let colors = ["#3a7d44", "#c9a227", "#b23a48"];
        let max = self.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
        let plot_w = W - LEFT - 16.0;
        let plot_h = H - BOTTOM - TOP;
        let group = plot_w / HIST_BINS as f64;
        let bar = group / 4.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{LEFT}" y="18" font-size="13">{}</text>"#, escape(title));
        let base = H - BOTTOM;
        let _ = writeln!(
            s,
            r#"<line x1="{LEFT}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
            W - 16.0
        );
        let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{base}" stroke="black"/>"#);
        let _ = writeln!(s, r#"<text x="4" y="{}">{}</text>"#, TOP + 4.0, max as usize);
        let _ = writeln!(s, r#"<text x="4" y="{base}">0</text>"#);
        for (b, row) in self.counts.iter().enumerate() {
            let gx = LEFT + b as f64 * group;
            for (ci, u) in Usefulness::ALL.iter().enumerate() {
                let c = row[u.code() as usize] as f64;
                let h = plot_h * c / max;
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                    gx + bar * (0.5 + ci as f64),
                    base - h,
                    bar,
                    h,
                    colors[ci]
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                gx + group / 2.0,
                base + 14.0,
                b
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">stage progress bin</text>"#,
            LEFT + plot_w / 2.0,
            H - 8.0
        );
        for (ci, u) in Usefulness::ALL.iter().enumerate() {
            let x = W - 150.0;
            let y = TOP + 14.0 * ci as f64;
            let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, y - 9.0, colors[ci]);
            let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, x + 14.0, u.name());
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Stage histogram of a retrieval result. Every segment must carry a label.
pub fn analyze_retrieval(result: &RetrievalResult) -> Result<StageHistogram> {
    let mut h = StageHistogram::default();
    for s in &result.segments {
        let label = s.label.as_ref().ok_or_else(|| {
            Error::Data(format!(
                "retrieved frame {}:{} has no label; stage analysis needs the labeled synthetic benchmark (gen-data)",
                s.segment.trajectory, s.segment.start
            ))
        })?;
        h.add(label);
    }
    Ok(h)
}

/// Stage histogram of every labeled frame.
pub fn label_distribution(frames: &[FrameRef]) -> Result<StageHistogram> {
    let mut h = StageHistogram::default();
    for f in frames {
        let label = f.label.as_ref().ok_or_else(|| {
            Error::Data(format!(
                "frame {}:{} has no label; stage analysis needs the labeled synthetic benchmark (gen-data)",
                f.trajectory, f.index
            ))
        })?;
        h.add(label);
    }
    Ok(h)
}

/// KNN versus top-δ at the same retrieval volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub knn_k: usize,
    pub target_frames: usize,
    /// Target frames with at least one retrieved neighbour.
    pub target_frames_covered: usize,
    pub knn_retrieved: usize,
    pub knn_nonzero_bins: usize,
    pub matched_delta: f64,
    pub top_retrieved: usize,
    pub top_nonzero_bins: usize,
    pub knn_hist: StageHistogram,
    pub top_hist: StageHistogram,
}

impl CoverageReport {
    pub fn coverage_ok(&self) -> bool {
        self.target_frames_covered == self.target_frames && self.knn_nonzero_bins == HIST_BINS
    }
}

/// Runs KNN and a volume-matched top-δ selection over the same rows.
pub fn knn_coverage(
    prior: &Rows,
    target: &Rows,
    frames: &[FrameRef],
    knn_k: usize,
    k: usize,
) -> Result<CoverageReport> {
    let knn = select_knn(prior, target, frames, knn_k, k)?;
    let mut covered = vec![false; target.len()];
    for s in &knn.segments {
        for &j in &s.selected_by {
            covered[j] = true;
        }
    }
    // top-δ keeps ⌈δN⌉ − 1 frames, so aim one past the KNN volume
    let matched_delta = ((knn.len() + 1) as f64 / prior.len() as f64).min(1.0);
    let table = SimilarityTable::new(score_prior(prior, target)?, frames.to_vec())?;
    let top = select_top_percent(&table, matched_delta, k)?;
    let knn_hist = analyze_retrieval(&knn)?;
    let top_hist = analyze_retrieval(&top)?;
    Ok(CoverageReport {
        knn_k,
        target_frames: target.len(),
        target_frames_covered: covered.iter().filter(|c| **c).count(),
        knn_retrieved: knn.len(),
        knn_nonzero_bins: knn_hist.nonzero_bins(),
        matched_delta,
        top_retrieved: top.len(),
        top_nonzero_bins: top_hist.nonzero_bins(),
        knn_hist,
        top_hist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::Stage;

    fn refs(n: usize) -> Vec<FrameRef> {
        (0..n)
            .map(|i| FrameRef {
                trajectory: format!("t{:02}", i / 5),
                index: i % 5,
                traj_len: 5,
                label: None,
            })
            .collect()
    }

    #[test]
    fn identical_latent_scores_zero() {
        let p = Rows::from_vecs(2, &[vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let t = Rows::from_vecs(2, &[vec![1.0, 2.0]]).unwrap();
        assert_eq!(score_prior(&p, &t).unwrap()[0], 0.0);
    }

    #[test]
    fn distances_one_and_two() {
        let p = Rows::from_vecs(2, &[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let t = Rows::from_vecs(2, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(score_prior(&p, &t).unwrap(), vec![-1.0, -2.0]);
    }

    #[test]
    fn z_mismatch_is_an_error() {
        let p = Rows::from_vecs(2, &[vec![1.0, 0.0]]).unwrap();
        let t = Rows::from_vecs(3, &[vec![0.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(score_prior(&p, &t), Err(Error::Dimension(_))));
    }

    #[test]
    fn ten_scores_at_035() {
        let scores: Vec<f32> = (0..10).map(|i| -(i as f32)).collect();
        let table = SimilarityTable::new(scores, refs(10)).unwrap();
        let r = select_top_percent(&table, 0.35, 4).unwrap();
        assert_eq!(r.eta, Some(-3.0));
        assert_eq!(r.len(), 3);
        assert_eq!(r.ties.len(), 1);
    }

    #[test]
    fn delta_one_excludes_minimum() {
        let scores = vec![-1.0, -3.0, -2.0, -3.0];
        let table = SimilarityTable::new(scores, refs(4)).unwrap();
        let r = select_top_percent(&table, 1.0, 2).unwrap();
        assert_eq!(r.eta, Some(-3.0));
        assert_eq!(r.len(), 2);
        assert_eq!(r.ties.len(), 2);
    }

    #[test]
    fn tiny_delta_is_empty_with_warning() {
        let table = SimilarityTable::new(vec![-1.0, -2.0], refs(2)).unwrap();
        let r = select_top_percent(&table, 0.1, 2).unwrap();
        assert!(r.is_empty());
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn threshold_rank_ignores_rounding_noise() {
        assert_eq!(threshold_rank(0.35, 10), 4);
        assert_eq!(threshold_rank(0.07, 100), 7);
        assert_eq!(threshold_rank(0.1, 10), 1);
        assert_eq!(threshold_rank(1.0, 7), 7);
        assert_eq!(threshold_rank(0.01, 1000), 10);
    }

    #[test]
    fn knn_single_target() {
        let p = Rows::from_vecs(1, &[vec![0.0], vec![5.0], vec![1.0]]).unwrap();
        let t = Rows::from_vecs(1, &[vec![0.9]]).unwrap();
        let r = select_knn(&p, &t, &refs(3), 1, 2).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.segments[0].segment.start, 2);
        assert_eq!(r.segments[0].selected_by, vec![0]);
        let clamped = select_knn(&p, &t, &refs(3), 9, 2).unwrap();
        assert_eq!(clamped.len(), 3);
        assert_eq!(clamped.warnings.len(), 1);
    }

    #[test]
    fn segments_clamp_at_tail() {
        let table = SimilarityTable::new(vec![0.0, -1.0], refs(2)).unwrap();
        let r = select_top_percent(&table, 1.0, 16).unwrap();
        assert_eq!(r.segments[0].segment, SegmentRef::new("t00", 0, 5));
    }

    #[test]
    fn histogram_bins_and_unlabeled_error() {
        let mut h = StageHistogram::default();
        for p in [0.0, 0.05, 0.5, 1.0] {
            h.add(&FrameLabel {
                stage: Stage::Reach,
                usefulness: Usefulness::Useful,
                stage_progress: p,
            });
        }
        assert_eq!(h.bin_total(0), 2);
        assert_eq!(h.bin_total(5), 1);
        assert_eq!(h.bin_total(9), 1);
        assert_eq!(h.to_csv().lines().count(), 31);
        assert!(h.to_svg("x").starts_with("<svg"));
        let table = SimilarityTable::new(vec![0.0, -1.0], refs(2)).unwrap();
        let r = select_top_percent(&table, 1.0, 1).unwrap();
        assert!(analyze_retrieval(&r).is_err());
        let empty = select_top_percent(&table, 0.5, 1).unwrap();
        assert_eq!(analyze_retrieval(&empty).unwrap().total(), 0);
    }
}
