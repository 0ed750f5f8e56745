//! Dense optical flow (Horn–Schunck over a Gaussian pyramid with warping),
//! dataset-level flow caches and motion statistics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{self, DatasetHandle};
use crate::error::{Error, Result};
use crate::hashing;
use crate::image::{Image, MIN_SIDE};

pub const FLOW_MAGIC: &[u8; 4] = b"FLO1";

/// Per-frame p99 magnitude below which a frame counts as small motion.
pub const SMALL_MOTION_PX: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
        }
    }

    pub fn uniform(height: usize, width: usize, u: f32, v: f32) -> Self {
        Self {
            height,
            width,
            u: vec![u; height * width],
            v: vec![v; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn magnitudes(&self) -> Vec<f32> {
        self.u.iter().zip(&self.v).map(|(u, v)| u.hypot(*v)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }

    /// Bilinear resampling to `height × width`. Displacements keep their
    /// original pixel units.
    pub fn resample(&self, height: usize, width: usize) -> FlowField {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let u = resample_plane(&self.u, self.height, self.width, height, width);
        let v = resample_plane(&self.v, self.height, self.width, height, width);
        FlowField { height, width, u, v }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub alpha: f32,
    pub iterations: usize,
    pub pyramid_levels: usize,
    pub k: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            alpha: 15.0,
            iterations: 100,
            pyramid_levels: 3,
            k: 16,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("flow alpha must be positive, got {}", self.alpha)));
        }
        if self.iterations == 0 || self.pyramid_levels == 0 || self.k == 0 {
            return Err(Error::Config(
                "flow iterations, pyramid_levels and k must all be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn hash(&self) -> u64 {
        hashing::hash_u64(self)
    }
}

// Single-channel float plane used inside the solver.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    d: Vec<f32>,
}

impl Plane {
    fn at(&self, r: usize, c: usize) -> f32 {
        self.d[r * self.w + c]
    }

    fn bilinear(&self, x: f32, y: f32) -> f32 {
        let x = x.clamp(0.0, (self.w - 1) as f32);
        let y = y.clamp(0.0, (self.h - 1) as f32);
        // non-negative after clamping, so truncation is floor
        let x0 = x as usize;
        let y0 = y as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x1) * fx;
        let bot = self.at(y1, x0) * (1.0 - fx) + self.at(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

fn resample_plane(src: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    let p = Plane { h, w, d: src.to_vec() };
    let sy = h as f32 / nh as f32;
    let sx = w as f32 / nw as f32;
    let mut out = Vec::with_capacity(nh * nw);
    for r in 0..nh {
        let y = (r as f32 + 0.5) * sy - 0.5;
        for c in 0..nw {
            out.push(p.bilinear((c as f32 + 0.5) * sx - 0.5, y));
        }
    }
    out
}

// 5-tap binomial blur with replicated borders, then keep every other pixel.
fn blur_downsample(p: &Plane) -> Plane {
    const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (h, w) = (p.h, p.w);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (j, k) in K.iter().enumerate() {
                acc += k * p.at(r, clamp(c as isize + j as isize - 2, w));
            }
            tmp[r * w + c] = acc;
        }
    }
    let (nh, nw) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0f32; nh * nw];
    for r in 0..nh {
        for c in 0..nw {
            let mut acc = 0.0;
            for (j, k) in K.iter().enumerate() {
                acc += k * tmp[clamp(2 * r as isize + j as isize - 2, h) * w + 2 * c];
            }
            out[r * nw + c] = acc;
        }
    }
    Plane { h: nh, w: nw, d: out }
}

// Central differences with replicated borders.
fn gradients(p: &Plane) -> (Vec<f32>, Vec<f32>) {
    let (h, w) = (p.h, p.w);
    let mut gx = vec![0.0f32; h * w];
    let mut gy = vec![0.0f32; h * w];
    for r in 0..h {
        let up = r.saturating_sub(1);
        let dn = (r + 1).min(h - 1);
        for c in 0..w {
            let lf = c.saturating_sub(1);
            let rt = (c + 1).min(w - 1);
            gx[r * w + c] = 0.5 * (p.at(r, rt) - p.at(r, lf));
            gy[r * w + c] = 0.5 * (p.at(dn, c) - p.at(up, c));
        }
    }
    (gx, gy)
}

fn warp(b: &Plane, u: &[f32], v: &[f32]) -> Plane {
    let mut d = Vec::with_capacity(b.h * b.w);
    for r in 0..b.h {
        for c in 0..b.w {
            let i = r * b.w + c;
            d.push(b.bilinear(c as f32 + u[i], r as f32 + v[i]));
        }
    }
    Plane { h: b.h, w: b.w, d }
}

fn warp_error(a: &Plane, b: &Plane, u: &[f32], v: &[f32]) -> f64 {
    let bw = warp(b, u, v);
    bw.d.iter()
        .zip(&a.d)
        .map(|(x, y)| {
            let e = (x - y) as f64;
            e * e
        })
        .sum::<f64>()
        / a.d.len() as f64
}

// Flow component stored with a one-pixel replicated border so that the
// Horn–Schunck neighbourhood average needs no bounds logic.
struct Padded {
    h: usize,
    w: usize,
    d: Vec<f32>,
}

impl Padded {
    fn from_plane(src: &[f32], h: usize, w: usize) -> Self {
        let mut p = Self {
            h,
            w,
            d: vec![0.0; (h + 2) * (w + 2)],
        };
        for r in 0..h {
            p.d[(r + 1) * (w + 2) + 1..(r + 1) * (w + 2) + 1 + w].copy_from_slice(&src[r * w..(r + 1) * w]);
        }
        p.refresh_border();
        p
    }

    fn refresh_border(&mut self) {
        let (h, pw) = (self.h, self.w + 2);
        for r in 1..=h {
            let row = r * pw;
            self.d[row] = self.d[row + 1];
            self.d[row + pw - 1] = self.d[row + pw - 2];
        }
        self.d.copy_within(pw..2 * pw, 0);
        self.d.copy_within(h * pw..(h + 1) * pw, (h + 1) * pw);
    }

    fn to_plane(&self) -> Vec<f32> {
        let pw = self.w + 2;
        (1..=self.h)
            .flat_map(|r| self.d[r * pw + 1..r * pw + 1 + self.w].iter().copied())
            .collect()
    }
}

// Per-pixel linearised data term:
// flow = avg − grad·(grad·(avg − flow0) + It)/(α² + |grad|²).
struct DataTerm {
    ix: Vec<f32>,
    iy: Vec<f32>,
    it: Vec<f32>,
    inv_denom: Vec<f32>,
}

// One Jacobi sweep from (u, v) into (nu, nv); averages weigh edges 1/6 and corners 1/12.
fn jacobi_sweep(dt: &DataTerm, u0: &[f32], v0: &[f32], u: &Padded, v: &Padded, nu: &mut Padded, nv: &mut Padded) {
    let (h, w) = (u.h, u.w);
    let pw = w + 2;
    for r in 0..h {
        let (up, me, dn) = (r * pw, (r + 1) * pw, (r + 2) * pw);
        let (uu, um, ud) = (&u.d[up..up + pw], &u.d[me..me + pw], &u.d[dn..dn + pw]);
        let (vu, vm, vd) = (&v.d[up..up + pw], &v.d[me..me + pw], &v.d[dn..dn + pw]);
        let o = r * w;
        let (ix, iy, it, id) = (
            &dt.ix[o..o + w],
            &dt.iy[o..o + w],
            &dt.it[o..o + w],
            &dt.inv_denom[o..o + w],
        );
        let (u0r, v0r) = (&u0[o..o + w], &v0[o..o + w]);
        let nur = &mut nu.d[me + 1..me + 1 + w];
        let nvr = &mut nv.d[me + 1..me + 1 + w];
        for c in 0..w {
            let ub = (uu[c + 1] + ud[c + 1] + um[c] + um[c + 2]) * (1.0 / 6.0)
                + (uu[c] + uu[c + 2] + ud[c] + ud[c + 2]) * (1.0 / 12.0);
            let vb = (vu[c + 1] + vd[c + 1] + vm[c] + vm[c + 2]) * (1.0 / 6.0)
                + (vu[c] + vu[c + 2] + vd[c] + vd[c + 2]) * (1.0 / 12.0);
            let t = (ix[c] * (ub - u0r[c]) + iy[c] * (vb - v0r[c]) + it[c]) * id[c];
            nur[c] = ub - ix[c] * t;
            nvr[c] = vb - iy[c] * t;
        }
    }
    nu.refresh_border();
    nv.refresh_border();
}

// Horn–Schunck refinement of (u, v) on one pyramid level after warping `b` by it.
fn refine_level(a: &Plane, b: &Plane, u0: &[f32], v0: &[f32], alpha: f32, iterations: usize) -> (Vec<f32>, Vec<f32>) {
    let (h, w) = (a.h, a.w);
    let bw = warp(b, u0, v0);
    let (ax, ay) = gradients(a);
    let (bx, by) = gradients(&bw);
    let n = h * w;
    let ix: Vec<f32> = (0..n).map(|i| 0.5 * (ax[i] + bx[i])).collect();
    let iy: Vec<f32> = (0..n).map(|i| 0.5 * (ay[i] + by[i])).collect();
    let it: Vec<f32> = (0..n).map(|i| bw.d[i] - a.d[i]).collect();
    let a2 = alpha * alpha;
    let inv_denom = (0..n).map(|i| 1.0 / (a2 + ix[i] * ix[i] + iy[i] * iy[i])).collect();
    let dt = DataTerm { ix, iy, it, inv_denom };

    let mut u = Padded::from_plane(u0, h, w);
    let mut v = Padded::from_plane(v0, h, w);
    let mut nu = Padded::from_plane(u0, h, w);
    let mut nv = Padded::from_plane(v0, h, w);
    for _ in 0..iterations {
        jacobi_sweep(&dt, u0, v0, &u, &v, &mut nu, &mut nv);
        std::mem::swap(&mut u, &mut nu);
        std::mem::swap(&mut v, &mut nv);
    }
    (u.to_plane(), v.to_plane())
}

fn upsample_flow(u: &[f32], v: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> (Vec<f32>, Vec<f32>) {
    let sx = nw as f32 / w as f32;
    let sy = nh as f32 / h as f32;
    let mut uu = resample_plane(u, h, w, nh, nw);
    let mut vv = resample_plane(v, h, w, nh, nw);
    uu.iter_mut().for_each(|x| *x *= sx);
    vv.iter_mut().for_each(|x| *x *= sy);
    (uu, vv)
}

/// Dense flow `(u, v)` such that `b(x + u) ≈ a(x)`, in pixels of the input.
///
/// Coarse-to-fine: each level warps `b` by the upsampled coarser estimate and
/// refines it. A level's result is kept only if it does not raise the
/// full-resolution warp error, so that error never increases across levels.
pub fn estimate_flow(a: &Image, b: &Image, cfg: &FlowConfig) -> Result<FlowField> {
    cfg.validate()?;
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Dimension(format!(
            "flow between {}x{} and {}x{} images",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    if a.height() < MIN_SIDE || a.width() < MIN_SIDE {
        return Err(Error::Dimension(format!(
            "flow needs images of at least {MIN_SIDE}x{MIN_SIDE}, got {}x{}",
            a.height(),
            a.width()
        )));
    }
    let (h, w) = (a.height(), a.width());
    let mut pa = vec![Plane { h, w, d: a.to_gray() }];
    let mut pb = vec![Plane { h, w, d: b.to_gray() }];
    while pa.len() < cfg.pyramid_levels {
        let last = pa.last().expect("pyramid seeded");
        if last.h.div_ceil(2) < MIN_SIDE || last.w.div_ceil(2) < MIN_SIDE {
            break;
        }
        let na = blur_downsample(last);
        let nb = blur_downsample(pb.last().expect("pyramid seeded"));
        pa.push(na);
        pb.push(nb);
    }

    let top = pa.len() - 1;
    let (th, tw) = (pa[top].h, pa[top].w);
    let mut u = vec![0.0f32; th * tw];
    let mut v = vec![0.0f32; th * tw];
    let mut best_err = warp_error(&pa[0], &pb[0], &vec![0.0; h * w], &vec![0.0; h * w]);
    for level in (0..=top).rev() {
        let (lh, lw) = (pa[level].h, pa[level].w);
        if level != top {
            let (ph, pw) = (pa[level + 1].h, pa[level + 1].w);
            (u, v) = upsample_flow(&u, &v, ph, pw, lh, lw);
        }
        let (cu, cv) = refine_level(&pa[level], &pb[level], &u, &v, cfg.alpha, cfg.iterations);
        let err = if level == 0 {
            warp_error(&pa[0], &pb[0], &cu, &cv)
        } else {
            let (fu, fv) = upsample_flow(&cu, &cv, lh, lw, h, w);
            warp_error(&pa[0], &pb[0], &fu, &fv)
        };
        if err <= best_err {
            best_err = err;
            u = cu;
            v = cv;
        }
    }
    let field = FlowField { height: h, width: w, u, v };
    if !field.is_finite() {
        return Err(Error::Num(flowguide_numkit::NumError::NonFinite { op: "estimate_flow" }));
    }
    Ok(field)
}

/// Index of the frame paired with `t` under the clamped horizon rule.
pub fn horizon_partner(t: usize, k: usize, len: usize) -> usize {
    (t + k).min(len - 1)
}

/// One field per frame: frame `t` paired with `min(t + k, L − 1)`.
pub fn flow_for_trajectory(frames: &[Image], cfg: &FlowConfig) -> Result<Vec<FlowField>> {
    cfg.validate()?;
    let len = frames.len();
    (0..len)
        .into_par_iter()
        .map(|t| estimate_flow(&frames[t], &frames[horizon_partner(t, cfg.k, len)], cfg))
        .collect()
}

/// Flow fields for one trajectory as stored in a cache file.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowCache {
    pub k: usize,
    pub config_hash: u64,
    pub flows: Vec<FlowField>,
}

pub fn write_flow_cache(path: &Path, cache: &FlowCache) -> Result<()> {
    let (h, w) = cache
        .flows
        .first()
        .map(|f| (f.height, f.width))
        .unwrap_or((0, 0));
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut header = Vec::with_capacity(28);
    header.extend_from_slice(FLOW_MAGIC);
    for x in [h, w, cache.flows.len(), cache.k] {
        header.extend_from_slice(&(x as u32).to_le_bytes());
    }
    header.extend_from_slice(&cache.config_hash.to_le_bytes());
    out.write_all(&header).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(h * w * 8);
    for f in &cache.flows {
        if f.height != h || f.width != w {
            return Err(Error::Dimension(format!(
                "flow cache mixes {}x{} with {h}x{w} fields",
                f.height, f.width
            )));
        }
        buf.clear();
        for (u, v) in f.u.iter().zip(&f.v) {
            buf.extend_from_slice(&u.to_le_bytes());
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads only the header: `(H, W, count, k, config hash)`.
pub fn read_flow_header(path: &Path) -> Result<(usize, usize, usize, usize, u64)> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; 28];
    f.read_exact(&mut header)
        .map_err(|_| Error::format(path, "truncated flow cache header"))?;
    parse_flow_header(path, &header)
}

fn parse_flow_header(path: &Path, header: &[u8; 28]) -> Result<(usize, usize, usize, usize, u64)> {
    if &header[..4] != FLOW_MAGIC {
        return Err(Error::format(path, "not a FLO1 flow cache"));
    }
    let word = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let hash = u64::from_le_bytes(header[20..28].try_into().expect("8 bytes"));
    Ok((word(0), word(1), word(2), word(3), hash))
}

pub fn read_flow_cache(path: &Path) -> Result<FlowCache> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let mut header = [0u8; 28];
    input
        .read_exact(&mut header)
        .map_err(|_| Error::format(path, "truncated flow cache header"))?;
    let (h, w, count, k, config_hash) = parse_flow_header(path, &header)?;
    let mut flows = Vec::with_capacity(count);
    let mut buf = vec![0u8; h * w * 8];
    for i in 0..count {
        input
            .read_exact(&mut buf)
            .map_err(|_| Error::format(path, format!("flow cache truncated at field {i} of {count}")))?;
        let mut f = FlowField::zeros(h, w);
        for (j, px) in buf.chunks_exact(8).enumerate() {
            f.u[j] = f32::from_le_bytes(px[..4].try_into().expect("4 bytes"));
            f.v[j] = f32::from_le_bytes(px[4..].try_into().expect("4 bytes"));
        }
        flows.push(f);
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after flow fields"));
    }
    Ok(FlowCache { k, config_hash, flows })
}

/// Flow caches stored next to a dataset, one file per trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSet {
    pub dir: PathBuf,
    pub config: FlowConfig,
    pub config_hash: u64,
    /// Trajectory ids in dataset order; skipped ones are absent.
    pub trajectories: Vec<String>,
    pub skipped: Vec<String>,
}

impl FlowSet {
    pub fn path_for(&self, trajectory_id: &str) -> PathBuf {
        self.dir.join(format!("{trajectory_id}.flo"))
    }

    pub fn load(&self, trajectory_id: &str) -> Result<FlowCache> {
        let cache = read_flow_cache(&self.path_for(trajectory_id))?;
        if cache.config_hash != self.config_hash {
            return Err(Error::Stale(format!(
                "flow cache for {trajectory_id} was computed with a different flow config"
            )));
        }
        Ok(cache)
    }
}

pub fn flow_dir(dataset_dir: &Path, cfg: &FlowConfig) -> PathBuf {
    dataset_dir.join(format!("flow-{:016x}", cfg.hash()))
}

/// Computes and persists flow caches for every trajectory of a dataset.
///
/// Trajectories with fewer than two frames are skipped with a warning. Caches
/// whose header already matches the config hash and frame count are reused.
pub fn flow_for_dataset(d: &DatasetHandle, cfg: &FlowConfig) -> Result<FlowSet> {
    cfg.validate()?;
    let dir = flow_dir(d.dir(), cfg);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let hash = cfg.hash();
    let mut set = FlowSet {
        dir,
        config: *cfg,
        config_hash: hash,
        trajectories: Vec::new(),
        skipped: Vec::new(),
    };
    for entry in &d.manifest().trajectories {
        if entry.frames < 2 {
            log::warn!("skipping trajectory {}: {} frame(s)", entry.id, entry.frames);
            set.skipped.push(entry.id.clone());
            continue;
        }
        let path = set.path_for(&entry.id);
        let fresh = matches!(
            read_flow_header(&path),
            Ok((_, _, count, k, h)) if h == hash && count == entry.frames && k == cfg.k
        );
        if !fresh {
            let traj = datastore::read_trajectory(d, &entry.id)?;
            let frames: Vec<Image> = traj.frames.into_iter().map(|f| f.image).collect();
            let flows = flow_for_trajectory(&frames, cfg)?;
            write_flow_cache(
                &path,
                &FlowCache {
                    k: cfg.k,
                    config_hash: hash,
                    flows,
                },
            )?;
        }
        set.trajectories.push(entry.id.clone());
    }
    Ok(set)
}

/// Pixel-magnitude summary of one field.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeSummary {
    pub mean: f32,
    pub p50: f32,
    pub p90: f32,
    pub p99: f32,
    pub max: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowStats {
    pub frames: Vec<MagnitudeSummary>,
    /// Mean magnitude over every pixel of every frame.
    pub mean: f32,
    /// Median over frames of the per-frame p99.
    pub median_p99: f32,
    /// Per frame: p99 magnitude below [`SMALL_MOTION_PX`].
    pub small_motion: Vec<bool>,
}

impl FlowStats {
    pub fn small_motion_fraction(&self) -> f32 {
        if self.small_motion.is_empty() {
            return 0.0;
        }
        self.small_motion.iter().filter(|&&s| s).count() as f32 / self.small_motion.len() as f32
    }
}

// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f32], q: f32) -> f32 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q * sorted.len() as f32).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn magnitude_summary(f: &FlowField) -> MagnitudeSummary {
    let mut m = f.magnitudes();
    if m.is_empty() {
        return MagnitudeSummary::default();
    }
    let mean = (m.iter().map(|&x| x as f64).sum::<f64>() / m.len() as f64) as f32;
    m.sort_by(f32::total_cmp);
    MagnitudeSummary {
        mean,
        p50: percentile(&m, 0.5),
        p90: percentile(&m, 0.9),
        p99: percentile(&m, 0.99),
        max: *m.last().expect("non-empty"),
    }
}

pub fn flow_magnitude_stats(flows: &[FlowField]) -> FlowStats {
    let frames: Vec<MagnitudeSummary> = flows.iter().map(magnitude_summary).collect();
    let pixels: usize = flows.iter().map(FlowField::len).sum();
    let mean = if pixels == 0 {
        0.0
    } else {
        (frames
            .iter()
            .zip(flows)
            .map(|(s, f)| s.mean as f64 * f.len() as f64)
            .sum::<f64>()
            / pixels as f64) as f32
    };
    let mut p99s: Vec<f32> = frames.iter().map(|s| s.p99).collect();
    p99s.sort_by(f32::total_cmp);
    FlowStats {
        small_motion: frames.iter().map(|s| s.p99 < SMALL_MOTION_PX).collect(),
        median_p99: percentile(&p99s, 0.5),
        frames,
        mean,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(h: usize, w: usize, f: impl Fn(f32, f32) -> f32) -> Image {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(f(c as f32, r as f32).round().clamp(0.0, 255.0) as u8);
            }
        }
        Image::new(h, w, 1, data).unwrap()
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let a = texture(32, 32, |x, y| 128.0 + 60.0 * (x * 0.3).sin() * (y * 0.2).cos());
        let f = estimate_flow(&a, &a, &FlowConfig::default()).unwrap();
        assert!(f.u.iter().chain(&f.v).all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn rejects_small_and_mismatched_images() {
        let a = Image::filled(7, 7, [0, 0, 0]);
        assert!(estimate_flow(&a, &a, &FlowConfig::default()).is_err());
        let b = Image::filled(8, 9, [0, 0, 0]);
        let c = Image::filled(8, 8, [0, 0, 0]);
        assert!(estimate_flow(&b, &c, &FlowConfig::default()).is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = FlowConfig { alpha: 0.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = FlowConfig { k: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn clamped_horizon_pairs() {
        assert_eq!(horizon_partner(0, 16, 20), 16);
        assert_eq!(horizon_partner(3, 16, 20), 19);
        assert_eq!(horizon_partner(4, 16, 20), 19);
        assert_eq!(horizon_partner(19, 16, 20), 19);
        assert_eq!(horizon_partner(5, 1, 20), 6);
    }

    #[test]
    fn stats_of_uniform_and_zero_fields() {
        let s = flow_magnitude_stats(&[FlowField::uniform(4, 4, 3.0, 4.0)]);
        assert!((s.mean - 5.0).abs() < 1e-6);
        assert_eq!(s.frames[0].p50, 5.0);
        assert!(!s.small_motion[0]);
        let z = flow_magnitude_stats(&[FlowField::zeros(4, 4), FlowField::zeros(4, 4)]);
        assert_eq!(z.mean, 0.0);
        assert_eq!(z.frames[1], MagnitudeSummary::default());
        assert_eq!(z.small_motion_fraction(), 1.0);
    }

    #[test]
    fn resample_preserves_uniform_fields() {
        let f = FlowField::uniform(64, 64, 1.5, -2.0).resample(32, 32);
        assert_eq!(f.len(), 32 * 32);
        assert!(f.u.iter().all(|&x| (x - 1.5).abs() < 1e-6));
        assert!(f.v.iter().all(|&x| (x + 2.0).abs() < 1e-6));
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.flo");
        let mut a = FlowField::zeros(8, 9);
        a.u[3] = 1.25;
        a.v[70] = -0.5;
        let cache = FlowCache {
            k: 4,
            config_hash: 0xdead_beef_0123,
            flows: vec![a, FlowField::uniform(8, 9, 0.1, 0.2)],
        };
        write_flow_cache(&path, &cache).unwrap();
        assert_eq!(read_flow_cache(&path).unwrap(), cache);
        assert_eq!(read_flow_header(&path).unwrap(), (8, 9, 2, 4, 0xdead_beef_0123));
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 28 + 2 * 8 * 9 * 8);
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_flow_cache(&path), Err(Error::Format { .. })));
    }
}
