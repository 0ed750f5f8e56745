//! On-disk trajectory datasets: a JSON manifest plus one fixed-record binary
//! blob per trajectory, segment reads, and the co-training sampler.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use flowguide_numkit::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const TRAJ_MAGIC: &[u8; 4] = b"TRJ1";
pub const MANIFEST: &str = "manifest.json";
const HEADER_LEN: u64 = 32;
const LABEL_LEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Reach,
    PickUp,
    Transfer,
    Place,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Reach, Stage::PickUp, Stage::Transfer, Stage::Place];

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Reach => "reach",
            Stage::PickUp => "pick_up",
            Stage::Transfer => "transfer",
            Stage::Place => "place",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Usefulness {
    Useful,
    NonHarmful,
    Adversarial,
}

impl Usefulness {
    pub const ALL: [Usefulness; 3] = [Usefulness::Useful, Usefulness::NonHarmful, Usefulness::Adversarial];

    /// Position in [`Usefulness::ALL`]; also the on-disk code.
    pub fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Usefulness::Useful => "useful",
            Usefulness::NonHarmful => "non_harmful",
            Usefulness::Adversarial => "adversarial",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameLabel {
    pub stage: Stage,
    pub usefulness: Usefulness,
    pub stage_progress: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub action: Vec<f32>,
    pub proprio: Vec<f32>,
    pub label: Option<FrameLabel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub source: String,
    pub frames: Vec<Frame>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Reference to the chunk `(s, a)_{t:t+len}` of one trajectory.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SegmentRef {
    pub trajectory: String,
    pub start: usize,
    pub len: usize,
}

impl SegmentRef {
    pub fn new(trajectory: impl Into<String>, start: usize, len: usize) -> Self {
        Self {
            trajectory: trajectory.into(),
            start,
            len,
        }
    }

    /// The chunk starting at `t` with horizon `k`, shortened at the trajectory tail.
    pub fn clamped(trajectory: impl Into<String>, t: usize, k: usize, traj_len: usize) -> Self {
        Self::new(trajectory, t, k.min(traj_len - t))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub id: String,
    pub source: String,
    pub frames: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub action_dim: usize,
    pub proprio_dim: usize,
    pub labeled: bool,
    pub frame_count: usize,
    pub trajectories: Vec<TrajectoryEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHandle {
    dir: PathBuf,
    manifest: Manifest,
}

impl DatasetHandle {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.format != "TRJ1" {
            return Err(Error::format(&path, format!("unknown dataset format {}", manifest.format)));
        }
        Ok(Self { dir, manifest })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Trajectory count.
    pub fn n(&self) -> usize {
        self.manifest.trajectories.len()
    }

    pub fn frame_count(&self) -> usize {
        self.manifest.frame_count
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        (self.manifest.height, self.manifest.width, self.manifest.channels)
    }

    pub fn entry(&self, id: &str) -> Result<&TrajectoryEntry> {
        self.manifest
            .trajectories
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Data(format!("no trajectory {id} in {}", self.dir.display())))
    }

    fn record_len(&self) -> usize {
        let m = &self.manifest;
        m.height * m.width * m.channels
            + 4 * (m.action_dim + m.proprio_dim)
            + if m.labeled { LABEL_LEN } else { 0 }
    }
}

fn validate(trajectories: &[Trajectory]) -> Result<Manifest> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::Data("cannot write an empty dataset".into()))?;
    let f0 = first
        .frames
        .first()
        .ok_or_else(|| Error::Data(format!("trajectory {} has no frames", first.id)))?;
    let labeled = f0.label.is_some();
    let mut ids = HashSet::new();
    let mut entries = Vec::with_capacity(trajectories.len());
    let mut frame_count = 0;
    for t in trajectories {
        if t.frames.len() < 2 {
            return Err(Error::Data(format!(
                "trajectory {} has {} frame(s); at least 2 are required",
                t.id,
                t.frames.len()
            )));
        }
        if t.id.is_empty() || t.id.contains(['/', '\\']) || !ids.insert(t.id.as_str()) {
            return Err(Error::Data(format!("invalid or duplicate trajectory id {:?}", t.id)));
        }
        for (i, f) in t.frames.iter().enumerate() {
            if !f.image.same_dims(&f0.image)
                || f.action.len() != f0.action.len()
                || f.proprio.len() != f0.proprio.len()
                || f.label.is_some() != labeled
            {
                return Err(Error::Dimension(format!(
                    "trajectory {} frame {i} does not match the dataset layout",
                    t.id
                )));
            }
        }
        frame_count += t.frames.len();
        entries.push(TrajectoryEntry {
            id: t.id.clone(),
            source: t.source.clone(),
            frames: t.frames.len(),
            file: format!("{}.trj", t.id),
        });
    }
    Ok(Manifest {
        format: "TRJ1".into(),
        height: f0.image.height(),
        width: f0.image.width(),
        channels: f0.image.channels(),
        action_dim: f0.action.len(),
        proprio_dim: f0.proprio.len(),
        labeled,
        frame_count,
        trajectories: entries,
    })
}

fn encode_record(f: &Frame, out: &mut Vec<u8>) {
    out.extend_from_slice(f.image.data());
    for x in f.action.iter().chain(&f.proprio) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(l) = f.label {
        out.extend_from_slice(&[l.stage.code(), l.usefulness.code(), 0, 0]);
        out.extend_from_slice(&l.stage_progress.to_le_bytes());
    }
}

/// Writes the manifest and one blob per trajectory into `dir`.
///
/// Validation happens before anything touches the filesystem.
pub fn write_dataset(trajectories: &[Trajectory], dir: &Path) -> Result<DatasetHandle> {
    let manifest = validate(trajectories)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rec = Vec::new();
    for (t, entry) in trajectories.iter().zip(&manifest.trajectories) {
        let path = dir.join(&entry.file);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        let mut header = Vec::with_capacity(HEADER_LEN as usize);
        header.extend_from_slice(TRAJ_MAGIC);
        for x in [
            t.frames.len(),
            manifest.height,
            manifest.width,
            manifest.channels,
            manifest.action_dim,
            manifest.proprio_dim,
            manifest.labeled as usize,
        ] {
            header.extend_from_slice(&(x as u32).to_le_bytes());
        }
        out.write_all(&header).map_err(|e| Error::io(&path, e))?;
        for f in &t.frames {
            rec.clear();
            encode_record(f, &mut rec);
            out.write_all(&rec).map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))?;
    }
    let mpath = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(DatasetHandle {
        dir: dir.to_path_buf(),
        manifest,
    })
}

struct BlobReader {
    path: PathBuf,
    input: BufReader<File>,
    frames: usize,
}

fn open_blob(h: &DatasetHandle, entry: &TrajectoryEntry) -> Result<BlobReader> {
    let path = h.dir.join(&entry.file);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut input = BufReader::new(file);
    let mut header = [0u8; HEADER_LEN as usize];
    input
        .read_exact(&mut header)
        .map_err(|_| Error::format(&path, "truncated trajectory header"))?;
    if &header[..4] != TRAJ_MAGIC {
        return Err(Error::format(&path, "not a TRJ1 trajectory blob"));
    }
    let word = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let m = &h.manifest;
    let expected = [
        entry.frames,
        m.height,
        m.width,
        m.channels,
        m.action_dim,
        m.proprio_dim,
        m.labeled as usize,
    ];
    for (i, e) in expected.iter().enumerate() {
        if word(i) != *e {
            return Err(Error::format(&path, "blob header disagrees with the manifest"));
        }
    }
    Ok(BlobReader {
        path,
        input,
        frames: entry.frames,
    })
}

fn decode_record(h: &DatasetHandle, path: &Path, buf: &[u8]) -> Result<Frame> {
    let m = &h.manifest;
    let n_img = m.height * m.width * m.channels;
    let image = Image::new(m.height, m.width, m.channels, buf[..n_img].to_vec())?;
    let floats = |off: usize, n: usize| -> Vec<f32> {
        buf[off..off + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect()
    };
    let action = floats(n_img, m.action_dim);
    let proprio = floats(n_img + 4 * m.action_dim, m.proprio_dim);
    let label = if m.labeled {
        let off = n_img + 4 * (m.action_dim + m.proprio_dim);
        let stage = Stage::from_code(buf[off]).ok_or_else(|| Error::format(path, "bad stage code"))?;
        let usefulness =
            Usefulness::from_code(buf[off + 1]).ok_or_else(|| Error::format(path, "bad usefulness code"))?;
        let stage_progress = f32::from_le_bytes(buf[off + 4..off + 8].try_into().expect("4 bytes"));
        Some(FrameLabel {
            stage,
            usefulness,
            stage_progress,
        })
    } else {
        None
    };
    Ok(Frame {
        image,
        action,
        proprio,
        label,
    })
}

fn read_records(h: &DatasetHandle, blob: &mut BlobReader, start: usize, len: usize) -> Result<Vec<Frame>> {
    let rl = h.record_len();
    blob.input
        .seek(SeekFrom::Start(HEADER_LEN + (start * rl) as u64))
        .map_err(|e| Error::io(&blob.path, e))?;
    let mut buf = vec![0u8; rl];
    let mut frames = Vec::with_capacity(len);
    for i in 0..len {
        blob.input
            .read_exact(&mut buf)
            .map_err(|_| Error::format(&blob.path, format!("truncated at record {}", start + i)))?;
        frames.push(decode_record(h, &blob.path, &buf)?);
    }
    Ok(frames)
}

pub fn read_trajectory(h: &DatasetHandle, id: &str) -> Result<Trajectory> {
    let entry = h.entry(id)?;
    let mut blob = open_blob(h, entry)?;
    let n = blob.frames;
    let frames = read_records(h, &mut blob, 0, n)?;
    let mut rest = [0u8; 1];
    if blob.input.read(&mut rest).map_err(|e| Error::io(&blob.path, e))? != 0 {
        return Err(Error::format(&blob.path, "trailing bytes after the last record"));
    }
    Ok(Trajectory {
        id: entry.id.clone(),
        source: entry.source.clone(),
        frames,
    })
}

pub fn read_all(h: &DatasetHandle) -> Result<Vec<Trajectory>> {
    h.manifest.trajectories.iter().map(|e| read_trajectory(h, &e.id)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub frames: Vec<Frame>,
    /// The reference ran past the trajectory end and was shortened.
    pub clamped: bool,
}

/// Reads only the referenced records, shortening references that run past the tail.
pub fn read_segment(h: &DatasetHandle, r: &SegmentRef) -> Result<Segment> {
    let entry = h.entry(&r.trajectory)?;
    if r.start >= entry.frames || r.len == 0 {
        return Err(Error::Data(format!(
            "segment {}[{}..+{}] outside a {}-frame trajectory",
            r.trajectory, r.start, r.len, entry.frames
        )));
    }
    let len = r.len.min(entry.frames - r.start);
    let mut blob = open_blob(h, entry)?;
    Ok(Segment {
        frames: read_records(h, &mut blob, r.start, len)?,
        clamped: len < r.len,
    })
}

/// Frame counts per (stage, usefulness) over a labeled dataset.
pub fn label_histogram(trajectories: &[Trajectory]) -> BTreeMap<(Stage, Usefulness), usize> {
    let mut out = BTreeMap::new();
    for f in trajectories.iter().flat_map(|t| &t.frames) {
        if let Some(l) = f.label {
            *out.entry((l.stage, l.usefulness)).or_insert(0) += 1;
        }
    }
    out
}

/// Human-readable manifest summary plus per-stage label counts.
pub fn inspect(h: &DatasetHandle) -> Result<String> {
    use std::fmt::Write as _;
    let m = &h.manifest;
    let mut s = String::new();
    let _ = writeln!(s, "dataset {}", h.dir.display());
    let _ = writeln!(
        s,
        "  trajectories {}  frames {}  image {}x{}x{}  action {}  proprio {}  labeled {}",
        h.n(),
        m.frame_count,
        m.height,
        m.width,
        m.channels,
        m.action_dim,
        m.proprio_dim,
        m.labeled
    );
    let mut sources: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for e in &m.trajectories {
        let c = sources.entry(&e.source).or_default();
        c.0 += 1;
        c.1 += e.frames;
    }
    for (src, (n, f)) in sources {
        let _ = writeln!(s, "  source {src}: {n} trajectories, {f} frames");
    }
    if m.labeled {
        let hist = label_histogram(&read_all(h)?);
        let _ = writeln!(s, "  {:<10} {:>8} {:>12} {:>12}", "stage", "useful", "non_harmful", "adversarial");
        for st in Stage::ALL {
            let c = |u| hist.get(&(st, u)).copied().unwrap_or(0);
            let _ = writeln!(
                s,
                "  {:<10} {:>8} {:>12} {:>12}",
                st.name(),
                c(Usefulness::Useful),
                c(Usefulness::NonHarmful),
                c(Usefulness::Adversarial)
            );
        }
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Target,
    Retrieved,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub source: Source,
    pub segment: SegmentRef,
}

/// Co-training sampler: the first `⌈b/2⌉` items of every batch come from the
/// target set, the rest from the retrieved segments, each uniformly with
/// replacement.
#[derive(Clone, Debug)]
pub struct CoTrainSampler {
    target: Vec<SegmentRef>,
    retrieved: Vec<SegmentRef>,
    rng: Rng,
}

impl CoTrainSampler {
    /// `target` lists every usable target chunk start. An empty `retrieved`
    /// list degrades to target-only batches with a warning.
    pub fn new(target: Vec<SegmentRef>, retrieved: Vec<SegmentRef>, rng: Rng) -> Result<Self> {
        if target.is_empty() {
            return Err(Error::Data("co-training needs at least one target frame".into()));
        }
        if retrieved.is_empty() {
            log::warn!("retrieved set is empty; sampling target-only batches");
        }
        Ok(Self { target, retrieved, rng })
    }

    pub fn target_items(&self) -> &[SegmentRef] {
        &self.target
    }

    pub fn retrieved_items(&self) -> &[SegmentRef] {
        &self.retrieved
    }

    /// Number of target items in a batch of `b`.
    pub fn target_share(&self, b: usize) -> usize {
        if self.retrieved.is_empty() {
            b
        } else {
            b.div_ceil(2)
        }
    }

    pub fn next_batch(&mut self, b: usize) -> Vec<BatchItem> {
        let nt = self.target_share(b);
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let (source, pool) = if i < nt {
                (Source::Target, &self.target)
            } else {
                (Source::Retrieved, &self.retrieved)
            };
            let j = self.rng.below(pool.len());
            out.push(BatchItem {
                source,
                segment: pool[j].clone(),
            });
        }
        out
    }
}

/// Every chunk start of the target dataset, with horizon `k`.
pub fn target_segments(h: &DatasetHandle, k: usize) -> Vec<SegmentRef> {
    h.manifest
        .trajectories
        .iter()
        .flat_map(|e| (0..e.frames).map(move |t| SegmentRef::clamped(e.id.clone(), t, k, e.frames)))
        .collect()
}

/// Co-training view over a stored target dataset and retrieved prior segments.
pub fn merge_view(target: &DatasetHandle, retrieved: Vec<SegmentRef>, k: usize, seed: u64) -> Result<CoTrainSampler> {
    CoTrainSampler::new(target_segments(target, k), retrieved, Rng::with_stream(seed, 0x5a4d))
}
