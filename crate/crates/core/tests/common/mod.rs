//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use flowguide_core::flowfield::FlowField;
use flowguide_core::flowvae::Rows;
use flowguide_core::image::Image;
use flowguide_core::retrieval::FrameRef;

/// `−min_j ‖p_i − t_j‖₂` by a plain double loop.
pub fn brute_scores(prior: &Rows, target: &Rows) -> Vec<f32> {
    let mut out = Vec::with_capacity(prior.len());
    for i in 0..prior.len() {
        let mut best = f32::INFINITY;
        for j in 0..target.len() {
            let mut acc = 0.0f32;
            for c in 0..prior.dim {
                let d = prior.row(i)[c] - target.row(j)[c];
                acc += d * d;
            }
            let dist = acc.sqrt();
            if dist < best {
                best = dist;
            }
        }
        out.push(-best);
    }
    out
}

/// Frames with score strictly above the `⌈δN⌉`-th largest, via a full sort.
pub fn brute_top(scores: &[f32], frames: &[FrameRef], delta: f64) -> Vec<(String, usize)> {
    let n = scores.len();
    let mut sorted: Vec<f32> = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut m = (delta * n as f64).ceil() as usize;
    // the product can land a hair above an integer
    if ((delta * n as f64) - (delta * n as f64).round()).abs() < 1e-9 {
        m = (delta * n as f64).round() as usize;
    }
    let eta = sorted[m.max(1) - 1];
    let mut out: Vec<(String, usize)> = (0..n)
        .filter(|&i| scores[i] > eta)
        .map(|i| (frames[i].trajectory.clone(), frames[i].index))
        .collect();
    out.sort();
    out
}

/// Union of every target row's `kk` nearest prior rows; ties by (trajectory, index).
pub fn brute_knn(prior: &Rows, target: &Rows, frames: &[FrameRef], kk: usize) -> Vec<(String, usize)> {
    let mut out = std::collections::BTreeSet::new();
    for j in 0..target.len() {
        let mut d: Vec<(f32, &str, usize, usize)> = (0..prior.len())
            .map(|i| {
                let mut acc = 0.0f32;
                for c in 0..prior.dim {
                    let x = prior.row(i)[c] - target.row(j)[c];
                    acc += x * x;
                }
                (acc, frames[i].trajectory.as_str(), frames[i].index, i)
            })
            .collect();
        d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
        for e in d.iter().take(kk) {
            out.insert((e.1.to_string(), e.2));
        }
    }
    out.into_iter().collect()
}

pub fn frames_for(n: usize, per_traj: usize) -> Vec<FrameRef> {
    (0..n)
        .map(|i| FrameRef {
            trajectory: format!("traj-{:04}", i / per_traj),
            index: i % per_traj,
            traj_len: per_traj,
            label: None,
        })
        .collect()
}

pub fn random_rows(rng: &mut flowguide_numkit::Rng, n: usize, dim: usize) -> Rows {
    let mut rows = Rows::new(dim);
    for _ in 0..n {
        let r: Vec<f32> = (0..dim).map(|_| rng.normal_f32()).collect();
        rows.push(&r).unwrap();
    }
    rows
}

pub const TEX_N: usize = 64;
pub const TEX_MARGIN: usize = 8;

/// Smooth texture whose periods divide 64, so circular shifts stay smooth.
pub fn tex(x: f32, y: f32) -> f32 {
    use std::f32::consts::PI;
    128.0
        + 50.0 * (2.0 * PI * x / 32.0 + 0.3).sin()
        + 40.0 * (2.0 * PI * y / 32.0 + 1.1).cos()
        + 25.0 * (2.0 * PI * (x + y) / 16.0 + 0.7).sin()
}

pub fn tex_image(f: impl Fn(f32, f32) -> f32) -> Image {
    let mut d = Vec::with_capacity(TEX_N * TEX_N);
    for r in 0..TEX_N {
        for c in 0..TEX_N {
            d.push(f(c as f32, r as f32).round().clamp(0.0, 255.0) as u8);
        }
    }
    Image::new(TEX_N, TEX_N, 1, d).unwrap()
}

/// `tex` moved by `(dx, dy)`: `b(x) = a(x − d)`.
pub fn shifted(dx: f32, dy: f32) -> Image {
    tex_image(|x, y| tex(x - dx, y - dy))
}

/// `tex` rotated by `deg` about the image centre, and the true flow field.
pub fn rotated(deg: f32) -> (Image, FlowField) {
    let theta = deg.to_radians();
    let c = (TEX_N as f32 - 1.0) / 2.0;
    let (s, co) = theta.sin_cos();
    // b(p) = a(R⁻¹(p − c) + c)
    let img = tex_image(|x, y| {
        let (px, py) = (x - c, y - c);
        tex(co * px + s * py + c, -s * px + co * py + c)
    });
    let mut truth = FlowField::zeros(TEX_N, TEX_N);
    for r in 0..TEX_N {
        for col in 0..TEX_N {
            let (px, py) = (col as f32 - c, r as f32 - c);
            truth.u[r * TEX_N + col] = co * px - s * py - px;
            truth.v[r * TEX_N + col] = s * px + co * py - py;
        }
    }
    (img, truth)
}

pub fn interior_mean(f: &FlowField) -> (f32, f32) {
    let (mut su, mut sv, mut n) = (0.0f64, 0.0f64, 0usize);
    for r in TEX_MARGIN..f.height - TEX_MARGIN {
        for c in TEX_MARGIN..f.width - TEX_MARGIN {
            su += f.u[r * f.width + c] as f64;
            sv += f.v[r * f.width + c] as f64;
            n += 1;
        }
    }
    ((su / n as f64) as f32, (sv / n as f64) as f32)
}

/// Cosine similarity of two fields over the interior.
pub fn interior_correlation(f: &FlowField, g: &FlowField) -> f64 {
    let (mut dot, mut nf, mut ng) = (0.0f64, 0.0f64, 0.0f64);
    for r in TEX_MARGIN..f.height - TEX_MARGIN {
        for c in TEX_MARGIN..f.width - TEX_MARGIN {
            let i = r * f.width + c;
            dot += (f.u[i] * g.u[i] + f.v[i] * g.v[i]) as f64;
            nf += (f.u[i] * f.u[i] + f.v[i] * f.v[i]) as f64;
            ng += (g.u[i] * g.u[i] + g.v[i] * g.v[i]) as f64;
        }
    }
    dot / (nf.sqrt() * ng.sqrt())
}
