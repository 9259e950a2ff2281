//! Handcrafted texture baselines: uniform LBP, HOG, multi-scale LBP and an
//! RBF-kernel SVM with logistic score calibration.
//!
//! LBP conventions: neighbour `p` sits at angle `2*pi*p/P` counter-clockwise
//! from the positive x axis (image y grows downwards), sampled bilinearly;
//! bit `p` is set when the neighbour is `>=` the centre, and the code is
//! `sum bit_p << p`. Uniform codes (at most two circular bit transitions) get
//! their own bins in ascending code order; every other code shares the last
//! bin.

use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::GrayImage;

pub const LBP_BINS: usize = 59;
pub const LBP16_BINS: usize = 243;
pub const HOG_LEN: usize = 324;
pub const MSLBP_LEN: usize = 9 * LBP_BINS + LBP_BINS + LBP16_BINS;
/// Side of the canonical face crop fed to every descriptor.
pub const CANONICAL_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Descriptor {
    #[serde(rename = "lbp59+hog324")]
    LbpHog,
    #[serde(rename = "mslbp")]
    MultiscaleLbp,
}

impl Descriptor {
    pub fn id(self) -> &'static str {
        match self {
            Descriptor::LbpHog => "lbp59+hog324",
            Descriptor::MultiscaleLbp => "mslbp",
        }
    }

    pub fn len(self) -> usize {
        match self {
            Descriptor::LbpHog => LBP_BINS + HOG_LEN,
            Descriptor::MultiscaleLbp => MSLBP_LEN,
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "lbp59+hog324" | "lbp-hog" => Ok(Descriptor::LbpHog),
            "mslbp" => Ok(Descriptor::MultiscaleLbp),
            _ => Err(Error::InvalidInput(format!("unknown descriptor `{id}`"))),
        }
    }

    /// Resizes to the canonical crop and computes the descriptor.
    pub fn extract(self, img: &GrayImage) -> Result<FeatureVector> {
        let crop = img.resized(CANONICAL_SIZE, CANONICAL_SIZE);
        match self {
            Descriptor::LbpHog => {
                let mut values = lbp_histogram(&crop)?;
                values.extend(hog_features(&crop)?);
                Ok(FeatureVector {
                    values,
                    descriptor_id: self.id().into(),
                })
            }
            Descriptor::MultiscaleLbp => multiscale_lbp(&crop),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub descriptor_id: String,
}

/// Maps `P`-bit codes to uniform-pattern bins.
pub struct UniformTable {
    pub points: usize,
    pub bins: usize,
    map: Vec<u16>,
}

pub fn is_uniform(code: u32, points: usize) -> bool {
    let rotated = ((code >> 1) | ((code & 1) << (points - 1))) & ((1u32 << points) - 1);
    (code ^ rotated).count_ones() <= 2
}

impl UniformTable {
    fn new(points: usize) -> Self {
        let n = 1usize << points;
        let bins = points * (points - 1) + 3;
        let mut map = vec![(bins - 1) as u16; n];
        let mut next = 0u16;
        for code in 0..n {
            if is_uniform(code as u32, points) {
                map[code] = next;
                next += 1;
            }
        }
        debug_assert_eq!(next as usize, bins - 1);
        UniformTable { points, bins, map }
    }

    pub fn get(points: usize) -> &'static UniformTable {
        static T8: OnceLock<UniformTable> = OnceLock::new();
        static T16: OnceLock<UniformTable> = OnceLock::new();
        match points {
            8 => T8.get_or_init(|| UniformTable::new(8)),
            16 => T16.get_or_init(|| UniformTable::new(16)),
            _ => panic!("no uniform table for P={points}"),
        }
    }

    pub fn bin(&self, code: u32) -> usize {
        self.map[code as usize] as usize
    }
}

/// Bilinear sampling weights of one circular neighbour, as
/// `(dx, dy, weight)` over integer pixel offsets.
fn neighbour_taps(points: usize, radius: f64) -> Vec<Vec<(isize, isize, f64)>> {
    let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
    (0..points)
        .map(|p| {
            let a = 2.0 * std::f64::consts::PI * p as f64 / points as f64;
            let (x, y) = (snap(radius * a.cos()), snap(-radius * a.sin()));
            let (x0, y0) = (x.floor(), y.floor());
            let (tx, ty) = (x - x0, y - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            [
                (x0, y0, (1.0 - tx) * (1.0 - ty)),
                (x0 + 1, y0, tx * (1.0 - ty)),
                (x0, y0 + 1, (1.0 - tx) * ty),
                (x0 + 1, y0 + 1, tx * ty),
            ]
            .into_iter()
            .filter(|t| t.2 != 0.0)
            .collect()
        })
        .collect()
}

/// LBP code at every pixel whose full circle lies inside the image, in row
/// order. Returns `(codes, width, height)` of the code image.
pub fn lbp_codes(img: &GrayImage, points: usize, radius: usize) -> Result<(Vec<u32>, usize, usize)> {
    if img.width < 2 * radius + 1 || img.height < 2 * radius + 1 {
        return Err(Error::InvalidInput(format!(
            "LBP radius {radius} needs at least {0}x{0} pixels, got {1}x{2}",
            2 * radius + 1,
            img.width,
            img.height
        )));
    }
    let taps = neighbour_taps(points, radius as f64);
    let (w, h) = (img.width - 2 * radius, img.height - 2 * radius);
    let mut codes = Vec::with_capacity(w * h);
    for y in radius..img.height - radius {
        for x in radius..img.width - radius {
            let c = img.get(x, y);
            let mut code = 0u32;
            for (p, tap) in taps.iter().enumerate() {
                // Differences before weighting keep the code exactly
                // invariant to intensity offsets.
                let d: f64 = tap
                    .iter()
                    .map(|&(dx, dy, wt)| {
                        wt * (img.get((x as isize + dx) as usize, (y as isize + dy) as usize) - c)
                    })
                    .sum();
                if d >= 0.0 {
                    code |= 1 << p;
                }
            }
            codes.push(code);
        }
    }
    Ok((codes, w, h))
}

fn histogram<'a>(codes: impl Iterator<Item = &'a u32>, table: &UniformTable) -> Vec<f64> {
    let mut hist = vec![0.0; table.bins];
    let mut n = 0usize;
    for &c in codes {
        hist[table.bin(c)] += 1.0;
        n += 1;
    }
    if n > 0 {
        hist.iter_mut().for_each(|v| *v /= n as f64);
    }
    hist
}

/// Normalized uniform LBP(8,1) histogram over the image interior.
pub fn lbp_histogram(img: &GrayImage) -> Result<Vec<f64>> {
    let (codes, _, _) = lbp_codes(img, 8, 1)?;
    Ok(histogram(codes.iter(), UniformTable::get(8)))
}

fn expect_canonical(img: &GrayImage, what: &str) -> Result<()> {
    if img.width != CANONICAL_SIZE || img.height != CANONICAL_SIZE {
        return Err(Error::InvalidInput(format!(
            "{what} expects a {CANONICAL_SIZE}x{CANONICAL_SIZE} image, got {}x{}",
            img.width, img.height
        )));
    }
    Ok(())
}

pub const HOG_BINS: usize = 9;
pub const HOG_CELL: usize = 16;
pub const HOG_BLOCK: usize = 3;

/// Orientation bin votes `(bin, weight)` for an unsigned gradient; bins are
/// centred on 0, 20, ..., 160 degrees.
pub fn hog_votes(gx: f64, gy: f64) -> [(usize, f64); 2] {
    let mag = (gx * gx + gy * gy).sqrt();
    if gx == 0.0 {
        // Exactly 90 degrees sits on the edge between bins 4 and 5.
        return [(4, mag / 2.0), (5, mag / 2.0)];
    }
    let mut deg = gy.atan2(gx).to_degrees();
    if deg < 0.0 {
        deg += 180.0;
    }
    if deg >= 180.0 {
        deg -= 180.0;
    }
    let bin = (((deg + 10.0) / 20.0).floor() as usize) % HOG_BINS;
    [(bin, mag), (bin, 0.0)]
}

/// Per-cell orientation histograms (`cells_y x cells_x x 9`).
pub fn hog_cell_histograms(img: &GrayImage) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let (cw, ch) = (w / HOG_CELL, h / HOG_CELL);
    let mut cells = vec![0.0; cw * ch * HOG_BINS];
    for y in 0..ch * HOG_CELL {
        for x in 0..cw * HOG_CELL {
            let gx = img.get((x + 1).min(w - 1), y) - img.get(x.saturating_sub(1), y);
            let gy = img.get(x, (y + 1).min(h - 1)) - img.get(x, y.saturating_sub(1));
            let base = ((y / HOG_CELL) * cw + x / HOG_CELL) * HOG_BINS;
            for (b, v) in hog_votes(gx, gy) {
                cells[base + b] += v;
            }
        }
    }
    cells
}

const HOG_EPS: f64 = 1e-3;

fn l2_hys(block: &mut [f64]) {
    let norm = |b: &[f64]| (b.iter().map(|v| v * v).sum::<f64>() + HOG_EPS * HOG_EPS).sqrt();
    let n = norm(block);
    block.iter_mut().for_each(|v| *v = (*v / n).min(0.2));
    let n = norm(block);
    block.iter_mut().for_each(|v| *v /= n);
}

/// HOG over the canonical crop: 16x16-pixel cells (a 4x4 grid), 3x3-cell
/// blocks at one-cell stride (2x2 blocks), 9 bins, L2-Hys per block. Block
/// layout is row-major over blocks, then cells, then bins.
pub fn hog_features(img: &GrayImage) -> Result<Vec<f64>> {
    expect_canonical(img, "HOG")?;
    let cells = hog_cell_histograms(img);
    let grid = CANONICAL_SIZE / HOG_CELL;
    let nb = grid - HOG_BLOCK + 1;
    let mut out = Vec::with_capacity(HOG_LEN);
    for by in 0..nb {
        for bx in 0..nb {
            let mut block = Vec::with_capacity(HOG_BLOCK * HOG_BLOCK * HOG_BINS);
            for cy in by..by + HOG_BLOCK {
                for cx in bx..bx + HOG_BLOCK {
                    let base = (cy * grid + cx) * HOG_BINS;
                    block.extend_from_slice(&cells[base..base + HOG_BINS]);
                }
            }
            l2_hys(&mut block);
            out.extend(block);
        }
    }
    Ok(out)
}

/// Region origin and side of the 3x3 overlapping grid on the 62x62 LBP(8,1)
/// code image.
const MS_REGION: usize = 30;
const MS_STRIDE: usize = 16;

/// Multi-scale LBP: LBP(8,1) histograms over 3x3 overlapping regions, then
/// global LBP(8,2) and LBP(16,2) histograms, each normalized separately.
pub fn multiscale_lbp(img: &GrayImage) -> Result<FeatureVector> {
    expect_canonical(img, "multi-scale LBP")?;
    let t8 = UniformTable::get(8);
    let (codes, w, _) = lbp_codes(img, 8, 1)?;
    let mut values = Vec::with_capacity(MSLBP_LEN);
    for ry in 0..3 {
        for rx in 0..3 {
            let (y0, x0) = (ry * MS_STRIDE, rx * MS_STRIDE);
            let region = (y0..y0 + MS_REGION)
                .flat_map(|y| codes[y * w + x0..y * w + x0 + MS_REGION].iter());
            values.extend(histogram(region, t8));
        }
    }
    let (c82, _, _) = lbp_codes(img, 8, 2)?;
    values.extend(histogram(c82.iter(), t8));
    let (c162, _, _) = lbp_codes(img, 16, 2)?;
    values.extend(histogram(c162.iter(), UniformTable::get(16)));
    debug_assert_eq!(values.len(), MSLBP_LEN);
    Ok(FeatureVector {
        values,
        descriptor_id: Descriptor::MultiscaleLbp.id().into(),
    })
}

/// Hyperparameter candidates; every `(gamma, C)` pair is scored by k-fold
/// cross-validation unless there is only one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    /// Multiples of `1 / mean squared pairwise distance`.
    pub gamma_scales: Vec<f64>,
    pub costs: Vec<f64>,
    pub cv_folds: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            gamma_scales: vec![0.25, 1.0, 4.0],
            costs: vec![1.0, 10.0, 100.0],
            cv_folds: 3,
            tolerance: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Rbf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub descriptor_id: String,
    pub kernel: Kernel,
    pub gamma: f64,
    pub cost: f64,
    pub support_vectors: Vec<Vec<f64>>,
    /// `alpha_i * y_i` per support vector (`y = +1` for attack).
    pub coefficients: Vec<f64>,
    pub rho: f64,
    /// Logistic calibration `1 / (1 + exp(a * f + b))`.
    pub platt_a: f64,
    pub platt_b: f64,
    /// EER threshold of the calibrated training scores.
    pub decision_threshold: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    (-gamma * sq_dist(a, b)).exp()
}

struct DualSolution {
    alpha: Vec<f64>,
    rho: f64,
}

/// SMO on the RBF dual with second-order working-set selection.
fn smo(kernel: &[f64], y: &[f64], cost: f64, eps: f64) -> DualSolution {
    const TAU: f64 = 1e-12;
    let n = y.len();
    let k = |i: usize, j: usize| kernel[i * n + j];
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let is_up = |a: f64, yi: f64| (yi > 0.0 && a < cost) || (yi < 0.0 && a > 0.0);
    let is_low = |a: f64, yi: f64| (yi > 0.0 && a > 0.0) || (yi < 0.0 && a < cost);
    let max_iter = 100_000usize.max(100 * n);
    for _ in 0..max_iter {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if is_up(alpha[t], y[t]) && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                i = t;
            }
        }
        if i == usize::MAX {
            break;
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !is_low(alpha[t], y[t]) {
                continue;
            }
            gmax2 = gmax2.max(y[t] * grad[t]);
            let b = gmax + y[t] * grad[t];
            if b > 0.0 {
                let a = (k(i, i) + k(t, t) - 2.0 * k(i, t)).max(TAU);
                let obj = -b * b / a;
                if obj <= best {
                    best = obj;
                    j = t;
                }
            }
        }
        if gmax + gmax2 < eps || j == usize::MAX {
            break;
        }
        let (ai, aj) = (alpha[i], alpha[j]);
        let quad = (k(i, i) + k(j, j) - 2.0 * k(i, j)).max(TAU);
        let (mut ni, mut nj);
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = ai - aj;
            ni = ai + delta;
            nj = aj + delta;
            if diff > 0.0 {
                if nj < 0.0 {
                    nj = 0.0;
                    ni = diff;
                }
            } else if ni < 0.0 {
                ni = 0.0;
                nj = -diff;
            }
            if diff > 0.0 {
                if ni > cost {
                    ni = cost;
                    nj = cost - diff;
                }
            } else if nj > cost {
                nj = cost;
                ni = cost + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = ai + aj;
            ni = ai - delta;
            nj = aj + delta;
            if sum > cost {
                if ni > cost {
                    ni = cost;
                    nj = sum - cost;
                }
            } else if nj < 0.0 {
                nj = 0.0;
                ni = sum;
            }
            if sum > cost {
                if nj > cost {
                    nj = cost;
                    ni = sum - cost;
                }
            } else if ni < 0.0 {
                ni = 0.0;
                nj = sum;
            }
        }
        let (di, dj) = (ni - ai, nj - aj);
        alpha[i] = ni;
        alpha[j] = nj;
        for t in 0..n {
            grad[t] += y[t] * (y[i] * k(t, i) * di + y[j] * k(t, j) * dj);
        }
    }

    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum, mut free) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= cost {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum += yg;
        }
    }
    let rho = if free > 0 { sum / free as f64 } else { (ub + lb) / 2.0 };
    DualSolution { alpha, rho }
}

/// Logistic fit of `P(attack | f) = 1 / (1 + exp(a f + b))` by Newton's
/// method with backtracking on regularized targets.
pub fn fit_platt(decisions: &[f64], labels: &[bool]) -> (f64, f64) {
    let n_pos = labels.iter().filter(|l| **l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let hi = (n_pos + 1.0) / (n_pos + 2.0);
    let lo = 1.0 / (n_neg + 2.0);
    let t: Vec<f64> = labels.iter().map(|&l| if l { hi } else { lo }).collect();
    let (mut a, mut b) = (0.0, ((n_neg + 1.0) / (n_pos + 1.0)).ln());
    let objective = |a: f64, b: f64| -> f64 {
        decisions
            .iter()
            .zip(&t)
            .map(|(&f, &ti)| {
                let z = f * a + b;
                if z >= 0.0 {
                    ti * z + (1.0 + (-z).exp()).ln()
                } else {
                    (ti - 1.0) * z + (1.0 + z.exp()).ln()
                }
            })
            .sum()
    };
    let mut fval = objective(a, b);
    for _ in 0..100 {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (1e-12, 1e-12, 0.0, 0.0, 0.0);
        for (&f, &ti) in decisions.iter().zip(&t) {
            let z = f * a + b;
            let (p, q) = if z >= 0.0 {
                let e = (-z).exp();
                (e / (1.0 + e), 1.0 / (1.0 + e))
            } else {
                let e = z.exp();
                (1.0 / (1.0 + e), e / (1.0 + e))
            };
            let d2 = p * q;
            h11 += f * f * d2;
            h22 += d2;
            h21 += f * d2;
            let d1 = ti - p;
            g1 += f * d1;
            g2 += d1;
        }
        if g1.abs() < 1e-5 && g2.abs() < 1e-5 {
            break;
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        let mut improved = false;
        while step >= 1e-10 {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = objective(na, nb);
            if nf < fval + 1e-4 * step * gd {
                a = na;
                b = nb;
                fval = nf;
                improved = true;
                break;
            }
            step /= 2.0;
        }
        if !improved {
            break;
        }
    }
    (a, b)
}

fn kernel_matrix(x: &[&[f64]], gamma: f64) -> Vec<f64> {
    let n = x.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        k[i * n + i] = 1.0;
        for j in 0..i {
            let v = rbf(gamma, x[i], x[j]);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

struct RawSvm {
    sv: Vec<Vec<f64>>,
    coef: Vec<f64>,
    rho: f64,
}

impl RawSvm {
    fn decision(&self, gamma: f64, x: &[f64]) -> f64 {
        self.sv
            .iter()
            .zip(&self.coef)
            .map(|(s, c)| c * rbf(gamma, s, x))
            .sum::<f64>()
            - self.rho
    }
}

fn fit_raw(x: &[&[f64]], labels: &[bool], gamma: f64, cost: f64, eps: f64) -> RawSvm {
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let sol = smo(&kernel_matrix(x, gamma), &y, cost, eps);
    let (mut sv, mut coef) = (Vec::new(), Vec::new());
    for (i, &a) in sol.alpha.iter().enumerate() {
        if a > 0.0 {
            sv.push(x[i].to_vec());
            coef.push(a * y[i]);
        }
    }
    RawSvm { sv, coef, rho: sol.rho }
}

/// Mean squared distance over (a deterministic subset of) sample pairs.
fn mean_sq_dist(x: &[&[f64]]) -> f64 {
    let n = x.len();
    let step = (n / 200).max(1);
    let (mut s, mut c) = (0.0, 0usize);
    for i in (0..n).step_by(step) {
        for j in (0..i).step_by(step) {
            s += sq_dist(x[i], x[j]);
            c += 1;
        }
    }
    if c == 0 || s == 0.0 {
        1.0
    } else {
        s / c as f64
    }
}

fn balanced_error(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut ep, mut np, mut en, mut nn) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        if l {
            np += 1;
            ep += usize::from(s < 0.0);
        } else {
            nn += 1;
            en += usize::from(s >= 0.0);
        }
    }
    let r = |e: usize, n: usize| if n == 0 { 0.0 } else { e as f64 / n as f64 };
    (r(ep, np) + r(en, nn)) / 2.0
}

/// Trains an RBF SVM (attack = positive class), picks `(gamma, C)` by
/// stratified cross-validation, calibrates scores and fixes the decision
/// threshold at the training EER.
pub fn train_svm(features: &[FeatureVector], labels: &[bool], config: &SvmConfig) -> Result<SvmModel> {
    if features.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} features for {} labels",
            features.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos < 2 || n_neg < 2 {
        return Err(Error::InvalidInput(format!(
            "SVM training needs at least 2 samples per class, got {n_neg} genuine and {n_pos} attack"
        )));
    }
    let id = &features[0].descriptor_id;
    let dim = features[0].values.len();
    if let Some(f) = features.iter().find(|f| &f.descriptor_id != id || f.values.len() != dim) {
        return Err(Error::InvalidInput(format!(
            "mixed descriptors: `{id}` and `{}`",
            f.descriptor_id
        )));
    }
    if config.gamma_scales.is_empty() || config.costs.is_empty() {
        return Err(Error::InvalidInput("empty SVM hyperparameter grid".into()));
    }
    let x: Vec<&[f64]> = features.iter().map(|f| f.values.as_slice()).collect();
    let gamma0 = 1.0 / mean_sq_dist(&x);

    let mut best = (config.gamma_scales[0] * gamma0, config.costs[0]);
    let grid_size = config.gamma_scales.len() * config.costs.len();
    let k = config.cv_folds.min(n_pos).min(n_neg);
    if grid_size > 1 && k >= 2 {
        // Stratified fold assignment.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut fold = vec![0usize; x.len()];
        for class in [false, true] {
            let mut idx: Vec<usize> = (0..x.len()).filter(|&i| labels[i] == class).collect();
            idx.shuffle(&mut rng);
            for (r, i) in idx.into_iter().enumerate() {
                fold[i] = r % k;
            }
        }
        let mut best_err = f64::INFINITY;
        for &gs in &config.gamma_scales {
            for &c in &config.costs {
                let gamma = gs * gamma0;
                let mut err = 0.0;
                for f in 0..k {
                    let (tr, te): (Vec<usize>, Vec<usize>) = (0..x.len()).partition(|&i| fold[i] != f);
                    let xs: Vec<&[f64]> = tr.iter().map(|&i| x[i]).collect();
                    let ys: Vec<bool> = tr.iter().map(|&i| labels[i]).collect();
                    let m = fit_raw(&xs, &ys, gamma, c, config.tolerance);
                    let sc: Vec<f64> = te.iter().map(|&i| m.decision(gamma, x[i])).collect();
                    let yl: Vec<bool> = te.iter().map(|&i| labels[i]).collect();
                    err += balanced_error(&sc, &yl);
                }
                if err < best_err - 1e-12 {
                    best_err = err;
                    best = (gamma, c);
                }
            }
        }
    }

    let (gamma, cost) = best;
    let raw = fit_raw(&x, labels, gamma, cost, config.tolerance);
    let dec: Vec<f64> = x.iter().map(|v| raw.decision(gamma, v)).collect();
    let (platt_a, platt_b) = fit_platt(&dec, labels);
    let mut model = SvmModel {
        descriptor_id: id.clone(),
        kernel: Kernel::Rbf,
        gamma,
        cost,
        support_vectors: raw.sv,
        coefficients: raw.coef,
        rho: raw.rho,
        platt_a,
        platt_b,
        decision_threshold: 0.5,
    };
    let scored: Vec<crate::evalmetrics::ScoredSample> = dec
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (&d, &l))| crate::evalmetrics::ScoredSample {
            sample_id: i.to_string(),
            final_score: model.calibrate(d),
            truth: l,
            attack_class: if l {
                crate::datamodel::AttackClass::Print
            } else {
                crate::datamodel::AttackClass::Genuine
            },
        })
        .collect();
    model.decision_threshold = crate::evalmetrics::roc_and_eer(&scored)?.eer_threshold;
    Ok(model)
}

impl SvmModel {
    fn check(&self, f: &FeatureVector) -> Result<()> {
        if f.descriptor_id != self.descriptor_id {
            return Err(Error::InvalidInput(format!(
                "model expects `{}` features, got `{}`",
                self.descriptor_id, f.descriptor_id
            )));
        }
        Ok(())
    }

    /// Raw decision value; positive leans attack.
    pub fn decision_value(&self, f: &FeatureVector) -> Result<f64> {
        self.check(f)?;
        Ok(self
            .support_vectors
            .iter()
            .zip(&self.coefficients)
            .map(|(s, c)| c * rbf(self.gamma, s, &f.values))
            .sum::<f64>()
            - self.rho)
    }

    pub fn calibrate(&self, decision: f64) -> f64 {
        let z = self.platt_a * decision + self.platt_b;
        if z >= 0.0 {
            let e = (-z).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + z.exp())
        }
    }

    pub fn predict_score(&self, f: &FeatureVector) -> Result<f64> {
        Ok(self.calibrate(self.decision_value(f)?))
    }

    pub fn predict(&self, f: &FeatureVector) -> Result<bool> {
        Ok(self.predict_score(f)? >= self.decision_threshold)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_vec(&serde_json::json!({"kind": "svm", "model": self}))?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value = serde_json::from_slice(&bytes)?;
        if v["kind"] != "svm" {
            return Err(Error::Checkpoint(format!("{} is not an SVM model", path.display())));
        }
        Ok(serde_json::from_value(v["model"].clone())?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDumpHeader {
    pub descriptor_id: String,
    pub count: usize,
    pub length: usize,
    pub sample_ids: Vec<String>,
}

/// Writes `path` (little-endian f32, row-major) and `path.json`.
pub fn write_feature_dump(path: &Path, sample_ids: &[String], features: &[FeatureVector]) -> Result<()> {
    let length = features.first().map_or(0, |f| f.values.len());
    let descriptor_id = features.first().map_or_else(String::new, |f| f.descriptor_id.clone());
    if features.iter().any(|f| f.values.len() != length || f.descriptor_id != descriptor_id)
        || sample_ids.len() != features.len()
    {
        return Err(Error::Shape("feature dump rows must share one descriptor".into()));
    }
    let mut buf = Vec::with_capacity(features.len() * length * 4);
    for f in features {
        for v in &f.values {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    let header = FeatureDumpHeader {
        descriptor_id,
        count: features.len(),
        length,
        sample_ids: sample_ids.to_vec(),
    };
    let side = sidecar(path);
    std::fs::write(&side, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&side, e))
}

pub fn read_feature_dump(path: &Path) -> Result<(FeatureDumpHeader, Vec<FeatureVector>)> {
    let side = sidecar(path);
    let header: FeatureDumpHeader =
        serde_json::from_slice(&std::fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != header.count * header.length * 4 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!(
                "expected {} values, file holds {} bytes",
                header.count * header.length,
                bytes.len()
            ),
        });
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    let feats = vals
        .chunks(header.length.max(1))
        .take(header.count)
        .map(|c| FeatureVector {
            values: c.to_vec(),
            descriptor_id: header.descriptor_id.clone(),
        })
        .collect();
    Ok((header, feats))
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage {
            width: w,
            height: h,
            data: (0..w * h).map(|_| f64::from(rng.random_range(0u8..=255))).collect(),
        }
    }

    #[test]
    fn uniform_table_sizes() {
        assert_eq!(UniformTable::get(8).bins, 59);
        assert_eq!(UniformTable::get(16).bins, 243);
        assert_eq!(MSLBP_LEN, 833);
        assert!(is_uniform(0b0001_1100, 8));
        assert!(!is_uniform(0b0101_0000, 8));
    }

    #[test]
    fn lbp_basic_properties() {
        let img = random_image(20, 17, 1);
        let h = lbp_histogram(&img).unwrap();
        assert_eq!(h.len(), 59);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let c = lbp_histogram(&GrayImage::from_fn(9, 9, |_, _| 77.0)).unwrap();
        assert_eq!(c.iter().filter(|v| **v != 0.0).count(), 1);
        assert!(c.contains(&1.0));
        assert!(lbp_histogram(&GrayImage::new(2, 5)).is_err());
    }

    #[test]
    fn hog_shape_and_constant() {
        let h = hog_features(&random_image(64, 64, 3)).unwrap();
        assert_eq!(h.len(), 324);
        for block in h.chunks(81) {
            assert!(block.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1.0 + 1e-6);
        }
        let z = hog_features(&GrayImage::from_fn(64, 64, |_, _| 9.0)).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        let e = hog_features(&GrayImage::new(48, 48)).unwrap_err();
        assert!(e.to_string().contains("64x64"));
    }

    #[test]
    fn mslbp_shape() {
        let f = multiscale_lbp(&random_image(64, 64, 4)).unwrap();
        assert_eq!(f.values.len(), 833);
        assert_eq!(Descriptor::LbpHog.extract(&random_image(50, 70, 2)).unwrap().values.len(), 383);
    }

    fn blobs(seed: u64) -> (Vec<FeatureVector>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Vec::new();
        let mut l = Vec::new();
        for i in 0..40 {
            let pos = i % 2 == 0;
            let c = if pos { 2.0 } else { -2.0 };
            f.push(FeatureVector {
                values: vec![c + rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
                descriptor_id: "t".into(),
            });
            l.push(pos);
        }
        (f, l)
    }

    #[test]
    fn svm_separable_and_calibrated() {
        let (f, l) = blobs(1);
        let m = train_svm(&f, &l, &SvmConfig::default()).unwrap();
        let acc = f.iter().zip(&l).filter(|(x, y)| m.predict(x).unwrap() == **y).count();
        assert_eq!(acc, f.len());
        let far = FeatureVector {
            values: vec![-6.0, 0.0],
            descriptor_id: "t".into(),
        };
        assert!(m.predict_score(&far).unwrap() < 0.5);
        let bad = FeatureVector {
            values: vec![0.0, 0.0],
            descriptor_id: "u".into(),
        };
        assert!(m.predict_score(&bad).is_err());
        assert!(train_svm(&f[..1], &l[..1], &SvmConfig::default()).is_err());
    }

    #[test]
    fn svm_xor() {
        let mut f = Vec::new();
        let mut l = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..80 {
            let (x, y): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            f.push(FeatureVector {
                values: vec![x, y],
                descriptor_id: "xor".into(),
            });
            l.push(x * y > 0.0);
        }
        let m = train_svm(&f, &l, &SvmConfig::default()).unwrap();
        let acc = f.iter().zip(&l).filter(|(x, y)| m.predict(x).unwrap() == **y).count();
        assert!(acc as f64 / 80.0 > 0.9, "accuracy {acc}/80");
    }

    #[test]
    fn platt_symmetric_case() {
        let (a, b) = fit_platt(&[-1.0, 1.0], &[false, true]);
        let p0 = 1.0 / (1.0 + b.exp());
        assert!((p0 - 0.5).abs() < 0.05);
        assert!(a < 0.0);
    }

    #[test]
    fn dump_round_trip_and_model_file() {
        let dir = tempfile::tempdir().unwrap();
        let (f, l) = blobs(2);
        let ids: Vec<String> = (0..f.len()).map(|i| format!("s{i}")).collect();
        let p = dir.path().join("feat.f32");
        write_feature_dump(&p, &ids, &f).unwrap();
        let (h, back) = read_feature_dump(&p).unwrap();
        assert_eq!((h.count, h.length), (40, 2));
        assert!((back[3].values[0] - f[3].values[0]).abs() < 1e-6);
        let m = train_svm(&f, &l, &SvmConfig::default()).unwrap();
        let mp = dir.path().join("svm.json");
        m.save(&mp).unwrap();
        assert_eq!(SvmModel::load(&mp).unwrap(), m);
    }
}
