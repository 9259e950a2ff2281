//! Brute-force reference implementations. Written for clarity, not speed,
//! and kept separate from the library code they check.

#![allow(dead_code)]

use pad_core::evalmetrics::ScoredSample;
use pad_core::imaging::GrayImage;

/// APCER and BPCER at `t` by direct counting (score >= t means attack).
pub fn rates(samples: &[ScoredSample], t: f64) -> (f64, f64) {
    let mut att = 0;
    let mut att_missed = 0;
    let mut gen = 0;
    let mut gen_rejected = 0;
    for s in samples {
        if s.truth {
            att += 1;
            if !(s.final_score >= t) {
                att_missed += 1;
            }
        } else {
            gen += 1;
            if s.final_score >= t {
                gen_rejected += 1;
            }
        }
    }
    (att_missed as f64 / att as f64, gen_rejected as f64 / gen as f64)
}

pub struct OracleRoc {
    pub thresholds: Vec<f64>,
    pub apcer: Vec<f64>,
    pub bpcer: Vec<f64>,
    pub eer: f64,
    pub eer_threshold: f64,
}

/// Every candidate threshold (`-inf`, each distinct score, `+inf`) is tried
/// independently. The EER is read off where APCER first reaches BPCER:
/// directly on an exact tie, by linear interpolation across the crossing
/// otherwise. The threshold is the midpoint of the crossing interval with
/// infinite ends replaced by `min - 1` and `max + 1`.
pub fn roc(samples: &[ScoredSample]) -> OracleRoc {
    let mut scores: Vec<f64> = samples.iter().map(|s| s.final_score).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let mut thresholds = vec![f64::NEG_INFINITY];
    thresholds.extend(&scores);
    thresholds.push(f64::INFINITY);
    let (apcer, bpcer): (Vec<f64>, Vec<f64>) = thresholds.iter().map(|&t| rates(samples, t)).unzip();

    let finite = |t: f64| {
        if t == f64::NEG_INFINITY {
            scores[0] - 1.0
        } else if t == f64::INFINITY {
            scores[scores.len() - 1] + 1.0
        } else {
            t
        }
    };
    let mut k = 0;
    while apcer[k] < bpcer[k] {
        k += 1;
    }
    let (eer, eer_threshold) = if apcer[k] == bpcer[k] {
        let mut last = k;
        while last + 1 < thresholds.len() && apcer[last + 1] == bpcer[last + 1] {
            last += 1;
        }
        (apcer[k], (finite(thresholds[k - 1]) + finite(thresholds[last])) / 2.0)
    } else {
        let d0 = apcer[k - 1] - bpcer[k - 1];
        let d1 = apcer[k] - bpcer[k];
        let s = -d0 / (d1 - d0);
        (
            apcer[k - 1] + s * (apcer[k] - apcer[k - 1]),
            (finite(thresholds[k - 1]) + finite(thresholds[k])) / 2.0,
        )
    };
    OracleRoc {
        thresholds,
        apcer,
        bpcer,
        eer,
        eer_threshold,
    }
}

/// Uniform LBP(8,1) histogram with a plain double loop over pixels.
///
/// Neighbour `p` sits at angle `p * 45` degrees counter-clockwise from the
/// right, bilinearly interpolated; bit `p` is set when the interpolated
/// difference to the centre is `>= 0`. Uniform codes get bins in ascending
/// code order, all other codes share the last bin.
pub fn lbp_histogram(img: &GrayImage) -> Vec<f64> {
    let mut bin_of = [58usize; 256];
    let mut next = 0;
    for code in 0..256usize {
        let bits: Vec<usize> = (0..8).map(|i| (code >> i) & 1).collect();
        let transitions = (0..8).filter(|&i| bits[i] != bits[(i + 1) % 8]).count();
        if transitions <= 2 {
            bin_of[code] = next;
            next += 1;
        }
    }
    assert_eq!(next, 58);

    let mut hist = vec![0.0; 59];
    let mut n = 0.0;
    for y in 1..img.height - 1 {
        for x in 1..img.width - 1 {
            let c = img.get(x, y);
            let mut code = 0usize;
            for p in 0..8 {
                let a = std::f64::consts::FRAC_PI_4 * p as f64;
                let (mut px, mut py) = (a.cos(), -a.sin());
                for v in [&mut px, &mut py] {
                    if (*v - v.round()).abs() < 1e-9 {
                        *v = v.round();
                    }
                }
                let (fx, fy) = (px.floor(), py.floor());
                let (tx, ty) = (px - fx, py - fy);
                let (x0, y0) = ((x as f64 + fx) as usize, (y as f64 + fy) as usize);
                let mut d = 0.0;
                for (dx, dy, w) in [
                    (0, 0, (1.0 - tx) * (1.0 - ty)),
                    (1, 0, tx * (1.0 - ty)),
                    (0, 1, (1.0 - tx) * ty),
                    (1, 1, tx * ty),
                ] {
                    if w != 0.0 {
                        d += w * (img.get(x0 + dx, y0 + dy) - c);
                    }
                }
                if d >= 0.0 {
                    code |= 1 << p;
                }
            }
            hist[bin_of[code]] += 1.0;
            n += 1.0;
        }
    }
    hist.iter().map(|v| v / n).collect()
}

/// Per-cell 9-bin orientation histograms with hard binning, computed pixel by
/// pixel: central differences (one-sided at the border), unsigned angle, bin
/// `k` covering `[20k - 10, 20k + 10)` degrees. A purely vertical gradient
/// splits its magnitude between the two bins that meet at 90 degrees.
pub fn hog_cells(img: &GrayImage, cell: usize) -> Vec<f64> {
    let (cw, ch) = (img.width / cell, img.height / cell);
    let mut out = vec![0.0; cw * ch * 9];
    for cy in 0..ch {
        for cx in 0..cw {
            for y in cy * cell..(cy + 1) * cell {
                for x in cx * cell..(cx + 1) * cell {
                    let right = img.get((x + 1).min(img.width - 1), y);
                    let left = img.get(if x == 0 { 0 } else { x - 1 }, y);
                    let down = img.get(x, (y + 1).min(img.height - 1));
                    let up = img.get(x, if y == 0 { 0 } else { y - 1 });
                    let (gx, gy) = (right - left, down - up);
                    let mag = gx.hypot(gy);
                    let base = (cy * cw + cx) * 9;
                    if gx == 0.0 {
                        out[base + 4] += mag / 2.0;
                        out[base + 5] += mag / 2.0;
                        continue;
                    }
                    let mut deg = gy.atan2(gx).to_degrees();
                    while deg < 0.0 {
                        deg += 180.0;
                    }
                    while deg >= 180.0 {
                        deg -= 180.0;
                    }
                    let bin = ((deg + 10.0) / 20.0).floor() as usize % 9;
                    out[base + bin] += mag;
                }
            }
        }
    }
    out
}
