//! Block-matching displacement oracle.
//!
//! An independent measurement of tangential sliding across the interface of
//! a generated series: no shared code with the generator's warping, just
//! SSD block matching with subpixel refinement. Used to verify that the
//! synthetic data actually encodes (or locally suppresses) sliding motion.

use cinegru::synthcine::{select_inspexp_pair, Series, SynthConfig};

/// Frame values as f64 for matching arithmetic.
pub fn frame_f64(series: &Series, t: usize) -> Vec<f64> {
    series.frame(t).iter().map(|&v| v as f64).collect()
}

/// Locate the interface (first row of the brighter lower region) by the
/// largest step in row-mean brightness. The two-region scene puts the
/// interface near mid-height, so only the central band is searched — this
/// keeps texture flukes far from the interface out of the running.
pub fn detect_interface(frame: &[f64], h: usize, w: usize) -> usize {
    let row_mean = |y: usize| -> f64 { frame[y * w..(y + 1) * w].iter().sum::<f64>() / w as f64 };
    let mut best_y = h / 2;
    let mut best_step = f64::NEG_INFINITY;
    for y in (h / 2 - h / 6)..(h / 2 + h / 6) {
        let above: f64 = (y - 4..y).map(row_mean).sum::<f64>() / 4.0;
        let below: f64 = (y..y + 4).map(row_mean).sum::<f64>() / 4.0;
        let step = below - above;
        if step > best_step {
            best_step = step;
            best_y = y;
        }
    }
    best_y
}

/// SSD between a reference block and the target block shifted by `(dx, dy)`.
/// Columns wrap (textures are x-periodic); rows must stay in bounds.
#[allow(clippy::too_many_arguments)]
fn block_ssd(
    reference: &[f64],
    target: &[f64],
    h: usize,
    w: usize,
    rows: (usize, usize),
    cols: (usize, usize),
    dx: i64,
    dy: i64,
) -> Option<f64> {
    let (r0, r1) = rows;
    if (r0 as i64 + dy) < 0 || (r1 as i64 + dy) > h as i64 {
        return None;
    }
    let mut acc = 0.0;
    for r in r0..r1 {
        let tr = (r as i64 + dy) as usize;
        for c in cols.0..cols.1 {
            let sc = c % w;
            let tc = (c as i64 + dx).rem_euclid(w as i64) as usize;
            let d = reference[r * w + sc] - target[tr * w + tc];
            acc += d * d;
        }
    }
    Some(acc)
}

/// Best integer `(dx, dy)` in the search box, with parabolic subpixel
/// refinement of `dx`.
#[allow(clippy::too_many_arguments)]
pub fn match_block(
    reference: &[f64],
    target: &[f64],
    h: usize,
    w: usize,
    rows: (usize, usize),
    cols: (usize, usize),
    dx_range: (i64, i64),
    dy_range: (i64, i64),
) -> (f64, i64) {
    let mut best = (0i64, 0i64);
    let mut best_ssd = f64::INFINITY;
    let mut ssd_at = std::collections::HashMap::new();
    for dy in dy_range.0..=dy_range.1 {
        for dx in dx_range.0..=dx_range.1 {
            if let Some(ssd) = block_ssd(reference, target, h, w, rows, cols, dx, dy) {
                ssd_at.insert((dx, dy), ssd);
                if ssd < best_ssd {
                    best_ssd = ssd;
                    best = (dx, dy);
                }
            }
        }
    }
    // Parabolic refinement along dx at the winning dy.
    let (bx, by) = best;
    let sub = match (ssd_at.get(&(bx - 1, by)), ssd_at.get(&(bx + 1, by))) {
        (Some(&left), Some(&right)) => {
            let denom = left - 2.0 * best_ssd + right;
            if denom.abs() > 1e-12 {
                (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        }
        _ => 0.0,
    };
    (bx as f64 + sub, by)
}

/// Relative tangential displacement across the interface, per column
/// window: `dx(below) − dx(above)` for blocks hugging the interface.
pub fn relative_slip_profile(
    series: &Series,
    frame_a: usize,
    frame_b: usize,
    search_px: i64,
) -> Vec<(usize, f64)> {
    let (h, w) = (series.h, series.w);
    let fa = frame_f64(series, frame_a);
    let fb = frame_f64(series, frame_b);
    let y0a = detect_interface(&fa, h, w);
    let y0b = detect_interface(&fb, h, w);
    let dy_ab = y0b as i64 - y0a as i64;

    let block_h = 7usize;
    let gap = 2usize;
    let block_w = 8usize;
    let step = 2usize;

    let above_rows = (y0a.saturating_sub(gap + block_h), y0a.saturating_sub(gap));
    let below_rows = (y0a + gap, (y0a + gap + block_h).min(h));
    let dy_range = (dy_ab - 3, dy_ab + 3);

    let mut profile = Vec::new();
    let mut x = 0usize;
    while x + block_w <= w + step {
        let cols = (x, x + block_w); // may wrap past w
        let (dx_above, _) =
            match_block(&fa, &fb, h, w, above_rows, cols, (-search_px, search_px), dy_range);
        let (dx_below, _) =
            match_block(&fa, &fb, h, w, below_rows, cols, (-search_px, search_px), dy_range);
        profile.push((x + block_w / 2, dx_below - dx_above));
        x += step;
    }
    profile
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[idx]
}

/// Tether evidence in one frame pair: near 1 when part of the interface
/// slides while another part holds still, near 0 when sliding is uniform
/// (or absent).
pub fn pair_tether_score(series: &Series, frame_a: usize, frame_b: usize, search_px: i64) -> f64 {
    let profile = relative_slip_profile(series, frame_a, frame_b, search_px);
    let mut magnitudes: Vec<f64> = profile.iter().map(|(_, rel)| rel.abs()).collect();
    magnitudes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let hi = percentile(&magnitudes, 0.9);
    let lo = percentile(&magnitudes, 0.1);
    ((hi - lo) / hi.max(0.75)).clamp(0.0, 1.0)
}

/// Score from only the selected inspiration/expiration pair — what a
/// pair-based classifier could at best see.
pub fn single_pair_score(series: &Series, cfg: &SynthConfig) -> f64 {
    let (i, j) = select_inspexp_pair(series);
    let search = (2.0 * cfg.slip_amplitude_px).ceil() as i64 + 3;
    pair_tether_score(series, i, j, search)
}

/// Median tether score across all consecutive pairs — the full-sequence
/// evidence a temporal model can aggregate.
pub fn full_sequence_score(series: &Series, cfg: &SynthConfig) -> f64 {
    let search = (2.0 * cfg.slip_amplitude_px).ceil() as i64 + 3;
    let mut scores: Vec<f64> = (0..series.t - 1)
        .map(|t| pair_tether_score(series, t, t + 1, search))
        .collect();
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    percentile(&scores, 0.5)
}

/// Brute-force pairwise AUROC (ties half-credited); independent of the
/// crate's rank-based implementation.
pub fn brute_force_auroc(labels: &[u8], scores: &[f64]) -> f64 {
    let mut concordant = 0.0;
    let mut pairs = 0.0;
    for (i, (&li, &si)) in labels.iter().zip(scores).enumerate() {
        for (&lj, &sj) in labels.iter().zip(scores).skip(i + 1) {
            if li == lj {
                continue;
            }
            pairs += 1.0;
            let (pos, neg) = if li == 1 { (si, sj) } else { (sj, si) };
            if pos > neg {
                concordant += 1.0;
            } else if pos == neg {
                concordant += 0.5;
            }
        }
    }
    concordant / pairs
}
