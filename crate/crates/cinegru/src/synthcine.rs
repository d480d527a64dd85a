//! Synthetic cine-sequence generator, frame-pair preselection and the
//! on-disk dataset format.
//!
//! Each series shows two textured regions meeting at a horizontal interface.
//! The lower region slides tangentially along the interface following
//! `s(t) = amplitude · sin(2π · cycles · t / T)` while the upper region
//! stays put, so a healthy (label 0) series exhibits free sliding
//! everywhere. In a positive (label 1) series a contiguous patch of the
//! interface is tethered: within a blending band above the interface the
//! upper texture is dragged along with the lower region, locally erasing
//! the relative motion — the signal a classifier has to find.
//!
//! Two difficulty modes exist. In `pairwise_detectable` the best frame pair
//! already exposes the signal. In `temporal_only` every frame additionally
//! receives global affine jitter: seeded random translation on the order of
//! the slip amplitude, plus a slow sway of position and brightness over the
//! series whose extremes coincide with same-sign slip peaks. The pair with
//! the largest intensity difference — the one the frame-pair selector
//! picks — therefore joins two frames in nearly identical slip phase and
//! carries almost no class signal, while consecutive pairs taken together
//! remain fully informative. This alignment requires the cycle count to be
//! an even integer (slip phases half a series apart must match).

use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, stream};
use crate::tensor::{Element, Tensor};

pub const SERIES_MAGIC: &[u8; 4] = b"CINE";
pub const SERIES_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a series file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unknown series file version {version}")]
    UnknownVersion { path: String, version: u32 },
    #[error("{path}: truncated series file")]
    Truncated { path: String },
    #[error("checksum mismatch in {path}: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { path: String, stored: u32, computed: u32 },
    #[error("manifest {manifest}: missing series file {path}")]
    MissingFile { manifest: String, path: String },
    #[error("manifest {manifest}: duplicate series id {id}")]
    DuplicateId { manifest: String, id: String },
    #[error("manifest {manifest}: {path}: checksum does not match manifest record")]
    ManifestChecksum { manifest: String, path: String },
    #[error("manifest parse error: {0}")]
    ManifestParse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionMode {
    /// The selected inspiration/expiration pair carries the class signal.
    PairwiseDetectable,
    /// Global per-frame jitter makes any single pair ambiguous; only the
    /// full sequence is reliable.
    TemporalOnly,
}

impl std::str::FromStr for MotionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pairwise_detectable" => Ok(MotionMode::PairwiseDetectable),
            "temporal_only" => Ok(MotionMode::TemporalOnly),
            other => Err(format!("unknown mode {other:?} (expected pairwise_detectable or temporal_only)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Acquisition metadata only; carried through manifests.
    pub frame_interval_s: f64,
    pub slip_amplitude_px: f64,
    /// Number of strain/relax motion cycles over the series.
    pub cycles: f64,
    /// Fraction of the interface width that is tethered in positives.
    pub adhesion_patch_frac: f64,
    pub noise_sigma: f64,
    pub mode: MotionMode,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            t: 30,
            h: 64,
            w: 48,
            frame_interval_s: 0.4,
            slip_amplitude_px: 5.0,
            cycles: 2.0,
            // Wide enough that the tether interior stays measurable even
            // across a peak-to-trough pair (content travels 2·amplitude).
            adhesion_patch_frac: 0.5,
            noise_sigma: 0.02,
            mode: MotionMode::TemporalOnly,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.t < 2 {
            return Err(SynthError::InvalidConfig(format!("need T >= 2 frames, got {}", self.t)));
        }
        if self.h < 16 || self.w < 8 {
            return Err(SynthError::InvalidConfig(format!(
                "spatial extents too small: {}x{}",
                self.h, self.w
            )));
        }
        if !(0.0..1.0).contains(&self.adhesion_patch_frac) || self.adhesion_patch_frac <= 0.0 {
            return Err(SynthError::InvalidConfig(format!(
                "adhesion_patch_frac must lie in (0,1), got {}",
                self.adhesion_patch_frac
            )));
        }
        if self.patch_width() < 2 {
            return Err(SynthError::InvalidConfig(format!(
                "tethered patch narrower than 2 px ({} px)",
                self.patch_width()
            )));
        }
        if self.slip_amplitude_px != 0.0 && self.slip_amplitude_px < 1.0 {
            return Err(SynthError::InvalidConfig(format!(
                "slip amplitude below 1 px is unmeasurable, got {}",
                self.slip_amplitude_px
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(SynthError::InvalidConfig("negative noise sigma".into()));
        }
        if self.cycles <= 0.0 {
            return Err(SynthError::InvalidConfig(format!(
                "cycles must be positive, got {}",
                self.cycles
            )));
        }
        if self.mode == MotionMode::TemporalOnly
            && (self.cycles.fract() != 0.0 || (self.cycles as u64) % 2 != 0)
        {
            return Err(SynthError::InvalidConfig(format!(
                "temporal_only mode needs an even integer cycle count so the sway \
                 extremes align with same-sign slip peaks, got {}",
                self.cycles
            )));
        }
        Ok(())
    }

    /// Interface row: first row of the sliding (lower) region.
    pub fn interface_row(&self) -> usize {
        self.h / 2
    }

    pub fn patch_width(&self) -> usize {
        (self.adhesion_patch_frac * self.w as f64).round() as usize
    }

    /// Rows above the interface that move rigidly with the tether.
    pub fn tether_solid_rows(&self) -> usize {
        ((0.19 * self.h as f64).round() as usize).max(6)
    }

    /// Rows over which the tether blends back to the static region.
    pub fn tether_ramp_rows(&self) -> usize {
        ((0.09 * self.h as f64).round() as usize).max(3)
    }

    /// Tangential displacement of the sliding region at frame `t`.
    pub fn slip_at(&self, t: usize) -> f64 {
        self.slip_amplitude_px
            * (2.0 * std::f64::consts::PI * self.cycles * t as f64 / self.t as f64).sin()
    }

    /// Amplitude of the slow horizontal sway in `temporal_only` mode.
    pub fn sway_amplitude(&self) -> f64 {
        0.6 * self.slip_amplitude_px
    }

    /// Relative amplitude of the slow brightness sway in `temporal_only`
    /// mode. Intensity differences grow linearly in the gain gap (texture
    /// displacement saturates beyond the correlation length), so this is
    /// what pins the argmax of the pair selector to the sway extremes.
    pub fn gain_sway(&self) -> f64 {
        if self.slip_amplitude_px == 0.0 {
            0.0
        } else {
            0.12
        }
    }

    /// Frame of the first slip extreme; the sway peaks there too.
    fn slip_peak_frame(&self) -> f64 {
        self.t as f64 / (4.0 * self.cycles)
    }

    /// Sway phase at frame `t`: one full period over the series, extremes
    /// aligned with same-sign slip peaks.
    pub fn sway_phase(&self, t: usize) -> f64 {
        (2.0 * std::f64::consts::PI * (t as f64 - self.slip_peak_frame()) / self.t as f64).cos()
    }

    /// Slow horizontal sway at frame `t`.
    pub fn sway_at(&self, t: usize) -> f64 {
        self.sway_amplitude() * self.sway_phase(t)
    }

    /// Per-frame random horizontal jitter bound in `temporal_only` mode.
    pub fn jitter_x_max(&self) -> f64 {
        0.25 * self.slip_amplitude_px
    }

    /// Per-frame random vertical jitter bound in `temporal_only` mode
    /// (capped: the tether band geometry must survive the shift).
    pub fn jitter_y_max(&self) -> f64 {
        (0.6 * self.slip_amplitude_px).min(3.0)
    }
}

/// One cine sequence with its identity and label.
///
/// Frames are row-major `[T, H, W]` values in `[0, 1]`, stored at the file
/// precision (f32) so save/load round trips are bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub series_id: String,
    pub patient_id: String,
    pub label: u8,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub frames: Vec<f32>,
}

impl Series {
    pub fn frame(&self, t: usize) -> &[f32] {
        let hw = self.h * self.w;
        &self.frames[t * hw..(t + 1) * hw]
    }

    /// View the frames as a `[T,H,W]` tensor at the requested precision.
    pub fn frames_tensor<E: Element>(&self) -> Tensor<E> {
        let data: Vec<E> = self.frames.iter().map(|&v| E::from_f32(v)).collect();
        Tensor::from_vec(data, &[self.t, self.h, self.w])
    }

    pub fn crc32(&self) -> u32 {
        let mut crc = Crc32::new();
        for &v in &self.frames {
            crc.update(&v.to_le_bytes());
        }
        crc.finish()
    }
}

// ── Generation ───────────────────────────────────────────────────────

/// Smoothed seeded noise, periodic in x (sliding wraps seamlessly).
/// Gaussian smoothing with σ = 2 px leaves a correlation length around
/// 4 px, comfortable for 8-px block matching.
fn texture(seed: u64, label: &str, h: usize, w: usize, base: f64) -> Vec<f64> {
    let mut rng = stream(seed, label);
    let mut noise: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let sigma = 2.0f64;
    let radius = 5i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();

    // Horizontal pass, circular.
    let mut blurred = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let dx = k as i64 - radius;
                let xi = (x as i64 + dx).rem_euclid(w as i64) as usize;
                acc += kv * noise[y * w + xi];
            }
            blurred[y * w + x] = acc / ksum;
        }
    }
    // Vertical pass, clamped.
    for x in 0..w {
        for y in 0..h {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let dy = (y as i64 + k as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += kv * blurred[dy * w + x];
            }
            noise[y * w + x] = acc / ksum;
        }
    }

    let mean = noise.iter().sum::<f64>() / noise.len() as f64;
    let var = noise.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / noise.len() as f64;
    let std = var.sqrt().max(1e-9);
    noise.iter().map(|v| base + 0.13 * (v - mean) / std).collect()
}

/// Bilinear lookup; x wraps (textures are x-periodic), y clamps.
fn sample_bilinear(img: &[f64], h: usize, w: usize, fx: f64, fy: f64) -> f64 {
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let xi = |x: f64| (x as i64).rem_euclid(w as i64) as usize;
    let yi = |y: f64| (y as i64).clamp(0, h as i64 - 1) as usize;
    let (x0u, x1u) = (xi(x0), xi(x0 + 1.0));
    let (y0u, y1u) = (yi(y0), yi(y0 + 1.0));
    let a = img[y0u * w + x0u];
    let b = img[y0u * w + x1u];
    let c = img[y1u * w + x0u];
    let d = img[y1u * w + x1u];
    a * (1.0 - tx) * (1.0 - ty) + b * tx * (1.0 - ty) + c * (1.0 - tx) * ty + d * tx * ty
}

/// Ground-truth tether span `[x0, x1)` a positive series generated from
/// `(cfg, seed)` will carry. For evaluating oracles against generated data.
pub fn patch_span(cfg: &SynthConfig, seed: u64) -> (usize, usize) {
    let pw = cfg.patch_width();
    let lo = 2usize;
    let hi = cfg.w.saturating_sub(pw + 2).max(lo);
    let x0 = stream(seed, "patch").gen_range(lo..=hi);
    (x0, x0 + pw)
}

/// Generate one labeled series. Bit-deterministic in `(cfg, label, seed)`.
pub fn generate_series(cfg: &SynthConfig, label: u8, seed: u64) -> Result<Series, SynthError> {
    cfg.validate()?;
    if label > 1 {
        return Err(SynthError::InvalidConfig(format!("label must be 0 or 1, got {label}")));
    }
    let (t_len, h, w) = (cfg.t, cfg.h, cfg.w);
    let y0 = cfg.interface_row() as f64;

    // Static scene: upper texture (darker) above the interface, lower
    // texture below. The brightness offset makes the interface locatable.
    let tex_a = texture(seed, "texture.a", h, w, 0.40);
    let tex_b = texture(seed, "texture.b", h, w, 0.62);
    let scene: Vec<f64> = (0..h * w)
        .map(|i| if (i / w) < cfg.interface_row() { tex_a[i] } else { tex_b[i] })
        .collect();

    // Tethered patch span (positives only).
    let (px0, px1) = patch_span(cfg, seed);
    let (patch_x0, patch_x1) = if label == 1 { (px0 as f64, px1 as f64) } else { (0.0, 0.0) };
    let edge_ramp = 4.0;
    let solid = cfg.tether_solid_rows() as f64;
    let ramp = cfg.tether_ramp_rows() as f64;

    // How strongly material at (x, y) follows the sliding region.
    let weight = |x: f64, y: f64| -> f64 {
        if y >= y0 {
            return 1.0; // lower region always slides
        }
        if label == 0 {
            return 0.0; // free slip: upper region static
        }
        let depth = y0 - y;
        let vertical = if depth <= solid {
            1.0
        } else if depth <= solid + ramp {
            1.0 - (depth - solid) / ramp
        } else {
            0.0
        };
        let horizontal = if x < patch_x0 - edge_ramp || x > patch_x1 + edge_ramp {
            0.0
        } else if x < patch_x0 {
            1.0 - (patch_x0 - x) / edge_ramp
        } else if x > patch_x1 {
            1.0 - (x - patch_x1) / edge_ramp
        } else {
            1.0
        };
        vertical * horizontal
    };

    let mut jitter_rng = stream(seed, "jitter");
    let mut noise_rng = stream(seed, "noise");
    let gauss = rand_distr::Normal::new(0.0f64, 1.0).expect("unit normal");

    let mut frames = Vec::with_capacity(t_len * h * w);
    for t in 0..t_len {
        let slip = cfg.slip_at(t);
        let (jx, jy, gain) = match cfg.mode {
            MotionMode::PairwiseDetectable => (0.0, 0.0, 1.0),
            MotionMode::TemporalOnly => {
                let jxm = cfg.jitter_x_max();
                let jym = cfg.jitter_y_max();
                let jx = if jxm > 0.0 { jitter_rng.gen_range(-jxm..=jxm) } else { 0.0 };
                let jy = if jym > 0.0 { jitter_rng.gen_range(-jym..=jym) } else { 0.0 };
                (cfg.sway_at(t) + jx, jy, 1.0 + cfg.gain_sway() * cfg.sway_phase(t))
            }
        };
        for y in 0..h {
            for x in 0..w {
                let y_src = y as f64 - jy;
                let u = jx + slip * weight(x as f64, y_src);
                let mut v = gain * sample_bilinear(&scene, h, w, x as f64 - u, y_src);
                if cfg.noise_sigma > 0.0 {
                    use rand_distr::Distribution;
                    v += cfg.noise_sigma * gauss.sample(&mut noise_rng);
                }
                frames.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }

    Ok(Series {
        series_id: "series".into(),
        patient_id: "patient".into(),
        label,
        t: t_len,
        h,
        w,
        frames,
    })
}

// ── Frame-pair preselection ──────────────────────────────────────────

/// The two frames whose mean absolute intensity difference is largest,
/// standing in for the pair with the largest abdominal displacement.
/// Ties break toward the smallest `i`, then smallest `j`; always `i < j`.
pub fn select_inspexp_pair(series: &Series) -> (usize, usize) {
    assert!(series.t >= 2, "select_inspexp_pair: need at least two frames");
    let hw = (series.h * series.w) as f64;
    let mut best = (0usize, 1usize);
    let mut best_score = f64::NEG_INFINITY;
    for i in 0..series.t {
        for j in (i + 1)..series.t {
            let (fa, fb) = (series.frame(i), series.frame(j));
            let mut acc = 0.0f64;
            for (&a, &b) in fa.iter().zip(fb) {
                acc += (a as f64 - b as f64).abs();
            }
            let score = acc / hw;
            if score > best_score {
                best_score = score;
                best = (i, j);
            }
        }
    }
    best
}

// ── Series file format ───────────────────────────────────────────────

/// Table-driven CRC-32 (IEEE 802.3 polynomial).
pub struct Crc32 {
    state: u32,
}

impl Default for Crc32 {
    fn default() -> Self {
        Self::new()
    }
}

static CRC_TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();

fn crc_table() -> &'static [u32; 256] {
    CRC_TABLE.get_or_init(|| {
        let mut table = [0u32; 256];
        for (i, entry) in table.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *entry = c;
        }
        table
    })
}

impl Crc32 {
    pub fn new() -> Self {
        Crc32 { state: 0xFFFF_FFFF }
    }

    pub fn update(&mut self, bytes: &[u8]) {
        let table = crc_table();
        for &b in bytes {
            self.state = table[((self.state ^ b as u32) & 0xFF) as usize] ^ (self.state >> 8);
        }
    }

    pub fn finish(&self) -> u32 {
        self.state ^ 0xFFFF_FFFF
    }
}

/// Write one series:
/// `"CINE" | version u32 | T,H,W u32 | T·H·W little-endian f32 | crc32 u32`.
pub fn save_series(series: &Series, path: &Path) -> Result<(), SynthError> {
    let display = path.display().to_string();
    let io_err = |source| SynthError::Io { path: display.clone(), source };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut payload = Vec::with_capacity(series.frames.len() * 4);
    for &v in &series.frames {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let mut crc = Crc32::new();
    crc.update(&payload);

    let mut out = Vec::with_capacity(payload.len() + 24);
    out.extend_from_slice(SERIES_MAGIC);
    out.extend_from_slice(&SERIES_VERSION.to_le_bytes());
    for dim in [series.t, series.h, series.w] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.finish().to_le_bytes());

    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out).map_err(|source| SynthError::Io { path: display.clone(), source })?;
    fs::rename(&tmp, path).map_err(|source| SynthError::Io { path: display, source })
}

/// Read one series, verifying the payload checksum. Identity fields are
/// restored by the caller (the manifest owns them).
pub fn load_series(path: &Path) -> Result<Series, SynthError> {
    let display = path.display().to_string();
    let bytes =
        fs::read(path).map_err(|source| SynthError::Io { path: display.clone(), source })?;
    let mut cursor = io::Cursor::new(bytes.as_slice());
    let truncated = || SynthError::Truncated { path: display.clone() };

    let mut magic = [0u8; 4];
    cursor.read_exact(&mut magic).map_err(|_| truncated())?;
    if &magic != SERIES_MAGIC {
        return Err(SynthError::BadMagic { path: display });
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |cursor: &mut io::Cursor<&[u8]>| -> Result<u32, SynthError> {
        cursor.read_exact(&mut u32buf).map_err(|_| SynthError::Truncated { path: display.clone() })?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut cursor)?;
    if version != SERIES_VERSION {
        return Err(SynthError::UnknownVersion { path: display, version });
    }
    let t = read_u32(&mut cursor)? as usize;
    let h = read_u32(&mut cursor)? as usize;
    let w = read_u32(&mut cursor)? as usize;

    let numel = t * h * w;
    let mut payload = vec![0u8; numel * 4];
    cursor.read_exact(&mut payload).map_err(|_| truncated())?;
    let stored = read_u32(&mut cursor)?;
    let mut crc = Crc32::new();
    crc.update(&payload);
    let computed = crc.finish();
    if stored != computed {
        return Err(SynthError::ChecksumMismatch { path: display, stored, computed });
    }

    let frames: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Series {
        series_id: String::new(),
        patient_id: String::new(),
        label: 0,
        t,
        h,
        w,
        frames,
    })
}

// ── Dataset manifest ─────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesRecord {
    pub series_id: String,
    pub patient_id: String,
    pub label: u8,
    /// Path relative to the manifest location.
    pub path: String,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub crc32: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: SynthConfig,
    pub seed: u64,
    pub n_patients: usize,
    pub prevalence: f64,
    pub series: Vec<SeriesRecord>,
}

/// How many series each patient contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesPerPatient {
    Fixed(usize),
    /// Uniform in `lo..=hi` per patient.
    Range(usize, usize),
    /// Uniform-ish in `lo..=hi`, constrained to a fixed dataset total.
    RangeTotal(usize, usize, usize),
}

impl SeriesPerPatient {
    fn counts(&self, n_patients: usize, seed: u64) -> Result<Vec<usize>, SynthError> {
        let mut rng = stream(seed, "series.counts");
        match *self {
            SeriesPerPatient::Fixed(n) => {
                if n == 0 {
                    return Err(SynthError::InvalidConfig("series per patient must be ≥ 1".into()));
                }
                Ok(vec![n; n_patients])
            }
            SeriesPerPatient::Range(lo, hi) => {
                if lo == 0 || hi < lo {
                    return Err(SynthError::InvalidConfig(format!(
                        "bad series-per-patient range {lo}-{hi}"
                    )));
                }
                Ok((0..n_patients).map(|_| rng.gen_range(lo..=hi)).collect())
            }
            SeriesPerPatient::RangeTotal(lo, hi, total) => {
                if lo == 0 || hi < lo {
                    return Err(SynthError::InvalidConfig(format!(
                        "bad series-per-patient range {lo}-{hi}"
                    )));
                }
                if total < lo * n_patients || total > hi * n_patients {
                    return Err(SynthError::InvalidConfig(format!(
                        "total {total} series unreachable with {n_patients} patients at {lo}-{hi} each"
                    )));
                }
                let mut counts = vec![lo; n_patients];
                let mut remaining = total - lo * n_patients;
                while remaining > 0 {
                    let p = rng.gen_range(0..n_patients);
                    if counts[p] < hi {
                        counts[p] += 1;
                        remaining -= 1;
                    }
                }
                Ok(counts)
            }
        }
    }
}

impl std::str::FromStr for SeriesPerPatient {
    type Err = String;
    /// `"2"` or `"1-3"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some((lo, hi)) = s.split_once('-') {
            let lo = lo.parse().map_err(|_| format!("bad range {s:?}"))?;
            let hi = hi.parse().map_err(|_| format!("bad range {s:?}"))?;
            Ok(SeriesPerPatient::Range(lo, hi))
        } else {
            let n = s.parse().map_err(|_| format!("bad count {s:?}"))?;
            Ok(SeriesPerPatient::Fixed(n))
        }
    }
}

/// Generate a dataset directory: `series/<id>.cine` files plus
/// `manifest.json`. All series of one patient share its label.
pub fn generate_dataset(
    cfg: &SynthConfig,
    n_patients: usize,
    series_per_patient: SeriesPerPatient,
    prevalence: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest, SynthError> {
    cfg.validate()?;
    if n_patients == 0 {
        return Err(SynthError::InvalidConfig("need at least one patient".into()));
    }
    if !(prevalence > 0.0 && prevalence < 1.0) {
        return Err(SynthError::InvalidConfig(format!(
            "prevalence must lie strictly in (0,1), got {prevalence}"
        )));
    }

    // Patient labels: a seeded shuffle puts exactly round(n·prevalence)
    // positives, so the realized prevalence matches the request.
    let n_positive = (n_patients as f64 * prevalence).round() as usize;
    let mut order: Vec<usize> = (0..n_patients).collect();
    let mut label_rng = stream(seed, "labels");
    for i in (1..n_patients).rev() {
        order.swap(i, label_rng.gen_range(0..=i));
    }
    let mut labels = vec![0u8; n_patients];
    for &p in order.iter().take(n_positive) {
        labels[p] = 1;
    }

    let counts = series_per_patient.counts(n_patients, seed)?;

    struct Job {
        series_id: String,
        patient_id: String,
        label: u8,
        seed: u64,
    }
    let mut jobs = Vec::new();
    for p in 0..n_patients {
        let patient_id = format!("p{p:03}");
        for s in 0..counts[p] {
            let series_id = format!("{patient_id}s{s}");
            jobs.push(Job {
                seed: derive_seed(seed, &format!("series.{series_id}")),
                series_id,
                patient_id: patient_id.clone(),
                label: labels[p],
            });
        }
    }

    let records: Result<Vec<SeriesRecord>, SynthError> = jobs
        .par_iter()
        .map(|job| {
            let mut series = generate_series(cfg, job.label, job.seed)?;
            series.series_id = job.series_id.clone();
            series.patient_id = job.patient_id.clone();
            let rel_path = format!("series/{}.cine", job.series_id);
            save_series(&series, &out_dir.join(&rel_path))?;
            Ok(SeriesRecord {
                series_id: job.series_id.clone(),
                patient_id: job.patient_id.clone(),
                label: job.label,
                path: rel_path,
                t: series.t,
                h: series.h,
                w: series.w,
                crc32: format!("{:08x}", series.crc32()),
            })
        })
        .collect();

    let manifest = DatasetManifest {
        version: 1,
        config: cfg.clone(),
        seed,
        n_patients,
        prevalence,
        series: records?,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(out_dir.join("manifest.json"), json).map_err(|source| SynthError::Io {
        path: out_dir.join("manifest.json").display().to_string(),
        source,
    })?;
    Ok(manifest)
}

/// A manifest together with its fully loaded, checksum-verified series.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub series: Vec<Series>,
    pub root: PathBuf,
}

impl Dataset {
    pub fn patient_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.series.iter().map(|s| s.patient_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

/// Load and validate a dataset from its manifest: unique ids, files present,
/// checksums matching both the file trailer and the manifest record.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, SynthError> {
    let display = manifest_path.display().to_string();
    let json = fs::read_to_string(manifest_path)
        .map_err(|source| SynthError::Io { path: display.clone(), source })?;
    let manifest: DatasetManifest = serde_json::from_str(&json)?;
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();

    let mut seen = std::collections::BTreeSet::new();
    for record in &manifest.series {
        if !seen.insert(&record.series_id) {
            return Err(SynthError::DuplicateId {
                manifest: display.clone(),
                id: record.series_id.clone(),
            });
        }
        if !root.join(&record.path).exists() {
            return Err(SynthError::MissingFile {
                manifest: display.clone(),
                path: record.path.clone(),
            });
        }
    }

    let series: Result<Vec<Series>, SynthError> = manifest
        .series
        .par_iter()
        .map(|record| {
            let mut series = load_series(&root.join(&record.path))?;
            if format!("{:08x}", series.crc32()) != record.crc32 {
                return Err(SynthError::ManifestChecksum {
                    manifest: display.clone(),
                    path: record.path.clone(),
                });
            }
            series.series_id = record.series_id.clone();
            series.patient_id = record.patient_id.clone();
            series.label = record.label;
            Ok(series)
        })
        .collect();

    Ok(Dataset { manifest, series: series?, root })
}
