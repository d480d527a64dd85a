// scratch probe (removed before final)
include!("/tmp/bm.rs");

use cinegru::synthcine::{generate_series, patch_span, MotionMode};

fn main() {
    let cfg = SynthConfig { mode: MotionMode::PairwiseDetectable, noise_sigma: 0.0, ..SynthConfig::default() };
    let seed = 57;
    let series = generate_series(&cfg, 1, seed).unwrap();
    let (px0, px1) = patch_span(&cfg, seed);
    let peak = (0..cfg.t).max_by(|&a,&b| cfg.slip_at(a).abs().partial_cmp(&cfg.slip_at(b).abs()).unwrap()).unwrap();
    println!("patch {px0}..{px1}, peak {peak} slip {:.3}", cfg.slip_at(peak));
    let fa = frame_f64(&series, 0);
    let fb = frame_f64(&series, peak);
    println!("interface f0: {}  fpeak: {}", detect_interface(&fa, cfg.h, cfg.w), detect_interface(&fb, cfg.h, cfg.w));
    let profile = relative_slip_profile(&series, 0, peak, 13);
    for (c, rel) in &profile {
        println!("center {c:2} rel {rel:+.2}");
    }
}
