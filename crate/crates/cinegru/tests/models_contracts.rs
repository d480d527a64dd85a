//! Architecture contracts: parameter budgets against closed-form layer
//! sums, and the relative weight of the temporal add-on.

use cinegru::models::{
    build_baseline, build_hybrid, param_ratio, strip_head, ConvGruConfig, EncoderConfig,
};
use cinegru::nn::Mode;
use cinegru::tensor::Tensor;

/// Independent layer-by-layer count of a residual encoder + 1-unit head.
///
/// Convolutions carry no bias (batch norm follows each), batch norm counts
/// gamma + beta, the head is `C_last -> 1` with bias. Running statistics are
/// state, not weights.
fn closed_form_baseline_count(
    in_channels: usize,
    stage_channels: &[usize],
    blocks_per_stage: usize,
    stem_kernel: usize,
    first_stage_strided: bool,
) -> usize {
    let mut total = 0usize;
    let stem_out = stage_channels[0];
    total += stem_out * in_channels * stem_kernel * stem_kernel; // stem conv
    total += 2 * stem_out; // stem bn

    let mut prev = stem_out;
    for (i, &c) in stage_channels.iter().enumerate() {
        for b in 0..blocks_per_stage {
            let (block_in, strided) = if b == 0 {
                (prev, if i == 0 { first_stage_strided } else { true })
            } else {
                (c, false)
            };
            total += c * block_in * 9 + 2 * c; // conv1 + bn1
            total += c * c * 9 + 2 * c; // conv2 + bn2
            if strided || block_in != c {
                total += c * block_in + 2 * c; // 1×1 downsample conv + bn
            }
        }
        prev = c;
    }
    total += prev + 1; // linear head
    total
}

fn closed_form_gru_head_count(input: usize, hidden: usize, kernel: usize) -> usize {
    let k2 = kernel * kernel;
    3 * (input * hidden * k2)       // Wz, Wr, Wc
        + 3 * (hidden * hidden * k2) // Uz, Ur, Uc
        + 3 * hidden                 // bz, br, bc
        + (hidden + 1) // head
}

#[test]
fn resnet18_parameter_count_matches_closed_form() {
    let cfg = EncoderConfig::resnet18();
    let expected = closed_form_baseline_count(2, &[64, 128, 256, 512], 2, 7, false);
    assert_eq!(expected, 11_173_889, "closed-form arithmetic drifted");
    let baseline = build_baseline::<f32>(&cfg, 1).unwrap();
    assert_eq!(baseline.params().count_params(), expected);
}

#[test]
fn tiny_parameter_count_matches_closed_form() {
    let cfg = EncoderConfig::tiny();
    let expected = closed_form_baseline_count(2, &[16, 32, 64], 1, 3, true);
    let baseline = build_baseline::<f32>(&cfg, 1).unwrap();
    assert_eq!(baseline.params().count_params(), expected);
}

#[test]
fn default_gru_head_count_is_470145() {
    let expected = closed_form_gru_head_count(512, 32, 3);
    assert_eq!(expected, 470_145);

    let enc_cfg = EncoderConfig::resnet18();
    let encoder = cinegru::models::Encoder::<f32>::new(enc_cfg.clone(), 1).unwrap();
    let hybrid = build_hybrid(encoder, &ConvGruConfig::default_for(&enc_cfg), 1).unwrap();
    assert_eq!(hybrid.temporal_params().count_params(), expected);
}

#[test]
fn temporal_addon_is_a_few_percent_of_the_baseline() {
    // Shape-only construction of the full-scale pair.
    let enc_cfg = EncoderConfig::resnet18();
    let baseline = build_baseline::<f32>(&enc_cfg, 1).unwrap();
    let encoder = cinegru::models::Encoder::<f32>::new(enc_cfg.clone(), 2).unwrap();
    let hybrid = build_hybrid(encoder, &ConvGruConfig::default_for(&enc_cfg), 2).unwrap();
    let ratio = param_ratio(&baseline, &hybrid);
    assert!(
        (0.03..=0.06).contains(&ratio),
        "temporal/baseline parameter ratio {ratio} outside [0.03, 0.06]"
    );
}

#[test]
fn stripping_keeps_parameters_aliased() {
    let cfg = EncoderConfig::tiny();
    let baseline = build_baseline::<f32>(&cfg, 3).unwrap();
    let stem_before = baseline.encoder.params().get("encoder.stem.conv.weight").unwrap().clone();
    let encoder = strip_head(baseline);
    // Mutating through the stripped encoder is visible through the old handle.
    let stem_after = encoder.params().get("encoder.stem.conv.weight").unwrap().clone();
    stem_after.update_data(|w| w[0] = 0.5);
    assert_eq!(stem_before.data()[0], 0.5, "parameters must alias, not copy");
}

#[test]
fn eval_scores_are_pure_functions_of_input_and_state() {
    let cfg = EncoderConfig::tiny();
    let baseline = build_baseline::<f32>(&cfg, 4).unwrap();
    let pairs = Tensor::from_vec(vec![0.4; 2 * 2 * 16 * 16], &[2, 2, 16, 16]);
    let _ = baseline.forward(&pairs, Mode::Train); // initialize running stats
    let a: Vec<u32> = baseline.forward(&pairs, Mode::Eval).to_vec().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u32> = baseline.forward(&pairs, Mode::Eval).to_vec().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
}
