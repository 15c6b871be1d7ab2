use fewuser::config::RunConfig;
use fewuser::corpus::synthetic::SyntheticSpec;
use fewuser::trainer::run_config;

fn zero_shot(spec: SyntheticSpec, encoder_seed: u64) -> f64 {
    let mut cfg = RunConfig::default();
    cfg.dataset.synthetic = Some(spec);
    cfg.split.shots = 0;
    cfg.encoder.toy.seed = encoder_seed;
    run_config(&cfg).unwrap().1.averaged.acc
}

#[test]
fn zero_shot_is_at_chance_when_text_carries_no_label() {
    let accs: Vec<f64> = (0..20)
        .map(|s| zero_shot(SyntheticSpec { mention_city: false, seed: s, ..SyntheticSpec::default() }, s))
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    // chance is 1/20
    assert!((mean - 0.05).abs() < 0.03, "mean {mean}, runs {accs:?}");
}

#[test]
fn aligned_zero_shot_beats_twice_chance_on_clean_text() {
    // Posts carry only the city name, so no shared tokens bias the match.
    let spec = SyntheticSpec { noise_words_per_post: 0, ..SyntheticSpec::default() };
    let mut cfg = RunConfig::default();
    cfg.dataset.synthetic = Some(spec);
    cfg.split.shots = 0;
    cfg.representation.field_filter = Some(fewuser::user_repr::FieldFilter::NoPostMeta);
    let acc = run_config(&cfg).unwrap().1.averaged.acc;
    assert!(acc > 2.0 / 20.0, "acc {acc}");
}
