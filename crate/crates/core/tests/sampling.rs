use guidance_lab::diffusion::{ddpm_sample, flow_sample};
use guidance_lab::metrics::suppression_rate;
use guidance_lab::toymodel::*;
use guidance_lab::*;

const A: [f64; 2] = [-2.0, 0.0];
const B: [f64; 2] = [2.0, 0.0];

fn trained(parameterization: Parameterization, seed: u64) -> (DenoiserModel64, NoiseSchedule64) {
    let data = make_dataset(500, &default_centers(), 1.5, seed).unwrap();
    let config = ModelConfig {
        parameterization,
        ..ModelConfig::default()
    };
    let init = DenoiserModel::init(config, seed).unwrap();
    let train_schedule = match parameterization {
        Parameterization::Epsilon => NoiseSchedule::ddpm_cosine(1000).unwrap(),
        Parameterization::Velocity => NoiseSchedule::flow_uniform(1000).unwrap(),
    };
    let (m, _) = train(&init, &data, &train_schedule, &TrainConfig::default(), seed).unwrap();
    let sampling = match parameterization {
        Parameterization::Epsilon => NoiseSchedule::ddpm_cosine(4).unwrap(),
        Parameterization::Velocity => NoiseSchedule::flow_uniform(4).unwrap(),
    };
    (m, sampling)
}

fn opts(n: usize) -> SampleOptions {
    SampleOptions {
        n_samples: n,
        record_trajectory: true,
    }
}

#[test]
fn nag_at_zero_scale_reproduces_the_baseline_trajectory() {
    let (m, s) = trained(Parameterization::Epsilon, 0);
    let (pos, neg) = (m.config.condition(0), m.config.condition(1));
    let base = ddpm_sample(&m, &pos, &neg, &s, &GuidanceConfig::none(), 5, opts(64)).unwrap();
    let zero = ddpm_sample(
        &m,
        &pos,
        &neg,
        &s,
        &GuidanceConfig::nag(0.0, 2.5, 0.25),
        5,
        opts(64),
    )
    .unwrap();
    assert_eq!(base.trajectory, zero.trajectory);
    let theta0 = GuidanceConfig::nag(4.0, 2.5, 0.25).with_theta(0.0);
    let stopped = ddpm_sample(&m, &pos, &neg, &s, &theta0, 5, opts(64)).unwrap();
    assert_eq!(base.trajectory, stopped.trajectory);
    assert!(stopped.traces.iter().all(|t| !t.active));
}

#[test]
fn early_stop_guides_only_the_first_step() {
    let (m, s) = trained(Parameterization::Epsilon, 1);
    let (pos, neg) = (m.config.condition(0), m.config.condition(1));
    let cfg = GuidanceConfig::nag(4.0, 2.5, 0.25).with_theta(0.25);
    let st = ddpm_sample(&m, &pos, &neg, &s, &cfg, 2, opts(8)).unwrap();
    let active: Vec<bool> = st.traces.iter().map(|t| t.active).collect();
    assert_eq!(active, [true, false, false, false]);
    assert!(st.traces[0].nag.is_some());
}

#[test]
fn nag_moves_samples_away_from_the_negative_mode() {
    let (m, s) = trained(Parameterization::Epsilon, 2);
    let (pos, neg) = (m.config.condition(0), m.config.condition(1));
    let base = ddpm_sample(&m, &pos, &neg, &s, &GuidanceConfig::none(), 9, opts(500)).unwrap();
    let nag = ddpm_sample(
        &m,
        &pos,
        &neg,
        &s,
        &GuidanceConfig::nag(4.0, 2.5, 0.25),
        9,
        opts(500),
    )
    .unwrap();
    let r0 = suppression_rate(&base.x, &B, &A).unwrap();
    let r1 = suppression_rate(&nag.x, &B, &A).unwrap();
    assert!(r0 >= 0.05 && r1 < r0, "baseline {r0}, nag {r1}");
    let ratio = nag
        .traces
        .iter()
        .filter_map(|t| t.max_out_ratio)
        .fold(0.0, f64::max);
    assert!(ratio <= 0.25 * 2.5 + 0.75 + 1e-9);
}

#[test]
fn velocity_model_samples_near_its_class() {
    let (m, s) = trained(Parameterization::Velocity, 3);
    let (pos, neg) = (m.config.condition(0), m.config.condition(1));
    let st = flow_sample(&m, &pos, &neg, &s, &GuidanceConfig::none(), 4, opts(500)).unwrap();
    let near_a = suppression_rate(&st.x, &A, &B).unwrap();
    assert!(near_a > 0.7, "fraction nearer A {near_a}");
    let nag = flow_sample(
        &m,
        &pos,
        &neg,
        &s,
        &GuidanceConfig::nag(4.0, 2.5, 0.25),
        4,
        opts(500),
    )
    .unwrap();
    assert!(suppression_rate(&nag.x, &B, &A).unwrap() <= suppression_rate(&st.x, &B, &A).unwrap());
}

#[test]
fn f32_and_f64_models_agree_closely() {
    let (m, s) = trained(Parameterization::Epsilon, 4);
    let mut buf = Vec::new();
    write_weights(&m, &mut buf).unwrap();
    let m32: DenoiserModel32 = read_weights(buf.as_slice()).unwrap();
    let s32 = NoiseSchedule::<f32>::ddpm_cosine(4).unwrap();
    let (pos, neg) = (m.config.condition(0), m.config.condition(1));
    let cfg = GuidanceConfig::nag(4.0, 2.5, 0.25);
    let cfg32 = GuidanceConfig::<f32>::nag(4.0, 2.5, 0.25);
    let a = ddpm_sample(&m, &pos, &neg, &s, &cfg, 6, opts(32)).unwrap();
    let b = ddpm_sample(&m32, &pos, &neg, &s32, &cfg32, 6, opts(32)).unwrap();
    for (x, y) in a.x.data().iter().zip(b.x.data()) {
        assert!((x - *y as f64).abs() < 1e-3 * x.abs().max(1.0), "{x} vs {y}");
    }
}
