use cafm::oracle::{Dataset, GaussianMixture};
use cafm::rng::{substream, Stream};
use cafm::samplers::{sample, OracleField, SamplerConfig, SamplerKind};
use cafm::trainer::{evaluate, train_cafm, train_fm, EvalSettings, Objective, Reporting, Silent, TrainConfig};

fn small(objective: Objective, dataset: &str, steps: usize) -> TrainConfig {
    let mut c = TrainConfig::new(objective, dataset, steps);
    c.batch = 64;
    c.model.g_hidden = vec![32, 32];
    c.model.d_hidden = vec![16];
    c.model.time_embed_dim = 8;
    c
}

fn settings() -> EvalSettings {
    EvalSettings {
        samples: 500,
        field_t_draws: 16,
        field_x_draws: 64,
        ..EvalSettings::default()
    }
}

#[test]
fn oracle_field_transports_noise_to_the_mixture() {
    let ds = Dataset::preset("gm1d2").unwrap();
    let mix = &ds.mixture;
    let mut rng = substream(3, Stream::Sampler, 0);
    let z = GaussianMixture::standard(1).sample(&mut rng, 4000);
    let x = sample(&OracleField(mix), &z, &SamplerConfig::new(SamplerKind::Heun, 64), &mut rng).unwrap();

    let n = x.rows() as f64;
    let mean = x.data().iter().sum::<f64>() / n;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    // Mixture mean 0 and variance 0.25 + 4; tolerances are about 4 standard errors.
    assert!(mean.abs() < 4.0 * (4.25 / n).sqrt(), "mean {mean}");
    assert!((var - 4.25).abs() < 0.25, "variance {var}");
    let left = x.data().iter().filter(|&&v| v < 0.0).count() as f64 / n;
    assert!((left - 0.5).abs() < 0.04, "left fraction {left}");
}

#[test]
fn fm_then_posttrain_through_the_public_api() {
    let mut fm = small(Objective::Fm, "gauss1d", 400);
    fm.g_lr = 1e-3;
    fm.adam_beta = [0.9, 0.99];
    let ds = Dataset::preset("gauss1d").unwrap();
    let out = train_fm(&fm, &Reporting::default(), &mut Silent).unwrap();
    assert_eq!(out.state.counters.g_updates, 400);
    assert_eq!(out.log.len(), 400);

    let init = fm.model.generator_spec(&ds, Objective::Fm).init(fm.seed).unwrap();
    let before = evaluate(&fm, &ds, &out.g_spec, &init, &settings(), 0).unwrap();
    let after = evaluate(&fm, &ds, &out.g_spec, &out.state.ema.shadow, &settings(), 0).unwrap();
    let (b, a) = (before.field_rel_mse.unwrap(), after.field_rel_mse.unwrap());
    assert!(a < 0.5 * b, "field rel MSE {b} -> {a}");

    let mut post = small(Objective::Cafm, "gauss1d", 30);
    post.d_warmup_steps = 6;
    post.n = 2;
    let ema = out.state.ema.shadow.clone();
    let run = train_cafm(&post, Some(&ema), &Reporting::default(), &mut Silent).unwrap();
    let c = run.state.counters;
    assert_eq!(c.warmup_d, 6);
    assert_eq!(c.d_updates, post.n * c.g_updates);
    assert_eq!(c.warmup_d + c.d_updates + c.g_updates, post.total_steps);
    assert!(run.trailing_d_adv.unwrap().is_finite());
    assert!(run.log.iter().all(|r| r.fields().iter().all(|f| !f.contains("NaN"))));
}
