use eflow_bench::{
    latency_sweep, quantile, recipe_setup, training_throughput, write_latency_csv, write_throughput_csv, LayerInstance, Recipe,
    SweepSpec, SweepVariant, ThroughputSpec,
};
use eflow_core::objectives::Guidance;

#[test]
fn instrumented_flops_match_closed_form_up_to_1024() {
    let spec = SweepSpec { counts: vec![256, 512, 1024], ..SweepSpec::default() };
    for &n in &spec.counts {
        for variant in SweepVariant::ALL {
            let layer = LayerInstance::new(variant, n, &spec).unwrap();
            assert_eq!(layer.measured_flops().unwrap(), layer.analytic_flops(), "{} at N={n}", variant.name());
        }
    }
}

#[test]
fn flop_ratios_track_complexity() {
    let spec = SweepSpec::default();
    let ratio = |v: SweepVariant, n: usize| {
        let big = LayerInstance::new(v, n, &spec).unwrap().analytic_flops() as f64;
        let small = LayerInstance::new(v, n / 2, &spec).unwrap().analytic_flops() as f64;
        big / small
    };
    assert!(ratio(SweepVariant::Softmax, 8192) > 3.5);
    assert!((ratio(SweepVariant::Linear, 8192) - 2.0).abs() < 1e-9);
    let r = ratio(SweepVariant::Glga, 8192);
    assert!((2.0..2.02).contains(&r), "glga ratio {r}");
}

#[test]
fn spec_validation() {
    assert!(SweepSpec::default().validate().is_ok());
    assert!(SweepSpec { counts: vec![512, 256], ..SweepSpec::default() }.validate().is_err());
    assert!(SweepSpec { counts: vec![100], ..SweepSpec::default() }.validate().is_err());
    assert!(SweepSpec { repeats: 2, ..SweepSpec::default() }.validate().is_err());
    assert_eq!(SweepVariant::parse("glga+drop75").unwrap(), SweepVariant::GlgaDrop75);
    assert!(SweepVariant::parse("flash").is_err());
}

#[test]
fn quantiles_interpolate() {
    let v = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert_eq!(quantile(&v, 0.5), 3.0);
    assert!((quantile(&v, 0.1) - 1.4).abs() < 1e-12);
    assert_eq!(quantile(&v, 1.0), 5.0);
}

#[test]
fn small_sweep_writes_csv() {
    let spec = SweepSpec { counts: vec![64, 128], repeats: 3, warmup: 1, ..SweepSpec::default() };
    let rows = latency_sweep(&spec).unwrap();
    assert_eq!(rows.len(), 2 * SweepVariant::ALL.len());
    assert!(rows.iter().all(|r| r.p10_ms <= r.median_ms && r.median_ms <= r.p90_ms));
    let mut buf = Vec::new();
    write_latency_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("variant,N,median_ms,p10_ms,p90_ms,flops\n"));
    assert_eq!(text.lines().count(), rows.len() + 1);
}

#[test]
fn recipes_are_cumulative() {
    let spec = ThroughputSpec::default();
    let (m, l, d) = recipe_setup(Recipe::Fm, &spec);
    assert_eq!((m.attn.interleave_k, l.guidance, l.a, d), (1, Guidance::None, 1.0, 0.0));
    let (_, l, _) = recipe_setup(Recipe::Sfm, &spec);
    assert_eq!((l.guidance, l.mva_share()), (Guidance::Full, 0.0));
    let (m, l, _) = recipe_setup(Recipe::SfmMvaGlga, &spec);
    assert!(l.mva_share() > 0.0 && m.attn.interleave_k > m.total_blocks());
    let (_, l, d) = recipe_setup(Recipe::SfmMvaGlgaPdgDrop75, &spec);
    assert_eq!((l.guidance, d), (Guidance::Pdg, 0.75));
}

#[test]
fn throughput_rows_are_positive() {
    let spec = ThroughputSpec { batch: 4, iters: 1, repeats: 3, warmup: 0, ..ThroughputSpec::default() };
    let rows = training_throughput(&spec, &[Recipe::Fm, Recipe::SfmMvaGlgaPdgDrop75]).unwrap();
    assert!(rows.iter().all(|r| r.iters_per_sec > 0.0));
    let mut buf = Vec::new();
    write_throughput_csv(&rows, &mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("recipe,iters_per_sec,median_step_ms\n"));
}

#[test]
#[ignore]
fn print_timings() {
    let rows = latency_sweep(&SweepSpec::default()).unwrap();
    write_latency_csv(&rows, std::io::stdout()).unwrap();
    let rows = training_throughput(&ThroughputSpec::default(), &Recipe::ALL).unwrap();
    write_throughput_csv(&rows, std::io::stdout()).unwrap();
}
