use proptest::prelude::*;
use quarc_core::analysis::{
    aggregate, bench, correlate, layer_kl, summary_csv, work_accounting_holds, CorrelateSetup, ExperimentPlan,
    SummaryRow,
};
use quarc_core::data::{generate_synthetic, split_and_batch, Dataset, SplitData, SyntheticSpec};
use quarc_core::model::{ModelDef, ModelInstance};
use quarc_core::train::{evaluate, pretrain_fp, run_quarc, Method, PretrainConfig, RunConfig};
use quarc_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blobs(classes: usize, per_class: usize, noise: f64, dims: usize) -> SplitData {
    let spec = SyntheticSpec {
        dims,
        ..SyntheticSpec::blobs(classes, per_class, noise, 3)
    };
    let ds = generate_synthetic(&spec).unwrap();
    split_and_batch(&ds, 0.2, 16, 3).unwrap().0
}

fn quick_fp(split: &SplitData, def: ModelDef) -> ModelInstance {
    let cfg = PretrainConfig {
        epochs: 5,
        ..PretrainConfig::default()
    };
    pretrain_fp(&def, split, &cfg).unwrap().0
}

fn small_run(epochs: usize, interval: usize, fraction: f64, method: Method) -> RunConfig {
    RunConfig {
        epochs,
        interval,
        fraction,
        method,
        batch_size: 8,
        ..RunConfig::default()
    }
}

#[test]
fn evaluate_matches_brute_force_ranking() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = 7;
    let mut model = ModelInstance::init(ModelDef::mlp(m, &[], m), 0).unwrap();
    let layer = &mut model.layers[0];
    for (k, w) in layer.weight.data_mut().iter_mut().enumerate() {
        *w = if k % (m + 1) == 0 { 1.0 } else { 0.0 };
    }
    layer.bias.data_mut().fill(0.0);
    // Coarse values so ties occur.
    let logits: Vec<f64> = (0..50 * m).map(|_| f64::from(rng.random_range(0..4u8))).collect();
    let labels: Vec<usize> = (0..50).map(|_| rng.random_range(0..m)).collect();
    let data = Dataset::new(Tensor::new(vec![50, m], logits.clone()).unwrap(), labels.clone(), m).unwrap();
    let (top1, top5) = evaluate(&model, &data, 9).unwrap();

    let (mut hit1, mut hit5) = (0, 0);
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits[r * m..(r + 1) * m];
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        let pos = order.iter().position(|&c| c == y).unwrap();
        hit1 += usize::from(pos < 1);
        hit5 += usize::from(pos < 5);
    }
    assert_eq!(top1, hit1 as f64 / 50.0);
    assert_eq!(top5, hit5 as f64 / 50.0);
}

#[test]
fn separable_blobs_are_learned() {
    let split = blobs(2, 200, 0.3, 2);
    let (model, history) = pretrain_fp(&ModelDef::mlp(2, &[8], 2), &split, &PretrainConfig::default()).unwrap();
    assert_eq!(history.len(), 20);
    assert!(evaluate(&model, &split.eval, 32).unwrap().0 >= 0.95);
}

#[test]
fn same_seed_pretraining_gives_identical_checkpoints() {
    let split = blobs(3, 40, 0.8, 2);
    let def = ModelDef::mlp(2, &[6], 3);
    let a = quick_fp(&split, def.clone());
    let b = quick_fp(&split, def);
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.json"), dir.path().join("b.json"));
    a.save(&pa).unwrap();
    b.save(&pb).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    assert_eq!(ModelInstance::load(&pa).unwrap(), a);
}

#[test]
fn layer_kl_examples() {
    let split = blobs(3, 60, 1.0, 4);
    let mut def = ModelDef::mlp(4, &[8, 8, 6], 3).with_taps(&["fc0", "fc1", "fc2"]);
    def.quantize_first_last = true;
    let fp = quick_fp(&split, def);

    let mut bypass = fp.clone_as_quantized(2, None, None).unwrap();
    bypass.quant_enabled = false;
    let rows = layer_kl(&fp, &bypass, &split.eval, 16).unwrap();
    let names: Vec<&str> = rows.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["fc0", "fc1", "fc2"]);
    assert!(rows.iter().all(|(_, kl)| kl.abs() < 1e-9));

    let kl16 = layer_kl(&fp, &fp.clone_as_quantized(16, None, None).unwrap(), &split.eval, 16).unwrap();
    let kl2 = layer_kl(&fp, &fp.clone_as_quantized(2, None, None).unwrap(), &split.eval, 16).unwrap();
    for ((name, a), (_, b)) in kl16.iter().zip(&kl2) {
        assert!(a < b, "{name}: 16-bit {a} vs 2-bit {b}");
    }

    let other = ModelInstance::init(ModelDef::mlp(4, &[8, 8, 6], 3), 0).unwrap();
    assert!(matches!(
        layer_kl(&fp, &other, &split.eval, 16),
        Err(Error::Contract(_))
    ));
}

#[test]
fn bench_counts_follow_accounting() {
    let split = blobs(4, 50, 1.0, 4);
    let fp = quick_fp(&split, ModelDef::mlp(4, &[8, 8], 4));
    let base = small_run(4, 4, 0.1, Method::Quarc);
    let rows = bench(&fp, &split, &base, &[0.1]).unwrap();
    let (full, core) = (&rows[0], &rows[1]);
    let n = split.train.len();
    let per_epoch = n.div_ceil(base.batch_size);
    assert_eq!(full.train_forwards, per_epoch * base.epochs);
    assert_eq!(full.backwards, per_epoch * base.epochs);
    assert_eq!(full.selection_forwards, 0);
    let expected = 0.1 * full.backwards as f64;
    assert!((core.backwards as f64 - expected).abs() <= base.epochs as f64);
    assert_eq!(core.selection_forwards, 2 * per_epoch);
    assert!((full.ratio_to_full - 1.0).abs() < 1e-12);
}

#[test]
fn correlate_rejects_bad_setups() {
    let split = blobs(3, 30, 1.0, 2);
    let fp = quick_fp(&split, ModelDef::mlp(2, &[6, 6], 3));
    let q = fp.clone_as_quantized(2, None, None).unwrap();
    let cfg = small_run(2, 2, 0.2, Method::Quarc);
    let setup = |buckets, fraction, seeds: &'static [u64]| CorrelateSetup {
        fp: &fp,
        quantized: &q,
        split: &split,
        buckets,
        fraction,
        seeds,
        config: &cfg,
    };
    assert!(matches!(correlate(&setup(4, 0.2, &[0])), Err(Error::Config(_))));
    assert!(matches!(correlate(&setup(5, 0.2, &[])), Err(Error::Config(_))));
    // 0.05 of 72 samples is 3, smaller than one batch of 8.
    assert!(matches!(correlate(&setup(5, 0.05, &[0])), Err(Error::Config(_))));
}

#[test]
fn ablation_summary_has_one_row_per_run_plus_aggregates() {
    let plan = ExperimentPlan::ablation(&RunConfig::default(), &[0, 1, 2]);
    plan.validate().unwrap();
    let rows: Vec<SummaryRow> = plan
        .runs
        .iter()
        .flat_map(|r| {
            plan.seeds.iter().map(move |&seed| SummaryRow {
                name: r.name.clone(),
                seed,
                top1: 0.5 + seed as f64 * 0.1,
                top5: 1.0,
                final_loss: 0.1,
            })
        })
        .collect();
    assert_eq!(aggregate(&rows).len(), 4);
    let csv = summary_csv(&rows);
    let body: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(body.len(), 16);
    assert_eq!(body.iter().filter(|l| l.contains(",mean,")).count(), 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn run_invariants(
        epochs in 1usize..7,
        interval in 1usize..5,
        fraction in 0.05f64..1.0,
        method in prop_oneof![Just(Method::Quarc), Just(Method::RandomCoreset), Just(Method::FullData)],
        seed in 0u64..1000,
    ) {
        let split = blobs(3, 20, 1.0, 2);
        let fp = ModelInstance::init(ModelDef::mlp(2, &[6, 6], 3), 5).unwrap();
        let interval = interval.min(epochs);
        let cfg = RunConfig { seed, ..small_run(epochs, interval, fraction, method) };
        let out = run_quarc(&fp, &fp, &split, &cfg).unwrap();
        let n = split.train.len();
        prop_assert_eq!(out.metrics.len(), epochs);
        prop_assert!(out.metrics.iter().all(|m| m.top1 <= m.top5));
        prop_assert!(work_accounting_holds(&out, n, cfg.batch_size));
        match method {
            Method::FullData => {
                prop_assert!(out.drawn.iter().all(|d| d.len() == n));
            }
            _ => {
                let mut round = 0;
                for (t, drawn) in out.drawn.iter().enumerate() {
                    prop_assert_eq!(out.metrics[t].selected, t % interval == 0);
                    if t % interval == 0 && t > 0 {
                        round += 1;
                    }
                    prop_assert_eq!(drawn, &out.rounds[round].selected_ids);
                }
                prop_assert_eq!(out.rounds.len(), round + 1);
            }
        }
    }
}
