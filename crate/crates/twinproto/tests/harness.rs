use twinproto::config::{ExperimentConfig, Profile};
use twinproto::harness::{self, Variant};
use twinproto_core::model::{Frontend, ModelConfig};

fn ci() -> ExperimentConfig {
    ExperimentConfig::profile(Profile::Ci)
}

#[test]
fn recipes_match_the_ablation_table() {
    use Frontend::*;
    let want = [
        (Variant::Proposed, Periodic, true, true),
        (Variant::WoTta, Periodic, false, false),
        (Variant::WoCga, Periodic, true, false),
        (Variant::WoMpl, Plain1d, true, true),
        (Variant::Mscnn1d, Mscnn1d, true, true),
        (Variant::Baseline, Plain1d, false, false),
    ];
    let base = ci().adapt;
    for (v, f, adapt, augment) in want {
        let r = v.recipe();
        assert_eq!((r.frontend, r.adapt, r.augment), (f, adapt, augment), "{v}");
        let a = harness::variant_adaptation(v, &base);
        assert_eq!(a.epochs, if adapt { base.epochs } else { 0 });
        assert_eq!(a.k_aug, if augment { base.k_aug } else { 0 });
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
}

#[test]
fn mscnn_1d_swaps_only_the_front_end() {
    let base = ExperimentConfig::profile(Profile::Default).model;
    let p = harness::variant_network(Variant::Proposed, &base);
    let m = harness::variant_network(Variant::Mscnn1d, &base);
    assert_eq!(ModelConfig { frontend: Frontend::Periodic, ..m.clone() }, p);
    let d = base.mscnn_channels;
    assert_eq!(p.param_count() - m.param_count(), 26 * d * d);
}

#[test]
fn seeds_pair_variants_and_separate_tasks() {
    let s = harness::task_seed(1, 2700, 5, 3, 0);
    assert_eq!(s, harness::task_seed(1, 2700, 5, 3, 0));
    let others = [
        harness::task_seed(2, 2700, 5, 3, 0),
        harness::task_seed(1, 2400, 5, 3, 0),
        harness::task_seed(1, 2700, 3, 3, 0),
        harness::task_seed(1, 2700, 5, 4, 0),
        harness::task_seed(1, 2700, 5, 3, 1),
    ];
    assert!(others.iter().all(|&o| o != s));

    let cfg = ci();
    let archive = harness::dataset(&cfg, 2700).unwrap();
    let a = harness::task_inputs(&cfg, &archive, 5, s).unwrap();
    assert_eq!(a, harness::task_inputs(&cfg, &archive, 5, s).unwrap());
    assert_ne!(a, harness::task_inputs(&cfg, &archive, 5, others[3]).unwrap());
    assert_eq!(a.support_labels.len(), 20);
    assert_eq!(a.query_labels.len(), 4 * cfg.queries_per_class);
    assert_eq!(a.source_labels.len(), 4 * cfg.data.source_batch_per_class);
}

#[test]
fn ci_run_fills_every_cell_consistently() {
    let cfg = ci();
    let run = harness::run(&cfg).unwrap();
    assert_eq!(run.table.cells.len(), cfg.variants.len() * cfg.conditions.len() * cfg.shots.len());
    assert_eq!(run.records.len(), run.table.cells.len() * cfg.tasks_per_scenario * cfg.repeats);
    // three distinct front ends, one training each per condition and repeat
    assert_eq!(run.traces.len(), 3);
    assert!(run.traces.iter().all(|t| t.losses.len() == cfg.train.iterations));
    for cell in &run.table.cells {
        assert_eq!(cell.failed_tasks, 0);
        let total: u64 = cell.confusion.iter().flatten().sum();
        assert_eq!(total as usize, cfg.tasks_per_scenario * cfg.repeats * 4 * cfg.queries_per_class);
        for row in &cell.confusion {
            assert_eq!(row.iter().sum::<u64>() as usize, cfg.tasks_per_scenario * cfg.repeats * cfg.queries_per_class);
        }
        let trace: u64 = (0..4).map(|i| cell.confusion[i][i]).sum();
        assert!((100.0 * trace as f64 / total as f64 - cell.mean_accuracy).abs() < 1e-9, "{}", cell.variant);
    }
    // variants without adaptation report their pre-adaptation predictions
    for r in run.records.iter().filter(|r| !r.variant.recipe().adapt) {
        let rep = r.outcome.as_ref().unwrap();
        assert!(rep.epochs.is_empty());
        assert_eq!(rep.pre_predictions, rep.post_predictions);
    }
    // wo_tta and proposed share the network, so their pre-adaptation views agree
    for shot in &cfg.shots {
        let pick = |v| run.records.iter().filter(move |r| r.variant == v && r.shot == *shot);
        for (a, b) in pick(Variant::Proposed).zip(pick(Variant::WoTta)) {
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.outcome.as_ref().unwrap().pre_predictions, b.outcome.as_ref().unwrap().pre_predictions);
        }
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let one = harness::run(&ExperimentConfig { workers: 1, ..ci() }).unwrap();
    let three = harness::run(&ExperimentConfig { workers: 3, ..ci() }).unwrap();
    assert_eq!(one, three);
}

#[test]
fn sweep_has_a_row_per_k_and_variant() {
    let cfg = ci();
    let sweep = harness::sweep_topk(&cfg).unwrap();
    assert_eq!(sweep.rows.len(), cfg.sweep.k_values.len() * harness::SWEEP_VARIANTS.len());
    for (row, (k, v)) in sweep.rows.iter().zip(
        cfg.sweep.k_values.iter().flat_map(|&k| harness::SWEEP_VARIANTS.iter().map(move |&v| (k, v))),
    ) {
        assert_eq!((row.k, row.variant), (k, v));
        assert_eq!(row.repeat_accuracies.len(), cfg.repeats);
    }
    assert_eq!(sweep.traces.len(), cfg.sweep.k_values.len() * cfg.repeats);
}

#[test]
fn mean_std_uses_the_sample_estimator() {
    let (m, s) = harness::mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(harness::mean_std(&[7.0]), (7.0, 0.0));
}
