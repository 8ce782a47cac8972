mod common;

use common::{noiseless, small_config};
use fedmp::data::{make_split, SplitConfig};
use fedmp::experiment::{
    read_training, run_ablation, run_experiment, run_inference, run_sweep, run_training, write_training, Ablation,
    SweepAxis,
};

#[test]
fn full_reduction_chain_equals_zero_shot() {
    let mut cfg = small_config();
    cfg.ablation = Ablation { no_adaptive_aggregation: true, no_prototyping: true };
    cfg.train.learning_rate = 0.0;
    cfg.adapter.gate_bias_init = 60.0;
    let report = run_experiment(&cfg).unwrap();
    for r in &report.repeats {
        assert_eq!(r.metrics, r.zero_shot_metrics);
        assert!(r.prototypes.is_none());
    }
}

#[test]
fn five_repeats_give_five_rows_and_summary() {
    let mut cfg = small_config();
    cfg.repeats = 5;
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.repeats.len(), 5);
    let seeds: Vec<u64> = report.repeats.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, vec![0, 1, 2, 3, 4]);
    for key in ["accuracy", "macro_precision", "macro_recall", "macro_f1"] {
        assert!(report.summary.contains_key(key));
    }
}

#[test]
fn report_json_is_reproducible_from_its_own_config() {
    let cfg = small_config();
    let a = run_experiment(&cfg).unwrap();
    let again = run_experiment(&a.config).unwrap();
    assert_eq!(a.to_json().unwrap(), again.to_json().unwrap());
    assert_eq!(a.config.adapter.hidden_dim, Some(16));
}

#[test]
fn noiseless_data_is_classified_perfectly_by_every_variant() {
    for (name, report) in run_ablation(&noiseless(small_config())).unwrap() {
        assert_eq!(report.summary["accuracy"].mean, 1.0, "{name}");
        assert_eq!(report.zero_shot_summary["accuracy"].mean, 1.0, "{name}");
    }
}

#[test]
fn shots_sweep_yields_one_report_per_value() {
    let mut cfg = small_config();
    cfg.repeats = 1;
    let sweep = run_sweep(&cfg, &SweepAxis::Shots(vec![2, 4, 8, 16])).unwrap();
    assert_eq!(sweep.points.len(), 4);
    for (p, shots) in sweep.points.iter().zip([2, 4, 8, 16]) {
        assert_eq!(p.report.config.split.train_shots, shots);
    }
}

#[test]
fn clients_sweep_redistributes_the_same_seen_classes() {
    let mut seen_sets = Vec::new();
    for k in [5, 10, 20] {
        let cfg = SplitConfig { num_clients: k, ..SplitConfig::default() };
        let split = make_split(30, &cfg, 3).unwrap();
        assert_eq!(split.client_classes.len(), k);
        let mut seen = split.seen_classes.clone();
        seen.sort_unstable();
        let mut dealt: Vec<usize> = split.client_classes.concat();
        dealt.sort_unstable();
        assert_eq!(dealt, seen);
        seen_sets.push((seen, split.unseen_classes));
    }
    assert!(seen_sets.windows(2).all(|w| w[0] == w[1]));

    let mut cfg = small_config();
    cfg.repeats = 1;
    let sweep = run_sweep(&cfg, &SweepAxis::Clients(vec![2, 4])).unwrap();
    assert_eq!(sweep.points[0].report.repeats[0].unseen_classes, sweep.points[1].report.repeats[0].unseen_classes);
}

#[test]
fn alpha_sweep_refines_around_the_coarse_best() {
    let mut cfg = small_config();
    cfg.repeats = 1;
    let sweep = run_sweep(&cfg, &SweepAxis::Alpha { lo: 0.0, hi: 0.3 }).unwrap();
    let values: Vec<f64> = sweep.points.iter().map(|p| p.value).collect();
    // Coarse grid first.
    assert_eq!(&values[..4], &[0.0, 0.1, 0.2, 0.3]);
    // Refinement steps are hundredths and stay inside the range.
    assert!(values[4..].iter().all(|v| (v * 100.0 - (v * 100.0).round()).abs() < 1e-9 && (0.0..=0.3).contains(v)));
    assert!(values.len() > 4);
    let best = sweep.best_alpha.unwrap();
    assert!(values.contains(&best));
}

#[test]
fn training_written_to_disk_reproduces_the_in_memory_run() {
    let mut cfg = small_config();
    cfg.repeats = 1;
    cfg.seed = 11;
    let direct = run_experiment(&cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let (resolved, fed) = run_training(&cfg).unwrap();
    write_training(dir.path(), &resolved, &fed).unwrap();
    let (manifest, updates) = read_training(dir.path()).unwrap();
    assert_eq!(manifest.seed, 11);
    let report = run_inference(&manifest.config, &manifest, updates).unwrap();
    // FMEB stores prompts at 32-bit precision, so adaptive weights can move
    // in the last digits; the predictions should not.
    assert_eq!(report.repeats[0].metrics, direct.repeats[0].metrics);
    assert_eq!(report.repeats[0].loss_traces, direct.repeats[0].loss_traces);
}

#[test]
fn training_loss_does_not_increase_across_rounds() {
    let mut cfg = small_config();
    cfg.train.global_epochs = 4;
    let report = run_experiment(&cfg).unwrap();
    for r in &report.repeats {
        for pair in r.loss_traces.windows(2) {
            for (before, after) in pair[0].iter().zip(&pair[1]) {
                assert!(after.final_loss <= before.final_loss, "{} -> {}", before.final_loss, after.final_loss);
            }
        }
    }
}
