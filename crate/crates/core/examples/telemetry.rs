//! Prints refiner telemetry on the standard synthetic fixture: TPR/recall
//! evolution for one run, then final TPR across initial TPR levels under
//! the fixed-budget and fixed-TP label synthesis schemes.

use kgalign::kg::KgOptions;
use kgalign::pipeline::{synth_noisy_labels, synth_noisy_labels_fixed_tp, synth_pair, SynthSpec};
use kgalign::refine::{refine, RefinerConfig};

fn main() {
    let spec = SynthSpec {
        entity_count: 1000,
        seed: 42,
        ..Default::default()
    };
    let (pair, _) = synth_pair(&spec, KgOptions::default()).unwrap();

    println!("== TPR / recall evolution (1000 entities, 100 labels at TPR 0.5)");
    let labels = synth_noisy_labels(&pair, 100, 0.5, 1);
    let out = refine(&labels, &pair, &RefinerConfig::default()).unwrap();
    for r in out.trace.rows() {
        println!(
            "iter {:>2}: |L'| = {:>3}  tpr = {:.3}  recall = {:.3}  phi = {}",
            r.iter,
            r.size_lprime,
            r.tpr.unwrap_or(f64::NAN),
            r.recall.unwrap_or(f64::NAN),
            r.phi
        );
    }

    println!("== robustness vs initial TPR (mean of 3 seeds)");
    println!(
        "{:>12} {:>14} {:>14}",
        "initial_tpr", "fixed_budget", "fixed_tp"
    );
    for tpr0 in [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9] {
        let mut fb = 0.0;
        let mut ft = 0.0;
        for seed in [1u64, 2, 3] {
            let labels = synth_noisy_labels(&pair, 100, tpr0, seed);
            let out = refine(&labels, &pair, &RefinerConfig::default()).unwrap();
            fb += out.trace.rows().last().unwrap().tpr.unwrap_or(0.0) / 3.0;
            let labels = synth_noisy_labels_fixed_tp(&pair, 50, tpr0, seed);
            let out = refine(&labels, &pair, &RefinerConfig::default()).unwrap();
            ft += out.trace.rows().last().unwrap().tpr.unwrap_or(0.0) / 3.0;
        }
        println!("{tpr0:>12.1} {fb:>14.3} {ft:>14.3}");
    }
}
