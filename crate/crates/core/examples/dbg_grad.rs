use augcn_core::augraph::default_pruned_graph;
use augcn_core::datahub::{synth_dataset, Fold, SynthSpec};
use augcn_core::trainer::{evaluate, train, TrainConfig};
use augcn_core::model::ModelConfig;
use std::time::Instant;

fn main() {
    let graph = default_pruned_graph();
    let seed = 40u64;
    let spec = SynthSpec { class_counts: [8; 5], subjects: 5, seed, ..SynthSpec::default() };
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(&spec, &graph, dir.path()).unwrap();
    let fold = Fold { name: "all".into(), train: (0..40).collect(), test: (0..40).collect() };
    let mc = ModelConfig::default_for(graph.node_count());
    let mut planted = vec![false; graph.node_count()];
    for r in &manifest.records {
        for (i, &b) in r.au_labels.iter().enumerate() { if b == 1 { planted[i] = true; } }
    }

    let tc = TrainConfig { epochs: 160, ..TrainConfig::default() };
    let t0 = Instant::now();
    let outcome = train(&manifest, &fold, &graph, &mc, &tc, None).unwrap();
    let out = evaluate(&outcome.params, &mc, &graph, &manifest, &fold.test).unwrap();
    let f1 = out.report.per_au_f1.as_ref().unwrap();
    let mean: f64 = f1.iter().zip(&planted).filter(|(_, &p)| p).map(|(v, _)| v).sum::<f64>()
        / planted.iter().filter(|&&p| p).count() as f64;
    println!("amp2.0+lecun+damped-heads 160ep: war {:.3} planted-mean {:.3} ({:.0}s)", out.report.war, mean, t0.elapsed().as_secs_f64());
    for r in outcome.history.epochs.iter().step_by(20) {
        println!("  ep {:3} cls {:.4} det {:.4} war {:.3}", r.epoch, r.classification_loss, r.detection_loss, r.train_war);
    }
    println!("  f1 {:?}", f1.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
}
