use std::collections::BTreeSet;

use moe_locality::data::generate_dataset;
use moe_locality::harness::{base_model, ExperimentConfig};
use moe_locality::train::routing_traces;

#[test]
fn trained_model_routes_topics_to_different_experts() {
    let cfg = ExperimentConfig::desk(7);
    let data = generate_dataset(&cfg.data).unwrap();
    let (model, _) = base_model(&cfg, &data, None).unwrap();
    let (layers, experts) = (model.config.layers, model.config.experts);

    // Per topic: the 8 experts with the highest mean routing probability in
    // each layer, as (layer, expert) pairs.
    let top_sets: Vec<BTreeSet<(usize, usize)>> = (0..2)
        .map(|topic| {
            let seqs: Vec<_> = data.val.iter().filter(|s| s.topic == topic).cloned().collect();
            let traces = routing_traces(&model, &seqs).unwrap();
            let mut set = BTreeSet::new();
            for l in 0..layers {
                let mut mean = vec![0.0; experts];
                for tr in &traces {
                    for t in 0..tr.tokens {
                        mean.iter_mut().zip(tr.probs(l, t)).for_each(|(m, p)| *m += p);
                    }
                }
                let mut ids: Vec<usize> = (0..experts).collect();
                ids.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]).then(a.cmp(&b)));
                set.extend(ids[..8].iter().map(|&e| (l, e)));
            }
            set
        })
        .collect();
    let inter = top_sets[0].intersection(&top_sets[1]).count() as f64;
    let union = top_sets[0].union(&top_sets[1]).count() as f64;
    let jaccard = inter / union;
    println!("top-8 Jaccard between topics: {jaccard:.3}");
    assert!(jaccard < 1.0);
}
