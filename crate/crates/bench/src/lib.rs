//! Benchmark helpers; the interesting code lives in `benches/`.

use hypercast_core::encoder::ItemFeatures;
use hypercast_core::fm::{CandidateExample, LabeledRequest};
use hypercast_core::rng::Rng;

/// Deterministic synthetic request batch shaped like streaming training
/// traffic.
pub fn synthetic_batch(
    n_requests: usize,
    n_history: usize,
    n_candidates: usize,
    seed: u64,
) -> Vec<LabeledRequest> {
    let mut rng = Rng::new(seed);
    (0..n_requests)
        .map(|_| {
            let history: Vec<ItemFeatures> = (0..n_history)
                .map(|_| {
                    ItemFeatures::history(
                        rng.next_u64() % 1_000,
                        0,
                        rng.below(24) as u32,
                        rng.below(5) as u8,
                    )
                })
                .collect();
            let candidates = (0..n_candidates)
                .map(|_| CandidateExample {
                    item: ItemFeatures::target(rng.next_u64() % 1_000, 0, 3),
                    labels: [
                        ("like".to_string(), rng.bernoulli(0.3)),
                        ("share".to_string(), rng.bernoulli(0.15)),
                    ]
                    .into_iter()
                    .collect(),
                    aux_features: vec![0.1, -0.2, 0.3, 0.05],
                })
                .collect();
            LabeledRequest {
                history,
                surface: 0,
                candidates,
            }
        })
        .collect()
}
