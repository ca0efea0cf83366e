//! Index ranking against per-video online recomputation.

use super::*;
use pig_retrieval::config::ModelConfig;
use pig_retrieval::model::PigModel;
use pig_retrieval::objectives::cosine_sim;
use pig_retrieval::serving::{build_index, text_vectors, RetrievalIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GALLERY: usize = 200;
const QUERIES: usize = 100;
const TOP: usize = 10;

fn config() -> ModelConfig {
    ModelConfig {
        d: 16,
        heads: 2,
        d_in: 8,
        frames: 3,
        patches: 4,
        top_k: 4,
        text_max_len: 6,
        encoder_depth: 1,
        text_depth: 1,
        generator_depth: 1,
        mlp_ratio: 2,
        ..ModelConfig::default()
    }
}

pub fn index_ranking_equals_online_recompute() {
    let cfg = config();
    let model = PigModel::new(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let videos: Vec<_> = (0..GALLERY).map(|_| random_video(&mut rng, &cfg)).collect();
    let texts: Vec<_> = (0..QUERIES)
        .map(|_| {
            let len = rng.random_range(1..=cfg.text_max_len);
            random_text(&mut rng, &cfg, len)
        })
        .collect();
    // Non-contiguous ids so that id and position cannot be confused.
    let ids: Vec<u64> = (0..GALLERY as u64).map(|i| 7 * i + 3).collect();

    let entries: Vec<_> = ids.iter().copied().zip(videos.iter()).collect();
    let index = build_index(&model, &entries).unwrap();
    let index = RetrievalIndex::from_bytes(&index.to_bytes()).unwrap();
    let text_refs: Vec<_> = texts.iter().collect();
    let queries = text_vectors(&model, &text_refs).unwrap();

    let online: Vec<_> = videos
        .iter()
        .map(|v| model.represent_video_unbatched(v).unwrap())
        .collect();
    let mut worst_gap = 0.0f64;
    for (q, text) in texts.iter().enumerate() {
        let t = model.text.encode(&model.store, text).unwrap();
        let mut scored: Vec<(u64, f64)> = ids
            .iter()
            .zip(&online)
            .map(|(&id, v)| (id, cosine_sim(t.view(), v.view()).unwrap()))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(TOP);

        let hits = index.query(queries.row(q), TOP).unwrap();
        let got: Vec<u64> = hits.iter().map(|h| h.0).collect();
        let expected: Vec<u64> = scored.iter().map(|h| h.0).collect();
        assert_eq!(got, expected, "query {q}");
        for (h, e) in hits.iter().zip(&scored) {
            worst_gap = worst_gap.max((h.1 - e.1).abs());
        }
    }
    // Stored vectors are single precision.
    assert!(worst_gap < 1e-6, "score gap {worst_gap:.3e}");
}
