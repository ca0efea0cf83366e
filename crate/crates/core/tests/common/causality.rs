//! Causal masking of the pseudo-query generator.

use super::*;
use pig_retrieval::config::GeneratorInput;
use pig_retrieval::model::PigModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_row_diff(a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>, row: usize) -> f64 {
    a.row(row)
        .iter()
        .zip(b.row(row).iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn every_position_ignores_every_later_position() {
    for (seed, input) in [GeneratorInput::Full, GeneratorInput::VideoFrame].into_iter().enumerate() {
        let mut cfg = tiny_model();
        cfg.generator_depth = 2;
        cfg.generator_input = input;
        let model = PigModel::new(&cfg, seed as u64).unwrap();
        let gen = &model.generator;
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let content = random_mat(&mut rng, gen.content_len(), cfg.d);
        let base = gen.hidden_states(&model.store, &content).unwrap();
        let len = gen.seq_len();
        assert_eq!(base.nrows(), len);

        // Content row j sits at sequence position j + 1, after the bos token.
        for j in 0..gen.content_len() {
            let mut perturbed = content.clone();
            perturbed.row_mut(j).mapv_inplace(|x| x + 0.5);
            let out = gen.hidden_states(&model.store, &perturbed).unwrap();
            for pos in 0..=j {
                let d = max_row_diff(&base, &out, pos);
                assert!(d < 1e-12, "position {pos} moved by {d} when row {} changed", j + 1);
            }
            for pos in j + 1..len {
                assert!(max_row_diff(&base, &out, pos) > 0.0, "position {pos} should see {}", j + 1);
            }
        }

        // The eos token is last: nothing before it may change.
        let mut store = model.store.clone();
        store.value_mut(gen.eos).mapv_inplace(|x| x - 0.3);
        let out = gen.hidden_states(&store, &content).unwrap();
        for pos in 0..len - 1 {
            assert!(max_row_diff(&base, &out, pos) < 1e-12);
        }
        assert!(max_row_diff(&base, &out, len - 1) > 0.0);
    }
}
