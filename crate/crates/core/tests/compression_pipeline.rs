use proptest::prelude::*;
use sparsekit_core::compress::apply::{collect_calibration, quantize_model, PruneMethod, PruneRecipe};
use sparsekit_core::compress::profile::ProfileKind;
use sparsekit_core::compress::quant::QuantRecipe;
use sparsekit_core::data::{window, TaskData};
use sparsekit_core::model::{Model, ModelConfig};
use sparsekit_core::pipeline::one_shot;
use sparsekit_core::runtime::{Backend, ToyTransformer};
use sparsekit_core::{BlockLayout, Rng};

fn small() -> ModelConfig {
    ModelConfig { vocab: 64, d_model: 32, n_layers: 2, n_heads: 2, d_ff: 64, max_ctx: 32 }
}

fn calibration(rng: &mut Rng, n: usize) -> Vec<Vec<u32>> {
    let task = TaskData::bundled(0.5);
    (0..n).map(|_| window(&task.train, rng, 24)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn one_shot_then_quantize_keeps_the_mask(
        seed in any::<u64>(),
        target in 0.1f64..0.9,
        owl in any::<bool>(),
        obs in any::<bool>(),
    ) {
        let mut rng = Rng::new(seed);
        let model = Model::init(small(), &mut rng).unwrap();
        let calib = calibration(&mut rng, 4);
        let recipe = PruneRecipe {
            profile: if owl { ProfileKind::Owl } else { ProfileKind::Uniform },
            method: if obs { PruneMethod::Obs } else { PruneMethod::Magnitude },
            owl_lambda: 0.05,
            ..PruneRecipe::default()
        };
        let (pruned, mask) = one_shot(&model, &calib, &recipe, target, None).unwrap();
        prop_assert!((mask.sparsity() - target).abs() < 0.01, "{} vs {target}", mask.sparsity());
        for (name, m) in mask.iter() {
            prop_assert!(m.holds_zeros(pruned.linear(name).unwrap().as_slice()));
        }

        let denser = target * 0.5;
        let (first, first_mask) = one_shot(&model, &calib, &recipe, denser, None).unwrap();
        let (_, second_mask) = one_shot(&first, &calib, &recipe, target, Some(&first_mask)).unwrap();
        prop_assert!(second_mask.extends(&first_mask));

        let set = collect_calibration(&pruned, &calib).unwrap();
        let (quant, _) = quantize_model(&pruned, &set, &QuantRecipe { skip_top_k_kurtosis: 1, ..QuantRecipe::default() }).unwrap();
        prop_assert_eq!(quant.skipped.len(), 1);
        for (name, qm) in &quant.layers {
            let w = pruned.linear(name).unwrap();
            prop_assert!(w.as_slice().iter().zip(qm.q.as_slice()).all(|(&a, &b)| (a == 0.0) == (b == 0)), "{}", name);
        }
    }
}

#[test]
fn sparse_runtime_reproduces_dense_on_pruned_weights() {
    let mut rng = Rng::new(21);
    let model = Model::init(small(), &mut rng).unwrap();
    let calib = calibration(&mut rng, 4);
    let (pruned, _) = one_shot(&model, &calib, &PruneRecipe::default(), 0.7, None).unwrap();
    let dense = ToyTransformer::new(&pruned, Backend::Dense, BlockLayout::RowPair16, None).unwrap();
    for layout in [BlockLayout::RowPair16, BlockLayout::TILE_16X16] {
        let sparse = ToyTransformer::new(&pruned, Backend::Sparse, layout, None).unwrap();
        for p in 0..5 {
            let prompt: Vec<u32> = (0..1 + p * 3).map(|_| rng.below(64) as u32).collect();
            let req = sparsekit_core::runtime::GenRequest::greedy(prompt, 12);
            assert_eq!(sparse.generate_uncached(&req).unwrap(), dense.generate_uncached(&req).unwrap());
        }
    }
}
