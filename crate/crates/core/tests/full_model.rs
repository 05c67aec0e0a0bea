//! End-to-end gradient verification: the complete objective (encoders,
//! matching-token aggregation, batch ranking loss plus orthogonal
//! regularizer) on a 2-triplet batch against central finite differences.

use limn_core::encoders::ImageEncoderConfig;
use limn_core::matcher::TransformerConfig;
use limn_core::model::{LimnConfig, LimnModel};
use limn_core::numerics::gradcheck::{grad_check, GradCheckConfig, ScalarFn};
use limn_core::objective::{total_loss_graph, LossConfig};
use limn_core::synthio::{make_triplets, World};

fn desk_model(world: &World) -> LimnConfig {
    let mut cfg = LimnConfig::desk_default(world.vocab.len());
    cfg.image = ImageEncoderConfig::new(3, 8, 8, 4, 4, 32).unwrap();
    cfg.transformer = TransformerConfig::new(2, 4, 32).unwrap();
    cfg.tokens = 8;
    cfg.loss = LossConfig { temperature: 10.0, lambda: 0.1, batch_size: 2 };
    cfg
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let world = World::generate(20, 5, 0.05, 91).unwrap();
    let triplets = make_triplets(&world.items, &world.slots, &world.vocab, 2, 3, 91).unwrap();
    let model = LimnModel::init(desk_model(&world), 91).unwrap();

    let f: ScalarFn = &|g, map| {
        let leaves = model.leaves_from_map(map)?;
        let mut queries = Vec::new();
        let mut targets = Vec::new();
        for t in &triplets {
            let ref_px = world.render_item(t.ref_id)?;
            let tgt_px = world.render_item(t.tgt_id)?;
            queries.push(model.embed_query_ids(g, &leaves, &ref_px, &t.caption)?);
            targets.push(model.embed_target_ids(g, &leaves, &tgt_px)?);
        }
        total_loss_graph(g, &queries, &targets, &model.config.loss)
    };

    let cfg = GradCheckConfig { step: 1e-5, probes: 250, seed: 91 };
    let err = grad_check(f, &model.params, &cfg).unwrap();
    assert!(err <= 1e-4, "full objective max relative error {err}");
}
