use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relattn::grad::{grad_check, BlockInputs, CheckScope, Coord, GradCheckOptions};
use relattn::{AttnConfig, BlockDims, BlockOptions, BlockWeights, Entity, LayoutSpec, RelationalContext, Tensor2};

fn instance(seed: u64, loss_rows: Option<Vec<usize>>) -> (RelationalContext, BlockWeights, BlockInputs, AttnConfig) {
    let spec = LayoutSpec::new(
        1,
        2,
        3,
        4,
        vec![
            Entity::background().with_span(3..4),
            Entity::face(0).with_span(0..1),
            Entity::attribute(0).with_span(1..3),
        ],
    )
    .unwrap();
    let dims = BlockDims {
        channels: 6,
        text_channels: 5,
        n_heads: 2,
        head_dim: 6,
        hidden: 10,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = BlockWeights::random(dims, 1.0, &mut rng);
    let inputs = BlockInputs {
        tokens: Tensor2::randn(spec.n_tokens(), dims.channels, 1.0, &mut rng),
        text: Tensor2::randn(spec.text_len(), dims.text_channels, 1.0, &mut rng),
        target: Tensor2::randn(spec.n_tokens(), dims.channels, 1.0, &mut rng),
        loss_rows,
    };
    let ctx = RelationalContext::new(&spec, dims.head_dim).unwrap();
    (ctx, w, inputs, AttnConfig::new(dims.head_dim).with_d(2))
}

#[test]
fn linear_output_projection_is_exact() {
    let (ctx, w, inputs, cfg) = instance(21, None);
    let opts = GradCheckOptions {
        scope: CheckScope::Params(vec!["mlp_out", "mlp_out_bias"]),
        block: BlockOptions::mlp_only(),
        ..Default::default()
    };
    let report = grad_check(&ctx, &w, &inputs, &cfg, 1e-3, &opts).unwrap();
    assert_eq!(report.entries.len(), 10 * 6 + 6);
    assert!(report.max_rel_error < 1e-7, "{}", report.max_rel_error);
}

#[test]
fn blocked_video_inputs_have_zero_gradient() {
    // Loss over condition rows only; video tokens reach them through no path.
    let (ctx, w, inputs, cfg) = instance(22, Some((6..24).collect()));
    let video_coords = (0..6 * 6).map(|index| Coord::Token { index }).collect();
    let opts = GradCheckOptions {
        scope: CheckScope::Coords(video_coords),
        ..Default::default()
    };
    let report = grad_check(&ctx, &w, &inputs, &cfg, 1e-3, &opts).unwrap();
    assert_eq!(report.entries.len(), 36);
    for e in &report.entries {
        assert!(e.analytic.abs() <= 1e-8 && e.numeric.abs() <= 1e-8, "{e:?}");
    }
    assert!(report.loss > 0.0);
}

#[test]
fn condition_inputs_do_reach_the_loss() {
    let (ctx, w, inputs, cfg) = instance(23, Some((6..24).collect()));
    let opts = GradCheckOptions {
        scope: CheckScope::Coords((36..48).map(|index| Coord::Token { index }).collect()),
        ..Default::default()
    };
    let report = grad_check(&ctx, &w, &inputs, &cfg, 1e-3, &opts).unwrap();
    assert!(report.entries.iter().any(|e| e.analytic.abs() > 1e-4));
    assert!(report.max_rel_error < 1e-3);
}

#[test]
fn full_block_five_seeds() {
    for seed in 0..5 {
        let (ctx, w, inputs, cfg) = instance(100 + seed, None);
        let opts = GradCheckOptions {
            seed,
            ..Default::default()
        };
        let report = grad_check(&ctx, &w, &inputs, &cfg, 1e-4, &opts).unwrap();
        assert_eq!(report.entries.len(), w.n_params());
        assert!(report.max_rel_error < 1e-3, "seed {seed}: {}", report.max_rel_error);
    }
}
