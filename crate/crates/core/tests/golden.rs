use std::f64::consts::E;

use afine_core::backbone::{extract_pyramid, BackboneParams};
use afine_core::model::afine_breakdown;
use afine_core::naturalness::naturalness_score;
use afine_core::synthetic::{degrade, texture};
use afine_core::{BackboneConfig, Image, ModelParameters, NaturalnessHead};
use approx::assert_relative_eq;

// pinned from the first verified run; a change means the forward pass changed

#[test]
fn seeded_head_on_fixed_image() {
    let config = BackboneConfig::toy(2024);
    let params = BackboneParams::init(config.clone()).unwrap();
    let head = NaturalnessHead::init(&config, 7);
    let image = texture(32, 5);
    let pyr = extract_pyramid(&image, &params).unwrap();
    let n = naturalness_score(&image, &pyr, &head).unwrap();
    assert_relative_eq!(n, -3.508_166_933_574_570_5e-2, max_relative = 1e-9);
}

#[test]
fn seeded_toy_model_score() {
    let model = ModelParameters::init(BackboneConfig::toy(2024)).unwrap();
    let image = texture(32, 5);
    let b = afine_breakdown(&image, &degrade(&image, 1.5, 3), &model).unwrap();
    assert_relative_eq!(b.fidelity_raw, 0.010_236_670_384_743_296, max_relative = 1e-9);
    assert_relative_eq!(b.naturalness_ref_raw, -0.023_178_656_224_708_542, max_relative = 1e-9);
    assert_relative_eq!(b.naturalness_test_raw, -0.022_484_856_927_594_02, max_relative = 1e-9);
    assert_relative_eq!(b.score, -0.012_231_736_798_469_308, max_relative = 1e-9);

    // recompose from the raw parts with the default calibration (centre 0, scale 1) and k = 1
    let cal = |v: f64| 4.0 / (1.0 + E.powf(-v)) - 2.0;
    let (f, nx, ny) = (cal(b.fidelity_raw), cal(b.naturalness_ref_raw), cal(b.naturalness_test_raw));
    assert_relative_eq!(b.score, f + (nx - ny).exp() * ny, max_relative = 1e-12);
}

#[test]
fn transformer_stage_grids() {
    let params = BackboneParams::init(BackboneConfig::vit_b32()).unwrap();
    for (side, grid) in [(224, 7), (512, 16)] {
        let image = Image::uniform(side, side, 0.5).unwrap();
        let pyr = extract_pyramid(&image, &params).unwrap();
        assert_eq!(pyr.stages.len(), 13);
        assert_eq!((pyr.stages[0].channels(), pyr.stages[0].height), (3, side));
        for stage in &pyr.stages[1..] {
            assert_eq!((stage.height, stage.width, stage.channels()), (grid, grid, 768));
        }
    }
}
