use std::f64::consts::PI;

use proptest::prelude::*;
use stochflow::control::{endpoint_error, integrate_plan, synthesize_control, FlowShape};
use stochflow::spectral::euler_nonlinearity;

fn shape_strategy() -> impl Strategy<Value = (FlowShape, usize)> {
    let angle = 0.0..2.0 * PI;
    prop_oneof![
        (2usize..=3, 0usize..3, 0usize..3, angle.clone()).prop_filter_map("distinct axes", |(d, a, b, ph)| {
            (a != b && a < d && b < d).then_some((FlowShape::Shear { dir: a, along: b, phase: ph }, d))
        }),
        (2usize..=3, 0usize..3, 0usize..3, angle.clone(), angle.clone()).prop_filter_map("distinct axes", |(d, i, j, ci, cj)| {
            (i != j && i < d && j < d).then_some((FlowShape::Cellular { i, j, ci, cj }, d))
        }),
        (angle.clone(), angle).prop_map(|(a, b)| (FlowShape::Hyperbolic { a, b }, 2)),
    ]
}

fn unit_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_filter("nonzero", |v| v.iter().map(|c| c * c).sum::<f64>() > 0.01)
}

fn endpoints() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (2usize..=3).prop_flat_map(|d| {
        (
            prop::collection::vec(0.0..2.0 * PI, d),
            unit_vec(d),
            prop::collection::vec(0.0..2.0 * PI, d),
            unit_vec(d),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scheduled_shapes_are_euler_steady((shape, d) in shape_strategy()) {
        let b = euler_nonlinearity(&shape.to_field(d).unwrap()).unwrap();
        let worst = b.coeffs().iter().fold(0.0f64, |m, c| m.max(c.abs()));
        prop_assert!(worst < 1e-12, "{shape:?}: {worst}");
    }

    #[test]
    fn endpoint_error_scales_with_tolerance((x0, v0, x1, v1) in endpoints()) {
        let plan = synthesize_control(&x0, &v0, &x1, &v1).unwrap();
        for tol in [1e-6, 1e-8, 1e-10] {
            let end = integrate_plan(&plan, &x0, &v0, tol).unwrap();
            let e = endpoint_error(&end, &x1, &v1).unwrap();
            prop_assert!(e.x_error.max(e.v_error) < 100.0 * tol, "tol {tol}: {e:?}");
        }
    }
}
