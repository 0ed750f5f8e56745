mod common;

use common::*;
use flowguide_core::flowfield::{estimate_flow, FlowConfig};

#[test]
fn identical_frames() {
    let a = tex_image(tex);
    let f = estimate_flow(&a, &a, &FlowConfig::default()).unwrap();
    let worst = f.u.iter().chain(&f.v).fold(0.0f32, |m, x| m.max(x.abs()));
    assert!(worst < 1e-3, "max |flow| {worst}");
}

#[test]
fn integer_translations() {
    let a = tex_image(tex);
    for (dx, dy) in [(1i32, 0i32), (2, 0), (3, 0), (0, 2), (-2, 1), (3, -3)] {
        let b = shifted(dx as f32, dy as f32);
        let f = estimate_flow(&a, &b, &FlowConfig::default()).unwrap();
        let (mu, mv) = interior_mean(&f);
        let err = (mu - dx as f32).hypot(mv - dy as f32);
        assert!(err < 0.5, "shift ({dx},{dy}) recovered as ({mu},{mv})");
    }
}

#[test]
fn small_rotation() {
    let a = tex_image(tex);
    let (b, truth) = rotated(5.0);
    let f = estimate_flow(&a, &b, &FlowConfig::default()).unwrap();
    let corr = interior_correlation(&f, &truth);
    assert!(corr > 0.9, "correlation {corr}");
}

#[test]
fn deterministic() {
    let a = tex_image(tex);
    let b = shifted(2.0, 0.0);
    let cfg = FlowConfig::default();
    assert_eq!(estimate_flow(&a, &b, &cfg).unwrap(), estimate_flow(&a, &b, &cfg).unwrap());
}
