use std::time::Instant;

use cocktail::selfcheck;
use cocktail_tensor::OpKind;

#[test]
fn fresh_build_passes_every_check() {
    let t = Instant::now();
    let report = selfcheck::run(1, None).unwrap();
    let secs = t.elapsed().as_secs_f64();
    for line in &report.lines {
        println!("{line}");
    }
    assert!(report.passed());
    let names: Vec<&str> = report.lines.iter().map(|l| l.name.as_str()).collect();
    for expected in [
        "gradient/residual_block",
        "gradient/hourglass_mask",
        "gradient/residual_attention",
        "gradient/dilated_block",
        "gradient/classifier/convolutional",
        "gradient/classifier/recurrent",
        "pit_oracle",
        "maxpool_dominance",
        "loss_scale",
    ] {
        assert!(names.contains(&expected), "missing {expected} in {names:?}");
    }
    assert!(secs < 300.0, "{secs:.0}s");
}

#[test]
fn sign_flipped_backward_rule_is_caught() {
    for op in [OpKind::Mul, OpKind::Conv2d] {
        let report = selfcheck::run(2, Some(op)).unwrap();
        let failed: Vec<&str> = report.lines.iter().filter(|l| !l.passed).map(|l| l.name.as_str()).collect();
        assert!(!report.passed(), "{op:?}");
        assert!(failed.iter().all(|n| n.starts_with("gradient/")), "{failed:?}");
    }
}
