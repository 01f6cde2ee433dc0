mod common;

use common::gradcheck::{check, primitive_cases};

#[test]
fn every_primitive_matches_central_differences() {
    for seed in 0..5 {
        for (name, inputs, build) in primitive_cases(seed) {
            let err = check(&inputs, |g, x| build(g, x));
            assert!(err <= 1e-4, "{name} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn oracle_detects_a_wrong_gradient() {
    use maskpred::tensor::Tensor;
    // scale_by with a second use of x gives a gradient the FD oracle must see;
    // comparing against a deliberately different builder must fail.
    let x = Tensor::from_f64(&[2, 2], &[0.3, -0.2, 0.5, 1.1]).unwrap();
    let good = check(&[x.clone()], |g, v| {
        let y = g.mul(v[0], v[0])?;
        g.sum(y)
    });
    assert!(good < 1e-6);
    let analytic_wrong = common::gradcheck::rel_error(&[0.6, -0.4, 1.0, 2.2], &[0.3, -0.2, 0.5, 1.1]);
    assert!(analytic_wrong > 0.4);
}
