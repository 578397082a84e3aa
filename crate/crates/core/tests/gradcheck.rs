//! Central finite differences against the tape on the minimal config
//! (d=16, four latents, two-step trajectory).

mod common;

const TOL: f64 = 1e-3;

#[test]
fn infonce_through_the_grounder() {
    let err = common::infonce_grad_error();
    assert!(err < TOL, "max relative error {err}");
}

#[test]
fn sft_loss_through_both_passes() {
    let (all, grounder) = common::sft_grad_errors();
    assert!(all < TOL, "max relative error {all}");
    assert!(grounder < TOL, "grounder max relative error {grounder}");
}

#[test]
fn latent_surrogate_wrt_grounder() {
    for sigma in [0.1, 0.5] {
        let (err, mean_ratio) = common::latent_grad_error(sigma);
        assert!((mean_ratio - 1.0).abs() > 1e-6, "ratios should differ from one");
        assert!(err < TOL, "sigma {sigma}: max relative error {err}");
    }
}
