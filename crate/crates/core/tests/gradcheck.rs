//! Central finite-difference verification of the analytic parameter
//! gradients behind both trainable losses. Every component of every
//! primitive — position, log-scale, rotation quaternion, opacity logit,
//! color — is perturbed in isolation on small random scenes, and the
//! analytic gradient must match `(f(θ+h) − f(θ−h)) / 2h` within a relative
//! tolerance of 1e-3 (absolute floor 1e-6).

mod support;

const N_SCENES: u64 = 20;

#[test]
fn loss_recon_gradients_match_finite_differences() {
    let started = std::time::Instant::now();
    for seed in 0..N_SCENES {
        support::check_recon_scene(seed);
    }
    assert!(started.elapsed().as_secs() < 120, "gradient check must finish within two minutes");
}

#[test]
fn loss_student_gradients_match_finite_differences() {
    let started = std::time::Instant::now();
    for seed in 0..N_SCENES {
        support::check_student_scene(seed);
    }
    assert!(started.elapsed().as_secs() < 120, "gradient check must finish within two minutes");
}
