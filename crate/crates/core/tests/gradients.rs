//! Analytic adapter and projector gradients against central differences of
//! the answer-span loss.

mod common;

use std::time::Instant;

use common::{fd_config, fd_sample, gradient_check, GRAD_REL_TOL};
use hide_forge::adapters::TaskAdapterSet;
use hide_forge::model::{backward, BaseModel, Projector};
use hide_forge::numerics::SeededRng;

#[test]
fn all_trainable_gradients_match_central_differences() {
    for seed in [20, 40] {
        let started = Instant::now();
        let report = gradient_check(seed);
        assert_eq!(report.failure, None);
        assert_eq!(report.checked, report.parameters);
        assert!(report.worst <= GRAD_REL_TOL);
        assert!(started.elapsed().as_secs_f64() < 60.0);
    }
}

#[test]
fn fresh_adapters_only_move_b() {
    // With B = 0 the loss is flat in A at first order.
    let cfg = fd_config();
    let mut rng = SeededRng::new(30);
    let base = BaseModel::seeded(cfg.clone(), 31).unwrap();
    let proj = Projector::seeded(&cfg, 32);
    let adapters = TaskAdapterSet::fresh("t", &cfg, &mut rng);
    let sample = fd_sample(&cfg, &mut rng);
    let (_, grads) = backward(&base, &proj, &adapters, &sample).unwrap();
    assert!(grads.adapters.iter().all(|(ga, _)| ga.as_slice().iter().all(|v| *v == 0.0)));
    assert!(grads.adapters.iter().any(|(_, gb)| gb.as_slice().iter().any(|v| *v != 0.0)));
}
