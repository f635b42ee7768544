use rand::Rng;
use sdh_core::agents::actor_loss;
use sdh_core::bellman::{shape, two_critic_fixed_point};
use sdh_core::continuation::ContinuationModel;
use sdh_core::mdp::random::{random_mdp, random_policy};
use sdh_core::oracle::{exact_terms, j_as_exact, ObjectiveSpec, Semantics};
use sdh_core::rng;

fn random_continuation<R: Rng>(r: &mut R) -> ContinuationModel {
    match r.gen_range(0..3) {
        0 => ContinuationModel::exponential(r.gen_range(0.0..2.0)),
        1 => ContinuationModel::cat(r.gen_range(0.05..0.9), r.gen_range(0.5..3.0)),
        _ => ContinuationModel::HardIndicator,
    }
}

#[test]
fn critics_reassemble_the_exact_objective() {
    let mut r = rng::stream(99, 0);
    for _ in 0..25 {
        let ns = r.gen_range(2..6);
        let na = r.gen_range(2..4);
        let mdp = random_mdp(ns, na, 2, r.gen_range(0.5..0.95), &mut r).unwrap();
        let pi = random_policy(ns, na, 1.5, &mut r);
        let cont = random_continuation(&mut r);
        let shaped = shape(&mdp, &cont).unwrap();
        let ell_c = (na as f64).ln();
        let critics = two_critic_fixed_point(&pi, &shaped, ell_c, 1e-13).unwrap();
        for kappa in [0.0, 0.5, 2.0] {
            let spec = ObjectiveSpec::new(Semantics::As, kappa, ell_c);
            let exact = j_as_exact(&mdp, &pi, &cont, &spec).unwrap().value;
            let v = critics.v_kappa(&pi, kappa);
            let mu = mdp.initial_dist();
            let assembled: f64 = mu.iter().zip(&v).map(|(m, x)| m * x).sum();
            assert!((assembled - exact).abs() < 1e-8, "kappa {kappa}: {assembled} vs {exact}");

            // The actor loss at fixed critics is minus the state value.
            let q_r = &critics.q_r;
            let q_kl = &critics.q_kl;
            let via_actor: f64 = (0..ns)
                .filter(|&s| mu[s] > 0.0 && !mdp.is_terminal(s))
                .map(|s| -mu[s] * actor_loss(&[s], &pi, q_r, q_kl, kappa, false).value)
                .sum();
            assert!((via_actor - exact).abs() < 1e-8, "{via_actor} vs {exact}");
        }
    }
}

#[test]
fn decomposition_holds_across_kappa() {
    let mut r = rng::stream(100, 0);
    for _ in 0..20 {
        let mdp = random_mdp(3, 2, 1, 0.9, &mut r).unwrap();
        let pi = random_policy(3, 2, 1.0, &mut r);
        let cont = random_continuation(&mut r);
        let ell_c = 2f64.ln();
        let spec = ObjectiveSpec::new(Semantics::As, 1.0, ell_c);
        let t = exact_terms(&mdp, &pi, &cont, &spec).unwrap();
        for kappa in [0.0, 0.5, 2.0] {
            let lhs = t.j_as(kappa);
            let rhs = t.j_surv + kappa * t.entropy_as - kappa * ell_c * t.decision_mass;
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
