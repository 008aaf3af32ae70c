mod common;

use c3dpo::oracle::{
    check_on_line, eta, grid_solve, random_instance, remark3_instance, verify_proposition, verify_remark3,
    MonotonePhi, PairInstance, PairLoss,
};
use common::*;

#[test]
fn eta_examples() {
    assert_eq!(eta(&remark3_instance()), 20.0);
    let inst = PairInstance::new(0.02, 0.01, 2.0, 1.0 / 11.0).unwrap();
    assert!((eta(&inst) - 6.324_555_320_336_759).abs() <= 1e-12);
    let sym = PairInstance::new(0.1, 0.1, 0.5, 0.5 - 1e-12).unwrap();
    assert!((eta(&sym) - 1.0).abs() <= 1e-9);
}

#[test]
fn worked_example_points() {
    let checks = verify_remark3();
    assert!(checks[0].on_line);
    assert!(!checks[1].on_line);
    assert!((checks[1].ratio - 5.0).abs() < 1e-12);
    assert!(checks[2].on_line);
}

#[test]
fn invalid_instances_rejected() {
    for (w, l, b, e) in [(0.0, 0.1, 1.0, 0.1), (0.6, 0.5, 1.0, 0.1), (0.1, 0.1, 0.0, 0.1), (0.1, 0.1, 1.0, 0.5)] {
        assert!(PairInstance::new(w, l, b, e).is_err());
    }
}

#[test]
fn unconstrained_optimum_is_the_whole_line() {
    let inst = remark3_instance();
    let res = grid_solve(&inst, PairLoss::SoftLabelKl, None, 1000).unwrap();
    let e = eta(&inst).ln();
    for p in &res.near_optimal {
        assert!(((p.q_w / p.q_l).ln() - e).abs() <= 1e-2);
    }
    assert!(res.q_w_decades() >= 6.0, "{}", res.q_w_decades());
    let check = check_on_line(&inst, 0.4, 0.02);
    assert!(check.on_line);
}

#[test]
fn squared_loss_has_the_same_line() {
    let inst = PairInstance::new(0.05, 0.2, 0.7, 0.2).unwrap();
    let res = grid_solve(&inst, PairLoss::SquaredLogRatio, None, 600).unwrap();
    assert!(res.q_w_decades() >= 4.0);
    let e = eta(&inst).ln();
    assert!(((res.best.q_w / res.best.q_l).ln() - e).abs() <= res.spacing);
}

/// Closed-form intersection of `q_w = η q_l` with `φ(q_w) + φ(q_l) = c`.
fn analytic(inst: &PairInstance, phi: &MonotonePhi) -> (f64, f64) {
    let e = eta(inst);
    let (w, l) = (inst.ref_w, inst.ref_l);
    let ql = match phi {
        MonotonePhi::Log => (w * l / e).sqrt(),
        MonotonePhi::Identity => (w + l) / (1.0 + e),
        MonotonePhi::Cube => ((w.powi(3) + l.powi(3)) / (1.0 + e.powi(3))).cbrt(),
        MonotonePhi::NegReciprocal => (1.0 + 1.0 / e) / (1.0 / w + 1.0 / l),
        MonotonePhi::Tabulated { .. } => unreachable!(),
    };
    (e * ql, ql)
}

#[test]
fn constrained_optimum_matches_closed_form() {
    let mut r = rng(77);
    let mut checked = 0;
    while checked < 40 {
        let inst = random_instance(&mut r);
        for phi in &MonotonePhi::WHITELIST {
            let (aw, al) = analytic(&inst, phi);
            if aw + al >= 0.999 || al <= 1e-7 {
                continue;
            }
            let res = grid_solve(&inst, PairLoss::SoftLabelKl, Some(phi), 400).unwrap();
            assert!(rel(res.best.q_w, aw) <= 1e-3, "{} {inst:?}: {} vs {aw}", phi.name(), res.best.q_w);
            assert!(rel(res.best.q_l, al) <= 1e-3, "{} {inst:?}: {} vs {al}", phi.name(), res.best.q_l);
            checked += 1;
        }
    }
}

#[test]
fn log_constraint_keeps_product_and_moves_the_right_way() {
    let mut r = rng(78);
    for _ in 0..30 {
        let inst = random_instance(&mut r);
        let res = grid_solve(&inst, PairLoss::SoftLabelKl, Some(&MonotonePhi::Log), 500).unwrap();
        let prod = res.best.q_w * res.best.q_l;
        assert!(rel(prod, inst.ref_w * inst.ref_l) <= 1e-8);
        assert!(res.best.q_w > inst.ref_w && res.best.q_l < inst.ref_l);
    }
}

#[test]
fn identity_constraint_conserves_mass() {
    let mut r = rng(79);
    for _ in 0..30 {
        let inst = random_instance(&mut r);
        let res = grid_solve(&inst, PairLoss::SoftLabelKl, Some(&MonotonePhi::Identity), 500).unwrap();
        let (qw, ql) = (res.best.q_w, res.best.q_l);
        assert!((qw + ql - inst.ref_w - inst.ref_l).abs() <= 1e-10);
        assert!(qw - inst.ref_w <= inst.ref_l);
        assert!(qw > inst.ref_w && ql < inst.ref_l);
    }
}

#[test]
fn constrained_near_optimal_set_shrinks_with_resolution() {
    let inst = PairInstance::new(0.1, 0.3, 1.3, 0.15).unwrap();
    for phi in &MonotonePhi::WHITELIST {
        let a = grid_solve(&inst, PairLoss::SoftLabelKl, Some(phi), 500).unwrap();
        let b = grid_solve(&inst, PairLoss::SoftLabelKl, Some(phi), 1000).unwrap();
        assert!(b.diameter() / a.diameter() <= 0.55, "{}", phi.name());
    }
}

#[test]
fn tabulated_phi() {
    assert!(MonotonePhi::tabulated(vec![0.0, 1.0], vec![0.0, 0.0]).is_err());
    assert!(MonotonePhi::tabulated(vec![0.0, 0.5, 0.4], vec![0.0, 1.0, 2.0]).is_err());
    assert!(MonotonePhi::tabulated(vec![0.0], vec![0.0]).is_err());
    assert!(MonotonePhi::tabulated(vec![0.0, 0.5, 1.0], vec![0.0, 1.0, 0.5]).is_err());
    let phi = MonotonePhi::tabulated(vec![0.0, 0.5, 1.0], vec![0.0, 2.0, 3.0]).unwrap();
    assert_eq!(phi.eval(0.25), 1.0);
    assert_eq!(phi.eval(0.75), 2.5);
    assert_eq!(phi.eval(1.5), 4.0);
    // Piecewise-linear through the identity is the identity.
    let lin = MonotonePhi::tabulated(vec![0.0, 0.3, 1.0], vec![0.0, 0.3, 1.0]).unwrap();
    let dec = MonotonePhi::tabulated(vec![0.0, 1.0], vec![1.0, 0.0]).unwrap();
    let inst = PairInstance::new(0.2, 0.3, 1.0, 0.2).unwrap();
    let want = analytic(&inst, &MonotonePhi::Identity);
    for phi in [lin, dec] {
        let res = grid_solve(&inst, PairLoss::SoftLabelKl, Some(&phi), 400).unwrap();
        assert!(rel(res.best.q_w, want.0) <= 1e-3);
        assert!(rel(res.best.q_l, want.1) <= 1e-3);
    }
}

#[test]
fn low_resolution_rejected() {
    assert!(grid_solve(&remark3_instance(), PairLoss::SoftLabelKl, None, 99).is_err());
}

#[test]
fn constrained_direction_holds_on_random_instances() {
    let report = verify_proposition(20, 200, &mut rng(80)).unwrap();
    assert_eq!(report.trials.len(), 80);
    assert!(report.violations().is_empty());
    assert!(report.max_diameter_ratio() <= 0.55);
    for t in report.trials.iter().filter(|t| t.phi == "identity") {
        assert!(t.conservation_defect.unwrap() <= 1e-10);
        assert_eq!(t.gain_bounded, Some(true));
    }
}
