//! Brute-force solvers for the two-response pair problem.
//!
//! A pair problem fixes the reference probabilities of a winner and a loser,
//! `β` and the label smoothing `ε`, and asks which trained probabilities
//! `(q_w, q_l)` minimize the pairwise loss. Without constraints every point
//! of the line `q_w = η · q_l` is optimal; adding a conservation law
//! `φ(q_w) + φ(q_l) = φ(ref_w) + φ(ref_l)` pins down a single point.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::math::log_sigmoid;

/// Lower edge of the search box; the upper edge is `1 − GRID_EDGE`.
pub const GRID_EDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairInstance {
    pub ref_w: f64,
    pub ref_l: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl PairInstance {
    pub fn new(ref_w: f64, ref_l: f64, beta: f64, epsilon: f64) -> Result<Self> {
        let ok = ref_w > 0.0
            && ref_l > 0.0
            && ref_w + ref_l <= 1.0
            && beta > 0.0
            && beta.is_finite()
            && epsilon > 0.0
            && epsilon < 0.5;
        if !ok {
            return Err(Error::domain(format!(
                "invalid pair instance (ref_w {ref_w}, ref_l {ref_l}, beta {beta}, epsilon {epsilon})"
            )));
        }
        Ok(Self { ref_w, ref_l, beta, epsilon })
    }

    /// `log((1−ε)/ε)`, the target log-odds of the soft labels.
    pub fn label_log_odds(&self) -> f64 {
        ((1.0 - self.epsilon) / self.epsilon).ln()
    }
}

/// Slope of the zero-loss line: `((1−ε)/ε)^{1/β} · ref_w / ref_l`.
pub fn eta(inst: &PairInstance) -> f64 {
    ((1.0 - inst.epsilon) / inst.epsilon).powf(1.0 / inst.beta) * (inst.ref_w / inst.ref_l)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineCheck {
    pub q_w: f64,
    pub q_l: f64,
    pub ratio: f64,
    pub eta: f64,
    pub on_line: bool,
}

/// Whether `(q_w, q_l)` lies on the zero-loss line, to relative 1e-9.
pub fn check_on_line(inst: &PairInstance, q_w: f64, q_l: f64) -> LineCheck {
    let e = eta(inst);
    let ratio = q_w / q_l;
    LineCheck { q_w, q_l, ratio, eta: e, on_line: ((ratio - e) / e).abs() <= 1e-9 }
}

/// The three candidate points of the ε = 1/11, β = 1, ref = (0.02, 0.01)
/// example: one above the reference, the printed low pair, and the low pair
/// with its winner corrected to sit on the line.
pub fn verify_remark3() -> Vec<LineCheck> {
    let inst = remark3_instance();
    [(0.4, 0.02), (0.001, 0.0002), (0.004, 0.0002)]
        .into_iter()
        .map(|(w, l)| check_on_line(&inst, w, l))
        .collect()
}

pub fn remark3_instance() -> PairInstance {
    PairInstance { ref_w: 0.02, ref_l: 0.01, beta: 1.0, epsilon: 1.0 / 11.0 }
}

/// Pairwise loss as a function of the trained probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum PairLoss {
    /// Soft-label cross entropy minus the label entropy; exactly 0 on the line.
    SoftLabelKl,
    /// `(h_w − h_l − log((1−ε)/ε))²`.
    SquaredLogRatio,
}

impl PairLoss {
    /// Loss at `(q_w, q_l)` given in log space.
    pub fn eval_log(&self, inst: &PairInstance, log_qw: f64, log_ql: f64) -> f64 {
        let margin = inst.beta * ((log_qw - inst.ref_w.ln()) - (log_ql - inst.ref_l.ln()));
        self.eval_margin(inst, margin)
    }

    fn eval_margin(&self, inst: &PairInstance, margin: f64) -> f64 {
        let eps = inst.epsilon;
        match self {
            PairLoss::SoftLabelKl => {
                let entropy = -(1.0 - eps) * (1.0 - eps).ln() - eps * eps.ln();
                let ce = -(1.0 - eps) * log_sigmoid(margin) - eps * log_sigmoid(-margin);
                (ce - entropy).max(0.0)
            }
            PairLoss::SquaredLogRatio => {
                let d = margin - inst.label_log_odds();
                d * d
            }
        }
    }
}

/// A strictly monotone constraint function on (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub enum MonotonePhi {
    Log,
    Identity,
    Cube,
    /// `−1/x`
    NegReciprocal,
    /// Piecewise-linear through `(xs[i], ys[i])`, extended linearly.
    Tabulated { xs: Vec<f64>, ys: Vec<f64> },
}

impl MonotonePhi {
    pub const WHITELIST: [MonotonePhi; 4] =
        [MonotonePhi::Log, MonotonePhi::Identity, MonotonePhi::Cube, MonotonePhi::NegReciprocal];

    pub fn tabulated(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() < 2 || xs.len() != ys.len() {
            return Err(Error::domain("tabulated φ needs at least two (x, y) points of equal length"));
        }
        if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return Err(Error::domain("tabulated φ has non-finite entries"));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain("tabulated φ abscissae must strictly increase"));
        }
        let inc = ys.windows(2).all(|w| w[1] > w[0]);
        let dec = ys.windows(2).all(|w| w[1] < w[0]);
        if !(inc || dec) {
            return Err(Error::domain("tabulated φ is not strictly monotone"));
        }
        Ok(MonotonePhi::Tabulated { xs, ys })
    }

    pub fn name(&self) -> &'static str {
        match self {
            MonotonePhi::Log => "log",
            MonotonePhi::Identity => "identity",
            MonotonePhi::Cube => "cube",
            MonotonePhi::NegReciprocal => "neg_reciprocal",
            MonotonePhi::Tabulated { .. } => "tabulated",
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            MonotonePhi::Log => x.ln(),
            MonotonePhi::Identity => x,
            MonotonePhi::Cube => x * x * x,
            MonotonePhi::NegReciprocal => -1.0 / x,
            MonotonePhi::Tabulated { xs, ys } => {
                let n = xs.len();
                let i = match xs.partition_point(|&v| v <= x) {
                    0 => 0,
                    p if p >= n => n - 2,
                    p => p - 1,
                };
                let t = (x - xs[i]) / (xs[i + 1] - xs[i]);
                ys[i] + t * (ys[i + 1] - ys[i])
            }
        }
    }

    fn increasing(&self) -> bool {
        match self {
            MonotonePhi::Tabulated { ys, .. } => ys[1] > ys[0],
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridPoint {
    pub q_w: f64,
    pub q_l: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSolveResult {
    pub best: GridPoint,
    /// Grid (or search-ray) points whose loss is within the tolerance of the
    /// minimum.
    pub near_optimal: Vec<GridPoint>,
    pub resolution: usize,
    /// Log-space spacing of the grid.
    pub spacing: f64,
    pub tolerance: f64,
}

impl GridSolveResult {
    /// Largest pairwise log-space distance in the near-optimal set, plus one
    /// cell diagonal for the resolution of the grid itself.
    pub fn diameter(&self) -> f64 {
        let pts: Vec<(f64, f64)> = self.near_optimal.iter().map(|p| (p.q_w.ln(), p.q_l.ln())).collect();
        let mut d: f64 = 0.0;
        for (i, a) in pts.iter().enumerate() {
            for b in &pts[i + 1..] {
                d = d.max((a.0 - b.0).hypot(a.1 - b.1));
            }
        }
        d + self.spacing * std::f64::consts::SQRT_2
    }

    /// `max q_w / min q_w` over the near-optimal set, in decades.
    pub fn q_w_decades(&self) -> f64 {
        let (lo, hi) = self
            .near_optimal
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), p| (lo.min(p.q_w), hi.max(p.q_w)));
        (hi / lo).log10()
    }
}

/// Near-optimal tolerance for the unconstrained grid.
pub const UNCONSTRAINED_TOL: f64 = 1e-6;
/// Tie tolerance among constrained search rays.
pub const CONSTRAINED_TOL: f64 = 1e-12;

fn log_nodes(resolution: usize) -> (Vec<f64>, f64) {
    let lo = GRID_EDGE.ln();
    let hi = (1.0 - GRID_EDGE).ln();
    let step = (hi - lo) / (resolution - 1) as f64;
    ((0..resolution).map(|i| lo + i as f64 * step).collect(), step)
}

fn feasible(log_qw: f64, log_ql: f64) -> bool {
    let (lo, hi) = (GRID_EDGE.ln(), (1.0 - GRID_EDGE).ln());
    (lo..=hi).contains(&log_qw) && (lo..=hi).contains(&log_ql) && log_qw.exp() + log_ql.exp() < 1.0
}

/// Point on the constraint curve with `log q_w − log q_l = t`, as
/// `(log q_w, log q_l)`, found by bisection in `log q_l`.
fn curve_point(phi: &MonotonePhi, target: f64, t: f64) -> Option<(f64, f64)> {
    let (lo_edge, hi_edge) = (GRID_EDGE.ln(), (1.0 - GRID_EDGE).ln());
    let mut lo = lo_edge.max(lo_edge - t);
    let mut hi = hi_edge.min(hi_edge - t);
    if lo > hi {
        return None;
    }
    let sign = if phi.increasing() { 1.0 } else { -1.0 };
    let g = |v: f64| sign * (phi.eval((t + v).exp()) + phi.eval(v.exp()) - target);
    let (glo, ghi) = (g(lo), g(hi));
    if glo > 0.0 || ghi < 0.0 {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let v = if g(lo).abs() <= g(hi).abs() { lo } else { hi };
    let p = (t + v, v);
    feasible(p.0, p.1).then_some(p)
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Minimizes `loss` over the feasible triangle on a log-spaced grid with
/// `resolution` nodes per axis. With a constraint `φ`, the search runs over
/// rays of fixed `log q_w − log q_l` (one per grid diagonal), each landing
/// on the constraint curve by bisection; the best ray is then refined by
/// golden-section search.
pub fn grid_solve(
    inst: &PairInstance,
    loss: PairLoss,
    constraint: Option<&MonotonePhi>,
    resolution: usize,
) -> Result<GridSolveResult> {
    if resolution < 100 {
        return Err(Error::domain(format!("grid resolution must be at least 100, got {resolution}")));
    }
    if let Some(MonotonePhi::Tabulated { xs, ys }) = constraint {
        MonotonePhi::tabulated(xs.clone(), ys.clone())?;
    }
    let (nodes, spacing) = log_nodes(resolution);
    match constraint {
        None => {
            let rows: Vec<Vec<GridPoint>> = nodes
                .par_iter()
                .map(|&lw| {
                    nodes
                        .iter()
                        .filter(|&&ll| feasible(lw, ll))
                        .map(|&ll| GridPoint { q_w: lw.exp(), q_l: ll.exp(), loss: loss.eval_log(inst, lw, ll) })
                        .collect()
                })
                .collect();
            let points: Vec<GridPoint> = rows.into_iter().flatten().collect();
            finish(points, resolution, spacing, UNCONSTRAINED_TOL, None)
        }
        Some(phi) => {
            let target = phi.eval(inst.ref_w) + phi.eval(inst.ref_l);
            let span = resolution as isize - 1;
            let ray = |t: f64| {
                curve_point(phi, target, t).map(|(lw, ll)| GridPoint {
                    q_w: lw.exp(),
                    q_l: ll.exp(),
                    loss: loss.eval_log(inst, lw, ll),
                })
            };
            let points: Vec<(isize, GridPoint)> = (-span..=span)
                .into_par_iter()
                .filter_map(|k| ray(k as f64 * spacing).map(|p| (k, p)))
                .collect();
            let best_k = points
                .iter()
                .min_by(|a, b| a.1.loss.total_cmp(&b.1.loss))
                .map(|p| p.0)
                .ok_or_else(|| Error::domain("no feasible point on the constraint curve"))?;
            let f = |t: f64| ray(t).map_or(f64::INFINITY, |p| p.loss);
            let t = golden_min(f, (best_k - 1) as f64 * spacing, (best_k + 1) as f64 * spacing, 1e-12);
            let refined = ray(t);
            let grid_pts = points.into_iter().map(|p| p.1).collect();
            finish(grid_pts, resolution, spacing, CONSTRAINED_TOL, refined)
        }
    }
}

fn finish(
    points: Vec<GridPoint>,
    resolution: usize,
    spacing: f64,
    tolerance: f64,
    refined: Option<GridPoint>,
) -> Result<GridSolveResult> {
    let grid_best = *points
        .iter()
        .min_by(|a, b| a.loss.total_cmp(&b.loss))
        .ok_or_else(|| Error::domain("no feasible grid point"))?;
    let near_optimal = points.into_iter().filter(|p| p.loss <= grid_best.loss + tolerance).collect();
    let best = match refined {
        Some(r) if r.loss <= grid_best.loss => r,
        _ => grid_best,
    };
    Ok(GridSolveResult { best, near_optimal, resolution, spacing, tolerance })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProposalTrial {
    pub instance: PairInstance,
    pub phi: &'static str,
    pub q_w: f64,
    pub q_l: f64,
    pub winner_up: bool,
    pub loser_down: bool,
    /// `diameter(2R) / diameter(R)` of the near-optimal set.
    pub diameter_ratio: f64,
    /// `|q_w + q_l − ref_w − ref_l|`, identity constraint only.
    pub conservation_defect: Option<f64>,
    /// `q_w − ref_w ≤ ref_l`, identity constraint only.
    pub gain_bounded: Option<bool>,
}

impl ProposalTrial {
    pub fn ok(&self) -> bool {
        self.winner_up && self.loser_down
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropositionReport {
    pub trials: Vec<ProposalTrial>,
    pub resolution: usize,
}

impl PropositionReport {
    pub fn violations(&self) -> Vec<&ProposalTrial> {
        self.trials.iter().filter(|t| !t.ok()).collect()
    }

    pub fn max_diameter_ratio(&self) -> f64 {
        self.trials.iter().map(|t| t.diameter_ratio).fold(0.0, f64::max)
    }
}

pub fn random_instance<R: Rng + ?Sized>(rng: &mut R) -> PairInstance {
    PairInstance {
        ref_w: rng.random_range(1e-4..=0.4),
        ref_l: rng.random_range(1e-4..=0.4),
        beta: rng.random_range(0.1..=5.0),
        epsilon: rng.random_range(0.01..=0.45),
    }
}

/// Draws `trials` random instances and solves each under every whitelisted
/// constraint at `resolution` and `2 · resolution`.
pub fn verify_proposition<R: Rng + ?Sized>(trials: usize, resolution: usize, rng: &mut R) -> Result<PropositionReport> {
    if trials == 0 {
        return Err(Error::domain("need at least one trial"));
    }
    let instances: Vec<PairInstance> = (0..trials).map(|_| random_instance(rng)).collect();
    let jobs: Vec<(PairInstance, MonotonePhi)> = instances
        .iter()
        .flat_map(|inst| MonotonePhi::WHITELIST.iter().map(move |phi| (*inst, phi.clone())))
        .collect();
    let trials = jobs
        .par_iter()
        .map(|(inst, phi)| {
            let coarse = grid_solve(inst, PairLoss::SoftLabelKl, Some(phi), resolution)?;
            let fine = grid_solve(inst, PairLoss::SoftLabelKl, Some(phi), 2 * resolution)?;
            let GridPoint { q_w, q_l, .. } = coarse.best;
            let identity = *phi == MonotonePhi::Identity;
            Ok(ProposalTrial {
                instance: *inst,
                phi: phi.name(),
                q_w,
                q_l,
                winner_up: q_w > inst.ref_w,
                loser_down: q_l < inst.ref_l,
                diameter_ratio: fine.diameter() / coarse.diameter(),
                conservation_defect: identity.then(|| (q_w + q_l - inst.ref_w - inst.ref_l).abs()),
                gain_bounded: identity.then_some(q_w - inst.ref_w <= inst.ref_l),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PropositionReport { trials, resolution })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eta_examples() {
        assert_eq!(eta(&remark3_instance()), 20.0);
        let inst = PairInstance::new(0.02, 0.01, 2.0, 1.0 / 11.0).unwrap();
        assert!((eta(&inst) - 6.324_555_320_336_759).abs() < 1e-12);
    }

    #[test]
    fn worked_example_cases() {
        let cases = verify_remark3();
        assert!(cases[0].on_line);
        assert!(!cases[1].on_line);
        assert_eq!(cases[1].ratio, 5.0);
        assert!(cases[2].on_line);
    }

    #[test]
    fn kl_vanishes_on_line() {
        let inst = remark3_instance();
        let v = PairLoss::SoftLabelKl.eval_log(&inst, 0.4f64.ln(), 0.02f64.ln());
        assert!(v < 1e-15);
        assert!(PairLoss::SquaredLogRatio.eval_log(&inst, 0.4f64.ln(), 0.02f64.ln()) < 1e-28);
    }

    #[test]
    fn tabulated_phi_checks_monotonicity() {
        assert!(MonotonePhi::tabulated(vec![0.0, 0.5, 1.0], vec![0.0, 1.0, 0.5]).is_err());
        assert!(MonotonePhi::tabulated(vec![0.0, 0.5, 0.5], vec![0.0, 1.0, 2.0]).is_err());
        let phi = MonotonePhi::tabulated(vec![0.0, 0.5, 1.0], vec![0.0, 1.0, 3.0]).unwrap();
        assert_eq!(phi.eval(0.25), 0.5);
        assert_eq!(phi.eval(0.75), 2.0);
        let inst = remark3_instance();
        let bad = MonotonePhi::Tabulated { xs: vec![0.0, 1.0, 2.0], ys: vec![0.0, 2.0, 1.0] };
        assert!(matches!(grid_solve(&inst, PairLoss::SoftLabelKl, Some(&bad), 100), Err(Error::Domain(_))));
    }

    #[test]
    fn small_resolution_rejected() {
        assert!(grid_solve(&remark3_instance(), PairLoss::SoftLabelKl, None, 99).is_err());
    }
}
