//! Checks built on variance, W1 transport and kernel concentration.

use std::time::Instant;

use crate::error::Result;
use crate::flows::ModelTag::*;
use crate::geometry::MetricData;
use crate::heat::{solve_conjugate_backward, ScalarField};
use crate::scenario::Scenario;
use crate::transport::{h_n, h_center, variance, w1_distance, W1Method};

use super::{CheckCtx, CheckResult, Margins};

/// Sampled conjugately-evolving measure family: weights per slice time.
struct ConjugateFamily {
    times: Vec<f64>,
    /// Densities per time, normalized to unit discrete mass at the start.
    weights: Vec<Vec<f64>>,
}

/// Evolve a positive seeded density backward through the slice times.
/// On latitude grids the seed is made zonal and on tori fiber-invariant, so
/// the exact quantile transport stays applicable all the way down.
fn conjugate_family(scn: &Scenario, seed: u64, reduce: bool) -> Result<ConjugateFamily> {
    let flow = &scn.flow;
    let t_b = flow.interval().1;
    let field = scn.seeded_fields(1, seed).pop().unwrap();
    let n = field.len();
    let disc = &flow.disc;
    let mut density: Vec<f64> = field.iter().map(|v| (0.8 * v).exp()).collect();
    if let MetricData::Line { half_len } = &flow.slices[0].metric {
        // Keep the family away from the absorbing walls so the truncation
        // flux stays negligible over the whole interval.
        for (i, d) in density.iter_mut().enumerate() {
            let x = disc.coords[0][i] / (0.6 * half_len);
            *d *= (-x.powi(8)).exp();
        }
    }
    if reduce {
        match &flow.slices[0].metric {
            MetricData::Sphere { .. } => {
                let (nt, np) = (disc.shape[0], disc.shape[1]);
                for i in 0..nt {
                    let mean = density[i * np..(i + 1) * np].iter().sum::<f64>() / np as f64;
                    for j in 0..np {
                        density[i * np + j] = mean;
                    }
                }
            }
            MetricData::Torus { .. } => {
                let (n0, n1) = (disc.shape[0], disc.shape[1]);
                for i in 0..n0 {
                    let mean = density[i * n1..(i + 1) * n1].iter().sum::<f64>() / n1 as f64;
                    for j in 0..n1 {
                        density[i * n1 + j] = mean;
                    }
                }
            }
            _ => {}
        }
    }
    let mass = crate::heat::total_mass(flow, t_b, &density);
    for d in &mut density {
        *d /= mass;
    }
    let mut times = vec![t_b];
    let mut weights = Vec::new();
    let slice_b = flow.slice_at(t_b);
    weights.push(density.iter().zip(&slice_b.weights).map(|(d, w)| d * w).collect());
    let mut v = ScalarField::new(density, t_b);
    for &t in flow.times.iter().rev().skip(1) {
        v = solve_conjugate_backward(flow, &v, v.time, t)?;
        let slice = flow.slice_at(t);
        let mut mu: Vec<f64> =
            v.values.iter().zip(&slice.weights).map(|(d, w)| d * w).collect();
        let mass: f64 = mu.iter().sum();
        for m in &mut mu {
            *m /= mass;
        }
        times.push(t);
        weights.push(mu);
        let _ = n;
    }
    times.reverse();
    weights.reverse();
    Ok(ConjugateFamily { times, weights })
}

/// W1 between two conjugately evolving measures is non-decreasing in time.
pub(super) fn w1_monotone(ctx: &CheckCtx, started: Instant) -> Result<CheckResult> {
    let scn = ctx.scn;
    let mut margins = Margins::new();
    let mut method_err: f64 = 0.0;
    for pair in 0..3u64 {
        let fam1 = conjugate_family(scn, ctx.seed.wrapping_add(2 * pair), true)?;
        let fam2 = conjugate_family(scn, ctx.seed.wrapping_add(2 * pair + 1), true)?;
        let mut prev: Option<f64> = None;
        for (k, &t) in fam1.times.iter().enumerate() {
            let slice = scn.flow.slice_at(t);
            let dist = scn.distance(t);
            let r = w1_distance(&slice, &dist, &fam1.weights[k], &fam2.weights[k], W1Method::Auto)?;
            method_err = method_err.max(r.error);
            if let Some(p) = prev {
                margins.add(r.value - p);
            }
            prev = Some(r.value);
        }
    }
    // Second statement of the monotonicity lemma on kernel pairs where the
    // exact quantile route applies: W1 at any earlier time is bounded by the
    // distance of the basepoints at the common basepoint time.
    if matches!(scn.flow.model, EuclideanLine | Circle | WarpedRotsym) {
        let t0 = ctx.t0();
        let nodes = scn.sample_nodes(4, ctx.seed);
        let dist0 = scn.distance(t0);
        let (ilo, _) = scn.flow.interval();
        let s = (t0 - 2.0 * ctx.tau_floor()).max(ilo);
        for i in 0..nodes.len() {
            for j in i + 1..nodes.len() {
                let w = crate::transport::kernel_w1(scn, (nodes[i], t0), (nodes[j], t0), s)?;
                margins.add(dist0.get(nodes[i], nodes[j]) - w.value);
            }
        }
    }
    let scale = scn.distance(ctx.t0()).diameter();
    let tol = ctx.pde_tol(scale) + 2.0 * method_err;
    Ok(margins.finish("w1-monotone", &scn.id, tol, ctx.seed, started))
}

/// Distance-squared heat inequality at sampled smooth pairs.
pub(super) fn he_dist(ctx: &CheckCtx, started: Instant) -> Result<CheckResult> {
    let scn = ctx.scn;
    let mut margins = Margins::new();
    if scn.flow.model == WarpedRotsym {
        // Quotient distances measure fiber orbits, not manifold points;
        // the statement is not sampled there.
        margins.note("skipped: quotient distances on warped profiles");
        return Ok(margins.finish("he-dist", &scn.id, 0.0, ctx.seed, started));
    }
    let hn = h_n(scn.flow.dim());
    let (ilo, ihi) = scn.flow.interval();
    let t = 0.5 * (ilo + ihi);
    let dist = scn.distance(t);
    let diam = dist.diameter();
    let slice = scn.flow.slice_at(t);
    let bases = crate::solver::BasisCache::default();
    let op = crate::solver::op_from_slice(&slice, &bases);
    let weights = &slice.weights;
    // Time derivative of d^2 by centered differences across a small gap.
    let gap = scn.flow.times.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let delta = 0.25 * gap;
    let d_plus = scn.flow.distance_at(t + delta);
    let d_minus = scn.flow.distance_at(t - delta);
    let static_flow = matches!(scn.flow.model, EuclideanLine | Circle | FlatTorus | StaticSphere);

    let nodes = scn.sample_nodes(6, ctx.seed);
    let n = dist.n;
    // Weak Laplacian of the squared-distance column from each sample node.
    let mut lap: std::collections::HashMap<usize, Vec<f64>> = std::collections::HashMap::new();
    for &y in &nodes {
        let col: Vec<f64> = (0..n).map(|i| dist.get(i, y) * dist.get(i, y)).collect();
        let mut a = vec![0.0; n];
        op.apply_stiffness(&col, &mut a);
        for i in 0..n {
            a[i] /= weights[i];
        }
        lap.insert(y, a);
    }
    for (ai, &x) in nodes.iter().enumerate() {
        for &y in nodes.iter().skip(ai + 1) {
            let d = dist.get(x, y);
            if d < 0.1 * diam || d > 0.9 * diam {
                continue;
            }
            let dt_term = if static_flow {
                0.0
            } else {
                (d_plus.get(x, y).powi(2) - d_minus.get(x, y).powi(2)) / (2.0 * delta)
            };
            let lhs = dt_term - lap[&y][x] - lap[&x][y];
            margins.add(lhs + hn);
        }
    }
    let tol = ctx.pde_tol(1.0);
    Ok(margins.finish("he-dist", &scn.id, tol, ctx.seed, started))
}


/// Var + H_n t is non-decreasing along conjugately evolving kernel pairs.
pub(super) fn var_monotone(ctx: &CheckCtx, started: Instant) -> Result<CheckResult> {
    let scn = ctx.scn;
    let hn = h_n(scn.flow.dim());
    let t0 = ctx.t0();
    let floor = ctx.tau_floor();
    let bases = scn.kernel_basepoints(6, ctx.seed);
    let mut margins = Margins::new();
    let mut var_scale: f64 = 0.0;
    let pairs: Vec<(usize, usize)> =
        (0..5).map(|k| (bases[k % bases.len()], bases[(k + 2) % bases.len()])).collect();
    for &(b1, b2) in &pairs {
        if b1 == b2 {
            continue;
        }
        let mut prev: Option<f64> = None;
        for &t in scn.flow.times.iter() {
            if t0 - t < floor {
                continue;
            }
            let m1 = scn.kernel_measure(b1, t0, t)?;
            let m2 = scn.kernel_measure(b2, t0, t)?;
            let dist = scn.distance(t);
            let v = variance(&dist, &m1, &m2)?.value;
            var_scale = var_scale.max(v);
            let tracked = v + hn * t;
            if let Some(p) = prev {
                margins.add(tracked - p);
            }
            prev = Some(tracked);
        }
    }
    let tol = ctx.pde_tol(1.0) + 1e-3 * var_scale;
    Ok(margins.finish("var-monotone", &scn.id, tol, ctx.seed, started))
}

/// Same-time variance bounds: pair bound and single-kernel concentration.
pub(super) fn var_same_time(ctx: &CheckCtx, started: Instant) -> Result<CheckResult> {
    let scn = ctx.scn;
    let hn = h_n(scn.flow.dim());
    let t0 = ctx.t0();
    let dist0 = scn.distance(t0);
    let bases = scn.kernel_basepoints(4, ctx.seed);
    let mut margins = Margins::new();
    let mut sharp_ratio: f64 = 0.0;
    for &tau in ctx.tau_ladder().iter().filter(|&&tau| tau >= ctx.tau_floor()) {
        let t = t0 - tau;
        if !scn.flow.contains_time(t) {
            continue;
        }
        let dist = scn.distance(t);
        for (ai, &x1) in bases.iter().enumerate() {
            let m1 = scn.kernel_measure(x1, t0, t)?;
            // Single-kernel concentration bound.
            let v_self = variance(&dist, &m1, &m1)?.value;
            margins.add(hn * tau - v_self);
            sharp_ratio = sharp_ratio.max(v_self / (hn * tau));
            for &x2 in bases.iter().skip(ai + 1) {
                let m2 = scn.kernel_measure(x2, t0, t)?;
                let v = variance(&dist, &m1, &m2)?.value;
                let bound = dist0.get(x1, x2).powi(2) + hn * tau;
                margins.add(bound - v);
            }
        }
    }
    margins.note(format!("max Var(nu)/(H_n tau) = {sharp_ratio:.4}"));
    let tau_max = *ctx.tau_ladder().last().unwrap();
    let tol = ctx.pol.transport_rel * hn * tau_max + 1e-3 * dist0.diameter().powi(2);
    Ok(margins.finish("var-same-time", &scn.id, tol, ctx.seed, started))
}

/// Existence of H_n-centers and the two-center distance bound.
pub(super) fn hn_center_exists(ctx: &CheckCtx, started: Instant) -> Result<CheckResult> {
    let scn = ctx.scn;
    let dim = scn.flow.dim();
    let hn = h_n(dim);
    let t0 = ctx.t0();
    let h = ctx.mesh();
    let bases = scn.kernel_basepoints(3, ctx.seed);
    let mut margins = Margins::new();
    for &tau in ctx.tau_ladder().iter().take(4) {
        let t = t0 - tau;
        if !scn.flow.contains_time(t) {
            continue;
        }
        let dist = scn.distance(t);
        for &x in &bases {
            let nu = scn.kernel_measure(x, t0, t)?;
            let hc = h_center(&dist, &nu, dim, tau, h);
            margins.add(hc.bound + hc.grid_error - hc.var);
            // All qualifying centers sit within 2 sqrt(H_n tau) of another.
            let mut worst_pair: f64 = 0.0;
            let qualifiers: Vec<usize> = (0..dist.n)
                .filter(|&z| {
                    let row = dist.row(z);
                    let v: f64 =
                        row.iter().zip(&nu).map(|(d, m)| d * d * m.max(0.0)).sum();
                    v <= hn * tau
                })
                .collect();
            for (qi, &z1) in qualifiers.iter().enumerate() {
                for &z2 in qualifiers.iter().skip(qi + 1) {
                    worst_pair = worst_pair.max(dist.get(z1, z2));
                }
            }
            margins.add(2.0 * (hn * tau).sqrt() + 2.0 * h + hc.grid_error - worst_pair);
        }
    }
    let tol = ctx.pol.transport_rel * hn * ctx.tau_ladder()[0].max(1.0);
    Ok(margins.finish("hn-center-exists", &scn.id, tol, ctx.seed, started))
}

/// Concentration of kernel measures on balls around an H_n-center.
pub(super) fn nu_ball(ctx: &CheckCtx, started: Instant) -> Result<CheckResult> {
    let scn = ctx.scn;
    let dim = scn.flow.dim();
    let hn = h_n(dim);
    let t0 = ctx.t0();
    let h = ctx.mesh();
    let bases = scn.kernel_basepoints(3, ctx.seed);
    let mut margins = Margins::new();
    for &tau in ctx.tau_ladder().iter().take(4) {
        let t = t0 - tau;
        if !scn.flow.contains_time(t) {
            continue;
        }
        let dist = scn.distance(t);
        for &x in &bases {
            let nu = scn.kernel_measure(x, t0, t)?;
            let hc = h_center(&dist, &nu, dim, tau, h);
            for a in [2.0, 4.0, 9.0] {
                let radius = (a * hn * tau).sqrt();
                let mass: f64 = (0..dist.n)
                    .filter(|&j| dist.get(hc.node, j) <= radius)
                    .map(|j| nu[j])
                    .sum();
                margins.add(mass - (1.0 - 1.0 / a));
            }
        }
    }
    let tol = ctx.pol.transport_rel * 0.2;
    Ok(margins.finish("nu-ball", &scn.id, tol, ctx.seed, started))
}

/// Gaussian integral bound on the kernel tail outside balls.
pub(super) fn gaussian_integral(ctx: &CheckCtx, started: Instant) -> Result<CheckResult> {
    let scn = ctx.scn;
    let dim = scn.flow.dim();
    let hn = h_n(dim);
    let t0 = ctx.t0();
    let h = ctx.mesh();
    let bases = scn.kernel_basepoints(3, ctx.seed);
    let mut margins = Margins::new();
    for &tau in ctx.tau_ladder().iter().take(4) {
        let t = t0 - tau;
        if !scn.flow.contains_time(t) {
            continue;
        }
        let dist = scn.distance(t);
        for &x in &bases {
            let nu = scn.kernel_measure(x, t0, t)?;
            let hc = h_center(&dist, &nu, dim, tau, h);
            for mult in [1.0, 2.0, 3.0, 4.5, 6.0] {
                let r = mult * tau.sqrt();
                let tail: f64 = (0..dist.n)
                    .filter(|&j| dist.get(hc.node, j) > r)
                    .map(|j| nu[j].max(0.0))
                    .sum();
                let surplus = (r - (2.0 * hn * tau).sqrt()).max(0.0);
                let bound = 2.0 * (-surplus * surplus / (8.0 * tau)).exp();
                margins.add(bound - tail);
            }
        }
    }
    let tol = ctx.pol.transport_rel * 0.2;
    Ok(margins.finish("gaussian-integral", &scn.id, tol, ctx.seed, started))
}
