use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conic::ConicRegion;
use crate::error::{ensure, Error, Result};
use crate::flowcritic::{euler_integrate, integrate_with, IntegrationTrace, VelocityField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PerturbationKind {
    /// `xi_step = bound`, zero elsewhere.
    Impulse { step: usize },
    /// Independent `Unif[-bound, bound]` draws.
    Iid { seed: u64 },
    /// `bound` times the sign of the linearized sensitivity of `psi^K` to each step,
    /// so every perturbation pushes the endpoint the same way.
    WorstSign,
    /// A fixed schedule; every entry must satisfy the bound.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub bound: f64,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, bound: f64) -> Self {
        Self { kind, bound }
    }

    /// Concrete `xi_0 .. xi_{K-1}` for a trajectory starting at `z0`.
    pub fn realize(&self, field: &mut impl VelocityField, z0: f64, steps: usize) -> Result<Vec<f64>> {
        ensure(self.bound >= 0.0 && self.bound.is_finite(), || format!("bound {} must be finite and >= 0", self.bound))?;
        ensure(steps >= 1, || "K must be >= 1".into())?;
        let b = self.bound;
        let xi = match &self.kind {
            PerturbationKind::Impulse { step } => {
                ensure(*step < steps, || format!("impulse step {step} out of range for K = {steps}"))?;
                let mut xi = vec![0.0; steps];
                xi[*step] = b;
                xi
            }
            PerturbationKind::Iid { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..steps).map(|_| if b > 0.0 { rng.gen_range(-b..=b) } else { 0.0 }).collect()
            }
            PerturbationKind::WorstSign => {
                let sens = endpoint_sensitivity(field, z0, steps)?;
                sens.iter().map(|s| if *s >= 0.0 { b } else { -b }).collect()
            }
            PerturbationKind::Explicit(xi) => {
                if xi.len() != steps {
                    return Err(Error::ShapeMismatch { expected: steps, got: xi.len() });
                }
                ensure(xi.iter().all(|x| x.abs() <= b), || "explicit schedule exceeds its bound".into())?;
                xi.clone()
            }
        };
        Ok(xi)
    }
}

/// `d psi^K / d xi_k = eta * prod_{j > k} (1 + eta dv/dz(psi^j, t_j))` along the clean
/// trajectory, with central differences for `dv/dz`.
pub fn endpoint_sensitivity(field: &mut impl VelocityField, z0: f64, steps: usize) -> Result<Vec<f64>> {
    let clean = euler_integrate(field, z0, steps)?;
    let eta = clean.step_size();
    let scale = clean.psi.iter().fold(1.0f64, |m, p| m.max(p.abs()));
    let h = 1e-6 * scale;
    let mut out = vec![0.0; steps];
    let mut acc = eta;
    for k in (0..steps).rev() {
        out[k] = acc;
        let (z, t) = (clean.psi[k], clean.time(k));
        let d = (field.velocity(z + h, t) - field.velocity(z - h, t)) / (2.0 * h);
        acc *= 1.0 + eta * d;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedRun {
    pub clean: IntegrationTrace,
    pub perturbed: IntegrationTrace,
    pub xi: Vec<f64>,
    /// `psi~^K - psi^K`.
    pub delta: f64,
}

/// Clean and perturbed trajectories from the same `z0`.
pub fn perturbed_integrate(
    field: &mut impl VelocityField,
    z0: f64,
    steps: usize,
    spec: &PerturbationSpec,
) -> Result<PerturbedRun> {
    let xi = spec.realize(field, z0, steps)?;
    let clean = euler_integrate(field, z0, steps)?;
    let perturbed = integrate_with(z0, steps, |_, z, t| field.velocity(z, t), Some(&xi))?;
    let delta = perturbed.terminal() - clean.terminal();
    Ok(PerturbedRun { clean, perturbed, xi, delta })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtrRow {
    pub steps: usize,
    /// Worst `|Delta_K| / max_k |xi_k|` over the trials: the measured stability factor `beta_K`.
    pub beta: f64,
    pub mean_ratio: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtrReport {
    pub rows: Vec<TtrRow>,
    /// Fitted decay exponent: `beta_K ~ C K^{-exponent}`.
    pub exponent: f64,
    pub constant: f64,
    /// Log-space residuals of the fit, one per row used.
    pub residuals: Vec<f64>,
}

impl TtrReport {
    /// CSV: `K,beta,mean_ratio,trials`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "K,beta,mean_ratio,trials")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.steps, r.beta, r.mean_ratio, r.trials)?;
        }
        Ok(())
    }
}

/// Least squares fit of `ln y = a + b ln x`; returns `(a, b, residuals)`.
pub fn log_log_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, Vec<f64>)> {
    ensure(x.len() == y.len() && x.len() >= 2, || "need at least two points".into())?;
    ensure(x.iter().chain(y).all(|v| *v > 0.0 && v.is_finite()), || "log-log fit needs positive values".into())?;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    ensure(sxx > 0.0, || "x values must be distinct".into())?;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let residuals = lx.iter().zip(&ly).map(|(x, y)| y - (a + b * x)).collect();
    Ok((a, b, residuals))
}

/// Measures worst-case terminal error per K and fits its polynomial decay.
///
/// Per K the trials are `n_trials` i.i.d. schedules from random `z0 ~ Unif[l, u]`,
/// impulses at the first and last step, and the worst-sign schedule from the
/// midpoint of the noise range.
pub fn fit_ttr_exponent(
    field: &mut impl VelocityField,
    noise_range: (f64, f64),
    k_values: &[usize],
    n_trials: usize,
    bound: f64,
    seed: u64,
) -> Result<TtrReport> {
    let mut ks = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();
    ensure(ks.len() >= 4, || format!("need at least 4 distinct K values, got {}", ks.len()))?;
    ensure(ks[0] >= 1, || "K must be >= 1".into())?;
    ensure(bound > 0.0, || "perturbation bound must be positive".into())?;
    let (l, u) = noise_range;
    ensure(l < u, || "empty noise range".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(ks.len());
    for &k in &ks {
        let mut specs: Vec<(f64, PerturbationSpec)> = (0..n_trials)
            .map(|_| (rng.gen_range(l..u), PerturbationSpec::new(PerturbationKind::Iid { seed: rng.gen() }, bound)))
            .collect();
        let mid = 0.5 * (l + u);
        specs.push((mid, PerturbationSpec::new(PerturbationKind::Impulse { step: 0 }, bound)));
        specs.push((mid, PerturbationSpec::new(PerturbationKind::Impulse { step: k - 1 }, bound)));
        specs.push((mid, PerturbationSpec::new(PerturbationKind::WorstSign, bound)));
        let mut worst = 0.0f64;
        let mut sum = 0.0;
        for (z0, spec) in &specs {
            let run = perturbed_integrate(field, *z0, k, spec)?;
            let max_xi = run.xi.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let ratio = if max_xi > 0.0 { run.delta.abs() / max_xi } else { 0.0 };
            worst = worst.max(ratio);
            sum += ratio;
        }
        rows.push(TtrRow { steps: k, beta: worst, mean_ratio: sum / specs.len() as f64, trials: specs.len() });
    }
    let used: Vec<&TtrRow> = rows.iter().filter(|r| r.beta > 0.0).collect();
    ensure(used.len() >= 2, || "terminal error vanished for almost every K; nothing to fit".into())?;
    let x: Vec<f64> = used.iter().map(|r| r.steps as f64).collect();
    let y: Vec<f64> = used.iter().map(|r| r.beta).collect();
    let (a, b, residuals) = log_log_fit(&x, &y)?;
    Ok(TtrReport { rows, exponent: -b, constant: a.exp(), residuals })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContainmentReport {
    pub trials: usize,
    pub exits: usize,
    pub bound: f64,
}

/// Runs `n_trials` perturbed trajectories with i.i.d. `Unif[-bound, bound]` perturbations
/// from `z0 ~ Unif[l, u]` and counts those leaving the region at any `t_k`, `k = 0..K`.
pub fn containment_trials(
    field: &mut impl VelocityField,
    region: &ConicRegion,
    bound: f64,
    n_trials: usize,
    seed: u64,
) -> Result<ContainmentReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = region.steps;
    let mut exits = 0;
    for _ in 0..n_trials {
        let z0 = rng.gen_range(region.l..=region.u);
        let spec = PerturbationSpec::new(PerturbationKind::Iid { seed: rng.gen() }, bound);
        let xi = spec.realize(field, z0, k)?;
        let tr = integrate_with(z0, k, |_, z, t| field.velocity(z, t), Some(&xi))?;
        if tr.psi.iter().enumerate().any(|(i, p)| !region.contains(*p, tr.time(i))) {
            exits += 1;
        }
    }
    Ok(ContainmentReport { trials: n_trials, exits, bound })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conic(c: f64, q: f64) -> impl FnMut(f64, f64) -> f64 {
        move |z, t| c * (q - z) / (1.0 - t)
    }

    #[test]
    fn zero_perturbation_is_exact() {
        let spec = PerturbationSpec::new(PerturbationKind::Iid { seed: 1 }, 0.0);
        for k in [1, 3, 17] {
            let r = perturbed_integrate(&mut |z: f64, t: f64| (z * 3.0 + t).sin(), 0.3, k, &spec).unwrap();
            assert_eq!(r.delta, 0.0);
        }
    }

    #[test]
    fn telescoping_absorbs_first_impulse() {
        let spec = PerturbationSpec::new(PerturbationKind::Impulse { step: 0 }, 1.0);
        for k in 2..40 {
            let r = perturbed_integrate(&mut conic(1.0, 5.0), 0.0, k, &spec).unwrap();
            assert!(r.delta.abs() < 1e-12, "K = {k}: {}", r.delta);
        }
    }

    #[test]
    fn half_conic_impulse_matches_product() {
        let spec = PerturbationSpec::new(PerturbationKind::Impulse { step: 0 }, 1.0);
        let r = perturbed_integrate(&mut conic(0.5, 5.0), 0.0, 16, &spec).unwrap();
        let expected = (1..=15).map(|m| 1.0 - 0.5 / m as f64).product::<f64>() / 16.0;
        assert!((r.delta - expected).abs() < 1e-13);
    }

    #[test]
    fn sensitivity_matches_products() {
        // field c (Q - z)/(1 - t): sensitivity to xi_k is eta prod_{m=1}^{K-k-1} (1 - c/m)
        let (c, k) = (0.3, 10);
        let sens = endpoint_sensitivity(&mut conic(c, 2.0), 0.0, k).unwrap();
        for (i, s) in sens.iter().enumerate() {
            let p: f64 = (1..k - i).map(|m| 1.0 - c / m as f64).product();
            assert!((s - p / k as f64).abs() < 1e-8, "{i}");
        }
    }

    #[test]
    fn bounds_respected() {
        let spec = PerturbationSpec::new(PerturbationKind::Iid { seed: 9 }, 0.25);
        let xi = spec.realize(&mut conic(0.5, 0.0), 0.0, 100).unwrap();
        assert!(xi.iter().all(|x| x.abs() <= 0.25));
        let bad = PerturbationSpec::new(PerturbationKind::Explicit(vec![0.1, 0.3]), 0.2);
        assert!(bad.realize(&mut conic(0.5, 0.0), 0.0, 2).is_err());
    }

    #[test]
    fn fit_recovers_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.7)).collect();
        let (a, b, res) = log_log_fit(&x, &y).unwrap();
        assert!((a.exp() - 3.0).abs() < 1e-12 && (b + 0.7).abs() < 1e-12);
        assert!(res.iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn too_few_k_values() {
        assert!(fit_ttr_exponent(&mut conic(0.5, 0.0), (-1.0, 1.0), &[8, 16, 32, 32], 4, 0.1, 0).is_err());
    }
}
