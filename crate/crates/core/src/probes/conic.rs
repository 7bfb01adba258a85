use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::flowcritic::{integrate_terminal, VelocityField};

/// Space-time region `C_K`: between `(1 - t) l + t l1` and `(1 - t) u + t u1`
/// for `0 <= t <= 1 - 1/K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConicRegion {
    pub l: f64,
    pub u: f64,
    pub l1: f64,
    pub u1: f64,
    pub steps: usize,
}

impl ConicRegion {
    pub fn new(l: f64, u: f64, l1: f64, u1: f64, steps: usize) -> Result<Self> {
        ensure([l, u, l1, u1].iter().all(|v| v.is_finite()), || "region bounds must be finite".into())?;
        ensure(l < u, || format!("noise range [{l}, {u}] is empty"))?;
        ensure(l1 <= u1, || format!("output range [{l1}, {u1}] is inverted"))?;
        ensure(steps >= 1, || "K must be >= 1".into())?;
        if u1 - l1 >= u - l {
            return Err(Error::InvalidArgument(format!(
                "degenerate region: output width {} does not narrow the noise width {}",
                u1 - l1,
                u - l
            )));
        }
        Ok(Self { l, u, l1, u1, steps })
    }

    /// Output range from the min/max of `psi^K` over `draws` noise samples,
    /// widened by 5% about its midpoint.
    pub fn empirical<R: Rng + ?Sized>(
        field: &mut impl VelocityField,
        l: f64,
        u: f64,
        steps: usize,
        draws: usize,
        rng: &mut R,
    ) -> Result<Self> {
        ensure(draws >= 1, || "need at least one draw".into())?;
        ensure(l < u && steps >= 1, || "invalid noise range or K".into())?;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..draws {
            let y = integrate_terminal(field, rng.gen_range(l..u), steps);
            if !y.is_finite() {
                return Err(Error::NonFinite(format!("terminal value {y}")));
            }
            lo = lo.min(y);
            hi = hi.max(y);
        }
        let mid = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo) * 1.05;
        Self::new(l, u, mid - half, mid + half, steps)
    }

    pub fn t_max(&self) -> f64 {
        1.0 - 1.0 / self.steps as f64
    }

    pub fn lower(&self, t: f64) -> f64 {
        (1.0 - t) * self.l + t * self.l1
    }

    pub fn upper(&self, t: f64) -> f64 {
        (1.0 - t) * self.u + t * self.u1
    }

    /// Membership with a relative slack of 1e-12 of the noise width.
    pub fn contains(&self, z: f64, t: f64) -> bool {
        let tol = 1e-12 * (self.u - self.l);
        z >= self.lower(t) - tol && z <= self.upper(t) + tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditGrid {
    pub n_t: usize,
    pub n_z: usize,
    /// Boundary strip width `eps_g`, in units of `z` at `t = 0`.
    pub eps_g: f64,
    /// Points sampled across each boundary strip per time row.
    pub n_strip: usize,
}

impl AuditGrid {
    pub fn square(n: usize, eps_g: f64) -> Self {
        Self { n_t: n, n_z: n, eps_g, n_strip: (n / 10).max(2) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConicAuditReport {
    pub region: ConicRegion,
    pub grid: AuditGrid,
    pub c: f64,
    pub fd_step: f64,
    pub t_values: Vec<f64>,
    /// Row-major `[t][z]` cell centers.
    pub z_values: Vec<Vec<f64>>,
    /// Central-difference `dv/dz`, same layout as `z_values`.
    pub derivatives: Vec<Vec<f64>>,
    pub violations: usize,
    pub violation_fraction: f64,
    /// `min v - (l1 - l)` over the lower strip.
    pub lower_margin: f64,
    /// `min (u1 - u) - v` over the upper strip.
    pub upper_margin: f64,
    /// Measured `delta_g`: the smaller margin. Positive iff the boundary condition holds on the grid.
    pub delta_g: f64,
    pub boundary_ok: bool,
}

impl ConicAuditReport {
    pub fn n_cells(&self) -> usize {
        self.derivatives.iter().map(Vec::len).sum()
    }

    /// Violation fraction for another `c` on the stored derivative grid.
    pub fn violation_fraction_at(&self, c: f64) -> f64 {
        let bad: usize =
            self.t_values.iter().zip(&self.derivatives).map(|(t, row)| row.iter().filter(|d| violates(**d, c, *t)).count()).sum();
        bad as f64 / self.n_cells() as f64
    }

    /// CSV: `t,z,dv_dz,violates`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,z,dv_dz,violates")?;
        for ((t, zs), ds) in self.t_values.iter().zip(&self.z_values).zip(&self.derivatives) {
            for (z, d) in zs.iter().zip(ds) {
                writeln!(w, "{t},{z},{d},{}", u8::from(violates(*d, self.c, *t)))?;
            }
        }
        Ok(())
    }
}

fn violates(dvdz: f64, c: f64, t: f64) -> bool {
    dvdz.is_nan() || dvdz > -c / (1.0 - t)
}

/// Finite-difference audit of the c-conic condition and the inward boundary condition.
pub fn audit_conic(field: &mut impl VelocityField, region: &ConicRegion, c: f64, grid: &AuditGrid) -> Result<ConicAuditReport> {
    ensure(c > 0.0 && c < 1.0, || format!("c = {c} not in (0, 1)"))?;
    ensure(grid.n_t >= 1 && grid.n_z >= 1 && grid.n_strip >= 2, || "grid too small".into())?;
    ensure(grid.eps_g > 0.0 && grid.eps_g <= 0.5 * (region.u - region.l), || {
        format!("strip width {} must be in (0, (u - l)/2]", grid.eps_g)
    })?;
    let region = ConicRegion::new(region.l, region.u, region.l1, region.u1, region.steps)?;
    let h = 1e-4 * (region.u - region.l);
    let t_max = region.t_max();
    let t_values: Vec<f64> =
        (0..grid.n_t).map(|i| if grid.n_t == 1 { 0.0 } else { t_max * i as f64 / (grid.n_t - 1) as f64 }).collect();
    let mut z_values = Vec::with_capacity(grid.n_t);
    let mut derivatives = Vec::with_capacity(grid.n_t);
    let mut violations = 0;
    let mut lower_margin = f64::INFINITY;
    let mut upper_margin = f64::INFINITY;
    for &t in &t_values {
        let (lo, hi) = (region.lower(t), region.upper(t));
        let zs: Vec<f64> = (0..grid.n_z).map(|j| lo + (j as f64 + 0.5) * (hi - lo) / grid.n_z as f64).collect();
        let mut ds = Vec::with_capacity(grid.n_z);
        for &z in &zs {
            let d = (field.velocity(z + h, t) - field.velocity(z - h, t)) / (2.0 * h);
            if !d.is_finite() {
                return Err(Error::NonFinite(format!("dv/dz at (z = {z}, t = {t})")));
            }
            if violates(d, c, t) {
                violations += 1;
            }
            ds.push(d);
        }
        z_values.push(zs);
        derivatives.push(ds);
        let strip = (1.0 - t) * grid.eps_g;
        for j in 0..grid.n_strip {
            let f = j as f64 / (grid.n_strip - 1) as f64;
            let v_lo = field.velocity(lo + f * strip, t);
            let v_hi = field.velocity(hi - f * strip, t);
            lower_margin = lower_margin.min(v_lo - (region.l1 - region.l));
            upper_margin = upper_margin.min((region.u1 - region.u) - v_hi);
        }
    }
    let n_cells = grid.n_t * grid.n_z;
    let delta_g = lower_margin.min(upper_margin);
    Ok(ConicAuditReport {
        region,
        grid: *grid,
        c,
        fd_step: h,
        t_values,
        z_values,
        derivatives,
        violations,
        violation_fraction: violations as f64 / n_cells as f64,
        lower_margin,
        upper_margin,
        delta_g,
        boundary_ok: delta_g > 0.0,
    })
}
