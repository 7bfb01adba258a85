use crate::error::{invalid, Result};

/// Variance floor; constant inputs normalize to zero instead of dividing by zero.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Statistics saved by the forward pass for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub inv_std: f64,
    /// True when the variance was below [`VARIANCE_FLOOR`] and the floor was used.
    pub floored: bool,
}

pub(crate) fn normalize_into(x: &[f64], scale: &[f64], shift: &[f64], xhat: &mut [f64], out: &mut [f64]) -> NormStats {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let floored = var < VARIANCE_FLOOR;
    let inv_std = 1.0 / var.max(VARIANCE_FLOOR).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * inv_std;
        out[i] = scale[i] * xhat[i] + shift[i];
    }
    NormStats { mean, inv_std, floored }
}

/// Layer normalization over a single vector: standardize, then `scale * xhat + shift`.
pub fn layernorm(x: &[f64], scale: &[f64], shift: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 2 {
        return Err(invalid("layernorm needs a vector of width at least 2"));
    }
    if scale.len() != x.len() || shift.len() != x.len() {
        return Err(invalid("layernorm scale/shift width mismatch"));
    }
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    normalize_into(x, scale, shift, &mut xhat, &mut out);
    Ok(out)
}

/// Gradients of `<upstream, layernorm(x)>`.
pub struct LayerNormGrad {
    pub input: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

pub fn layernorm_backward(x: &[f64], scale: &[f64], shift: &[f64], upstream: &[f64]) -> Result<LayerNormGrad> {
    if x.len() < 2 {
        return Err(invalid("layernorm needs a vector of width at least 2"));
    }
    let n = x.len();
    let mut xhat = vec![0.0; n];
    let mut out = vec![0.0; n];
    let stats = normalize_into(x, scale, shift, &mut xhat, &mut out);
    let mut g_scale = vec![0.0; n];
    let mut g_shift = vec![0.0; n];
    let mut input = vec![0.0; n];
    backward_into(&xhat, &stats, scale, upstream, &mut g_scale, &mut g_shift, &mut input);
    Ok(LayerNormGrad { input, scale: g_scale, shift: g_shift })
}

/// Accumulates scale/shift gradients and writes the input gradient.
pub(crate) fn backward_into(
    xhat: &[f64],
    stats: &NormStats,
    scale: &[f64],
    upstream: &[f64],
    g_scale: &mut [f64],
    g_shift: &mut [f64],
    g_input: &mut [f64],
) {
    let n = xhat.len() as f64;
    let mut mean_g = 0.0;
    let mut mean_gx = 0.0;
    for i in 0..xhat.len() {
        g_scale[i] += upstream[i] * xhat[i];
        let gx = upstream[i] * scale[i];
        mean_g += gx;
        mean_gx += gx * xhat[i];
    }
    for (i, g) in upstream.iter().enumerate() {
        g_shift[i] += g;
    }
    mean_g /= n;
    mean_gx /= n;
    for i in 0..xhat.len() {
        let gx = upstream[i] * scale[i];
        g_input[i] = if stats.floored {
            // The floored denominator does not depend on x.
            stats.inv_std * (gx - mean_g)
        } else {
            stats.inv_std * (gx - mean_g - xhat[i] * mean_gx)
        };
    }
}
