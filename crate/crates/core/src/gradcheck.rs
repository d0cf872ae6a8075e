//! Central finite-difference oracle for the analytic backward passes.

use std::fmt;

use crate::error::{Error, Result};
use crate::norm::{
    build_partition, norm_backward_variant, norm_forward, BackwardVariant, Mode, NormKind, NormMethod, NormParams,
};
use crate::rng::{normal_tensor, SeededRng};
use crate::tensor::{Shape4, Tensor4};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate of `x`.
pub fn finite_diff<F>(f: F, x: &Tensor4<f64>, step: f64) -> Result<Tensor4<f64>>
where
    F: Fn(&Tensor4<f64>) -> Result<f64>,
{
    let grad = finite_diff_slice(|v| f(&Tensor4::from_vec(x.shape(), v.to_vec())?), x.data(), step)?;
    Tensor4::from_vec(x.shape(), grad)
}

/// [`finite_diff`] over a flat parameter vector.
pub fn finite_diff_slice<F>(f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step {step}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe)?;
        probe[i] = orig - step;
        let minus = f(&probe)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteFunction);
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Error summary for one checked input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
}

impl InputReport {
    pub fn compare(name: impl Into<String>, analytic: &[f64], numeric: &[f64]) -> Self {
        assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (&a, &n) in analytic.iter().zip(numeric) {
            // NaN must fail, so fold it in explicitly.
            let rel = relative_error(a, n);
            max_rel = if rel.is_nan() { f64::INFINITY } else { max_rel.max(rel) };
            max_abs = max_abs.max((a - n).abs());
        }
        Self {
            name: name.into(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            coordinates: analytic.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub op: String,
    pub inputs: Vec<InputReport>,
    pub step: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn new(op: impl Into<String>, inputs: Vec<InputReport>, step: f64, tolerance: f64) -> Self {
        let pass = inputs.iter().all(|r| r.max_rel_error <= tolerance);
        Self {
            op: op.into(),
            inputs,
            step,
            tolerance,
            pass,
        }
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<28} {}", self.op, if self.pass { "PASS" } else { "FAIL" })?;
        for r in &self.inputs {
            write!(
                f,
                "  {}: rel {:.2e} abs {:.2e}",
                r.name, r.max_rel_error, r.max_abs_error
            )?;
        }
        Ok(())
    }
}

/// Settings for [`check_norm_layer`].
#[derive(Debug, Clone, Copy)]
pub struct NormCheck {
    pub eps: f64,
    pub tolerance: f64,
    pub step: f64,
    pub seed: u64,
    pub variant: BackwardVariant,
}

impl Default for NormCheck {
    fn default() -> Self {
        Self {
            eps: crate::norm::DEFAULT_EPS,
            tolerance: DEFAULT_TOLERANCE,
            step: DEFAULT_STEP,
            seed: 0,
            variant: BackwardVariant::Exact,
        }
    }
}

/// Checks a normalization layer's dx, dgamma and dbeta against finite
/// differences of the scalar loss `sum(r * y)` for a seeded random probe `r`.
pub fn check_norm_layer(kind: NormKind, shape: Shape4, cfg: NormCheck) -> Result<GradReport> {
    let part = build_partition(kind, shape)?;
    let mut rng = SeededRng::new(cfg.seed);
    let x: Tensor4<f64> = normal_tensor(&mut rng, shape, 1.0);
    let probe: Tensor4<f64> = normal_tensor(&mut rng, shape, 1.0);
    let mut params = NormParams::<f64>::new(shape.c);
    for (g, b) in params.gamma.iter_mut().zip(params.beta.iter_mut()) {
        *g = rng.uniform(0.5, 1.5);
        *b = rng.uniform(-0.5, 0.5);
    }

    let loss = |x: &Tensor4<f64>, p: &NormParams<f64>| -> Result<f64> {
        let (y, _) = norm_forward(x, &part, p, None, Mode::Train, cfg.eps)?;
        Ok(y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
    };

    let (_, cache) = norm_forward(&x, &part, &params, None, Mode::Train, cfg.eps)?;
    let grads = norm_backward_variant(&probe, &cache, &params, cfg.variant)?;

    let num_dx = finite_diff(|xp| loss(xp, &params), &x, cfg.step)?;
    let num_dgamma = finite_diff_slice(
        |g| {
            let mut p = params.clone();
            p.gamma = g.to_vec();
            loss(&x, &p)
        },
        &params.gamma,
        cfg.step,
    )?;
    let num_dbeta = finite_diff_slice(
        |b| {
            let mut p = params.clone();
            p.beta = b.to_vec();
            loss(&x, &p)
        },
        &params.beta,
        cfg.step,
    )?;

    let inputs = vec![
        InputReport::compare("dx", grads.dx.data(), num_dx.data()),
        InputReport::compare("dgamma", &grads.dgamma, &num_dgamma),
        InputReport::compare("dbeta", &grads.dbeta, &num_dbeta),
    ];
    let mut op = format!("{kind} {shape}");
    if cfg.variant != BackwardVariant::Exact {
        op.push_str(&format!(" [{}]", cfg.variant.name()));
    }
    Ok(GradReport::new(op, inputs, cfg.step, cfg.tolerance))
}

/// Shapes the `gradcheck` command runs for every method.
pub const STANDARD_SHAPES: [(usize, usize, usize, usize); 5] =
    [(2, 4, 3, 3), (3, 6, 2, 4), (1, 8, 3, 3), (4, 4, 2, 2), (2, 8, 4, 3)];

/// The standard cases for `method`: GN uses 2 groups, BGN 4.
pub fn standard_cases(method: NormMethod) -> Vec<(NormKind, Shape4)> {
    let groups = if method == NormMethod::BatchGroup { 4 } else { 2 };
    STANDARD_SHAPES
        .iter()
        .map(|&(n, c, h, w)| (method.with_groups(groups), Shape4::new(n, c, h, w)))
        .collect()
}
