use super::{value_and_grad, value_only, Graph, NumericsError, ParamStore, ParamVars, Var};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Relative error with an absolute floor so that near-zero gradients compare
/// on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks `grads` (normally from [`value_and_grad`]) coordinate by coordinate
/// against `(f(p + h) - f(p - h)) / 2h`.
pub fn check_gradients<F, E>(
    f: F,
    at: &ParamStore,
    grads: &ParamStore,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&Graph, &ParamVars) -> Result<Var, E>,
    E: From<NumericsError>,
{
    if !(h > 0.0) {
        return Err(NumericsError::InvalidArgument(format!("finite-difference step must be positive, got {h}")).into());
    }
    let mut probe = at.clone();
    let mut max_rel = 0.0;
    let mut worst = None;
    let mut coordinates = 0;
    let names: Vec<String> = at.names().cloned().collect();
    for name in &names {
        let n = at.get(name).map(|t| t.len()).unwrap_or(0);
        let g = grads
            .get(name)
            .ok_or_else(|| NumericsError::Layout(format!("no gradient for {name}")))?;
        for i in 0..n {
            let orig = at.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let fp = value_only(&probe, &f)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let fm = value_only(&probe, &f)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(NumericsError::NonFiniteProbe {
                    name: name.clone(),
                    index: i,
                }
                .into());
            }
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(g.data()[i], numeric);
            coordinates += 1;
            if err > max_rel {
                max_rel = err;
                worst = Some((name.clone(), i));
            }
        }
    }
    Ok(GradCheckReport {
        passed: max_rel <= tol,
        max_rel_error: max_rel,
        worst,
        coordinates,
    })
}

/// Computes reverse-mode gradients of `f` at `at` and checks them against
/// central differences with step `h` and relative tolerance `tol`.
pub fn finite_diff_check<F, E>(f: F, at: &ParamStore, h: f64, tol: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&Graph, &ParamVars) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let (_, grads) = value_and_grad(at, &f)?;
    check_gradients(f, at, &grads, h, tol)
}
