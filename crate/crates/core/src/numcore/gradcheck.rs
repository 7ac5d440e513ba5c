use crate::error::{HienError, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Outcome of comparing tape adjoints against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter, element)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub pass: bool,
}

/// Floor for the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// Compares `analytic` gradients against `(f(p+eps) - f(p-eps)) / 2eps`
/// for every element of every tensor in `params`.
///
/// `params` is perturbed in place and restored after each probe.
pub fn finite_diff_check<F>(
    params: &mut [Tensor],
    analytic: &[Tensor],
    mut f: F,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(HienError::Config(format!("finite-difference eps must be > 0, got {eps}")));
    }
    if params.len() != analytic.len() {
        return Err(HienError::dim(
            "finite_diff_check",
            &[params.len()],
            &[analytic.len()],
        ));
    }
    let mut eval = |ps: &[Tensor]| -> Result<f64> {
        let v = f(ps)?;
        if !v.is_finite() {
            return Err(HienError::Numeric(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for p in 0..params.len() {
        if params[p].shape() != analytic[p].shape() {
            return Err(HienError::dim(
                "finite_diff_check",
                params[p].shape(),
                analytic[p].shape(),
            ));
        }
        for e in 0..params[p].numel() {
            let orig = params[p].data()[e];
            params[p].data_mut()[e] = orig + eps;
            let up = eval(params);
            params[p].data_mut()[e] = orig - eps;
            let down = eval(params);
            params[p].data_mut()[e] = orig;
            let numeric = (up? - down?) / (2.0 * eps);
            let exact = analytic[p].data()[e];
            let denom = exact.abs().max(numeric.abs()).max(REL_FLOOR);
            let rel = (exact - numeric).abs() / denom;
            if rel > max_rel_err || worst.is_none() {
                max_rel_err = rel;
                worst = Some((p, e));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        checked,
        pass: max_rel_err <= tol,
    })
}

/// Runs `build` on a fresh tape with `params` as leaves, differentiates the
/// returned scalar, and checks the adjoints with [`finite_diff_check`].
pub fn check_tape<B>(params: Vec<Tensor>, build: B, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.take(v).expect("leaf adjoint"))
        .collect();

    let mut params = params;
    finite_diff_check(
        &mut params,
        &analytic,
        |ps| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
            let out = build(&mut t, &vs)?;
            Ok(t.value(out).item())
        },
        eps,
        tol,
    )
}
