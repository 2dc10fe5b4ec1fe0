//! Central finite-difference oracle for tape gradients.

use rayon::prelude::*;

use super::{Matrix, ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Floor of the relative-error denominator.
pub const REL_EPS: f64 = 1e-8;

const CHUNK: usize = 128;

/// Entries whose plain central difference disagrees by more than this are
/// re-estimated with Ridders extrapolation.
pub const REFINE_ABOVE: f64 = 1e-6;
const RIDDERS_START: f64 = 1e-4;
const RIDDERS_SHRINK: f64 = 2.0;
const RIDDERS_TABLE: usize = 14;

/// Ridders' extrapolated central difference of `g` at 0, where `g(h)`
/// evaluates the objective with the entry shifted by `h`. The whole step
/// ladder is always evaluated, because strongly curved objectives only reach
/// the asymptotic regime at small steps. Returns the estimate with the
/// smallest internal error estimate; the analytic gradient plays no part.
fn ridders(mut g: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let mut h = RIDDERS_START;
    let con2 = RIDDERS_SHRINK * RIDDERS_SHRINK;
    let mut table = vec![vec![0.0; RIDDERS_TABLE]; RIDDERS_TABLE];
    table[0][0] = (g(h)? - g(-h)?) / (2.0 * h);
    let mut best = table[0][0];
    let mut err = f64::INFINITY;
    for i in 1..RIDDERS_TABLE {
        h /= RIDDERS_SHRINK;
        table[0][i] = (g(h)? - g(-h)?) / (2.0 * h);
        let mut fac = con2;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= con2;
            let e = (table[j][i] - table[j - 1][i])
                .abs()
                .max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
    }
    Ok(best)
}

/// `|a - b| / max(|a|, |b|, REL_EPS)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_EPS)
}

#[derive(Clone, Debug)]
pub struct EntryCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||, REL_EPS)`
    /// over the whole tensor.
    pub norm_rel_error: f64,
    diff_sq: f64,
    analytic_sq: f64,
    numeric_sq: f64,
}

impl ParamCheck {
    fn new(name: String) -> Self {
        Self {
            name,
            entries: 0,
            max_rel_error: 0.0,
            norm_rel_error: 0.0,
            diff_sq: 0.0,
            analytic_sq: 0.0,
            numeric_sq: 0.0,
        }
    }

    fn add(&mut self, e: &EntryCheck) {
        self.entries += 1;
        self.max_rel_error = self.max_rel_error.max(e.rel_error);
        self.diff_sq += (e.analytic - e.numeric).powi(2);
        self.analytic_sq += e.analytic * e.analytic;
        self.numeric_sq += e.numeric * e.numeric;
        let scale = self.analytic_sq.sqrt().max(self.numeric_sq.sqrt()).max(REL_EPS);
        self.norm_rel_error = self.diff_sq.sqrt() / scale;
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Entry with the largest relative error over all checked parameters.
    pub worst: Option<EntryCheck>,
    pub per_param: Vec<ParamCheck>,
    pub entries_checked: usize,
    /// Entries still above [`REFINE_ABOVE`] after refinement.
    pub flagged: Vec<EntryCheck>,
}

impl GradCheckReport {
    /// Every checked entry is within `tol` relative error.
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    /// Largest per-tensor norm relative error.
    pub fn max_norm_rel_error(&self) -> f64 {
        self.per_param.iter().map(|p| p.norm_rel_error).fold(0.0, f64::max)
    }

    /// Every parameter tensor is within `tol` in norm relative error.
    pub fn passes_per_tensor(&self, tol: f64) -> bool {
        self.max_norm_rel_error() < tol
    }
}

fn evaluate<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let v = tape.value(out);
    if v.shape() != (1, 1) {
        return Err(Error::Shape {
            op: "grad_check objective",
            left: v.shape(),
            right: (1, 1),
        });
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            what: "grad_check objective".into(),
        });
    }
    Ok(v)
}

/// Compares tape gradients of `f` against central differences for every
/// entry of the parameters in `subset` (all parameters when empty).
///
/// Each entry first gets a plain central difference with step [`FD_STEP`].
/// Where that disagrees with the tape by more than [`REFINE_ABOVE`], the
/// numeric value is replaced by a Ridders extrapolation over shrinking steps,
/// which removes truncation error on strongly curved objectives.
///
/// Entries are perturbed in parallel; each worker owns a private copy of the
/// perturbed matrix.
pub fn grad_check<F>(store: &ParamStore, subset: &[ParamId], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var> + Sync,
{
    let ids: Vec<ParamId> = if subset.is_empty() {
        store.ids().collect()
    } else {
        subset.to_vec()
    };

    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    if !tape.value(out).is_finite() {
        return Err(Error::NonFinite {
            what: "grad_check objective".into(),
        });
    }
    let grads = tape.backward(out)?;
    drop(tape);

    let mut jobs = Vec::new();
    for &id in &ids {
        let n = store.value(id).len();
        for start in (0..n).step_by(CHUNK) {
            jobs.push((id, start, (start + CHUNK).min(n)));
        }
    }

    let results: Vec<Vec<EntryCheck>> = jobs
        .par_iter()
        .map(|&(id, start, end)| {
            let mut local = store.clone();
            let analytic = grads.param(id);
            let mut checks = Vec::with_capacity(end - start);
            for i in start..end {
                let orig = local.value(id).data()[i];
                local.value_mut(id).data_mut()[i] = orig + FD_STEP;
                let up = evaluate(&f, &local)?;
                local.value_mut(id).data_mut()[i] = orig - FD_STEP;
                let down = evaluate(&f, &local)?;
                local.value_mut(id).data_mut()[i] = orig;
                let mut numeric = (up - down) / (2.0 * FD_STEP);
                let a = analytic.map_or(0.0, |g| g.data()[i]);
                if relative_error(a, numeric) > REFINE_ABOVE {
                    numeric = ridders(|h| {
                        local.value_mut(id).data_mut()[i] = orig + h;
                        evaluate(&f, &local)
                    })?;
                    local.value_mut(id).data_mut()[i] = orig;
                }
                checks.push(EntryCheck {
                    param: store.name(id).to_string(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: relative_error(a, numeric),
                });
            }
            Ok(checks)
        })
        .collect::<Result<_>>()?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        per_param: Vec::new(),
        entries_checked: 0,
        flagged: Vec::new(),
    };
    for entry in results.into_iter().flatten() {
        report.entries_checked += 1;
        if report.per_param.last().map_or(true, |p| p.name != entry.param) {
            report.per_param.push(ParamCheck::new(entry.param.clone()));
        }
        report.per_param.last_mut().expect("just pushed").add(&entry);
        if entry.rel_error > REFINE_ABOVE {
            report.flagged.push(entry.clone());
        }
        if entry.rel_error > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(entry.rel_error);
            report.worst = Some(entry);
        }
    }
    Ok(report)
}

/// Gradient check for a function of plain input matrices.
pub fn grad_check_inputs<F>(inputs: &[Matrix], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .iter()
        .enumerate()
        .map(|(i, m)| store.insert(format!("input{i}"), ParamGroup::Backbone, m.clone()))
        .collect::<Result<_>>()?;
    grad_check(&store, &ids, |tape, s| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
        f(tape, &vars)
    })
}
