use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Central-difference step used by the gradient checks.
pub const FD_STEP: f64 = 1e-5;
/// Maximum accepted relative error `|analytic - fd| / (|fd| + 1e-8)`.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Below this finite-difference magnitude a central difference at
/// [`FD_STEP`] is dominated by rounding of the function value (one ulp of an
/// O(1) scalar over `2h` is about 1e-11), so such entries are held to
/// [`FD_ABS_TOLERANCE`] instead of the relative criterion.
pub const FD_RESOLUTION: f64 = 1e-6;
pub const FD_ABS_TOLERANCE: f64 = 1e-9;

/// One compared gradient entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Entry {
    pub fn rel_err(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }

    pub fn abs_err(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub entries: Vec<Entry>,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(Entry::rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<Entry> {
        self.entries
            .iter()
            .copied()
            .max_by(|a, b| a.rel_err().total_cmp(&b.rel_err()))
    }

    /// Every entry meets the relative criterion.
    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }

    /// Entries the finite difference resolves meet the relative criterion;
    /// the rest meet the absolute one.
    pub fn passed_resolved(&self) -> bool {
        let (rel, abs) = self.split_at(FD_RESOLUTION);
        rel < self.tolerance && abs < FD_ABS_TOLERANCE
    }

    /// Splits the entries at `|fd| = floor`: returns the largest relative
    /// error among entries at or above it and the largest absolute error
    /// among entries below it.
    pub fn split_at(&self, floor: f64) -> (f64, f64) {
        let mut rel: f64 = 0.0;
        let mut abs: f64 = 0.0;
        for e in &self.entries {
            if e.numeric.abs() >= floor {
                rel = rel.max(e.rel_err());
            } else {
                abs = abs.max(e.abs_err());
            }
        }
        (rel, abs)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences in every entry of every input.
///
/// `f` receives the tape and one variable per input and must return a 1x1
/// result. It is re-run on non-recording tapes for the perturbed
/// evaluations, so the numeric side never touches the backward code.
pub fn check_gradients<F>(name: &str, inputs: &[Matrix], step: f64, tolerance: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.shape(out) != (1, 1) {
        return Err(Error::dim("check_gradients", "function must return a scalar"));
    }
    let grads = tape.backward(out)?;

    let eval = |perturbed: &[Matrix]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = perturbed.iter().map(|m| t.constant(m.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut work: Vec<Matrix> = inputs.to_vec();
    let mut entries = Vec::new();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(inputs[k].rows(), inputs[k].cols()));
        for e in 0..inputs[k].data().len() {
            let orig = inputs[k].data()[e];
            work[k].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[e] = orig;
            entries.push(Entry {
                input: k,
                index: e,
                analytic: analytic.data()[e],
                numeric: (plus - minus) / (2.0 * step),
            });
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        entries,
        tolerance,
    })
}
