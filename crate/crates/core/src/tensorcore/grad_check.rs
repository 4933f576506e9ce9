use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this times `max(1, |f|)` are below what a central
/// difference at [`FD_STEP`] resolves in 64-bit arithmetic.
pub const FD_RESOLUTION: f64 = 1e-6;

/// One probed coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    /// Central difference.
    pub numeric: f64,
    /// One-sided differences `(f(x+h) − f(x))/h` and `(f(x) − f(x−h))/h`.
    pub forward: f64,
    pub backward: f64,
}

impl CoordCheck {
    pub fn rel_err(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.numeric.abs().max(1e-8)
    }

    /// The one-sided slopes disagree by more than curvature over one step
    /// can explain, so a kink lies inside `[x − h, x + h]`.
    pub fn straddles_kink(&self, resolution: f64) -> bool {
        let scale = self.forward.abs().max(self.backward.abs()).max(resolution);
        (self.forward - self.backward).abs() > 1e-2 * scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// `f` at the probe point.
    pub value: f64,
    pub coords: Vec<CoordCheck>,
}

impl GradReport {
    /// `max |a − n| / max(1e-8, |n|)` over every probed coordinate.
    pub fn max_rel_err(&self) -> f64 {
        self.coords.iter().map(CoordCheck::rel_err).fold(0.0, f64::max)
    }

    pub fn resolution(&self) -> f64 {
        FD_RESOLUTION * self.value.abs().max(1.0)
    }

    /// Like [`max_rel_err`](Self::max_rel_err) but skipping coordinates whose
    /// stencil crosses a kink, and counting coordinates where both gradients
    /// are below the difference resolution as agreeing. Returns the error
    /// and the number of kink-skipped coordinates.
    pub fn resolved_max_rel_err(&self) -> (f64, usize) {
        let res = self.resolution();
        let mut worst: f64 = 0.0;
        let mut kinks = 0;
        for c in &self.coords {
            if c.straddles_kink(res) {
                kinks += 1;
            } else if c.analytic.abs().max(c.numeric.abs()) >= res {
                worst = worst.max(c.rel_err());
            }
        }
        (worst, kinks)
    }
}

/// Compares the reverse-mode gradient of a scalar function against central
/// finite differences and returns the largest
/// `|analytic - numeric| / max(1e-8, |numeric|)` over all coordinates.
///
/// `f` must build a rank-0 (or single-element) output from the input leaf.
pub fn grad_check<F>(f: F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_coords(f, point, None)
}

/// Like [`grad_check`] but restricted to the listed flat coordinates.
pub fn grad_check_coords<F>(f: F, point: &Tensor, coords: Option<&[usize]>) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    Ok(grad_report(f, point, coords)?.max_rel_err())
}

/// Per-coordinate comparison at `point`, over `coords` or all coordinates.
pub fn grad_report<F>(f: F, point: &Tensor, coords: Option<&[usize]>) -> Result<GradReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let y = f(&mut g, x)?;
    if g.value(y).len() != 1 {
        return Err(Error::Input(format!(
            "grad_check needs a scalar output, got shape {:?}",
            g.shape(y)
        )));
    }
    let value = g.value(y).item();
    let grads = g.backward_scalar(y)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p.clone(), true);
        let y = f(&mut g, x)?;
        Ok(g.value(y).item())
    };

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut out = Vec::with_capacity(coords.len());
    let mut probe = point.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - FD_STEP;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        out.push(CoordCheck {
            index: i,
            analytic: analytic.data()[i],
            numeric: (plus - minus) / (2.0 * FD_STEP),
            forward: (plus - value) / FD_STEP,
            backward: (value - minus) / FD_STEP,
        });
    }
    Ok(GradReport { value, coords: out })
}
