//! Central finite-difference check of tape gradients, using the
//! four-point stencil `(−f(θ+2h) + 8f(θ+h) − 8f(θ−h) + f(θ−2h)) / 12h`.

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::par::{self, Execution};

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Negative-control hook: added to the first autodiff entry before comparison.
    pub corrupt: Option<f64>,
    pub exec: Execution,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 3e-4,
            tolerance: 1e-5,
            corrupt: None,
            exec: Execution::sequential(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryCheck {
    pub param: String,
    pub index: usize,
    pub autodiff: f64,
    pub finite_diff: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Entries whose relative error exceeds the tolerance.
    pub failures: Vec<EntryCheck>,
    pub worst: Option<EntryCheck>,
    /// Entries whose perturbation flipped a ReLU; their finite differences
    /// straddle a kink.
    pub kink_crossings: usize,
    /// Distance of the nearest ReLU input to zero at the checked point.
    pub relu_margin: Option<f64>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// `|a − b| / max(|a|, |b|, 1e-7)`. The floor sits above the rounding
/// resolution of the finite differences, so exactly-zero gradients compare
/// as zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Compares autodiff gradients of the scalar program `f` against the
/// central difference estimate for every entry of `params`.
pub fn finite_diff_gradcheck<F>(
    store: &ParamStore,
    params: &[ParamId],
    f: F,
    opts: GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var> + Sync + Send,
{
    let mut graph = Graph::new();
    let loss = f(store, &mut graph)?;
    let grads = graph.backward_grads(loss)?;

    let entries: Vec<(ParamId, usize)> = params
        .iter()
        .flat_map(|&id| (0..store.value(id).len()).map(move |i| (id, i)))
        .collect();

    let pattern = graph.relu_pattern();
    let eval = |s: &ParamStore| -> Result<(f64, bool)> {
        let mut g = Graph::new();
        let l = f(s, &mut g)?;
        Ok((g.value(l).data()[0], g.relu_pattern() != pattern))
    };
    let h = opts.step;
    let fd: Vec<Result<(f64, bool)>> = par::map_collect(opts.exec, &entries, |&(id, i)| {
        let mut probe = store.clone();
        let x0 = probe.value(id).data()[i];
        let mut at = |t: f64| -> Result<(f64, bool)> {
            probe.value_mut(id)[i] = x0 + t;
            eval(&probe)
        };
        let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
        let kink = p2.1 || p1.1 || m1.1 || m2.1;
        Ok(((-p2.0 + 8.0 * p1.0 - 8.0 * m1.0 + m2.0) / (12.0 * h), kink))
    });

    let mut report = GradcheckReport {
        checked: entries.len(),
        max_rel_error: 0.0,
        tolerance: opts.tolerance,
        failures: Vec::new(),
        worst: None,
        kink_crossings: 0,
        relu_margin: graph.relu_margin(),
    };
    for (n, (&(id, i), fd)) in entries.iter().zip(fd).enumerate() {
        let (fd, kink) = fd?;
        report.kink_crossings += usize::from(kink);
        let mut ad = grads.get(id).map_or(0.0, |g| g.data()[i]);
        if n == 0 {
            if let Some(c) = opts.corrupt {
                ad += c;
            }
        }
        let rel = relative_error(ad, fd);
        let check = EntryCheck {
            param: store.get(id).name().to_string(),
            index: i,
            autodiff: ad,
            finite_diff: fd,
            rel_error: rel,
        };
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(check.clone());
        }
        if rel > opts.tolerance {
            report.failures.push(check);
        }
    }
    Ok(report)
}
