//! Central finite-difference verification of analytic gradients.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NumericsError, ParamSet, ParamVars, Scalar, Var};

/// Maximum relative error observed for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FdEntry {
    pub name: String,
    pub probes: usize,
    pub max_rel_error: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn total_probes(&self) -> usize {
        self.entries.iter().map(|e| e.probes).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Gradients smaller than this are compared in absolute terms; below it the
/// stencil cannot resolve a derivative against the loss's rounding error.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares `∂f/∂θ` from [`Graph::backward`] with fourth-order central
/// differences at `probes` coordinates drawn uniformly (tensor first, then
/// entry).
///
/// Relative error is `|analytic − numeric| / max(|numeric|, REL_FLOOR)`.
pub fn finite_difference_check<T, E, F>(
    params: &ParamSet<T>,
    probes: usize,
    step: f64,
    seed: u64,
    f: F,
) -> Result<FdReport, E>
where
    T: Scalar,
    E: From<NumericsError>,
    F: Fn(&mut Graph<T>, &ParamVars) -> Result<Var, E>,
{
    if params.is_empty() || probes == 0 {
        return Ok(FdReport::default());
    }
    let mut g = Graph::new();
    let vars = params.register(&mut g, true);
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |p: &ParamSet<T>| -> Result<f64, E> {
        let mut g = Graph::new();
        let vars = p.register(&mut g, false);
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0].as_f64())
    };

    let names: Vec<String> = params.names().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table: IndexMap<String, FdEntry> = IndexMap::new();
    let mut work = params.clone();
    let h = T::lit(step);
    for _ in 0..probes {
        let name = &names[rng.random_range(0..names.len())];
        let n = params.get(name).map_or(0, |t| t.len());
        let idx = rng.random_range(0..n);
        let orig = params.get(name).expect("listed name").data()[idx];

        let mut at = |offset: T| -> Result<f64, E> {
            work.get_mut(name).expect("listed name").data_mut()[idx] = orig + offset;
            eval(&work)
        };
        let (p1, m1) = (at(h)?, at(-h)?);
        let (p2, m2) = (at(h + h)?, at(-(h + h))?);
        work.get_mut(name).expect("listed name").data_mut()[idx] = orig;

        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
        let analytic = grads.get(name).map_or(0.0, |t| t.data()[idx].as_f64());
        let rel = (analytic - numeric).abs() / numeric.abs().max(REL_FLOOR);
        let e = table.entry(name.clone()).or_insert_with(|| FdEntry {
            name: name.clone(),
            probes: 0,
            max_rel_error: 0.0,
            worst_analytic: analytic,
            worst_numeric: numeric,
        });
        e.probes += 1;
        if rel > e.max_rel_error {
            e.max_rel_error = rel;
            e.worst_analytic = analytic;
            e.worst_numeric = numeric;
        }
    }
    Ok(FdReport {
        entries: table.into_values().collect(),
    })
}
