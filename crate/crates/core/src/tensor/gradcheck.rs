use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Elements probed per parameter tensor; `None` probes all of them.
    pub max_elements_per_param: Option<usize>,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn new(tolerance: f64) -> Self {
        GradCheckConfig {
            step: 1e-3,
            tolerance,
            max_elements_per_param: None,
            seed: 0,
        }
    }

    pub fn sampled(tolerance: f64, per_param: usize) -> Self {
        GradCheckConfig {
            max_elements_per_param: Some(per_param),
            ..Self::new(tolerance)
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_element: usize,
    /// Elements re-probed with a smaller step after the first one straddled a kink.
    pub refined: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Name of the parameter with the largest error.
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    /// Parameters whose error reaches the tolerance.
    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params
            .iter()
            .filter(move |p| !(p.max_rel_error < self.tolerance))
    }
}

/// Relative error with two floors: the tensor's gradient scale, so an
/// element whose gradient is ~0 next to large siblings is judged against the
/// tensor, and `noise`, the resolution of the finite difference itself.
fn rel_error(a: f64, n: f64, scale: f64, noise: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2 * scale).max(noise).max(1e-12)
}

/// Rounding error of a central difference of a loss near `base` at step `h`,
/// scaled so that differences within it count as agreement at `tolerance`.
fn fd_noise(base: f64, h: f64, tolerance: f64) -> f64 {
    64.0 * f64::EPSILON * base.abs().max(1.0) / h / tolerance
}

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    Ok(tape.value(loss).data()[0])
}

struct Probe {
    numeric: f64,
    step: f64,
    refined: bool,
}

/// Central difference at element `e`, confirmed against the same difference
/// at a tenfold smaller step. A step that straddles a kink (pooling switch,
/// leaky ReLU) gives an estimate that moves when the step shrinks, so the
/// step keeps shrinking until two successive estimates agree, down to a
/// thousandth of the configured step.
#[allow(clippy::too_many_arguments)]
fn probe<F>(
    store: &mut ParamStore<f64>,
    f: &F,
    id: super::ParamId,
    e: usize,
    base: f64,
    step: f64,
    scale: f64,
    tolerance: f64,
) -> Result<Probe>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let orig = store.get(id).value.data()[e];
    let central = |store: &mut ParamStore<f64>, h: f64| -> Result<f64> {
        store.get_mut(id).value.data_mut()[e] = orig + h;
        let plus = eval(store, f);
        store.get_mut(id).value.data_mut()[e] = orig - h;
        let minus = eval(store, f);
        store.get_mut(id).value.data_mut()[e] = orig;
        Ok((plus? - minus?) / (2.0 * h))
    };
    let first = central(store, step)?;
    let (mut h, mut previous) = (step, first);
    loop {
        let next = central(store, h / 10.0)?;
        let noise = fd_noise(base, h / 10.0, tolerance);
        if rel_error(previous, next, scale, noise) < 0.1 * tolerance || h < step * 1.5e-2 {
            return Ok(Probe {
                // the larger step is the configured one unless a kink forced a smaller one
                numeric: previous,
                step: h,
                refined: rel_error(first, next, scale, noise) >= 0.1 * tolerance,
            });
        }
        previous = next;
        h /= 10.0;
    }
}

/// Compare analytic parameter gradients against central finite differences.
///
/// `f` builds a scalar loss on a fresh tape from the current parameter
/// values. It must be a pure function of the store; a graph whose loss
/// differs between two identical evaluations is rejected.
pub fn grad_check<F>(store: &mut ParamStore<f64>, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let base = tape.value(loss).data()[0];
    tape.backward(loss, store)?;
    drop(tape);
    if eval(store, &f)?.to_bits() != base.to_bits() {
        return Err(Error::invalid(
            "graph is not deterministic; finite differences are meaningless",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<_> = store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let len = store.get(id).value.len();
        let elements: Vec<usize> = match cfg.max_elements_per_param {
            Some(k) if k < len => {
                let mut v = sample(&mut rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            checked: elements.len(),
            max_rel_error: 0.0,
            worst_element: 0,
            refined: 0,
        };
        let scale = store.get(id).grad.max_abs();
        for e in elements {
            let p = probe(store, &f, id, e, base, cfg.step, scale, cfg.tolerance)?;
            check.refined += p.refined as usize;
            let numeric = p.numeric;
            let analytic = store.get(id).grad.data()[e];
            let err = rel_error(analytic, numeric, scale, fd_noise(base, p.step, cfg.tolerance));
            if err > check.max_rel_error || err.is_nan() {
                check.max_rel_error = err;
                check.worst_element = e;
            }
        }
        params.push(check);
    }
    let max_rel_error = params
        .iter()
        .map(|p| p.max_rel_error)
        .fold(0.0, |a: f64, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) });
    Ok(GradCheckReport {
        passed: max_rel_error < cfg.tolerance,
        max_rel_error,
        tolerance: cfg.tolerance,
        params,
    })
}
