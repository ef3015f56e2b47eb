use std::cell::RefCell;
use std::collections::BTreeSet;

use rand::Rng;

use crate::analysis::pca::pca;
use crate::diffusion::{sample, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::network::Dimr;
use crate::numerics::{Float, Graph, Tensor};
use crate::params::ParamStore;

/// One modulation signal at one site, one row per recorded sampling step.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationTrace {
    /// Site path, e.g. `b1.block0.norm1` or `b2.block1.adaln`.
    pub site: String,
    /// `gamma`, `beta`, `gamma1`, `alpha2`, ...
    pub signal: String,
    /// Timestep of each row, in chain order.
    pub steps: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

impl ModulationTrace {
    pub fn label(&self) -> String {
        format!("{}.{}", self.site, self.signal)
    }

    /// Scale and shift signals; gates (`alpha*`) are excluded.
    pub fn is_scale_or_shift(&self) -> bool {
        self.signal.starts_with("gamma") || self.signal.starts_with("beta")
    }
}

/// `count` timesteps spread evenly over `0..steps`, or all of them when
/// `count >= steps`.
pub fn recorded_steps(steps: usize, count: usize) -> BTreeSet<usize> {
    if count >= steps {
        return (0..steps).collect();
    }
    (0..count).map(|i| i * steps / count).collect()
}

struct Recorder<'a, T: Float> {
    net: &'a Dimr,
    params: &'a ParamStore<T>,
    keep: BTreeSet<usize>,
    calls: RefCell<Vec<(usize, Vec<(String, Tensor<T>)>)>>,
}

impl<T: Float> Denoiser<T> for Recorder<'_, T> {
    fn predict_eps(&self, x: &Tensor<T>, t: usize, classes: &[usize]) -> Result<Tensor<T>> {
        let g = Graph::no_grad(self.params);
        let record = self.keep.contains(&t);
        if record {
            g.enable_taps();
        }
        let ts = vec![t; classes.len()];
        let eps = self.net.forward(&g, g.constant(x.clone()), &ts, classes)?.final_eps().value();
        if record {
            self.calls.borrow_mut().push((t, g.take_taps()));
        }
        Ok(eps)
    }
}

/// Runs one unguided sampling chain for `class` and records the first batch
/// row of every modulation signal at the steps chosen by [`recorded_steps`].
pub fn collect_modulation<T: Float, R: Rng + ?Sized>(
    net: &Dimr,
    params: &ParamStore<T>,
    sched: &NoiseSchedule,
    class: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<ModulationTrace>> {
    if count == 0 {
        return Err(Error::Invalid("at least one sampling step must be recorded".into()));
    }
    let cfg = net.config();
    let rec = Recorder { net, params, keep: recorded_steps(sched.steps(), count), calls: RefCell::new(Vec::new()) };
    let shape = [1, cfg.in_channels, cfg.input_size, cfg.input_size];
    sample(&rec, sched, &shape, &[class], None, rng, |_, _, _| {})?;
    let calls = rec.calls.into_inner();
    let first = calls.first().map(|c| c.1.len()).unwrap_or(0);
    if first == 0 {
        return Err(Error::Invalid("model exposes no modulation sites".into()));
    }
    let mut traces: Vec<ModulationTrace> = calls[0]
        .1
        .iter()
        .map(|(name, _)| {
            let (site, signal) = name.rsplit_once('.').unwrap_or((name.as_str(), ""));
            ModulationTrace { site: site.into(), signal: signal.into(), steps: Vec::new(), rows: Vec::new() }
        })
        .collect();
    for (t, taps) in calls {
        for (tr, (_, v)) in traces.iter_mut().zip(taps) {
            let width = v.numel() / v.dim(0);
            tr.steps.push(t);
            tr.rows.push(v.data()[..width].iter().map(|x| x.f64()).collect());
        }
    }
    Ok(traces)
}

/// Top-2 cumulative explained-variance ratio of a trace. A constant trace has
/// rank 0 and reports 1.
pub fn tdln_rank_property(trace: &ModulationTrace) -> Result<f64> {
    let r = pca(&trace.rows)?;
    if r.eigenvalues.iter().all(|&e| e == 0.0) {
        return Ok(1.0);
    }
    Ok(r.cumulative(2))
}
