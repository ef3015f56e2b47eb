use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{q_sample_batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::network::{Dimr, DimrDenoiser};
use crate::numerics::{Graph, Tensor};
use crate::params::ParamStore;
use crate::training::checkpoint::Checkpoint;
use crate::training::config::{DataSource, RunConfig};
use crate::training::data::{sample_batch, Checker, Dataset, GaussianBlobs, ImageFolder};
use crate::training::loss::multiscale_loss;
use crate::training::optim::{ema_update, optimizer_step, AdamState};

/// Builds the dataset named by `cfg.data` at the model's resolution.
pub fn make_dataset(cfg: &RunConfig) -> Result<Box<dyn Dataset>> {
    let m = &cfg.model;
    let ds: Box<dyn Dataset> = match &cfg.data {
        DataSource::GaussianBlobs { jitter } => Box::new(GaussianBlobs::new(m.input_size, m.num_classes, *jitter)?),
        DataSource::Checker => Box::new(Checker::new(m.input_size, m.num_classes)?),
        DataSource::Folder(p) => Box::new(ImageFolder::load(p, m.input_size)?),
    };
    if ds.channels() != m.in_channels || ds.size() != m.input_size || ds.num_classes() > m.num_classes {
        return Err(Error::Config(format!(
            "dataset yields {} classes of [{}, {s}, {s}] but the model expects {} classes of [{}, {}, {}]",
            ds.num_classes(),
            ds.channels(),
            m.num_classes,
            m.in_channels,
            m.input_size,
            m.input_size,
            s = ds.size(),
        )));
    }
    Ok(ds)
}

/// Random stream for update `step` (0-based). Stream 0 is reserved for
/// initialization, so a resumed run draws exactly what an uninterrupted one would.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// 1-based index of the update just applied.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub rows: Vec<StepStats>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,lr\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:?},{:?}\n", r.step, r.loss, r.lr));
        }
        s
    }

    /// Mean loss over the first and last `n` rows.
    pub fn head_tail_means(&self, n: usize) -> Option<(f64, f64)> {
        if self.rows.is_empty() || n == 0 {
            return None;
        }
        let n = n.min(self.rows.len());
        let mean = |rs: &[StepStats]| rs.iter().map(|r| r.loss).sum::<f64>() / rs.len() as f64;
        Some((mean(&self.rows[..n]), mean(&self.rows[self.rows.len() - n..])))
    }
}

pub struct Trainer {
    config: RunConfig,
    net: Dimr,
    schedule: NoiseSchedule,
    params: ParamStore<f32>,
    adam: AdamState<f32>,
    ema: Option<ParamStore<f32>>,
    step: u64,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.diffusion.schedule()?;
        let mut params = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = Dimr::new(config.model.clone(), schedule.steps(), &mut params, &mut rng)?;
        let adam = AdamState::new(&params);
        let ema = config.train.ema.then(|| params.clone());
        Ok(Trainer { config, net, schedule, params, adam, ema, step: 0 })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(ck.config.clone())?;
        ck.validate_names(&t.params)?;
        t.params = ck.params;
        t.adam = ck.adam;
        t.ema = match (t.config.train.ema, ck.ema) {
            (true, Some(e)) => Some(e),
            (true, None) => Some(t.params.clone()),
            (false, _) => None,
        };
        t.step = ck.step;
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn net(&self) -> &Dimr {
        &self.net
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    /// EMA weights when enabled, otherwise the live parameters.
    pub fn sampling_params(&self) -> &ParamStore<f32> {
        self.ema.as_ref().unwrap_or(&self.params)
    }

    pub fn denoiser(&self) -> DimrDenoiser<'_, f32> {
        DimrDenoiser { net: &self.net, params: self.sampling_params() }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            params: self.params.clone(),
            adam: self.adam.clone(),
            ema: self.ema.clone(),
        }
    }

    /// One AdamW update on a fresh batch.
    pub fn train_step(&mut self, ds: &dyn Dataset) -> Result<StepStats> {
        let mut rng = step_rng(self.config.seed, self.step);
        let tc = &self.config.train;
        let b = tc.batch_size;
        let (x0, mut classes) = sample_batch(ds, b, &mut rng)?;
        let ts: Vec<usize> = (0..b).map(|_| rng.random_range(0..self.schedule.steps())).collect();
        let null = self.net.null_class();
        for c in classes.iter_mut() {
            if rng.random::<f64>() < tc.cond_dropout {
                *c = null;
            }
        }
        let eps = Tensor::<f32>::randn(x0.shape(), 1.0, &mut rng);
        let xt = q_sample_batch(&x0, &ts, &eps, &self.schedule)?;

        let g = Graph::new(&self.params);
        let out = self.net.forward(&g, g.constant(xt), &ts, &classes)?;
        let loss = multiscale_loss(&g, &eps, &out.eps)?;
        let value = loss.value().item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.step + 1)));
        }
        let grads = g.backward(loss)?.param_grads(&self.params);
        let lr = optimizer_step(&mut self.params, &grads, &mut self.adam, &tc.optim)
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} at step {}", self.step + 1)),
                other => other,
            })?;
        if let Some(ema) = self.ema.as_mut() {
            ema_update(ema, &self.params, tc.ema_rate)?;
        }
        self.step += 1;
        Ok(StepStats { step: self.step, loss: value, lr })
    }

    /// Runs until `config.train.steps` updates have been applied in total,
    /// calling `on_step` after each one.
    pub fn run(&mut self, ds: &dyn Dataset, mut on_step: impl FnMut(&StepStats)) -> Result<LossTrace> {
        let mut trace = LossTrace::default();
        while self.step < self.config.train.steps {
            let s = self.train_step(ds)?;
            on_step(&s);
            trace.rows.push(s);
        }
        Ok(trace)
    }
}
