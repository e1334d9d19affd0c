//! SGD-momentum training loop with cosine learning-rate decay.

use std::f64::consts::PI;
use std::io::Write;

use vrnet_tensor::{Graph, ParamId, ParamStore, Rng, Tensor};

use crate::error::{Error, Result};
use crate::loss::{self, LossBundle};
use crate::model::{Model, ModelConfig, Sample};
use crate::mtl::{self, Weighting};

pub const LOG_VAR_PARAM: &str = "mtl.log_var";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub weighting: Weighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            lr: 1e-2,
            momentum: 0.937,
            weight_decay: 5e-4,
            warmup_steps: 0,
            grad_clip: Some(10.0),
            seed: 0,
            weighting: Weighting::Uncertainty,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("lr, momentum or weight_decay out of range".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// Linear warmup, then cosine decay from `lr` to zero at `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.lr * (1.0 + (PI * t).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    /// `(cls, conf, seg, box)`, batch means.
    pub losses: [f64; 4],
    pub total: f64,
    pub grad_norm: f64,
    pub log_var: [f64; 4],
    pub lr: f64,
}

impl StepMetrics {
    pub const TSV_HEADER: &'static str = "step\tl_cls\tl_conf\tl_seg\tl_box\ttotal\ts1\ts2\ts3\ts4\tlr";

    pub fn tsv_line(&self) -> String {
        let mut cols = vec![self.step.to_string()];
        cols.extend(self.losses.iter().map(f64::to_string));
        cols.push(self.total.to_string());
        cols.extend(self.log_var.iter().map(f64::to_string));
        cols.push(self.lr.to_string());
        cols.join("\t")
    }
}

/// Model parameters, optimizer state and the step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub store: ParamStore,
    pub cfg: TrainConfig,
    pub log_var: ParamId,
    velocity: Vec<Vec<f64>>,
    decay: Vec<bool>,
    step: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

/// Per-sample forward pass, label assignment and losses.
pub fn sample_losses(g: &mut Graph, model: &Model, store: &ParamStore, sample: &Sample) -> Result<LossBundle> {
    let out = model.forward(g, store, &sample.image, &sample.revp)?;
    let anchor_gt = loss::assign_recorded(g, &out.det, &sample.gts)?;
    loss::compute_losses(g, &out.det, out.seg_logits, &sample.gts, &anchor_gt, &sample.mask)
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, model_cfg)?;
        let log_var = store.add(LOG_VAR_PARAM, Tensor::zeros(vec![4]));
        Ok(Self::from_parts(model, store, log_var, cfg))
    }

    /// Wraps loaded parameters; optimizer state starts at zero.
    pub fn from_parts(model: Model, store: ParamStore, log_var: ParamId, cfg: TrainConfig) -> Self {
        let velocity = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        let decay = store.ids().map(|id| store.get(id).rank() >= 2).collect();
        let rng = Rng::stream(cfg.seed, 0x7472);
        Self {
            model,
            store,
            cfg,
            log_var,
            velocity,
            decay,
            step: 0,
            order: Vec::new(),
            cursor: 0,
            rng,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Scalar objective of one sample under the configured weighting.
    pub fn objective(&self, g: &mut Graph, store: &ParamStore, sample: &Sample) -> Result<(LossBundle, vrnet_tensor::Var)> {
        let bundle = sample_losses(g, &self.model, store, sample)?;
        let total = match self.cfg.weighting {
            Weighting::Uncertainty => {
                let s = g.param(store, self.log_var);
                mtl::uncertainty_combine(g, bundle.as_array(), s)?
            }
            Weighting::Manual(w) => mtl::manual_combine(g, bundle.as_array(), w.bundle_order())?,
        };
        Ok((bundle, total))
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        while batch.len() < self.cfg.batch_size.min(n) {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// One optimizer update on the next mini-batch of `data`.
    pub fn train_step(&mut self, data: &[Sample]) -> Result<StepMetrics> {
        if data.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        let batch = self.next_batch(data.len());
        let inv_b = 1.0 / batch.len() as f64;
        self.store.zero_grads();
        let mut losses = [0.0; 4];
        let mut total = 0.0;
        for &i in &batch {
            let mut g = Graph::new();
            let (bundle, obj) = self.objective(&mut g, &self.store, &data[i])?;
            let v = g.value(obj).item();
            if !v.is_finite() {
                let (node, op) = g
                    .first_non_finite()
                    .map(|(n, op)| (n.index(), op))
                    .unwrap_or((obj.index(), g.op_name(obj)));
                return Err(Error::NonFinite { step: self.step, node, op });
            }
            for (acc, l) in losses.iter_mut().zip(bundle.values(&g)) {
                *acc += l * inv_b;
            }
            total += v * inv_b;
            let grads = g.backward(obj)?;
            self.store.accumulate_scaled(&grads, inv_b);
        }

        let ids: Vec<ParamId> = self.store.ids().collect();
        let grad_norm = ids
            .iter()
            .flat_map(|&id| self.store.grad(id).iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                node: 0,
                op: "gradient",
            });
        }
        let clip = match self.cfg.grad_clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let lr = self.cfg.lr_at(self.step);
        for (k, &id) in ids.iter().enumerate() {
            let grad = self.store.grad(id).to_vec();
            let wd = if self.decay[k] { self.cfg.weight_decay } else { 0.0 };
            let vel = &mut self.velocity[k];
            let p = self.store.get_mut(id).data_mut();
            for j in 0..p.len() {
                vel[j] = self.cfg.momentum * vel[j] + grad[j] * clip + wd * p[j];
                p[j] -= lr * vel[j];
            }
        }
        let lv = self.store.get(self.log_var).data();
        let metrics = StepMetrics {
            step: self.step,
            losses,
            total,
            grad_norm,
            log_var: [lv[0], lv[1], lv[2], lv[3]],
            lr,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Runs the remaining steps, writing one TSV line per step to `log`.
    pub fn run(&mut self, data: &[Sample], mut log: Option<&mut dyn Write>) -> Result<Vec<StepMetrics>> {
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", StepMetrics::TSV_HEADER).map_err(|e| Error::Invalid(format!("metrics log: {e}")))?;
        }
        let mut history = Vec::with_capacity(self.cfg.steps.saturating_sub(self.step));
        while self.step < self.cfg.steps {
            let m = self.train_step(data)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", m.tsv_line()).map_err(|e| Error::Invalid(format!("metrics log: {e}")))?;
            }
            history.push(m);
        }
        Ok(history)
    }
}
