use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::data::{Batch, Sample};
use crate::error::{Error, Result};
use crate::losses::{depth_loss, edge_loss, normal_loss, seg_loss, total_loss_var, IGNORE_LABEL};
use crate::model::{Model, MtlOutput};
use crate::nn::{apply_stat_updates, clip_grad_norm, Optimizer, OptimizerKind};
use crate::params::{ParamGroup, ParamStore};
use crate::task::Task;
use crate::uda::{adversarial_loss, discriminator_loss, mtl_uda_total, normalize_depth, weighted_self_information, Discriminator};

use super::config::{ExperimentConfig, UdaRun};
use super::eval::{compute_metrics, delta_against, EVAL_BATCH};
use super::report::RunReport;
use crate::metrics::TaskMetrics;

/// Trained model together with its report.
pub struct TrainOutcome {
    pub model: Model,
    pub report: RunReport,
}

/// Draws batches by walking shuffled epochs.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut s = Self { order: (0..len).collect(), pos: len, rng: ChaCha8Rng::seed_from_u64(seed) };
        s.reshuffle_if_done();
        s
    }

    fn reshuffle_if_done(&mut self) {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            self.reshuffle_if_done();
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn batch_of(samples: &[Sample], idx: &[usize]) -> Result<Batch> {
    let refs: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
    Batch::from_samples(&refs)
}

/// Supervised loss of one task prediction against `batch`.
pub fn task_loss(g: &mut Graph, task: Task, pred: Var, batch: &Batch, d_far: f64) -> Result<Var> {
    match task {
        Task::Seg => Ok(seg_loss(g, pred, &batch.seg, IGNORE_LABEL)?.0),
        Task::Depth => depth_loss(g, pred, &batch.depth, d_far),
        Task::Normals => normal_loss(g, pred, &batch.normals),
        Task::Edges => edge_loss(g, pred, &batch.edges),
    }
}

/// Per-level task losses: rows are supervision scales (ascending), then the
/// final row.
struct LevelLosses {
    inter: Vec<Vec<Var>>,
    finals: Vec<Var>,
}

fn supervised(g: &mut Graph, model: &Model, out: &MtlOutput, batch: &Batch) -> Result<LevelLosses> {
    let d_far = model.config().d_far;
    let tasks = model.tasks();
    let mut inter = Vec::with_capacity(out.intermediate.len());
    for row in out.intermediate.values() {
        inter.push(tasks.iter().map(|&t| task_loss(g, t, row[&t], batch, d_far)).collect::<Result<Vec<_>>>()?);
    }
    let finals = tasks.iter().map(|&t| task_loss(g, t, out.finals[&t], batch, d_far)).collect::<Result<Vec<_>>>()?;
    Ok(LevelLosses { inter, finals })
}

/// Output level of a prediction: a supervision scale or the final output.
type Level = Option<usize>;

/// Tasks whose outputs are aligned across domains.
const ALIGNED: [Task; 2] = [Task::Seg, Task::Depth];

struct Adaptation<'a> {
    run: &'a UdaRun,
    target: Vec<Sample>,
    sampler: Sampler,
    store: ParamStore,
    discs: BTreeMap<(Level, Task), Discriminator>,
    opt: Optimizer,
}

impl<'a> Adaptation<'a> {
    fn new(run: &'a UdaRun, model: &Model, target: Vec<Sample>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd15c);
        let mut store = ParamStore::new();
        let mut discs = BTreeMap::new();
        let levels: Vec<Level> = model.config().scales.iter().map(|&s| Some(s)).chain([None]).collect();
        for level in levels {
            for &t in model.tasks().iter().filter(|t| ALIGNED.contains(t)) {
                let ch = if t == Task::Seg { model.config().num_classes } else { 1 };
                let name = match level {
                    Some(s) => format!("disc.s{s}.{}", t.name()),
                    None => format!("disc.final.{}", t.name()),
                };
                discs.insert((level, t), Discriminator::new(&mut store, &name, ch, &run.config.discriminator, &mut rng)?);
            }
        }
        let opt = Optimizer::new(
            OptimizerKind::Adam { beta1: 0.9, beta2: 0.99, eps: 1e-8 },
            &[(ParamGroup::Discriminator, run.config.disc_lr)],
        );
        let sampler = Sampler::new(target.len(), seed ^ 0x7a67);
        Ok(Self { run, target, sampler, store, discs, opt })
    }
}

fn alignment_map(g: &mut Graph, task: Task, pred: Var, run: &UdaRun) -> Result<Var> {
    match task {
        Task::Seg => {
            let p = g.softmax(pred, 1)?;
            Ok(weighted_self_information(g, p))
        }
        _ => normalize_depth(g, pred, &run.config),
    }
}

fn level_pred(out: &MtlOutput, level: Level, t: Task) -> Var {
    match level {
        Some(s) => out.intermediate[&s][&t],
        None => out.finals[&t],
    }
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    iteration: usize,
    total: f64,
    task_losses: BTreeMap<Task, f64>,
    lr_scale: f64,
    recent_totals: &'a [f64],
    config: &'a ExperimentConfig,
}

/// Runs the optimisation loop of `cfg` and scores the result. With
/// `out_dir`, periodic and final checkpoints, the report and a diagnostic
/// dump on a non-finite loss are written there.
pub fn train(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_with_baselines(cfg, out_dir, None)
}

/// [`train`] with the delta computed against `baselines`.
pub fn train_with_baselines(cfg: &ExperimentConfig, out_dir: Option<&Path>, baselines: Option<&TaskMetrics>) -> Result<TrainOutcome> {
    train_until(cfg, out_dir, baselines, |_, _| Ok(false))
}

/// [`train_with_baselines`] that also calls `stop(iterations_done, model)`
/// after every update and ends the loop early once it returns true.
pub fn train_until<F>(cfg: &ExperimentConfig, out_dir: Option<&Path>, baselines: Option<&TaskMetrics>, mut stop: F) -> Result<TrainOutcome>
where
    F: FnMut(usize, &Model) -> Result<bool>,
{
    cfg.validate()?;
    let start = Instant::now();
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
    }
    let samples = cfg.dataset.load(&cfg.model)?;
    let eval_samples = match &cfg.eval_dataset {
        Some(spec) => Some(spec.load(&cfg.model)?),
        None => None,
    };
    let target = match &cfg.uda {
        Some(u) => u.target.load(&cfg.model)?,
        None => Vec::new(),
    };
    cfg.check_loaded(&[&samples, eval_samples.as_deref().unwrap_or(&[]), &target])?;
    if samples.is_empty() || (cfg.uda.is_some() && target.is_empty()) {
        return Err(Error::Config("empty training set".into()));
    }

    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    for s in samples.iter().chain(&target) {
        model.check_input(s.height, s.width)?;
    }
    let weights = cfg.task_weights();
    let mut opt = Optimizer::new(
        cfg.optimizer.algorithm,
        &[(ParamGroup::Encoder, cfg.optimizer.encoder_lr), (ParamGroup::Decoder, cfg.optimizer.decoder_lr)],
    );
    let mut sampler = Sampler::new(samples.len(), cfg.seed ^ 0x5eed);
    let mut uda = match &cfg.uda {
        Some(run) => Some(Adaptation::new(run, &model, target, cfg.seed)?),
        None => None,
    };
    let tasks = model.tasks().to_vec();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut task_losses: BTreeMap<Task, Vec<f64>> = tasks.iter().map(|&t| (t, Vec::new())).collect();
    let mut disc_losses = Vec::new();

    for it in 0..cfg.iterations {
        let lr_scale = cfg.lr_decay_step.map_or(1.0, |step| cfg.lr_decay_factor.powi((it / step) as i32));
        let batch = batch_of(&samples, &sampler.next_batch(cfg.batch_size))?;
        let mut g = Graph::new(true);
        let x = g.constant(batch.images.clone());
        let out = model.forward(&mut g, x)?;
        let sup = supervised(&mut g, &model, &out, &batch)?;
        let mut total = total_loss_var(&mut g, &sup.inter, &sup.finals, &weights)?;
        let value = |g: &Graph, rows: &[Vec<Var>]| rows.iter().map(|r| r.iter().map(|&v| g.value(v).item()).collect()).collect();
        let inter_vals: Vec<Vec<f64>> = value(&g, &sup.inter);
        let final_vals: Vec<f64> = sup.finals.iter().map(|&v| g.value(v).item()).collect();
        let mut reported = g.value(total).item();

        // Source and target alignment maps, kept as plain tensors for the
        // discriminator update after the generator step.
        let mut disc_inputs = Vec::new();
        if let Some(a) = uda.as_mut() {
            let tb = batch_of(&a.target, &a.sampler.next_batch(cfg.batch_size))?;
            let xt = g.constant(tb.images);
            let out_t = model.forward(&mut g, xt)?;
            let n_inter = out.intermediate.len().max(1) as f64;
            let levels: Vec<Level> = out.intermediate.keys().map(|&s| Some(s)).chain([None]).collect();
            let mut adv_inter = vec![vec![0.0; tasks.len()]; out.intermediate.len()];
            let mut adv_final = vec![0.0; tasks.len()];
            for (row, &level) in levels.iter().enumerate() {
                for (col, &t) in tasks.iter().enumerate().filter(|(_, t)| ALIGNED.contains(t)) {
                    let q_src = alignment_map(&mut g, t, level_pred(&out, level, t), a.run)?;
                    let q_trg = alignment_map(&mut g, t, level_pred(&out_t, level, t), a.run)?;
                    // The discriminator is frozen during the generator step:
                    // its input gradient enters the model graph through the
                    // linear surrogate sum(q_trg * dL_adv/dq_trg).
                    let mut dg = Graph::new(true);
                    let leaf = dg.leaf(g.value(q_trg).clone());
                    let z = a.discs[&(level, t)].forward(&mut dg, &a.store, leaf)?;
                    let l = adversarial_loss(&mut dg, z);
                    let adv = dg.value(l).item();
                    let coef = a.run.config.lambda_adv * if level.is_some() { 1.0 / n_inter } else { 1.0 };
                    let grad = dg.backward(l)?.get(leaf).cloned().unwrap_or_else(|| dg.value(leaf).map(|_| 0.0));
                    let c = g.constant(grad.map(|v| v * coef));
                    let prod = g.mul(q_trg, c)?;
                    let surrogate = g.sum(prod);
                    total = g.add(total, surrogate)?;
                    match level {
                        Some(_) => adv_inter[row][col] = adv,
                        None => adv_final[col] = adv,
                    }
                    disc_inputs.push(((level, t), g.value(q_src).clone(), g.value(q_trg).clone()));
                }
            }
            reported = mtl_uda_total(&inter_vals, &final_vals, &adv_inter, &adv_final, &weights, a.run.config.lambda_adv)?;
        }

        if !reported.is_finite() {
            let dump = out_dir.map(|d| d.join(format!("nonfinite-{it}.json")));
            if let Some(p) = &dump {
                let tl = tasks.iter().copied().zip(final_vals.iter().copied()).collect();
                let recent = &losses[losses.len().saturating_sub(20)..];
                let d = NonFiniteDump { iteration: it, total: reported, task_losses: tl, lr_scale, recent_totals: recent, config: cfg };
                fs::write(p, serde_json::to_string_pretty(&d)?)?;
            }
            return Err(Error::NonFiniteLoss { iteration: it, dump });
        }

        let stats = g.take_stat_updates();
        let mut grads = g.backward(total)?.into_param_grads();
        clip_grad_norm(&mut grads, cfg.grad_clip);
        opt.step(model.store_mut(), &grads, lr_scale)?;
        apply_stat_updates(model.store_mut(), &stats, cfg.bn_momentum);

        if let Some(a) = uda.as_mut() {
            let mut dg = Graph::new(true);
            let mut acc: Option<Var> = None;
            for (key, src, trg) in disc_inputs {
                let (s, t) = (dg.constant(src), dg.constant(trg));
                let zs = a.discs[&key].forward(&mut dg, &a.store, s)?;
                let zt = a.discs[&key].forward(&mut dg, &a.store, t)?;
                let l = discriminator_loss(&mut dg, zs, zt)?;
                acc = Some(match acc {
                    Some(prev) => dg.add(prev, l)?,
                    None => l,
                });
            }
            if let Some(l) = acc {
                disc_losses.push(dg.value(l).item() / a.discs.len() as f64);
                let mut grads = dg.backward(l)?.into_param_grads();
                clip_grad_norm(&mut grads, cfg.grad_clip);
                a.opt.step(&mut a.store, &grads, lr_scale)?;
            }
        }

        losses.push(reported);
        for (&t, &v) in tasks.iter().zip(&final_vals) {
            task_losses.get_mut(&t).expect("task").push(v);
        }
        if cfg.log_every > 0 && (it % cfg.log_every == 0 || it + 1 == cfg.iterations) {
            info!("{} iter {it}: loss {reported:.5}", cfg.name);
        }
        if let (Some(d), Some(every)) = (out_dir, cfg.checkpoint_every) {
            if (it + 1) % every == 0 {
                model.save(&d.join(format!("checkpoint-{:06}.safetensors", it + 1)))?;
            }
        }
        if stop(it + 1, &model)? {
            info!("{} stopped after {} iterations", cfg.name, it + 1);
            break;
        }
    }

    let eval_set = eval_samples.as_deref().unwrap_or(&samples);
    let metrics = compute_metrics(&model, eval_set, EVAL_BATCH)?;
    let delta = delta_against(&metrics, baselines)?;
    let report = RunReport {
        label: cfg.name.clone(),
        architecture: cfg.model.architecture,
        tasks,
        weights,
        parameters: model.parameter_count(),
        exchange_parameters: model.exchange_parameter_count(),
        config_hash: cfg.hash()?,
        seed: Some(cfg.seed),
        iterations: losses.len(),
        deterministic: super::deterministic_requested(),
        losses,
        task_losses,
        disc_losses,
        metrics,
        delta,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    if let Some(d) = out_dir {
        model.save(&d.join("model.safetensors"))?;
        report.save(&d.join("report.json"))?;
        fs::write(d.join("config.toml"), cfg.to_toml()?)?;
    }
    if report.losses.len() >= 2 && report.losses.last() > report.losses.first() {
        warn!("{}: loss rose from {:.4} to {:.4}", cfg.name, report.losses[0], report.losses[report.losses.len() - 1]);
    }
    Ok(TrainOutcome { model, report })
}
