//! The K-task continual protocol: per-task training with method dispatch,
//! teacher snapshots, buffer maintenance, per-task checkpointing, and the
//! post-task fidelity sweep that fills the lower-triangular d[k][i] matrix.
//!
//! Determinism contract: everything a run emits except timings.json is a
//! pure function of the config. Every random draw comes from a ChaCha
//! stream addressed by purpose (task index, eval cell, buffer, init), and
//! per-step draws follow a fixed order (current indices, replay pairs,
//! timesteps, current noise, replay noise, label dropout) so methods that
//! share a prefix of the protocol consume identical randomness.

use crate::autodiff::{Gradients, Tape, Var};
use crate::buffer::ReplayBuffer;
use crate::config::{FaultKind, Method, RunConfig};
use crate::datasets::{make_stream, Split, TaskStream};
use crate::diffusion::{
    ancestral_sample, forward_diffuse, noise_loss_parts_on_tape, reverse_mean,
    reverse_mean_on_tape,
};
use crate::error::{Error, Result};
use crate::losses::{
    fisher_preconditioner, ikc_loss_on_tape, lkc_loss_on_tape, total_loss_on_tape, CcdWeights,
    PROB_FLOOR,
};
use crate::losses::ukc_loss_on_tape;
use crate::metrics::{fit_gaussian, frechet_distance, FeatureEmbed, FidelityMatrix, GaussianStats};
use crate::model::{Denoiser, ModelVars, TeacherSnapshot};
use crate::optimizer::Adam;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

const EWC_FISHER_BATCHES: usize = 32;
/// A fidelity entry this many times the first-task baseline flags collapse.
const FD_COLLAPSE_FACTOR: f64 = 10.0;

// ChaCha stream ids under the run seed (dataset streams live under the
// dataset seed; ids stay globally distinct anyway to avoid aliasing when the
// two seeds coincide)
const STREAM_TASK_BASE: u64 = 1000;
const STREAM_EVAL_BASE: u64 = 10_000;

#[derive(Clone, Debug, Serialize)]
pub struct CollapseInfo {
    pub task: usize,
    pub step: u64,
    pub term: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct FdFlag {
    pub after_task: usize,
    pub eval_task: usize,
    pub fd: f64,
    pub limit: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub task: usize,
    pub step: u64,
    pub total: f64,
    pub base: f64,
    pub ikc: f64,
    pub ukc: f64,
    pub lkc: f64,
    pub reg: f64,
    pub head_ce: f64,
}

#[derive(Clone)]
pub struct RunRecord {
    pub config: RunConfig,
    pub fidelity: FidelityMatrix,
    pub mf: Option<f64>,
    pub imf: Option<f64>,
    pub loss_log: Vec<LossRow>,
    pub task_seconds: Vec<f64>,
    pub collapse: Option<CollapseInfo>,
    pub fd_flags: Vec<FdFlag>,
    /// Hash of the teacher frozen at the start of task k (None for task 0).
    pub teacher_hashes: Vec<Option<String>>,
    pub task_end_hashes: Vec<String>,
    pub final_params_hash: String,
}

impl RunRecord {
    pub fn failed(&self) -> bool {
        self.collapse.is_some()
    }

    /// Everything except wall-clock timings; stable bytes for a given config.
    pub fn run_json(&self) -> String {
        let value = serde_json::json!({
            "schema_version": 1,
            "status": if self.failed() { "failed" } else { "ok" },
            "config": self.config,
            "fidelity": self.fidelity.rows(),
            "mf": self.mf,
            "imf": self.imf,
            "collapse": self.collapse,
            "fd_flags": self.fd_flags,
            "teacher_hashes": self.teacher_hashes,
            "task_end_hashes": self.task_end_hashes,
            "final_params_hash": self.final_params_hash,
        });
        serde_json::to_string_pretty(&value).expect("record serializes")
    }

    pub fn loss_csv(&self) -> String {
        let mut out = String::from("task,step,total,base,ikc,ukc,lkc,reg,head_ce\n");
        for r in &self.loss_log {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.task, r.step, r.total, r.base, r.ikc, r.ukc, r.lkc, r.reg, r.head_ce
            );
        }
        out
    }

    pub fn timings_json(&self) -> String {
        let value = serde_json::json!({
            "task_seconds": self.task_seconds,
            "total_seconds": self.task_seconds.iter().sum::<f64>(),
        });
        serde_json::to_string_pretty(&value).expect("timings serialize")
    }

    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("run.json"), self.run_json())?;
        std::fs::write(dir.join("loss_log.csv"), self.loss_csv())?;
        std::fs::write(dir.join("fidelity_matrix.csv"), self.fidelity.to_csv())?;
        std::fs::write(dir.join("timings.json"), self.timings_json())?;
        Ok(())
    }
}

/// L2/EWC anchor: parameters at the end of the previous task, plus the
/// diagonal Fisher estimate for EWC.
struct RegAnchor {
    params: Vec<f64>,
    fisher: Option<Vec<f64>>,
}

struct TaskOutcome {
    loss_rows: Vec<LossRow>,
    collapse: Option<CollapseInfo>,
}

fn normal_tensor(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .expect("shape is consistent")
}

fn gather_batch(x: &Tensor, y: &[usize], idx: &[usize]) -> (Tensor, Vec<usize>) {
    let (_, d) = x.as_2d();
    let mut data = Vec::with_capacity(idx.len() * d);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend_from_slice(x.row(i));
        labels.push(y[i]);
    }
    (Tensor::matrix(idx.len(), d, data).expect("shape is consistent"), labels)
}

fn apply_label_dropout(
    labels: &[usize],
    null_label: usize,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    labels
        .iter()
        .map(|&l| if rng.gen::<f64>() < p { null_label } else { l })
        .collect()
}

/// Cross-entropy of the label head against true labels on clean inputs.
/// The trunk features enter as constants so only head parameters learn.
fn head_ce_on_tape(
    tape: &mut Tape,
    model: &Denoiser,
    mv: &ModelVars,
    x0: &Tensor,
    labels: &[usize],
) -> Result<Var> {
    let (b, _) = x0.as_2d();
    let l = model.arch().label_count;
    let feats = tape.constant(model.probe_features(x0)?);
    let logits = model.head_on_tape(tape, mv, feats)?;
    let probs = tape.softmax(logits)?;
    let floored = tape.clamp_min(probs, PROB_FLOOR)?;
    let logq = tape.log(floored)?;
    let mut onehot = Tensor::zeros(vec![b, l]);
    for (r, &label) in labels.iter().enumerate() {
        if label >= l {
            return Err(Error::invalid(format!("head target {label} outside {l} classes")));
        }
        onehot.data_mut()[r * l + label] = -1.0 / b as f64;
    }
    let oh = tape.constant(onehot);
    let picked = tape.mul(oh, logq)?;
    tape.sum(picked)
}

fn flat_grad(grads: &Gradients, mv: &ModelVars, model: &Denoiser) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.param_count());
    for (var, param) in mv.vars.iter().zip(model.params()) {
        match grads.wrt(*var) {
            Some(g) => out.extend_from_slice(g.data()),
            None => out.resize(out.len() + param.len(), 0.0),
        }
    }
    out
}

struct StepDraw {
    x0_cur: Tensor,
    y_cur: Vec<usize>,
    y_cur_in: Vec<usize>,
    t: Vec<usize>,
    eps_cur: Tensor,
    replay: Option<ReplayDraw>,
}

struct ReplayDraw {
    x0: Tensor,
    y: Vec<usize>,
    y_in: Vec<usize>,
    eps: Tensor,
}

/// Fixed per-step draw order; see the module comment.
fn draw_step(
    x_train: &Tensor,
    y_train: &[usize],
    buffer: Option<&mut ReplayBuffer>,
    cfg: &RunConfig,
    null_label: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StepDraw> {
    let b = cfg.batch_size;
    let (n, d) = x_train.as_2d();
    let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n)).collect();
    let (x0_cur, y_cur) = gather_batch(x_train, y_train, &idx);
    let replay_pair = match buffer {
        Some(buf) if !buf.is_empty() => Some(buf.sample_pairs(b)?),
        _ => None,
    };
    let t_max = cfg.schedule.t_max;
    let t: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=t_max)).collect();
    let eps_cur = normal_tensor(rng, b, d);
    let eps_rep = replay_pair.as_ref().map(|_| normal_tensor(rng, b, d));
    let y_cur_in = apply_label_dropout(&y_cur, null_label, cfg.label_dropout, rng);
    let replay = replay_pair.map(|(x0, y)| {
        let y_in = apply_label_dropout(&y, null_label, cfg.label_dropout, rng);
        ReplayDraw { x0, y, y_in, eps: eps_rep.expect("drawn when replay present") }
    });
    Ok(StepDraw { x0_cur, y_cur, y_cur_in, t, eps_cur, replay })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Denoiser,
    opt: &mut Adam,
    teacher: Option<&TeacherSnapshot>,
    schedule: &NoiseSchedule,
    draw: &StepDraw,
    anchor: Option<&RegAnchor>,
    cfg: &RunConfig,
    task: usize,
    step: u64,
) -> Result<LossRow> {
    let method = cfg.method;
    let mut tape = Tape::new();
    let mv = model.register(&mut tape);

    let (base_cur, pred_cur, xt_cur) = noise_loss_parts_on_tape(
        &mut tape, model, &mv, schedule, &draw.x0_cur, &draw.t, &draw.eps_cur, &draw.y_cur_in,
    )?;
    let mut base = base_cur;
    let mut pred_rep = None;
    if let Some(rep) = &draw.replay {
        if matches!(method, Method::Er | Method::Ccd) {
            let (base_rep, pr, _) = noise_loss_parts_on_tape(
                &mut tape, model, &mv, schedule, &rep.x0, &draw.t, &rep.eps, &rep.y_in,
            )?;
            base = tape.add(base, base_rep)?;
            pred_rep = Some(pr);
        }
    }

    let mut head_ce = head_ce_on_tape(&mut tape, model, &mv, &draw.x0_cur, &draw.y_cur)?;
    if let Some(rep) = &draw.replay {
        if matches!(method, Method::Er | Method::Ccd) {
            let ce_rep = head_ce_on_tape(&mut tape, model, &mv, &rep.x0, &rep.y)?;
            head_ce = tape.add(head_ce, ce_rep)?;
        }
    }

    // consistency terms exist only for ccd with a teacher and nonzero weight
    let weights =
        if method == Method::Ccd { cfg.ccd } else { CcdWeights::zeros() };
    let (mut ikc, mut ukc, mut lkc) = (None, None, None);
    if method == Method::Ccd {
        if let (Some(teacher), Some(rep)) = (teacher, &draw.replay) {
            let tm = teacher.model();
            if weights.kappa != 0.0 || weights.lambda != 0.0 {
                let x_hat_t = forward_diffuse(schedule, &rep.x0, &draw.t, &rep.eps)?;
                if weights.kappa != 0.0 {
                    let teacher_eps = tm.predict_noise(&x_hat_t, &draw.t, &rep.y_in)?;
                    let phi = fisher_preconditioner(
                        tm, &x_hat_t, &rep.y_in, &draw.t, cfg.ikc.diag_only, cfg.ikc.damping,
                    )?;
                    let student_side = match (cfg.ikc.student_on_replay, pred_rep) {
                        (true, Some(pr)) => pr,
                        _ => pred_cur,
                    };
                    ikc = Some(ikc_loss_on_tape(&mut tape, student_side, &teacher_eps, &phi)?);
                }
                if weights.lambda != 0.0 {
                    // both means are unconditional: the label channel is
                    // nulled on each side
                    let y_null = vec![model.arch().null_label(); cfg.batch_size];
                    let mu_teacher = reverse_mean(tm, schedule, &x_hat_t, &draw.t, &y_null)?;
                    let xt_var = tape.constant(xt_cur.clone());
                    let (pred_uncond, _) =
                        model.forward_on_tape(&mut tape, &mv, xt_var, &draw.t, &y_null)?;
                    let mu_student =
                        reverse_mean_on_tape(&mut tape, schedule, &xt_cur, &draw.t, pred_uncond)?;
                    ukc = Some(ukc_loss_on_tape(
                        &mut tape,
                        schedule,
                        mu_student,
                        &mu_teacher,
                        &draw.t,
                        cfg.ukc_weight_clamp,
                    )?);
                }
            }
            if weights.eta != 0.0 {
                let teacher_probs = tm.label_probs(&rep.x0)?;
                lkc = Some(lkc_loss_on_tape(
                    &mut tape,
                    model,
                    &mv,
                    &draw.x0_cur,
                    &teacher_probs,
                    &draw.t,
                    schedule,
                    cfg.lkc_weight_clamp,
                )?);
            }
        }
    }

    if let Some(f) = &cfg.fault_injection {
        if f.kind == FaultKind::NanLoss && f.task == task && f.step == step {
            let nan = tape.constant(Tensor::scalar(f64::NAN));
            base = tape.add(base, nan)?;
        }
    }

    let (ikc_v, ukc_v, lkc_v) = (
        ikc.map_or(0.0, |v| tape.value(v).item()),
        ukc.map_or(0.0, |v| tape.value(v).item()),
        lkc.map_or(0.0, |v| tape.value(v).item()),
    );
    let total = total_loss_on_tape(&mut tape, base, ikc, ukc, lkc, &weights)?;
    if !tape.value(head_ce).all_finite() {
        return Err(Error::NonFiniteLoss { term: "head_ce" });
    }
    let objective = tape.add(total, head_ce)?;

    let total_v = tape.value(total).item();
    let base_v = tape.value(base).item();
    let ce_v = tape.value(head_ce).item();

    let grads = tape.backward(objective)?;
    let mut g = flat_grad(&grads, &mv, model);
    let mut theta = model.flatten();

    // analytic penalty gradients for the parameter-anchored baselines
    let mut reg_v = 0.0;
    match method {
        Method::L2 if cfg.l2_c > 0.0 => {
            if let Some(a) = anchor {
                let c = cfg.l2_c;
                for i in 0..theta.len() {
                    let dp = theta[i] - a.params[i];
                    reg_v += c * dp * dp;
                    g[i] += 2.0 * c * dp;
                }
            }
        }
        Method::Ewc if cfg.ewc_c > 0.0 => {
            if let Some(a) = anchor {
                let fisher = a.fisher.as_ref().expect("ewc anchor carries fisher");
                let c = cfg.ewc_c;
                for i in 0..theta.len() {
                    let dp = theta[i] - a.params[i];
                    reg_v += c * fisher[i] * dp * dp;
                    g[i] += 2.0 * c * fisher[i] * dp;
                }
            }
        }
        Method::Agem => {
            if let Some(rep) = &draw.replay {
                let g_ref = reference_grad(model, schedule, rep, &draw.t)?;
                let dot: f64 = g.iter().zip(&g_ref).map(|(a, b)| a * b).sum();
                if dot < 0.0 {
                    let norm_sq: f64 = g_ref.iter().map(|v| v * v).sum();
                    if norm_sq > 0.0 {
                        let coef = dot / norm_sq;
                        for (gi, ri) in g.iter_mut().zip(&g_ref) {
                            *gi -= coef * ri;
                        }
                    }
                }
            }
        }
        _ => {}
    }
    if !reg_v.is_finite() {
        return Err(Error::NonFiniteLoss { term: "reg" });
    }

    opt.step(&mut theta, &g)?;
    model.set_flat(&theta)?;

    Ok(LossRow {
        task,
        step,
        total: total_v,
        base: base_v,
        ikc: ikc_v,
        ukc: ukc_v,
        lkc: lkc_v,
        reg: reg_v,
        head_ce: ce_v,
    })
}

/// Replay-batch gradient (same composite: noise loss + head loss) used as
/// the projection reference.
fn reference_grad(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    rep: &ReplayDraw,
    t: &[usize],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mv = model.register(&mut tape);
    let (loss, _, _) =
        noise_loss_parts_on_tape(&mut tape, model, &mv, schedule, &rep.x0, t, &rep.eps, &rep.y_in)?;
    let ce = head_ce_on_tape(&mut tape, model, &mv, &rep.x0, &rep.y)?;
    let obj = tape.add(loss, ce)?;
    let grads = tape.backward(obj)?;
    Ok(flat_grad(&grads, &mv, model))
}

/// Diagonal empirical Fisher: mean squared noise-loss gradient over
/// minibatches drawn from the just-finished task.
fn ewc_fisher(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    x_train: &Tensor,
    y_train: &[usize],
    cfg: &RunConfig,
    null_label: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let (n, d) = x_train.as_2d();
    let b = cfg.batch_size;
    let mut fisher = vec![0.0; model.param_count()];
    for _ in 0..EWC_FISHER_BATCHES {
        let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n)).collect();
        let (x0, y) = gather_batch(x_train, y_train, &idx);
        let t: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=cfg.schedule.t_max)).collect();
        let eps = normal_tensor(rng, b, d);
        let y_in = apply_label_dropout(&y, null_label, cfg.label_dropout, rng);
        let mut tape = Tape::new();
        let mv = model.register(&mut tape);
        let (loss, _, _) =
            noise_loss_parts_on_tape(&mut tape, model, &mv, schedule, &x0, &t, &eps, &y_in)?;
        let grads = tape.backward(loss)?;
        let g = flat_grad(&grads, &mv, model);
        for (f, gi) in fisher.iter_mut().zip(&g) {
            *f += gi * gi;
        }
    }
    for f in fisher.iter_mut() {
        *f /= EWC_FISHER_BATCHES as f64;
    }
    Ok(fisher)
}

#[allow(clippy::too_many_arguments)]
fn train_task(
    model: &mut Denoiser,
    opt: &mut Adam,
    teacher: Option<&TeacherSnapshot>,
    schedule: &NoiseSchedule,
    x_train: &Tensor,
    y_train: &[usize],
    mut buffer: Option<&mut ReplayBuffer>,
    anchor: Option<&RegAnchor>,
    cfg: &RunConfig,
    task: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TaskOutcome> {
    let (n_train, _) = x_train.as_2d();
    let steps = cfg.steps_for(n_train);
    let mut rows = Vec::with_capacity(steps);
    for step in 0..steps as u64 {
        let draw = draw_step(
            x_train,
            y_train,
            buffer.as_deref_mut(),
            cfg,
            model.arch().null_label(),
            rng,
        )?;
        match train_step(model, opt, teacher, schedule, &draw, anchor, cfg, task, step) {
            Ok(row) => rows.push(row),
            Err(Error::NonFiniteLoss { term }) => {
                return Ok(TaskOutcome {
                    loss_rows: rows,
                    collapse: Some(CollapseInfo { task, step, term: term.to_string() }),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TaskOutcome { loss_rows: rows, collapse: None })
}

/// Balanced class-conditional generation for one evaluated task, embedded
/// and reduced to Gaussian stats.
fn generated_stats(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    stream: &TaskStream,
    embed: &FeatureEmbed,
    eval_task: usize,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GaussianStats> {
    let labels = &stream.tasks()[eval_task].labels;
    let nc = labels.len();
    let mut data = Vec::with_capacity(cfg.n_eval * stream.dim());
    for (ci, &label) in labels.iter().enumerate() {
        let quota = cfg.n_eval / nc + usize::from(ci < cfg.n_eval % nc);
        if quota == 0 {
            continue;
        }
        let x = ancestral_sample(model, schedule, quota, label, rng)?;
        data.extend_from_slice(x.data());
    }
    let gen = Tensor::matrix(data.len() / stream.dim(), stream.dim(), data)?;
    fit_gaussian(&embed.apply(&gen)?)
}

/// Fidelity row after task `k`: `d[k][i]` for every `i <= k`. Reference
/// stats are cached by task index; generation randomness is addressed by
/// `(k, i)` so a row is reproducible in isolation.
#[allow(clippy::too_many_arguments)]
fn fidelity_row(
    model: &Denoiser,
    stream: &TaskStream,
    schedule: &NoiseSchedule,
    embed: &FeatureEmbed,
    cfg: &RunConfig,
    k: usize,
    ref_stats: &mut [Option<GaussianStats>],
) -> Result<Vec<f64>> {
    let k_total = stream.task_count();
    let mut row = Vec::with_capacity(k + 1);
    for (i, slot) in ref_stats.iter_mut().enumerate().take(k + 1) {
        if slot.is_none() {
            let (x_test, _) = stream.sample_task(i, Split::Test, cfg.n_eval, 0)?;
            *slot = Some(fit_gaussian(&embed.apply(&x_test)?)?);
        }
        let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        eval_rng.set_stream(STREAM_EVAL_BASE + (k * k_total + i) as u64);
        let gen = generated_stats(model, schedule, stream, embed, i, cfg, &mut eval_rng)?;
        row.push(frechet_distance(&gen, slot.as_ref().expect("filled above"))?);
    }
    Ok(row)
}

/// Recompute the fidelity row a run would have produced after its
/// `tasks_done`-th task, from a standalone model (e.g. a loaded checkpoint).
pub fn evaluate_after_task(
    model: &Denoiser,
    cfg: &RunConfig,
    tasks_done: usize,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if tasks_done == 0 || tasks_done > cfg.dataset.tasks {
        return Err(Error::invalid(format!(
            "tasks_done {} outside 1..={}",
            tasks_done, cfg.dataset.tasks
        )));
    }
    let stream = make_stream(
        cfg.dataset.kind,
        cfg.dataset.tasks,
        cfg.dataset.classes_per_task,
        cfg.dataset_seed(),
    )?;
    let want = cfg.model.arch(stream.dim(), stream.label_count());
    if *model.arch() != want {
        return Err(Error::invalid(format!(
            "model architecture {:?} disagrees with config {:?}",
            model.arch(),
            want
        )));
    }
    let schedule = NoiseSchedule::build(
        cfg.schedule.kind,
        cfg.schedule.t_max,
        cfg.schedule.beta_min,
        cfg.schedule.beta_max,
    )?;
    let embed = FeatureEmbed::new(cfg.embed.mode, stream.dim(), cfg.embed.seed)?;
    let mut ref_stats = vec![None; stream.task_count()];
    fidelity_row(model, &stream, &schedule, &embed, cfg, tasks_done - 1, &mut ref_stats)
}

pub fn run_continual(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunRecord> {
    cfg.validate()?;
    let stream = make_stream(
        cfg.dataset.kind,
        cfg.dataset.tasks,
        cfg.dataset.classes_per_task,
        cfg.dataset_seed(),
    )?;
    let schedule = NoiseSchedule::build(
        cfg.schedule.kind,
        cfg.schedule.t_max,
        cfg.schedule.beta_min,
        cfg.schedule.beta_max,
    )?;
    let arch = cfg.model.arch(stream.dim(), stream.label_count());
    let mut model = Denoiser::init(arch, cfg.seed)?;
    let mut opt = Adam::new(cfg.lr, model.param_count())?;
    let mut buffer = if cfg.method.uses_replay() {
        Some(ReplayBuffer::new(cfg.buffer_capacity, cfg.seed)?)
    } else {
        None
    };
    let embed = FeatureEmbed::new(cfg.embed.mode, stream.dim(), cfg.embed.seed)?;

    let k_total = stream.task_count();
    let mut record = RunRecord {
        config: cfg.clone(),
        fidelity: FidelityMatrix::new(k_total)?,
        mf: None,
        imf: None,
        loss_log: Vec::new(),
        task_seconds: Vec::new(),
        collapse: None,
        fd_flags: Vec::new(),
        teacher_hashes: Vec::new(),
        task_end_hashes: Vec::new(),
        final_params_hash: String::new(),
    };
    let mut teacher: Option<TeacherSnapshot> = None;
    let mut anchor: Option<RegAnchor> = None;
    let mut ref_stats: Vec<Option<GaussianStats>> = vec![None; k_total];

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    for k in 0..k_total {
        let started = Instant::now();
        if k > 0 {
            // frozen before any task-k update, for every method
            let snap = model.freeze();
            record.teacher_hashes.push(Some(snap.hash().to_string()));
            teacher = Some(snap);
            if cfg.reinit_head_per_task {
                model.reinit_head(cfg.seed.wrapping_add(k as u64));
            }
        } else {
            record.teacher_hashes.push(None);
        }

        let spec = &stream.tasks()[k];
        let (x_train, y_train) = stream.sample_task(k, Split::Train, spec.train_count, 0)?;
        let mut task_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        task_rng.set_stream(STREAM_TASK_BASE + k as u64);

        let outcome = train_task(
            &mut model,
            &mut opt,
            teacher.as_ref(),
            &schedule,
            &x_train,
            &y_train,
            buffer.as_mut(),
            anchor.as_ref(),
            cfg,
            k,
            &mut task_rng,
        )?;
        record.loss_log.extend(outcome.loss_rows);
        if let Some(collapse) = outcome.collapse {
            record.collapse = Some(collapse);
            record.task_seconds.push(started.elapsed().as_secs_f64());
            break;
        }

        // end-of-task state feeding the NEXT task's regularizers and replay
        match cfg.method {
            Method::L2 => anchor = Some(RegAnchor { params: model.flatten(), fisher: None }),
            Method::Ewc => {
                let fisher = ewc_fisher(
                    &model,
                    &schedule,
                    &x_train,
                    &y_train,
                    cfg,
                    model.arch().null_label(),
                    &mut task_rng,
                )?;
                anchor = Some(RegAnchor { params: model.flatten(), fisher: Some(fisher) });
            }
            _ => {}
        }
        if let Some(buf) = buffer.as_mut() {
            buf.update_from_task(&x_train, &y_train)?;
        }
        record.task_end_hashes.push(model.param_hash());

        if let Some(dir) = out_dir {
            model.save_checkpoint(&dir.join(format!("ckpt_task{}.bin", k + 1)), cfg.seed, k + 1)?;
            if let Some(buf) = &buffer {
                std::fs::write(dir.join(format!("buffer_task{}.json", k + 1)), buf.dump_json())?;
            }
        }

        let row = fidelity_row(&model, &stream, &schedule, &embed, cfg, k, &mut ref_stats)?;
        // order-of-magnitude fidelity blow-up flag against the first entry
        if let Some(d11) = record.fidelity.get(0, 0).or(row.first().copied()) {
            if d11 > 0.0 {
                let limit = FD_COLLAPSE_FACTOR * d11;
                for (i, &fd) in row.iter().enumerate() {
                    if fd > limit && !(k == 0 && i == 0) {
                        record.fd_flags.push(FdFlag { after_task: k, eval_task: i, fd, limit });
                    }
                }
            }
        }
        record.fidelity.push_row(row)?;
        record.task_seconds.push(started.elapsed().as_secs_f64());
    }

    record.mf = record.fidelity.mf().ok();
    record.imf = record.fidelity.imf().ok();
    record.final_params_hash = model.param_hash();
    if let Some(dir) = out_dir {
        record.write_artifacts(dir)?;
    }
    Ok(record)
}
