//! Job implementations. Each job returns its output files as bytes; the
//! caller writes them and the manifest.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use ctm_core::config::{RunConfig, TeacherKind};
use ctm_core::diffusion::{karras_grid, Schedule};
use ctm_core::distill::{init_student, train_student, Distance, StudentModel};
use ctm_core::eval::{data_samples, energy_distance, labelled_reference, tradeoff_report, TradeoffRow, TradeoffSpec};
use ctm_core::guidance::{
    default_window, guided_sample, intensity_feature, zt_optimize, GuidanceConfig, GuidanceTarget, TargetShape,
};
use ctm_core::netcore::Checkpoint;
use ctm_core::sampler::{preservation_distance, sample, sample_batch, sample_from, shared_noises, SamplerConfig};
use ctm_core::solver::heun_solve;
use ctm_core::teacher::{train_teacher, ConditionedMixture, Denoiser, NeuralDenoiser, TeacherModel};
use ctm_core::{par, rng, Cond};

use crate::svg::{line_chart, Series};
use crate::{validation, GuideArgs, Job, SampleArgs};

#[derive(Debug, Clone, Default)]
pub struct JobOutput {
    pub files: Vec<(String, Vec<u8>)>,
    pub failure: Option<String>,
}

impl JobOutput {
    fn add(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), bytes.into()));
    }

    fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.add(name, serde_json::to_string_pretty(value)? + "\n");
        Ok(())
    }
}

pub fn run_job(job: &Job, cfg: &RunConfig) -> Result<JobOutput> {
    match job {
        Job::TrainTeacher => cmd_train_teacher(cfg),
        Job::Distill(a) => cmd_distill(cfg, a.teacher.as_deref()),
        Job::Sample(a) => cmd_sample(cfg, a),
        Job::Eval(a) => cmd_eval(cfg, &a.student, a.teacher.as_deref()),
        Job::Guide(a) => cmd_guide(cfg, a),
        Job::AblateDistance(a) => cmd_ablate(cfg, a.teacher.as_deref()),
    }
}

pub fn load_teacher(cfg: &RunConfig, mixture: &ConditionedMixture, path: Option<&Path>) -> Result<TeacherModel> {
    match cfg.teacher.kind {
        TeacherKind::Analytic => Ok(TeacherModel::Analytic(mixture.clone())),
        TeacherKind::Neural => {
            let path = path.ok_or_else(|| validation("teacher.kind = neural needs --teacher <checkpoint>"))?;
            let ck = Checkpoint::load(path).with_context(|| format!("cannot load teacher checkpoint {}", path.display()))?;
            let (net, schedule) = NeuralDenoiser::from_checkpoint(&ck)
                .with_context(|| format!("bad teacher checkpoint {}", path.display()))?;
            if net.data_dim() != mixture.dim() {
                return Err(validation(format!(
                    "teacher checkpoint has dimension {}, config data has {}",
                    net.data_dim(),
                    mixture.dim()
                )));
            }
            if schedule != cfg.schedule {
                log::warn!("teacher checkpoint schedule differs from the config; using the checkpoint's");
            }
            Ok(TeacherModel::Neural(net, schedule))
        }
    }
}

pub fn load_student(path: &Path, mixture: &ConditionedMixture) -> Result<StudentModel> {
    let ck = Checkpoint::load(path).with_context(|| format!("cannot load student checkpoint {}", path.display()))?;
    let s = StudentModel::from_checkpoint(&ck).with_context(|| format!("bad student checkpoint {}", path.display()))?;
    if s.data_dim() != mixture.dim() || s.n_labels() != mixture.n_labels() {
        return Err(validation(format!(
            "student checkpoint ({} dims, {} labels) does not match the config data ({} dims, {} labels)",
            s.data_dim(),
            s.n_labels(),
            mixture.dim(),
            mixture.n_labels()
        )));
    }
    Ok(s)
}

/// Mean squared error per coordinate between two denoisers on probes
/// `x0 + t eps` over a Karras grid of times, labels cycling through all
/// conditions including null.
pub fn denoiser_mse(
    a: &dyn Denoiser,
    b: &dyn Denoiser,
    mixture: &ConditionedMixture,
    schedule: &Schedule,
    n_times: usize,
    per_time: usize,
    seed: u64,
) -> Result<f64> {
    let grid = karras_grid(schedule, n_times)?;
    let n = n_times * per_time;
    let conds = mixture.n_labels() + 1;
    let errs = par::try_map_range(n, |i| -> ctm_core::Result<f64> {
        let mut r = rng::child(seed, &[8, i as u64]);
        let t = grid.t(i / per_time);
        let cond = if i % conds == mixture.n_labels() {
            Cond::Null
        } else {
            Cond::Label(i % conds)
        };
        let x0 = mixture.sample_cond(&mut r, cond);
        let z: Vec<f64> = x0.iter().map(|v| v + t * rng::normal(&mut r)).collect();
        let da = a.denoise(&z, t, cond)?;
        let db = b.denoise(&z, t, cond)?;
        Ok(da.iter().zip(&db).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / z.len() as f64)
    })?;
    Ok(errs.iter().sum::<f64>() / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherEval {
    pub probes: usize,
    pub mse_to_analytic: f64,
    pub sigma_data: f64,
    /// `mse_to_analytic / sigma_data^2`.
    pub relative_mse: f64,
}

fn cmd_train_teacher(cfg: &RunConfig) -> Result<JobOutput> {
    if cfg.teacher.kind == TeacherKind::Analytic {
        return Err(validation("teacher.kind = analytic has nothing to train"));
    }
    let mixture = cfg.mixture()?;
    let (teacher, log) = train_teacher(&mixture, &cfg.schedule, &cfg.teacher.train, cfg.seed)?;
    let mut out = JobOutput::default();
    out.add("teacher.json", teacher.to_checkpoint(&cfg.schedule).to_json()?);
    let mut csv = String::from("iter,loss,grad_norm\n");
    for r in &log {
        let _ = writeln!(csv, "{},{},{}", r.iter, r.loss, r.grad_norm);
    }
    out.add("teacher_log.csv", csv);
    let (n_times, per_time) = (20, 100);
    let mse = denoiser_mse(&teacher, &mixture, &mixture, &cfg.schedule, n_times, per_time, cfg.seed)?;
    let sd = cfg.schedule.sigma_data;
    out.add_json(
        "teacher_eval.json",
        &TeacherEval {
            probes: n_times * per_time,
            mse_to_analytic: mse,
            sigma_data: sd,
            relative_mse: mse / (sd * sd),
        },
    )?;
    Ok(out)
}

fn cmd_distill(cfg: &RunConfig, teacher_path: Option<&Path>) -> Result<JobOutput> {
    let mixture = cfg.mixture()?;
    let teacher = load_teacher(cfg, &mixture, teacher_path)?;
    let student = init_student(&teacher, &mixture, &cfg.schedule, &cfg.distill, cfg.teacher.train.embed_dim, cfg.seed)?;
    let run = train_student(student, &teacher, &mixture, &cfg.distill, cfg.seed)?;
    let mut out = JobOutput::default();
    out.add("student.json", run.student.to_checkpoint().to_json()?);
    let mut log = String::new();
    for row in &run.log {
        log.push_str(&serde_json::to_string(row)?);
        log.push('\n');
    }
    out.add("distill_log.jsonl", log);
    if let Some(d) = &run.first_draws {
        out.add_json("first_draws.json", d)?;
    }
    out.failure = run.aborted;
    Ok(out)
}

fn parse_label(s: &str, n_labels: usize) -> Result<Cond> {
    match Cond::parse(s) {
        Some(Cond::Label(l)) if l >= n_labels => Err(validation(format!("--label {l} out of range (0..{n_labels})"))),
        Some(c) => Ok(c),
        None => Err(validation(format!("--label expects an index or `null`, got `{s}`"))),
    }
}

pub const SAMPLE_CSV_PREFIX: &str = "seed,chain,label,omega,nu,gamma,steps";

fn cmd_sample(cfg: &RunConfig, a: &SampleArgs) -> Result<JobOutput> {
    let mixture = cfg.mixture()?;
    let student = load_student(&a.student, &mixture)?;
    let mut sc = cfg.sample.sampler.clone();
    if let Some(v) = a.steps {
        sc.steps = v;
    }
    if let Some(v) = a.gamma {
        sc.gamma = v;
    }
    if let Some(v) = a.nu {
        sc.nu = v;
    }
    if let Some(v) = a.omega {
        sc.omega = v;
    }
    if let Some(l) = &a.label {
        sc.cond = parse_label(l, mixture.n_labels())?;
    }
    sc.validate().map_err(|e| validation(e.to_string()))?;
    let count = a.count.unwrap_or(cfg.sample.count);
    let xs = sample_batch(&student, &sc, count)?;
    let mut csv = String::from(SAMPLE_CSV_PREFIX);
    for i in 0..mixture.dim() {
        let _ = write!(csv, ",x{i}");
    }
    csv.push('\n');
    for (chain, x) in xs.iter().enumerate() {
        let _ = write!(csv, "{},{chain},{},{},{},{},{}", sc.seed, sc.cond, sc.omega, sc.nu, sc.gamma, sc.steps);
        for v in x {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    let mut out = JobOutput::default();
    out.add("samples.csv", csv);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDistance {
    pub steps: usize,
    pub energy_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub samples: usize,
    /// Energy distance between two independent held-out data sets.
    pub data_energy_distance: f64,
    pub teacher_kind: String,
    pub teacher_heun_steps: usize,
    /// Unconditional teacher samples vs held-out data.
    pub teacher_energy_distance: f64,
    /// Unconditional student samples vs held-out data, per step count.
    pub student_energy_distance: Vec<StepDistance>,
    pub preservation_steps: (usize, usize),
    /// Mean L2 between matched samples of the two step counts, shared noises.
    pub preservation_gamma0: f64,
    pub preservation_gamma1: f64,
}

/// Unconditional teacher samples: Heun over a `steps`-interval Karras grid
/// from the given initial states.
pub fn teacher_samples(teacher: &TeacherModel, schedule: &Schedule, steps: usize, noises: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let grid = karras_grid(schedule, steps + 1)?;
    let out = par::map_slice(noises, |_, z| heun_solve(teacher, z, Cond::Null, &grid, 0, grid.last(), None));
    Ok(out.into_iter().collect::<ctm_core::Result<_>>()?)
}

fn cmd_eval(cfg: &RunConfig, student_path: &Path, teacher_path: Option<&Path>) -> Result<JobOutput> {
    let mixture = cfg.mixture()?;
    let student = load_student(student_path, &mixture)?;
    let teacher = load_teacher(cfg, &mixture, teacher_path)?;
    let e = &cfg.eval;
    let n = e.samples;
    let seed = cfg.seed;
    let omega = e.guidance.first().map(|g| g.0).unwrap_or(cfg.sample.sampler.omega);

    let reference = labelled_reference(&mixture, n, seed);
    let rows = tradeoff_report(
        &student,
        &mixture,
        &reference,
        &TradeoffSpec {
            steps: e.steps.clone(),
            guidance: e.guidance.clone(),
            gamma: e.gamma,
            samples: n,
            seed,
            record_timing: cfg.record_timing,
        },
    )?;
    let mut csv = format!("{}\n", TradeoffRow::CSV_HEADER);
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }

    let held_out = data_samples(&mixture, Cond::Null, n, seed);
    let second = data_samples(&mixture, Cond::Null, n, seed.wrapping_add(1));
    let noises = shared_noises(&student, seed, n);
    let t_samples = teacher_samples(&teacher, &student.schedule, e.teacher_steps, &noises)?;
    let base = SamplerConfig {
        steps: 1,
        gamma: e.gamma,
        nu: 1.0,
        omega,
        cond: Cond::Null,
        seed,
    };
    let mut student_ed = Vec::new();
    for &steps in &e.steps {
        let xs = sample_from(&student, &SamplerConfig { steps, ..base.clone() }, &noises)?;
        student_ed.push(StepDistance {
            steps,
            energy_distance: energy_distance(&xs, &held_out)?,
        });
    }
    let max_steps = e.steps.iter().copied().max().unwrap_or(1);
    let summary = EvalSummary {
        samples: n,
        data_energy_distance: energy_distance(&second, &held_out)?,
        teacher_kind: match teacher {
            TeacherModel::Analytic(_) => "analytic".into(),
            TeacherModel::Neural(..) => "neural".into(),
        },
        teacher_heun_steps: e.teacher_steps,
        teacher_energy_distance: energy_distance(&t_samples, &held_out)?,
        student_energy_distance: student_ed,
        preservation_steps: (1, max_steps),
        preservation_gamma0: preservation_distance(&student, 1, max_steps, 0.0, &noises, &base)?,
        preservation_gamma1: preservation_distance(&student, 1, max_steps, 1.0, &noises, &base)?,
    };
    let mut out = JobOutput::default();
    out.add("tradeoff.csv", csv);
    out.add_json("eval_summary.json", &summary)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuideMethod {
    LossGuidance,
    ZtOpt,
    None,
}

impl GuideMethod {
    pub const ALL: [GuideMethod; 3] = [GuideMethod::None, GuideMethod::LossGuidance, GuideMethod::ZtOpt];

    pub fn name(self) -> &'static str {
        match self {
            GuideMethod::LossGuidance => "loss-guidance",
            GuideMethod::ZtOpt => "zt-opt",
            GuideMethod::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Mean intensity level of data drawn under `cond`, in dB.
pub fn mean_data_intensity(mixture: &ConditionedMixture, cond: Cond, window: usize, seed: u64) -> Result<f64> {
    let xs = data_samples(mixture, cond, 256, seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for x in &xs {
        let f = intensity_feature(x, window)?;
        total += f.iter().sum::<f64>();
        count += f.len();
    }
    Ok(total / count as f64)
}

/// One generated sample of a guidance experiment.
#[derive(Debug, Clone)]
pub struct GuideResult {
    pub seed: usize,
    pub shape: TargetShape,
    pub method: GuideMethod,
    pub sample: Vec<f64>,
    pub mse: f64,
}

pub fn run_guidance(
    student: &StudentModel,
    gcfg: &GuidanceConfig,
    targets: &[(TargetShape, GuidanceTarget)],
    methods: &[GuideMethod],
    seeds: usize,
) -> Result<Vec<GuideResult>> {
    let jobs: Vec<(usize, usize, GuideMethod)> = (0..targets.len())
        .flat_map(|k| methods.iter().flat_map(move |&m| (0..seeds).map(move |s| (k, s, m))))
        .collect();
    let results = par::map_slice(&jobs, |_, &(k, s, m)| -> ctm_core::Result<GuideResult> {
        let (shape, target) = &targets[k];
        let chain = s as u64;
        let x = match m {
            GuideMethod::None => sample(student, &gcfg.sampler, chain, None)?.sample,
            GuideMethod::LossGuidance => guided_sample(student, target, gcfg, chain, None)?.0.sample,
            GuideMethod::ZtOpt => zt_optimize(student, target, gcfg, chain, None)?.1.sample,
        };
        Ok(GuideResult {
            seed: s,
            shape: *shape,
            method: m,
            mse: target.mse(&x)?,
            sample: x,
        })
    });
    Ok(results.into_iter().collect::<ctm_core::Result<_>>()?)
}

fn cmd_guide(cfg: &RunConfig, a: &GuideArgs) -> Result<JobOutput> {
    let mixture = cfg.mixture()?;
    let student = load_student(&a.student, &mixture)?;
    let g = &cfg.guide;
    let d = mixture.dim();
    let window = g.window.unwrap_or_else(|| default_window(d));
    let cond = g.guidance.sampler.cond;
    let base_db = match g.base_db {
        Some(v) => v,
        None => mean_data_intensity(&mixture, cond, window, cfg.seed)?,
    };
    let shapes: Vec<TargetShape> = match &a.target_shape {
        Some(s) => vec![TargetShape::parse(s).ok_or_else(|| validation(format!("unknown target shape `{s}`")))?],
        None => TargetShape::ALL.to_vec(),
    };
    let methods: Vec<GuideMethod> = match &a.method {
        Some(s) => vec![GuideMethod::parse(s).ok_or_else(|| validation(format!("unknown method `{s}`")))?],
        None => GuideMethod::ALL.to_vec(),
    };
    let seeds = a.seeds.unwrap_or(g.seeds);
    if seeds == 0 {
        return Err(validation("--seeds must be positive"));
    }
    let targets = shapes
        .iter()
        .map(|&s| Ok((s, GuidanceTarget::from_shape(s, d, window, base_db, g.amplitude_db)?)))
        .collect::<Result<Vec<_>>>()?;
    let results = run_guidance(&student, &g.guidance, &targets, &methods, seeds)?;

    let sigma_min = student.schedule.sigma_min;
    let mut csv = String::from("seed,shape,method,mse,log_density\n");
    for r in &results {
        let ld = mixture.log_density(&r.sample, sigma_min, cond)?;
        let _ = writeln!(csv, "{},{},{},{},{}", r.seed, r.shape.name(), r.method.name(), r.mse, ld);
    }
    let reference = data_samples(&mixture, cond, seeds * shapes.len(), cfg.seed);
    let mut summary = String::from("shape,method,samples,mean_mse,energy_distance\n");
    for &m in &methods {
        let mut groups: Vec<(String, Vec<&GuideResult>)> = shapes
            .iter()
            .map(|s| (s.name().to_string(), results.iter().filter(|r| r.method == m && r.shape == *s).collect()))
            .collect();
        groups.push(("all".into(), results.iter().filter(|r| r.method == m).collect()));
        for (name, rs) in groups {
            let xs: Vec<Vec<f64>> = rs.iter().map(|r| r.sample.clone()).collect();
            let mean = rs.iter().map(|r| r.mse).sum::<f64>() / rs.len() as f64;
            let _ = writeln!(
                summary,
                "{name},{},{},{mean},{}",
                m.name(),
                rs.len(),
                energy_distance(&xs, &reference)?
            );
        }
    }
    let mut out = JobOutput::default();
    out.add("guide.csv", csv);
    out.add("guide_summary.csv", summary);
    if a.plot {
        for (shape, target) in &targets {
            let mut curves = vec![(String::from("target"), target.y.clone(), true)];
            for &m in &methods {
                let rs: Vec<&GuideResult> = results.iter().filter(|r| r.method == m && r.shape == *shape).collect();
                let mut mean = vec![0.0; target.y.len()];
                for r in &rs {
                    let f = intensity_feature(&r.sample, window)?;
                    mean.iter_mut().zip(&f).for_each(|(a, b)| *a += b / rs.len() as f64);
                }
                curves.push((m.name().to_string(), mean, false));
            }
            let series: Vec<Series> = curves
                .iter()
                .map(|(n, y, dashed)| Series {
                    name: n,
                    y,
                    dashed: *dashed,
                })
                .collect();
            let title = format!("target intensity: {} (mean over {seeds} seeds)", shape.name());
            out.add(&format!("guide_{}.svg", shape.name()), line_chart(&title, "dB", &series));
        }
    }
    Ok(out)
}

pub const ABLATION_CSV_HEADER: &str = "distance,iterations,energy_distance,baseline_energy_distance,improvement,aborted";

fn cmd_ablate(cfg: &RunConfig, teacher_path: Option<&Path>) -> Result<JobOutput> {
    if cfg.teacher.kind != TeacherKind::Neural {
        return Err(validation("ablate-distance needs teacher.kind = neural (the feature distance uses its hidden layers)"));
    }
    let mixture = cfg.mixture()?;
    let teacher = load_teacher(cfg, &mixture, teacher_path)?;
    let n = cfg.ablate.samples;
    let held_out = data_samples(&mixture, Cond::Null, n, cfg.seed);
    let initial = init_student(&teacher, &mixture, &cfg.schedule, &cfg.distill, cfg.teacher.train.embed_dim, cfg.seed)?;
    let one_step = |s: &StudentModel| -> Result<f64> {
        let sc = SamplerConfig {
            steps: 1,
            gamma: 0.0,
            nu: 1.0,
            omega: cfg.sample.sampler.omega,
            cond: Cond::Null,
            seed: cfg.seed,
        };
        Ok(energy_distance(&sample_batch(s, &sc, n)?, &held_out)?)
    };
    let baseline = one_step(&initial)?;
    let mut csv = format!("{ABLATION_CSV_HEADER}\n");
    for d in Distance::ALL {
        let mut dc = cfg.distill.clone();
        dc.distance = d;
        dc.iterations = cfg.ablate.iterations;
        log::info!("ablation: training with {}", d.name());
        let run = train_student(initial.clone(), &teacher, &mixture, &dc, cfg.seed)?;
        let ed = one_step(&run.student)?;
        let _ = writeln!(
            csv,
            "{},{},{ed},{baseline},{},{}",
            d.name(),
            run.log.len(),
            baseline / ed,
            run.aborted.is_some()
        );
    }
    let mut out = JobOutput::default();
    out.add("ablation.csv", csv);
    Ok(out)
}
