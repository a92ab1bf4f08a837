//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Runs the full pipeline through the CLI on the reference configs, so it takes
//! several minutes on one core.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use rand::Rng;

use ctm_cli::commands::{load_student, load_teacher, EvalSummary, TeacherEval};
use ctm_cli::manifest::Manifest;
use ctm_core::config::RunConfig;
use ctm_core::diffusion::{karras_grid, KarrasGrid, Schedule};
use ctm_core::distill::{StudentModel, Which};
use ctm_core::netcore::{CondNet, Embedder, Mlp};
use ctm_core::sampler::{chain_stream, initial_noise, preservation_distance, sample, shared_noises, SamplerConfig};
use ctm_core::solver::{cfg_solve, heun_solve};
use ctm_core::teacher::{Component, ConditionedMixture, Denoiser};
use ctm_core::{rng, Cond};

const REFERENCE: &str = include_str!("../../../configs/reference.ini");
const GUIDANCE: &str = include_str!("../../../configs/guidance.ini");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn run(&mut self, id: usize, name: &str, f: impl FnOnce() -> Result<Outcome>) {
        let start = Instant::now();
        let (pass, detail) = match f() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        if !pass {
            self.failures += 1;
        }
        println!(
            "{} {:>2} {name}: {detail} [{:.1} s]",
            if pass { "PASS" } else { "FAIL" },
            id,
            start.elapsed().as_secs_f64()
        );
    }
}

/// Runs the CLI in-process and returns the run directory.
fn ctm(work: &Path, config_text: &str, name: &str, args: &[&str]) -> Result<PathBuf> {
    let cfg_path = work.join(format!("{name}.ini"));
    std::fs::write(&cfg_path, config_text)?;
    let out = work.join(name);
    let mut argv: Vec<String> = vec!["ctm".into()];
    argv.extend(args.iter().map(|s| s.to_string()));
    argv.extend(["--config".into(), cfg_path.display().to_string(), "--out".into(), out.display().to_string()]);
    let code = ctm_cli::main_with_args(&argv);
    ensure!(code == 0, "`ctm {}` exited with {code}", args.join(" "));
    Ok(out)
}

fn replay(work: &Path, run: &Path, name: &str) -> Result<Vec<String>> {
    let (rec, differing) = ctm_cli::replay(&run.join("manifest.json"), Some(&work.join(name)), work)?;
    ensure!(!rec.manifest.outputs.is_empty(), "no outputs recorded");
    Ok(differing)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn with_overrides(base: &str, section: &str, pairs: &[(&str, &str)]) -> String {
    let mut out = String::new();
    let mut current = String::new();
    for line in base.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            current = trimmed.trim_matches(|c| c == '[' || c == ']').to_string();
        }
        if current == section {
            if let Some((k, _)) = trimmed.split_once('=') {
                if pairs.iter().any(|(key, _)| *key == k.trim()) {
                    continue;
                }
            }
        }
        out.push_str(line);
        out.push('\n');
        if trimmed == format!("[{section}]") {
            for (k, v) in pairs {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
    }
    out
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// Criterion 1.
fn oracle_denoiser(mixture: &ConditionedMixture) -> Result<Outcome> {
    let start = Instant::now();
    let mut r = rng::root(101);
    let mut worst: f64 = 0.0;
    for probe in 0..10u64 {
        let cond = Cond::Label(probe as usize % mixture.n_labels());
        let t = [0.2, 0.5, 1.0][probe as usize % 3];
        let x0 = mixture.sample_cond(&mut r, cond);
        let z: Vec<f64> = x0.iter().map(|v| v + t * rng::normal(&mut r)).collect();
        let exact = mixture.denoise(&z, t, cond)?;
        let mut mr = rng::root(1000 + probe);
        let mut num = vec![0.0; z.len()];
        let mut den = 0.0;
        for _ in 0..1_000_000 {
            let x = mixture.sample_cond(&mut mr, cond);
            let d2: f64 = x.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum();
            let w = (-0.5 * d2 / (t * t)).exp();
            den += w;
            num.iter_mut().zip(&x).for_each(|(a, b)| *a += w * b);
        }
        let err: f64 = exact.iter().zip(&num).map(|(e, n)| (e - n / den).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = exact.iter().map(|e| e * e).sum::<f64>().sqrt();
        worst = worst.max(err / norm);
    }
    let el = secs(start.elapsed());
    outcome(worst < 1e-2 && el < 10.0, format!("max relative error {worst:.2e} (< 1e-2) in {el:.1} s (< 10 s)"))
}

// Criterion 2.
fn solver_order() -> Result<Outcome> {
    let start = Instant::now();
    let (m, v) = (0.4, 0.09);
    let single = ConditionedMixture::new(
        vec![1.0],
        vec![vec![Component {
            weight: 1.0,
            mean: vec![m],
            var: vec![v],
        }]],
    )?;
    let (t, u) = (5.0, 0.1);
    let exact = |z: f64| m + ((v + u * u) / (v + t * t)).sqrt() * (z - m);
    let span = |n: usize| -> Result<KarrasGrid> {
        Ok(karras_grid(
            &Schedule {
                sigma_min: u,
                sigma_max: t,
                ..Schedule::default()
            },
            n + 1,
        )?)
    };
    let err = |n: usize| -> Result<f64> {
        let g = span(n)?;
        let mut worst: f64 = 0.0;
        for z in [-6.0, -1.0, 2.5, 7.0] {
            let got = heun_solve(&single, &[z], Cond::Label(0), &g, 0, n, None)?[0];
            worst = worst.max((got - exact(z)).abs());
        }
        Ok(worst)
    };
    let (e1, e2) = (err(10)?, err(20)?);
    let ratio = e1 / e2;
    let el = secs(start.elapsed());
    outcome(
        (3.2..=4.8).contains(&ratio) && el < 5.0,
        format!("error {e1:.3e} -> {e2:.3e}, ratio {ratio:.3} (in [3.2, 4.8]) in {el:.2} s (< 5 s)"),
    )
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn central<F: Fn(&[f64]) -> f64>(x: &[f64], f: F) -> Vec<f64> {
    let h = 1e-6;
    (0..x.len())
        .map(|i| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

// Criterion 3.
fn gradient_fidelity() -> Result<Outcome> {
    let start = Instant::now();
    let mut r = rng::root(303);
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        // MLP: parameters and input under output and hidden-layer upstreams.
        let mut widths = vec![r.random_range(1..6)];
        for _ in 0..1 + k % 3 {
            widths.push(r.random_range(2..9));
        }
        widths.push(r.random_range(1..5));
        let net = Mlp::random(&widths, &mut r)?;
        let x = rng::normal_vec(&mut r, widths[0]);
        let u = rng::normal_vec(&mut r, *widths.last().unwrap());
        let hv: Vec<Vec<f64>> = widths[1..widths.len() - 1].iter().map(|&w| rng::normal_vec(&mut r, w)).collect();
        let obj = |net: &Mlp, x: &[f64]| -> f64 {
            let t = net.forward_trace(x).unwrap();
            let mut s: f64 = t.output.iter().zip(&u).map(|(a, b)| a * b).sum();
            for (h, w) in t.hidden.iter().zip(&hv) {
                s += h.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            }
            s
        };
        let (gp, gx) = net.backward(&net.forward_trace(&x)?, Some(&u), &hv, true)?;
        let gp = gp.context("parameter gradients")?;
        worst = worst.max(rel_err(&gx, &central(&x, |x| obj(&net, x))));
        let fd_p = central(net.params(), |p| {
            let n = Mlp::from_params(&widths, p.to_vec()).unwrap();
            obj(&n, &x)
        });
        worst = worst.max(rel_err(&gp, &fd_p));

        // Conditioned net: sample input and condition-table rows.
        let dim = 1 + k % 3;
        let labels = 2;
        let cn = CondNet::random(dim, &[6, 5], 4, labels, &mut r)?;
        let z = rng::normal_vec(&mut r, dim);
        let emb = rng::normal_vec(&mut r, 4);
        let up = rng::normal_vec(&mut r, dim);
        let cond = if k % 2 == 0 { Cond::Null } else { Cond::Label(k % labels) };
        let cobj = |cn: &CondNet, z: &[f64]| -> f64 {
            let out = cn.mlp.eval(&cn.input(z, &emb, cond).unwrap()).unwrap();
            out.iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let trace = cn.mlp.forward_trace(&cn.input(&z, &emb, cond)?)?;
        let (g, gz) = cn.backward(&trace, cond, Some(&up), &[], true)?;
        let g = g.context("condnet gradients")?;
        worst = worst.max(rel_err(&gz, &central(&z, |z| cobj(&cn, z))));
        let fd_c = central(&cn.cond.values, |c| {
            let mut n = cn.clone();
            n.cond.values.copy_from_slice(c);
            cobj(&n, &z)
        });
        worst = worst.max(rel_err(&g.cond, &fd_c));
    }
    let el = secs(start.elapsed());
    outcome(
        worst < 1e-4 && el < 30.0,
        format!("max relative error {worst:.2e} (< 1e-4) over 20 MLPs and 20 conditioned nets in {el:.1} s (< 30 s)"),
    )
}

// Criterion 4.
fn jump_boundary(student: &StudentModel) -> Result<Outcome> {
    let mut r = rng::root(404);
    let mut bad = 0;
    for i in 0..1000 {
        let z: Vec<f64> = (0..student.data_dim()).map(|_| 50.0 * rng::normal(&mut r)).collect();
        let t = student.schedule.warp(rng::uniform(&mut r));
        let omega = 6.0 * rng::uniform(&mut r);
        let cond = if i % 5 == 0 { Cond::Null } else { Cond::Label(i % student.n_labels()) };
        let which = if i % 2 == 0 { Which::Online } else { Which::Ema };
        if student.jump(which, &z, cond, omega, t, t)? != z {
            bad += 1;
        }
    }
    outcome(bad == 0, format!("{bad} of 1000 probes differ from z (exact equality required)"))
}

// Criterion 8.
fn nu_exactness(student: &StudentModel, n_labels: usize) -> Result<Outcome> {
    let mut mismatches = 0;
    for chain in 0..50u64 {
        let cond = Cond::Label(chain as usize % n_labels);
        let cfg = SamplerConfig {
            steps: 4,
            gamma: 0.5,
            nu: 1.0,
            omega: 3.5,
            cond,
            seed: 808,
        };
        let got = sample(student, &cfg, chain, None)?.sample;
        // conditional-only replay of the chain
        let grid = karras_grid(&student.schedule, cfg.steps + 1)?;
        let mut r = chain_stream(cfg.seed, chain);
        let mut z = initial_noise(student, &mut r);
        let keep = (1.0 - cfg.gamma * cfg.gamma).sqrt();
        for n in 0..cfg.steps {
            let (t, tn) = (grid.t(n), grid.t(n + 1));
            let tt = (keep * tn).max(student.schedule.sigma_min);
            let j = student.jump(Which::Ema, &z, cond, cfg.omega, t, tt)?;
            z = if n + 1 == cfg.steps {
                j
            } else {
                let eps = rng::normal_vec(&mut r, j.len());
                j.iter().zip(&eps).map(|(a, e)| a + cfg.gamma * tn * e).collect()
            };
        }
        if got != z {
            mismatches += 1;
        }
        let null = SamplerConfig {
            cond: Cond::Null,
            ..cfg.clone()
        };
        let reference = sample(student, &null, chain, None)?.sample;
        for nu in [0.0, 0.5, 2.0, 5.0] {
            if sample(student, &SamplerConfig { nu, ..null.clone() }, chain, None)?.sample != reference {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} mismatches over 50 chains (nu=1 vs conditional-only replay; null label at nu in {{0, 0.5, 1, 2, 5}})"),
    )
}

// Criterion 9.
fn cfg_exactness(teacher: &dyn Denoiser, schedule: &Schedule, n_labels: usize) -> Result<Outcome> {
    let grid = karras_grid(schedule, 40)?;
    let mut r = rng::root(909);
    let mut mismatches = 0;
    for i in 0..40 {
        let t_idx = i % 20;
        let u_idx = t_idx + 1 + i % 19;
        let z: Vec<f64> = (0..teacher.dim()).map(|_| grid.t(t_idx) * rng::normal(&mut r)).collect();
        let cond = Cond::Label(i % n_labels);
        let a = cfg_solve(teacher, &z, cond, 1.0, &grid, t_idx, u_idx, None)?;
        let b = heun_solve(teacher, &z, cond, &grid, t_idx, u_idx, None)?;
        if a != b {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} of 40 spans differ bitwise"))
}

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect())
}

fn main() {
    // The acceptance runs pin their seeds in the configs.
    std::env::remove_var("SEED");
    let work = tempfile::tempdir().expect("temp dir");
    let work = work.path();
    let mut suite = Suite { failures: 0 };
    let total = Instant::now();

    let cfg = RunConfig::parse(REFERENCE, None).expect("reference config");
    let mixture = cfg.mixture().expect("reference mixture");

    suite.run(1, "oracle denoiser", || oracle_denoiser(&mixture));
    suite.run(2, "solver order", solver_order);
    suite.run(3, "gradient fidelity", gradient_fidelity);

    let mut r = rng::root(44);
    let random_student =
        StudentModel::random(2, &[32, 32], 4, Embedder::new(8, 8.0, 44).unwrap(), Schedule::default(), &mut r).unwrap();
    suite.run(4, "jump boundary (untrained student)", || jump_boundary(&random_student));

    let mut teacher_dir = None;
    suite.run(5, "teacher quality", || {
        let start = Instant::now();
        let dir = ctm(work, REFERENCE, "teacher", &["train-teacher"])?;
        let el = secs(start.elapsed());
        let ev: TeacherEval = read_json(&dir.join("teacher_eval.json"))?;
        teacher_dir = Some(dir);
        outcome(
            ev.relative_mse < 0.05 && el <= 300.0,
            format!(
                "MSE to analytic denoiser {:.3e} = {:.4} sigma_data^2 (< 0.05) on {} probes, trained in {el:.0} s (<= 300 s)",
                ev.mse_to_analytic, ev.relative_mse, ev.probes
            ),
        )
    });
    let teacher_ckpt = teacher_dir.as_ref().map(|d| d.join("teacher.json"));

    let mut student_dir = None;
    let mut eval_dir = None;
    suite.run(6, "distillation quality", || {
        let tc = teacher_ckpt.as_ref().context("no teacher checkpoint")?;
        let tc = tc.display().to_string();
        let start = Instant::now();
        let sdir = ctm(work, REFERENCE, "distill", &["distill", "--teacher", &tc])?;
        let sc = sdir.join("student.json").display().to_string();
        let edir = ctm(work, REFERENCE, "eval", &["eval", "--teacher", &tc, "--student", &sc])?;
        let el = secs(start.elapsed());
        let s: EvalSummary = read_json(&edir.join("eval_summary.json"))?;
        student_dir = Some(sdir);
        eval_dir = Some(edir);
        let ed = |k: usize| s.student_energy_distance.iter().find(|r| r.steps == k).map(|r| r.energy_distance);
        let (one, sixteen) = (ed(1).context("no 1-step row")?, ed(16).context("no 16-step row")?);
        let bound = 2.0 * s.teacher_energy_distance;
        outcome(
            one <= bound && sixteen <= one && el <= 600.0,
            format!(
                "1-step ED {one:.4} <= 2 x teacher 18-step ED {:.4} = {bound:.4}; 16-step ED {sixteen:.4} <= 1-step; distill+eval {el:.0} s (<= 600 s)",
                s.teacher_energy_distance
            ),
        )
    });
    let student_ckpt = student_dir.as_ref().map(|d| d.join("student.json"));
    let trained = student_ckpt.as_ref().and_then(|p| load_student(p, &mixture).ok());

    suite.run(7, "semantic preservation", || {
        let st = trained.as_ref().context("no trained student")?;
        let start = Instant::now();
        let noises = shared_noises(st, 707, 1000);
        let base = SamplerConfig {
            steps: 1,
            gamma: 0.0,
            nu: 1.0,
            omega: 3.5,
            cond: Cond::Null,
            seed: 707,
        };
        let d0 = preservation_distance(st, 1, 16, 0.0, &noises, &base)?;
        let d1 = preservation_distance(st, 1, 16, 1.0, &noises, &base)?;
        let el = secs(start.elapsed());
        outcome(
            d1 >= 1.5 * d0 && el < 60.0,
            format!("mean L2(1, 16 steps): gamma=0 {d0:.4}, gamma=1 {d1:.4}, ratio {:.2} (>= 1.5) in {el:.1} s (< 60 s)", d1 / d0),
        )
    });

    suite.run(8, "nu-sampling exactness", || {
        nu_exactness(trained.as_ref().context("no trained student")?, mixture.n_labels())
    });

    suite.run(9, "cfg solver exactness", || {
        let tc = teacher_ckpt.as_ref().context("no teacher checkpoint")?;
        let teacher = load_teacher(&cfg, &mixture, Some(tc))?;
        cfg_exactness(&teacher, &cfg.schedule, mixture.n_labels())
    });

    suite.run(10, "distance ablation", || {
        let tc = teacher_ckpt.as_ref().context("no teacher checkpoint")?;
        let dir = ctm(work, REFERENCE, "ablate", &["ablate-distance", "--teacher", &tc.display().to_string()])?;
        let rows = read_csv(&dir.join("ablation.csv"))?;
        ensure!(rows.len() == 3, "expected 3 rows, got {}", rows.len());
        let mut parts = Vec::new();
        let mut ok = true;
        for r in &rows {
            let improvement: f64 = r[4].parse()?;
            ok &= improvement >= 5.0 && r[5] == "false";
            parts.push(format!("{} ED {:.4} ({improvement:.1}x)", r[0], r[2].parse::<f64>()?));
        }
        let baseline: f64 = rows[0][3].parse()?;
        outcome(ok, format!("baseline ED {baseline:.4}; {} (each >= 5x)", parts.join(", ")))
    });

    let mut guide_dir = None;
    suite.run(11, "guidance", || {
        let start = Instant::now();
        let sdir = ctm(work, GUIDANCE, "guide-distill", &["distill"])?;
        let distill_s = secs(start.elapsed());
        let sc = sdir.join("student.json").display().to_string();
        let start = Instant::now();
        let gdir = ctm(work, GUIDANCE, "guide", &["guide", "--student", &sc, "--plot"])?;
        let el = secs(start.elapsed());
        let rows = read_csv(&gdir.join("guide_summary.csv"))?;
        guide_dir = Some(gdir);
        let get = |m: &str| -> Result<(f64, f64)> {
            let r = rows
                .iter()
                .find(|r| r[0] == "all" && r[1] == m)
                .with_context(|| format!("no pooled row for {m}"))?;
            Ok((r[3].parse()?, r[4].parse()?))
        };
        let (none_mse, none_ed) = get("none")?;
        let (lg_mse, lg_ed) = get("loss-guidance")?;
        let (zt_mse, _) = get("zt-opt")?;
        outcome(
            lg_mse <= none_mse / 3.0 && zt_mse < none_mse && lg_ed <= 2.0 * none_ed && el <= 300.0,
            format!(
                "MSE unguided {none_mse:.2}, loss-guided {lg_mse:.2} (<= 1/3), z_T-opt {zt_mse:.2} (< unguided); ED guided {lg_ed:.4} <= 2 x unguided {none_ed:.4}; guide {el:.0} s (<= 300 s), student distill {distill_s:.0} s"
            ),
        )
    });

    suite.run(12, "determinism", || {
        let mut checked = Vec::new();
        let mut differing = Vec::new();
        let sc = student_ckpt.as_ref().context("no student")?.display().to_string();
        let s1 = ctm(work, REFERENCE, "sample-a", &["sample", "--student", &sc, "--steps", "1", "--gamma", "0"])?;
        let s2 = ctm(work, REFERENCE, "sample-b", &["sample", "--student", &sc, "--steps", "1", "--gamma", "0"])?;
        ensure!(
            std::fs::read(s1.join("samples.csv"))? == std::fs::read(s2.join("samples.csv"))?,
            "two sample runs differ"
        );
        let tc = teacher_ckpt.as_ref().context("no teacher")?.display().to_string();
        let short = with_overrides(REFERENCE, "distill", &[("iterations", "200")]);
        let short = with_overrides(&short, "ablate", &[("iterations", "30"), ("samples", "200")]);
        let short_distill = ctm(work, &short, "distill-short", &["distill", "--teacher", &tc])?;
        let short_ablate = ctm(work, &short, "ablate-short", &["ablate-distance", "--teacher", &tc])?;
        let mut runs: Vec<(&str, PathBuf)> = vec![
            ("sample", s1),
            ("distill", short_distill),
            ("ablate-distance", short_ablate),
        ];
        runs.extend(teacher_dir.clone().map(|d| ("train-teacher", d)));
        runs.extend(eval_dir.clone().map(|d| ("eval", d)));
        runs.extend(guide_dir.clone().map(|d| ("guide", d)));
        for (name, dir) in &runs {
            let m = Manifest::load(&dir.join("manifest.json"))?;
            let diff = replay(work, dir, &format!("replay-{name}"))?;
            checked.push(format!("{name} ({} files)", m.outputs.len()));
            differing.extend(diff.into_iter().map(|f| format!("{name}/{f}")));
        }
        outcome(
            differing.is_empty() && runs.len() == 6,
            if differing.is_empty() {
                format!("byte-identical replays: {}", checked.join(", "))
            } else {
                format!("differing outputs: {}", differing.join(", "))
            },
        )
    });

    println!(
        "acceptance: {} of 12 criteria passed in {:.0} s",
        12 - suite.failures,
        secs(total.elapsed())
    );
    if suite.failures > 0 {
        std::process::exit(1);
    }
}
