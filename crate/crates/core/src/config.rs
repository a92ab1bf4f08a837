//! Run configuration: a sectioned `key = value` text format.
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! ```
//!
//! Lists are comma separated. Every key is optional (defaults apply), unknown
//! sections and keys are rejected, and each bad value is reported as
//! `section.key: message`.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::condition::Cond;
use crate::diffusion::Schedule;
use crate::distill::{DistillConfig, Distance, LambdaMode};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, RhoPolicy};
use crate::rng;
use crate::sampler::SamplerConfig;
use crate::teacher::{Component, ConditionedMixture, TeacherTrainConfig};

/// Parsed but untyped sections, with line numbers for messages.
#[derive(Debug, Clone, Default)]
pub struct Ini {
    sections: BTreeMap<String, BTreeMap<String, (String, usize)>>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self> {
        let mut ini = Ini::default();
        let mut current: Option<String> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(format!("line {}", no + 1), "unterminated section header"))?
                    .trim()
                    .to_string();
                ini.sections.entry(name.clone()).or_default();
                current = Some(name);
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", no + 1), "expected `key = value`"))?;
            let section = current
                .clone()
                .ok_or_else(|| Error::config(format!("line {}", no + 1), "key outside of any section"))?;
            let key = k.trim().to_string();
            let entries = ini.sections.entry(section.clone()).or_default();
            if entries.insert(key.clone(), (v.trim().to_string(), no + 1)).is_some() {
                return Err(Error::config(format!("{section}.{key}"), "duplicate key"));
            }
        }
        Ok(ini)
    }

    fn take_raw(&mut self, section: &str, key: &str) -> Option<String> {
        self.sections.get_mut(section)?.remove(key).map(|(v, _)| v)
    }

    fn take<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<T>> {
        match self.take_raw(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::config(format!("{section}.{key}"), format!("cannot parse `{v}`"))),
        }
    }

    fn set<T: FromStr>(&mut self, section: &str, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(section, key)? {
            *slot = v;
        }
        Ok(())
    }

    fn take_list<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<Vec<T>>> {
        match self.take_raw(section, key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<T>()
                        .map_err(|_| Error::config(format!("{section}.{key}"), format!("cannot parse list item `{s}`")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    fn take_cond(&mut self, section: &str, key: &str) -> Result<Option<Cond>> {
        match self.take_raw(section, key) {
            None => Ok(None),
            Some(v) => Cond::parse(&v)
                .map(Some)
                .ok_or_else(|| Error::config(format!("{section}.{key}"), format!("expected a label index or `null`, got `{v}`"))),
        }
    }

    fn keys_with_prefix(&self, section: &str, prefix: &str) -> Vec<String> {
        self.sections
            .get(section)
            .map(|m| m.keys().filter(|k| k.starts_with(prefix)).cloned().collect())
            .unwrap_or_default()
    }

    fn finish(self) -> Result<()> {
        for (section, entries) in &self.sections {
            if let Some((key, (_, line))) = entries.iter().next() {
                return Err(Error::config(format!("{section}.{key}"), format!("unknown key (line {line})")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataKind {
    /// Random Gaussian components with relative spread.
    Random { spread: f64 },
    /// Smooth random signals with per-coordinate noise.
    Signals { noise: f64 },
    /// Explicit components.
    Explicit(ConditionedMixture),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    pub dim: usize,
    pub labels: usize,
    pub components: usize,
    /// Seed of the mixture generator, independent of the run seed.
    pub mixture_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Random { spread: 0.15 },
            dim: 2,
            labels: 4,
            components: 3,
            mixture_seed: 1,
        }
    }
}

impl DataConfig {
    pub fn build(&self, sigma_data: f64) -> Result<ConditionedMixture> {
        let mut r = rng::child(self.mixture_seed, &[0xda7a]);
        match &self.kind {
            DataKind::Random { spread } => {
                ConditionedMixture::random(&mut r, self.dim, self.labels, self.components, *spread, sigma_data)
            }
            DataKind::Signals { noise } => {
                ConditionedMixture::smooth_signals(&mut r, self.dim, self.labels, self.components, *noise, sigma_data)
            }
            DataKind::Explicit(m) => Ok(m.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherKind {
    Neural,
    Analytic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSection {
    pub kind: TeacherKind,
    pub train: TeacherTrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSection {
    pub sampler: SamplerConfig,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub samples: usize,
    pub steps: Vec<usize>,
    /// `(omega, nu)` pairs of the trade-off table.
    pub guidance: Vec<(f64, f64)>,
    pub gamma: f64,
    pub teacher_steps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            samples: 1000,
            steps: vec![1, 2, 4, 8, 16],
            guidance: vec![(3.5, 1.0)],
            gamma: 0.0,
            teacher_steps: 18,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuideSection {
    pub guidance: GuidanceConfig,
    /// Feature window; `None` selects `dim / 8` rounded to odd.
    pub window: Option<usize>,
    /// Target level; `None` uses the mean data intensity.
    pub base_db: Option<f64>,
    pub amplitude_db: f64,
    pub seeds: usize,
}

impl Default for GuideSection {
    fn default() -> Self {
        GuideSection {
            guidance: GuidanceConfig::default(),
            window: None,
            base_db: None,
            amplitude_db: 6.0,
            seeds: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateSection {
    pub iterations: usize,
    pub samples: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            iterations: 8000,
            samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub record_timing: bool,
    pub data: DataConfig,
    pub schedule: Schedule,
    pub teacher: TeacherSection,
    pub distill: DistillConfig,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub guide: GuideSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            record_timing: false,
            data: DataConfig::default(),
            schedule: Schedule::default(),
            teacher: TeacherSection {
                kind: TeacherKind::Neural,
                train: TeacherTrainConfig::default(),
            },
            distill: DistillConfig::default(),
            sample: SampleSection {
                sampler: SamplerConfig::default(),
                count: 100,
            },
            eval: EvalSection::default(),
            guide: GuideSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("{section}.{key}"), format!("expected true or false, got `{v}`"))),
    }
}

fn parse_floats(field: &str, s: &str) -> Result<Vec<f64>> {
    s.split_whitespace()
        .map(|x| {
            x.parse::<f64>()
                .map_err(|_| Error::config(field.to_string(), format!("cannot parse number `{x}`")))
        })
        .collect()
}

fn parse_explicit(ini: &mut Ini) -> Result<ConditionedMixture> {
    // label.<l>.weight = w ; label.<l>.component.<k> = weight ; mean... ; var...
    let mut weights: BTreeMap<usize, f64> = BTreeMap::new();
    let mut comps: BTreeMap<usize, BTreeMap<usize, Component>> = BTreeMap::new();
    for key in ini.keys_with_prefix("data", "label.") {
        let parts: Vec<&str> = key.split('.').collect();
        let field = format!("data.{key}");
        let bad = || Error::config(field.clone(), "expected label.<l>.weight or label.<l>.component.<k>");
        let l: usize = parts.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let raw = ini.take_raw("data", &key).unwrap_or_default();
        match parts.as_slice() {
            [_, _, "weight"] => {
                let w = raw
                    .parse::<f64>()
                    .map_err(|_| Error::config(field.clone(), format!("cannot parse `{raw}`")))?;
                weights.insert(l, w);
            }
            [_, _, "component", k] => {
                let k: usize = k.parse().map_err(|_| bad())?;
                let fields: Vec<&str> = raw.split(';').collect();
                if fields.len() != 3 {
                    return Err(Error::config(field, "expected `weight ; mean ... ; var ...`"));
                }
                let w = parse_floats(&field, fields[0])?;
                if w.len() != 1 {
                    return Err(Error::config(field, "component weight must be a single number"));
                }
                comps.entry(l).or_default().insert(
                    k,
                    Component {
                        weight: w[0],
                        mean: parse_floats(&field, fields[1])?,
                        var: parse_floats(&field, fields[2])?,
                    },
                );
            }
            _ => return Err(bad()),
        }
    }
    let n = comps.len();
    if n == 0 || comps.keys().cloned().ne(0..n) {
        return Err(Error::config("data.label", "explicit labels must be numbered 0..n with components"));
    }
    let lw: Vec<f64> = if weights.is_empty() {
        vec![1.0 / n as f64; n]
    } else {
        (0..n)
            .map(|l| {
                weights
                    .get(&l)
                    .copied()
                    .ok_or_else(|| Error::config(format!("data.label.{l}.weight"), "missing label weight"))
            })
            .collect::<Result<_>>()?
    };
    let labels = comps.into_values().map(|m| m.into_values().collect()).collect();
    ConditionedMixture::new(lw, labels)
}

fn parse_rho(v: &str) -> Option<RhoPolicy> {
    let (kind, val) = v.split_once(':')?;
    let x: f64 = val.trim().parse().ok()?;
    match kind.trim() {
        "gradnorm" => Some(RhoPolicy::GradNorm { scale: x }),
        "fixed" => Some(RhoPolicy::Fixed(x)),
        _ => None,
    }
}

impl RunConfig {
    /// Parses a config; `seed_override` (the `SEED` environment variable)
    /// replaces `run.seed` when present.
    pub fn parse(text: &str, seed_override: Option<&str>) -> Result<Self> {
        let mut ini = Ini::parse(text)?;
        let mut c = RunConfig::default();
        for s in ini.sections.keys() {
            if !["run", "data", "schedule", "teacher", "distill", "sample", "eval", "guide", "ablate"].contains(&s.as_str()) {
                return Err(Error::config(s.clone(), "unknown section"));
            }
        }

        ini.set("run", "seed", &mut c.seed)?;
        if let Some(v) = ini.take_raw("run", "record_timing") {
            c.record_timing = parse_bool("run", "record_timing", &v)?;
        }
        if let Some(s) = seed_override {
            c.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::config("SEED", format!("environment seed `{s}` is not an integer")))?;
        }

        let d = &mut c.data;
        ini.set("data", "dim", &mut d.dim)?;
        ini.set("data", "labels", &mut d.labels)?;
        ini.set("data", "components", &mut d.components)?;
        ini.set("data", "mixture_seed", &mut d.mixture_seed)?;
        let kind = ini.take_raw("data", "kind").unwrap_or_else(|| "random".into());
        d.kind = match kind.as_str() {
            "random" => {
                let mut spread = 0.15;
                ini.set("data", "spread", &mut spread)?;
                DataKind::Random { spread }
            }
            "signals" => {
                let mut noise = 0.1;
                ini.set("data", "noise", &mut noise)?;
                DataKind::Signals { noise }
            }
            "explicit" => {
                let m = parse_explicit(&mut ini)?;
                d.dim = m.dim();
                d.labels = m.n_labels();
                DataKind::Explicit(m)
            }
            other => return Err(Error::config("data.kind", format!("expected random, signals or explicit, got `{other}`"))),
        };

        let s = &mut c.schedule;
        ini.set("schedule", "sigma_min", &mut s.sigma_min)?;
        ini.set("schedule", "sigma_max", &mut s.sigma_max)?;
        ini.set("schedule", "rho", &mut s.rho)?;
        ini.set("schedule", "sigma_data", &mut s.sigma_data)?;

        if let Some(k) = ini.take_raw("teacher", "kind") {
            c.teacher.kind = match k.as_str() {
                "neural" => TeacherKind::Neural,
                "analytic" => TeacherKind::Analytic,
                other => return Err(Error::config("teacher.kind", format!("expected neural or analytic, got `{other}`"))),
            };
        }
        let t = &mut c.teacher.train;
        if let Some(h) = ini.take_list("teacher", "hidden")? {
            t.hidden = h;
        }
        ini.set("teacher", "embed_dim", &mut t.embed_dim)?;
        ini.set("teacher", "max_freq", &mut t.max_freq)?;
        ini.set("teacher", "iterations", &mut t.iterations)?;
        ini.set("teacher", "batch", &mut t.batch)?;
        ini.set("teacher", "lr", &mut t.lr)?;
        ini.set("teacher", "p_uncond", &mut t.p_uncond)?;
        ini.set("teacher", "ema", &mut t.ema)?;
        if let Some(v) = ini.take_raw("teacher", "time_sampling") {
            t.mixed_time = match v.as_str() {
                "lognormal" => false,
                "mixed" => true,
                other => {
                    return Err(Error::config(
                        "teacher.time_sampling",
                        format!("expected lognormal or mixed, got `{other}`"),
                    ))
                }
            };
        }

        let g = &mut c.distill;
        ini.set("distill", "n_grid", &mut g.n_grid)?;
        ini.set("distill", "mu_ema", &mut g.mu_ema)?;
        ini.set("distill", "omega_min", &mut g.omega_min)?;
        ini.set("distill", "omega_max", &mut g.omega_max)?;
        ini.set("distill", "p_uncond", &mut g.p_uncond)?;
        ini.set("distill", "lr", &mut g.lr)?;
        ini.set("distill", "max_ode_steps", &mut g.max_ode_steps)?;
        ini.set("distill", "batch", &mut g.batch)?;
        ini.set("distill", "iterations", &mut g.iterations)?;
        if let Some(h) = ini.take_list("distill", "hidden")? {
            g.hidden = h;
        }
        if let Some(v) = ini.take_raw("distill", "distance") {
            g.distance = Distance::parse(&v).ok_or_else(|| {
                Error::config("distill.distance", format!("expected l2_s_time, l2_zero_time or teacher_feature, got `{v}`"))
            })?;
        }
        if let Some(v) = ini.take_raw("distill", "lambda") {
            g.lambda = if v == "adaptive" {
                LambdaMode::Adaptive
            } else {
                LambdaMode::Fixed(v.parse().map_err(|_| {
                    Error::config("distill.lambda", format!("expected `adaptive` or a number, got `{v}`"))
                })?)
            };
        }
        if let Some(v) = ini.take_raw("distill", "init_from_teacher") {
            g.init_from_teacher = parse_bool("distill", "init_from_teacher", &v)?;
        }
        if let Some(v) = ini.take_raw("distill", "dsm_weighted") {
            g.dsm_weighted = parse_bool("distill", "dsm_weighted", &v)?;
        }
        g.record_timing = c.record_timing;

        let sp = &mut c.sample.sampler;
        ini.set("sample", "steps", &mut sp.steps)?;
        ini.set("sample", "gamma", &mut sp.gamma)?;
        ini.set("sample", "nu", &mut sp.nu)?;
        ini.set("sample", "omega", &mut sp.omega)?;
        if let Some(cond) = ini.take_cond("sample", "label")? {
            sp.cond = cond;
        }
        sp.seed = c.seed;
        ini.set("sample", "count", &mut c.sample.count)?;

        let e = &mut c.eval;
        ini.set("eval", "samples", &mut e.samples)?;
        if let Some(v) = ini.take_list("eval", "steps")? {
            e.steps = v;
        }
        if let Some(v) = ini.take_list::<String>("eval", "guidance")? {
            e.guidance = v
                .iter()
                .map(|p| {
                    let (w, n) = p.split_once(':').ok_or_else(|| {
                        Error::config("eval.guidance", format!("expected omega:nu pairs, got `{p}`"))
                    })?;
                    let parse = |x: &str| {
                        x.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::config("eval.guidance", format!("cannot parse `{x}`")))
                    };
                    Ok((parse(w)?, parse(n)?))
                })
                .collect::<Result<_>>()?;
        }
        ini.set("eval", "gamma", &mut e.gamma)?;
        ini.set("eval", "teacher_steps", &mut e.teacher_steps)?;

        let gd = &mut c.guide;
        let gs = &mut gd.guidance.sampler;
        ini.set("guide", "steps", &mut gs.steps)?;
        ini.set("guide", "gamma", &mut gs.gamma)?;
        ini.set("guide", "nu", &mut gs.nu)?;
        ini.set("guide", "omega", &mut gs.omega)?;
        if let Some(cond) = ini.take_cond("guide", "label")? {
            gs.cond = cond;
        }
        gs.seed = c.seed;
        if let Some(v) = ini.take_raw("guide", "rho") {
            gd.guidance.rho = parse_rho(&v).ok_or_else(|| {
                Error::config("guide.rho", format!("expected gradnorm:<scale> or fixed:<value>, got `{v}`"))
            })?;
        }
        ini.set("guide", "iterations", &mut gd.guidance.iterations)?;
        ini.set("guide", "adam_lr", &mut gd.guidance.adam_lr)?;
        ini.set("guide", "opt_omega", &mut gd.guidance.opt_omega)?;
        ini.set("guide", "opt_nu", &mut gd.guidance.opt_nu)?;
        gd.window = ini.take("guide", "window")?;
        gd.base_db = ini.take("guide", "base_db")?;
        ini.set("guide", "amplitude_db", &mut gd.amplitude_db)?;
        ini.set("guide", "seeds", &mut gd.seeds)?;

        ini.set("ablate", "iterations", &mut c.ablate.iterations)?;
        ini.set("ablate", "samples", &mut c.ablate.samples)?;

        ini.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.teacher.train.validate()?;
        self.distill.validate()?;
        if self.data.dim == 0 || self.data.labels == 0 || self.data.components == 0 {
            return Err(Error::config("data", "dim, labels and components must be positive"));
        }
        if let DataKind::Random { spread } = self.data.kind {
            if !(spread > 0.0) {
                return Err(Error::config("data.spread", "must be positive"));
            }
        }
        if let DataKind::Signals { noise } = self.data.kind {
            if !(noise > 0.0) {
                return Err(Error::config("data.noise", "must be positive"));
            }
        }
        if self.teacher.kind == TeacherKind::Analytic && self.distill.distance == Distance::TeacherFeature {
            return Err(Error::config(
                "distill.distance",
                "teacher_feature needs a neural teacher (teacher.kind = neural)",
            ));
        }
        let check_sampler = |section: &str, s: &SamplerConfig| -> Result<()> {
            if s.steps == 0 {
                return Err(Error::config(format!("{section}.steps"), "must be at least 1"));
            }
            if !(0.0..=1.0).contains(&s.gamma) {
                return Err(Error::config(format!("{section}.gamma"), "must lie in [0, 1]"));
            }
            if let Cond::Label(l) = s.cond {
                if l >= self.data.labels {
                    return Err(Error::config(format!("{section}.label"), format!("label {l} out of range")));
                }
            }
            Ok(())
        };
        check_sampler("sample", &self.sample.sampler)?;
        check_sampler("guide", &self.guide.guidance.sampler)?;
        if self.eval.steps.is_empty() || self.eval.steps.contains(&0) {
            return Err(Error::config("eval.steps", "step counts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eval.gamma) {
            return Err(Error::config("eval.gamma", "must lie in [0, 1]"));
        }
        if self.eval.samples == 0 || self.ablate.samples == 0 {
            return Err(Error::config("eval.samples", "must be positive"));
        }
        if self.eval.teacher_steps == 0 {
            return Err(Error::config("eval.teacher_steps", "must be positive"));
        }
        if let Some(w) = self.guide.window {
            if w == 0 || w % 2 == 0 || w > self.data.dim {
                return Err(Error::config("guide.window", "must be odd, positive and at most data.dim"));
            }
        }
        if self.guide.seeds == 0 {
            return Err(Error::config("guide.seeds", "must be positive"));
        }
        Ok(())
    }

    pub fn mixture(&self) -> Result<ConditionedMixture> {
        self.data.build(self.schedule.sigma_data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = RunConfig::parse("", None).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn values_and_seed_override() {
        let text = "
# reference
[run]
seed = 5
[distill]
distance = teacher_feature
lambda = 0.0
hidden = 64, 32
[sample]
label = null
gamma = 0.25
[guide]
rho = fixed:0.5
";
        let c = RunConfig::parse(text, None).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.distill.distance, Distance::TeacherFeature);
        assert_eq!(c.distill.lambda, LambdaMode::Fixed(0.0));
        assert_eq!(c.distill.hidden, vec![64, 32]);
        assert_eq!(c.sample.sampler.cond, Cond::Null);
        assert_eq!(c.sample.sampler.seed, 5);
        assert_eq!(c.guide.guidance.rho, RhoPolicy::Fixed(0.5));
        let c = RunConfig::parse(text, Some("99")).unwrap();
        assert_eq!(c.seed, 99);
        assert_eq!(c.sample.sampler.seed, 99);
    }

    fn field_of(text: &str) -> String {
        match RunConfig::parse(text, None) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn named_validation_errors() {
        assert_eq!(field_of("[distill]\nomega_min = 6\n"), "distill.omega_min");
        assert_eq!(field_of("[distill]\np_uncond = 1.5\n"), "distill.p_uncond");
        assert_eq!(field_of("[distill]\nbatch = many\n"), "distill.batch");
        assert_eq!(field_of("[sample]\ngamma = 2\n"), "sample.gamma");
        assert_eq!(field_of("[schedule]\nsigma_min = 100\n"), "schedule.sigma_min");
        assert_eq!(field_of("[distill]\ntypo = 1\n"), "distill.typo");
        assert_eq!(field_of("[nowhere]\n"), "nowhere");
        assert_eq!(field_of("[teacher]\nkind = analytic\n[distill]\ndistance = teacher_feature\n"), "distill.distance");
        assert_eq!(field_of("[guide]\nrho = lots\n"), "guide.rho");
        assert_eq!(field_of("[distill]\nn_grid = 3\nn_grid = 4\n"), "distill.n_grid");
        assert!(RunConfig::parse("", Some("x")).is_err());
    }

    #[test]
    fn explicit_mixture() {
        let text = "
[data]
kind = explicit
label.0.weight = 0.25
label.1.weight = 0.75
label.0.component.0 = 1.0 ; 0 0 ; 1 1
label.1.component.0 = 0.5 ; 1 -1 ; 0.1 0.2
label.1.component.1 = 0.5 ; -1 1 ; 0.1 0.2
";
        let c = RunConfig::parse(text, None).unwrap();
        let m = c.mixture().unwrap();
        assert_eq!(m.dim(), 2);
        assert_eq!(m.n_labels(), 2);
        assert_eq!(m.label_weights(), &[0.25, 0.75]);
        assert_eq!(m.label_components()[1][1].mean, vec![-1.0, 1.0]);
        let bad = text.replace("0.5 ; -1 1", "0.7 ; -1 1");
        assert!(RunConfig::parse(&bad, None).is_err());
    }
}
