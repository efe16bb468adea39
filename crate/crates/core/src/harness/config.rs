//! Experiment configuration: TOML sections keyed by family name, merged over
//! per-family defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::solvers::{HyperOverrides, DEFAULT_FAILURE_PROB, DEFAULT_TAIL_FRACTION};
use crate::synthdata::linear_spectrum;
use crate::transfer::LogBase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    IterSweep,
    SampleSweep,
    Ablation,
    Curriculum,
    Transfer,
    RipCheck,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::IterSweep,
        Family::SampleSweep,
        Family::Ablation,
        Family::Curriculum,
        Family::Transfer,
        Family::RipCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::IterSweep => "iter_sweep",
            Family::SampleSweep => "sample_sweep",
            Family::Ablation => "ablation",
            Family::Curriculum => "curriculum",
            Family::Transfer => "transfer",
            Family::RipCheck => "rip_check",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown family '{s}'")))
    }
}

/// Solvers compared in the iteration and sample sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Tpgd,
    GdLoss1,
    GdLoss2,
    Nsgd,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Tpgd, Method::GdLoss1, Method::GdLoss2, Method::Nsgd];

    pub fn name(self) -> &'static str {
        match self {
            Method::Tpgd => "tpgd",
            Method::GdLoss1 => "gd_loss1",
            Method::GdLoss2 => "gd_loss2",
            Method::Nsgd => "nsgd",
        }
    }

    /// Baselines report the running tail average; TPGD reports its last iterate.
    pub fn tail_averaged(self) -> bool {
        self != Method::Tpgd
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

/// Raw `[family]` table. Every key is optional; missing keys take the
/// family default.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigSection {
    pub d: Option<usize>,
    pub k: Option<usize>,
    #[serde(rename = "T", alias = "t_count")]
    pub t_count: Option<usize>,
    pub kappa: Option<f64>,
    pub sigma_k: Option<f64>,
    pub spectrum: Option<Vec<f64>>,
    pub noise_sigma: Option<f64>,
    pub n_values: Option<Vec<usize>>,
    pub k_values: Option<Vec<usize>>,
    pub iteration_budget: Option<usize>,
    pub methods: Option<Vec<String>>,
    pub seeds: Option<Vec<u64>>,
    pub tail_fraction: Option<f64>,
    pub failure_prob: Option<f64>,
    pub nsgd_initial_std: Option<f64>,
    pub nsgd_decay: Option<f64>,
    pub phase1_horizon: Option<f64>,
    pub t_counts: Option<Vec<usize>>,
    pub noise_sigmas: Option<Vec<f64>>,
    pub freeze_b: Option<bool>,
    pub k2_values: Option<Vec<usize>>,
    pub log_base: Option<String>,
    pub learn_representation: Option<bool>,
    pub probes: Option<usize>,
    pub timing: Option<bool>,
    pub output: Option<PathBuf>,
    pub overrides: Option<OverrideSection>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverrideSection {
    pub alpha_tilde: Option<f64>,
    pub eta1: Option<f64>,
    pub eta2: Option<f64>,
    pub k1: Option<usize>,
    pub scale_eta1: Option<f64>,
    pub scale_eta2: Option<f64>,
    pub c_k: Option<f64>,
    pub c1: Option<f64>,
    pub eta1_cap: Option<f64>,
}

impl OverrideSection {
    fn apply(&self, o: &mut HyperOverrides) {
        macro_rules! take {
            ($($f:ident),*) => { $( if self.$f.is_some() { o.$f = self.$f; } )* };
        }
        take!(alpha_tilde, eta1, eta2, k1, scale_eta1, scale_eta2, c_k, c1, eta1_cap);
    }
}

/// Fully resolved configuration of one family run.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub family: Family,
    pub d: usize,
    pub k: usize,
    pub t_count: usize,
    pub kappa: f64,
    pub sigma_k: f64,
    /// Explicit `σ*` list; when absent the spectrum is linear in `[σ_k, κσ_k]`.
    pub spectrum: Option<Vec<f64>>,
    pub noise_sigma: f64,
    pub n_values: Vec<usize>,
    /// Ranks to sweep in `sample_sweep`; defaults to `[k]`.
    pub k_values: Vec<usize>,
    /// Iterations per run; `None` uses `K₁` from the theoretical schedule.
    pub iteration_budget: Option<usize>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub tail_fraction: f64,
    pub failure_prob: f64,
    pub overrides: HyperOverrides,
    /// NSGD noise; `None` uses `NoiseSchedule::default_for(η₁)`.
    pub nsgd_initial_std: Option<f64>,
    pub nsgd_decay: Option<f64>,
    /// Length of the phase1_only ablation arm as a multiple of the budget.
    pub phase1_horizon: f64,
    pub t_counts: Vec<usize>,
    pub noise_sigmas: Vec<f64>,
    pub freeze_b: bool,
    pub k2_values: Vec<usize>,
    pub log_base: LogBase,
    /// Transfer from a TPGD estimate of `B*` instead of `B*` itself.
    pub learn_representation: bool,
    pub probes: usize,
    pub timing: bool,
    pub output: PathBuf,
}

impl ExperimentConfig {
    pub fn defaults(family: Family) -> Self {
        let mut cfg = ExperimentConfig {
            family,
            d: 20,
            k: 2,
            t_count: 40,
            kappa: 2.0,
            sigma_k: 1.0,
            spectrum: None,
            noise_sigma: 0.5,
            n_values: vec![1000],
            k_values: vec![2],
            iteration_budget: None,
            methods: vec![Method::Tpgd],
            seeds: (0..5).collect(),
            tail_fraction: DEFAULT_TAIL_FRACTION,
            failure_prob: DEFAULT_FAILURE_PROB,
            overrides: HyperOverrides::default(),
            nsgd_initial_std: None,
            nsgd_decay: None,
            phase1_horizon: 2.0,
            t_counts: vec![30, 30],
            noise_sigmas: vec![0.1, 1.0],
            freeze_b: true,
            k2_values: vec![500, 2000, 8000],
            log_base: LogBase::Natural,
            learn_representation: false,
            probes: 200,
            timing: false,
            output: PathBuf::from("results"),
        };
        match family {
            Family::IterSweep => cfg.methods = Method::ALL.to_vec(),
            Family::SampleSweep => {
                cfg.n_values = vec![250, 500, 1000, 2000];
                cfg.methods = vec![Method::Tpgd, Method::GdLoss1];
            }
            Family::Ablation => {
                cfg.kappa = 3.0;
                cfg.overrides.c_k = Some(20.0);
            }
            Family::Curriculum => {
                cfg.n_values = vec![600];
                cfg.seeds = (0..10).collect();
            }
            Family::Transfer => {
                cfg.t_count = 20;
                cfg.seeds = (0..20).collect();
            }
            Family::RipCheck => {
                cfg.d = 50;
                cfg.t_count = 5;
                cfg.n_values = vec![200, 800, 3200];
                cfg.seeds = (0..10).collect();
            }
        }
        cfg
    }

    /// Defaults overlaid with the `[family]` table of a TOML document. A
    /// document without that table yields the defaults.
    pub fn from_toml_str(family: Family, text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let section = match doc.get(family.name()) {
            Some(value) => value
                .clone()
                .try_into::<ConfigSection>()
                .map_err(|e| Error::Config(format!("[{family}]: {e}")))?,
            None => ConfigSection::default(),
        };
        let mut cfg = Self::defaults(family);
        cfg.apply(section)?;
        Ok(cfg)
    }

    pub fn from_file(family: Family, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(family, &text)
    }

    pub fn apply(&mut self, s: ConfigSection) -> Result<()> {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = s.$f { self.$f = v; } )* };
        }
        set!(d, k, t_count, kappa, sigma_k, noise_sigma, n_values, tail_fraction, failure_prob);
        set!(phase1_horizon, t_counts, noise_sigmas, freeze_b, k2_values, learn_representation, probes, timing, output, seeds);
        if s.k.is_some() && s.k_values.is_none() {
            self.k_values = vec![self.k];
        }
        if let Some(v) = s.k_values {
            self.k_values = v;
        }
        if s.spectrum.is_some() {
            self.spectrum = s.spectrum;
        }
        if s.iteration_budget.is_some() {
            self.iteration_budget = s.iteration_budget;
        }
        if s.nsgd_initial_std.is_some() {
            self.nsgd_initial_std = s.nsgd_initial_std;
        }
        if s.nsgd_decay.is_some() {
            self.nsgd_decay = s.nsgd_decay;
        }
        if let Some(names) = s.methods {
            self.methods = names.iter().map(|n| n.parse()).collect::<Result<_>>()?;
        }
        if let Some(base) = s.log_base {
            self.log_base = match base.as_str() {
                "natural" | "e" => LogBase::Natural,
                "two" | "2" => LogBase::Two,
                other => return Err(Error::Config(format!("unknown log_base '{other}'"))),
            };
        }
        if let Some(o) = s.overrides {
            o.apply(&mut self.overrides);
        }
        Ok(())
    }

    /// `σ*` for rank `k`: the explicit list if given, else linear.
    pub fn spectrum_for(&self, k: usize) -> Result<Vec<f64>> {
        match &self.spectrum {
            Some(s) if s.len() == k => Ok(s.clone()),
            Some(s) => Err(Error::Config(format!("spectrum has {} entries but k={k}", s.len()))),
            None => Ok(linear_spectrum(k, self.kappa, self.sigma_k)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.seeds.is_empty() {
            return fail("seeds must be non-empty".into());
        }
        if self.n_values.is_empty() || self.n_values.contains(&0) {
            return fail("n_values must be non-empty and positive".into());
        }
        if self.d == 0 || self.k_values.is_empty() {
            return fail("d and k must be positive".into());
        }
        let max_t = match self.family {
            Family::Curriculum => self.t_counts.iter().copied().min().unwrap_or(0),
            _ => self.t_count,
        };
        for &k in &self.k_values {
            if k == 0 || k > self.d || k > max_t {
                return fail(format!("need 1 <= k <= min(d, T); got k={k}, d={}, T={max_t}", self.d));
            }
            self.spectrum_for(k)?;
        }
        if !(self.kappa >= 1.0 && self.sigma_k > 0.0) {
            return fail(format!("need kappa >= 1 and sigma_k > 0, got {} and {}", self.kappa, self.sigma_k));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be finite and non-negative, got {}", self.noise_sigma));
        }
        if self.methods.is_empty() {
            return fail("methods must be non-empty".into());
        }
        if let Some(b) = self.iteration_budget {
            if b == 0 || b % 2 == 1 {
                return fail(format!("iteration_budget must be positive and even, got {b}"));
            }
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return fail(format!("tail_fraction must lie in (0,1], got {}", self.tail_fraction));
        }
        if !(self.phase1_horizon >= 1.0) {
            return fail(format!("phase1_horizon must be at least 1, got {}", self.phase1_horizon));
        }
        if self.family == Family::Curriculum {
            if self.t_counts.is_empty() || self.t_counts.len() != self.noise_sigmas.len() {
                return fail("t_counts and noise_sigmas must be non-empty and of equal length".into());
            }
            if self.n_values.len() != 1 {
                return fail("curriculum takes a single N".into());
            }
        }
        if self.family == Family::Transfer && self.k2_values.iter().any(|&k2| k2 < 3) {
            return fail("k2_values must be at least 3".into());
        }
        if self.family == Family::RipCheck && self.probes == 0 {
            return fail("probes must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!(matches!("sgd".parse::<Method>(), Err(Error::Config(_))));
    }

    #[test]
    fn section_overrides_defaults() {
        let text = r#"
[sample_sweep]
d = 10
T = 12
n_values = [100, 200]
methods = ["tpgd", "nsgd"]
seeds = [7]

[sample_sweep.overrides]
c_k = 30.0

[iter_sweep]
d = 99
"#;
        let cfg = ExperimentConfig::from_toml_str(Family::SampleSweep, text).unwrap();
        assert_eq!((cfg.d, cfg.k, cfg.t_count), (10, 2, 12));
        assert_eq!(cfg.n_values, vec![100, 200]);
        assert_eq!(cfg.methods, vec![Method::Tpgd, Method::Nsgd]);
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.overrides.c_k, Some(30.0));
        cfg.validate().unwrap();
    }

    #[test]
    fn missing_section_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str(Family::Ablation, "").unwrap();
        assert_eq!(cfg.kappa, 3.0);
        assert_eq!(cfg.overrides.c_k, Some(20.0));
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for text in [
            "[iter_sweep]\nmethods = [\"sgd\"]",
            "[iter_sweep]\nunknown_key = 1",
            "[iter_sweep]\nd = \"ten\"",
            "not toml at all [",
        ] {
            assert!(matches!(
                ExperimentConfig::from_toml_str(Family::IterSweep, text),
                Err(Error::Config(_))
            ));
        }
        for text in ["[iter_sweep]\nseeds = []", "[iter_sweep]\nk = 50\nT = 10", "[iter_sweep]\niteration_budget = 11"] {
            let cfg = ExperimentConfig::from_toml_str(Family::IterSweep, text).unwrap();
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn explicit_spectrum_must_match_rank() {
        let mut cfg = ExperimentConfig::defaults(Family::IterSweep);
        cfg.spectrum = Some(vec![3.0, 1.0]);
        assert_eq!(cfg.spectrum_for(2).unwrap(), vec![3.0, 1.0]);
        assert!(cfg.spectrum_for(3).is_err());
        cfg.spectrum = None;
        assert_eq!(cfg.spectrum_for(2).unwrap(), vec![2.0, 1.0]);
    }
}
