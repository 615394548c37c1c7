//! Run configuration: a TOML file with `[routing]`, `[passes]` and `[meta]`
//! sections. Unknown keys are rejected with the closest known key suggested.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// JSON linear-Gaussian world; a seeded 5-variable world when absent.
    pub world: Option<PathBuf>,
    /// JSON primitive list; the seed library when absent.
    pub library: Option<PathBuf>,
    pub out: PathBuf,
    pub routing: RoutingSection,
    pub passes: PassSection,
    pub meta: MetaSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingSection {
    /// Cluster count; `⌈√n⌉` when absent.
    pub k: Option<usize>,
    pub heads: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub iters: usize,
    pub tau: f64,
    pub beta: f64,
    pub context: Vec<f64>,
    /// Information content assigned to every primitive.
    pub info: f64,
    /// Causal strength assigned to every ordered pair.
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PassSection {
    pub tau_prune: f64,
    pub eps_msg: f64,
    pub delta: f64,
    pub gamma: f64,
    pub probes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaSection {
    pub episodes: usize,
    pub horizon: usize,
    pub frozen: bool,
    pub perf_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            world: None,
            library: None,
            out: PathBuf::from("out"),
            routing: RoutingSection::default(),
            passes: PassSection::default(),
            meta: MetaSection::default(),
        }
    }
}

impl Default for RoutingSection {
    fn default() -> Self {
        let r = hcp::routing::RoutingConfig::default();
        RoutingSection {
            k: r.k,
            heads: r.heads,
            lambda1: r.lambda1,
            lambda2: r.lambda2,
            iters: r.iters,
            tau: hcp::ceg::TAU,
            beta: r.beta,
            context: vec![0.0],
            info: 1.0,
            strength: 0.5,
        }
    }
}

impl Default for PassSection {
    fn default() -> Self {
        let p = hcp::ceg::PassConfig::default();
        PassSection {
            tau_prune: p.tau_prune,
            eps_msg: p.eps_msg,
            delta: p.delta,
            gamma: p.gamma,
            probes: p.probes,
        }
    }
}

impl Default for MetaSection {
    fn default() -> Self {
        let m = hcp::meta::MetaRunConfig::default();
        MetaSection {
            episodes: m.episodes,
            horizon: m.horizon,
            frozen: m.frozen,
            perf_every: m.perf_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub message: String,
    /// 1-based line and column, when the error points into the file.
    pub location: Option<(usize, usize)>,
    pub suggestion: Option<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some((l, c)) = self.location {
            write!(f, "line {l}, column {c}: ")?;
        }
        f.write_str(&self.message)?;
        if let Some(s) = &self.suggestion {
            write!(f, " (did you mean `{s}`?)")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

/// Picks the unknown key and the expected list out of a serde message and
/// returns the closest expected key.
fn suggest(message: &str) -> Option<String> {
    let rest = message.split("unknown field `").nth(1)?;
    let (unknown, tail) = rest.split_once('`')?;
    let expected: Vec<&str> = tail.split('`').skip(1).step_by(2).collect();
    expected
        .into_iter()
        .map(|k| (strsim::damerau_levenshtein(unknown, k), k))
        .filter(|(d, k)| *d <= 2.max(k.len() / 3))
        .min()
        .map(|(_, k)| k.to_string())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            ConfigError {
                suggestion: suggest(&message),
                location: e.span().map(|s| line_col(text, s.start)),
                message,
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            message: format!("cannot read {}: {e}", path.display()),
            location: None,
            suggestion: None,
        })?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| {
            Err(ConfigError {
                message: m,
                location: None,
                suggestion: None,
            })
        };
        for p in self.world.iter().chain(&self.library) {
            if !p.exists() {
                return bad(format!("referenced file {} does not exist", p.display()));
            }
        }
        let r = &self.routing;
        if r.heads == 0 {
            return bad("routing.heads must be at least 1".into());
        }
        if r.k == Some(0) {
            return bad("routing.k must be at least 1".into());
        }
        if !(r.lambda1 >= 0.0 && r.lambda2 >= 0.0) {
            return bad("routing.lambda1 and routing.lambda2 must be nonnegative".into());
        }
        for (name, v) in [("tau", r.tau), ("beta", r.beta), ("strength", r.strength)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("routing.{name} = {v} outside [0, 1]"));
            }
        }
        if !(r.info >= 0.0 && r.info.is_finite()) {
            return bad("routing.info must be finite and nonnegative".into());
        }
        if r.context.is_empty() || r.context.iter().any(|v| !v.is_finite()) {
            return bad("routing.context must be a nonempty list of finite numbers".into());
        }
        self.pass_config(self.seed).validate().or_else(|e| bad(format!("passes: {e}")))?;
        if self.meta.episodes == 0 || self.meta.horizon == 0 || self.meta.perf_every == 0 {
            return bad("meta.episodes, meta.horizon and meta.perf_every must be positive".into());
        }
        Ok(())
    }

    /// Canonical TOML; parsing it yields this configuration again.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn routing_config(&self) -> hcp::routing::RoutingConfig {
        let r = &self.routing;
        hcp::routing::RoutingConfig {
            k: r.k,
            heads: r.heads,
            lambda1: r.lambda1,
            lambda2: r.lambda2,
            iters: r.iters,
            beta: r.beta,
            seed: self.seed,
            ..hcp::routing::RoutingConfig::default()
        }
    }

    pub fn pass_config(&self, seed: u64) -> hcp::ceg::PassConfig {
        let p = &self.passes;
        hcp::ceg::PassConfig {
            tau_prune: p.tau_prune,
            eps_msg: p.eps_msg,
            delta: p.delta,
            gamma: p.gamma,
            probes: p.probes,
            seed,
        }
    }

    pub fn meta_config(&self) -> hcp::meta::MetaRunConfig {
        let m = &self.meta;
        hcp::meta::MetaRunConfig {
            episodes: m.episodes,
            horizon: m.horizon,
            frozen: m.frozen,
            perf_every: m.perf_every,
            seed: self.seed,
            ..hcp::meta::MetaRunConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.routing.lambda1, c.routing.lambda2), (0.5, 0.5));
        assert_eq!((c.routing.tau, c.routing.heads, c.routing.iters), (0.1, 4, 3));
    }

    #[test]
    fn typo_gets_a_suggestion_with_location() {
        let e = RunConfig::parse("seed = 3\n[routing]\nlamda1 = 0.2\n").unwrap_err();
        assert_eq!(e.suggestion.as_deref(), Some("lambda1"));
        assert_eq!(e.location.map(|l| l.0), Some(3));
        assert!(e.to_string().contains("did you mean `lambda1`"), "{e}");
    }

    #[test]
    fn far_off_keys_get_no_suggestion() {
        let e = RunConfig::parse("zzzzzzzz = 1\n").unwrap_err();
        assert_eq!(e.suggestion, None);
    }

    #[test]
    fn echoed_config_roundtrips() {
        let mut c = RunConfig::default();
        c.seed = 9;
        c.routing.k = Some(3);
        c.routing.context = vec![0.25, -1.0];
        c.meta.frozen = true;
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.to_toml()).unwrap(), d);
    }

    #[test]
    fn invariants_are_checked() {
        assert!(RunConfig::parse("[routing]\ntau = 1.5\n").is_err());
        assert!(RunConfig::parse("[routing]\nheads = 0\n").is_err());
        assert!(RunConfig::parse("world = \"/no/such/file.json\"\n").is_err());
        assert!(RunConfig::parse("seed = \"x\"\n").unwrap_err().location.is_some());
    }
}
