//! Run configuration: flat `key = value` files with `include`.
//!
//! Every key has a built-in default, so an empty file is a complete
//! configuration. Later assignments win; `include <path>` splices another
//! file in place (relative to the including file). Values are normalized on
//! entry, and the fingerprint is a digest of the sorted canonical lines.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::pretrain::PretrainConfig;
use crate::ram::{FusionConfig, RaftConfig};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kind {
    Int { min: i64 },
    Float { min: f64, max: f64 },
    Bool,
    Str,
    /// Empty means "unset".
    OptFloat { min: f64, max: f64 },
    OptInt { min: i64 },
    FloatList { min: f64, max: f64 },
    IntList { min: i64 },
    Choice(&'static [&'static str]),
}

struct Key {
    name: &'static str,
    kind: Kind,
    default: &'static str,
    /// Whether the key changes any persisted artifact.
    artifact: bool,
}

const fn key(name: &'static str, kind: Kind, default: &'static str, artifact: bool) -> Key {
    Key {
        name,
        kind,
        default,
        artifact,
    }
}

const UNIT: Kind = Kind::Float { min: 0.0, max: 1.0 };
const POS_F: Kind = Kind::Float {
    min: f64::MIN_POSITIVE,
    max: f64::INFINITY,
};

const SCHEMA: &[Key] = &[
    key("data_path", Kind::Str, "", true),
    key("min_core", Kind::Int { min: 1 }, "5", true),
    key("layers", Kind::Int { min: 0 }, "2", true),
    key("heads", Kind::Int { min: 1 }, "2", true),
    key("hidden", Kind::Int { min: 1 }, "64", true),
    key("max_len", Kind::Int { min: 1 }, "50", true),
    key("inner", Kind::Int { min: 1 }, "256", true),
    key("dropout", Kind::Float { min: 0.0, max: 0.999 }, "0.5", true),
    key("ln_eps", POS_F, "1e-12", true),
    key("lr", POS_F, "0.001", true),
    key("batch", Kind::Int { min: 1 }, "1024", true),
    key("adam_beta1", Kind::Float { min: 0.0, max: 0.999999 }, "0.9", true),
    key("adam_beta2", Kind::Float { min: 0.0, max: 0.999999 }, "0.999", true),
    key("epochs", Kind::Int { min: 1 }, "100", true),
    key("patience", Kind::Int { min: 1 }, "10", true),
    key("tau", POS_F, "1", true),
    key("lambda_ret", Kind::Float { min: 0.0, max: f64::INFINITY }, "0.1", true),
    key("track_retrieval_loss", Kind::Bool, "true", true),
    key("clusters", Kind::Int { min: 1 }, "128", true),
    key("nprobe", Kind::Int { min: 1 }, "1", true),
    key("alpha", UNIT, "0.5", true),
    key("beta", UNIT, "0.9", true),
    key("retrieve_k", Kind::Int { min: 1 }, "20", true),
    key("seed", Kind::Int { min: 0 }, "42", true),
    key("eval_alpha", Kind::OptFloat { min: 0.0, max: 1.0 }, "", false),
    key("eval_beta", Kind::OptFloat { min: 0.0, max: 1.0 }, "", false),
    key("eval_k", Kind::OptInt { min: 1 }, "", false),
    key("top_n", Kind::Int { min: 1 }, "10", false),
    key("partition_lo", Kind::Int { min: 0 }, "3", false),
    key("partition_hi", Kind::Int { min: 0 }, "6", false),
    key("drift_ratios", Kind::FloatList { min: 0.0, max: 0.999999 }, "0,0.1,0.2,0.3", false),
    key("noise_ratios", Kind::FloatList { min: 0.0, max: 1.0 }, "0,0.1,0.2,0.3", false),
    key("sweep_mode", Kind::Choice(&["axis", "grid"]), "axis", false),
    key("sweep_alphas", Kind::FloatList { min: 0.0, max: 1.0 }, "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1", false),
    key("sweep_betas", Kind::FloatList { min: 0.0, max: 1.0 }, "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1", false),
    key("sweep_ks", Kind::IntList { min: 1 }, "5,10,15,20,25,30,35,40,45,50,55", false),
    key("sweep_seeds", Kind::Int { min: 1 }, "5", false),
];

fn schema(name: &str) -> Option<&'static Key> {
    SCHEMA.iter().find(|k| k.name == name)
}

fn parse_float(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|x| x.is_finite())
}

/// Checks `raw` against `kind` and returns its canonical spelling.
fn canonical(name: &str, kind: Kind, raw: &str) -> Result<String> {
    let raw = raw.trim();
    let bad = |what: &str| Error::Config(format!("{name}: {what}, got {raw:?}"));
    let float = |s: &str, min: f64, max: f64| -> Result<String> {
        let x = parse_float(s).ok_or_else(|| bad("expected a number"))?;
        if x < min || x > max {
            return Err(bad(&format!("must lie in [{min}, {max}]")));
        }
        Ok(format!("{x:?}"))
    };
    let int = |s: &str, min: i64| -> Result<String> {
        let x: i64 = s.parse().map_err(|_| bad("expected an integer"))?;
        if x < min {
            return Err(bad(&format!("must be at least {min}")));
        }
        Ok(x.to_string())
    };
    let list = |f: &dyn Fn(&str) -> Result<String>| -> Result<String> {
        if raw.is_empty() {
            return Err(bad("expected a nonempty comma-separated list"));
        }
        Ok(raw.split(',').map(|p| f(p.trim())).collect::<Result<Vec<_>>>()?.join(","))
    };
    match kind {
        Kind::Int { min } => int(raw, min),
        Kind::Float { min, max } => float(raw, min, max),
        Kind::Bool => match raw {
            "true" | "yes" | "1" => Ok("true".into()),
            "false" | "no" | "0" => Ok("false".into()),
            _ => Err(bad("expected true or false")),
        },
        Kind::Str => Ok(raw.to_string()),
        Kind::OptFloat { .. } if raw.is_empty() => Ok(String::new()),
        Kind::OptFloat { min, max } => float(raw, min, max),
        Kind::OptInt { .. } if raw.is_empty() => Ok(String::new()),
        Kind::OptInt { min } => int(raw, min),
        Kind::FloatList { min, max } => list(&|p| float(p, min, max)),
        Kind::IntList { min } => list(&|p| int(p, min)),
        Kind::Choice(options) => {
            if options.contains(&raw) {
                Ok(raw.to_string())
            } else {
                Err(bad(&format!("expected one of {options:?}")))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: SCHEMA
                .iter()
                .map(|k| (k.name, canonical(k.name, k.kind, k.default).expect("valid default")))
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_file(path, &mut Vec::new())?;
        Ok(c)
    }

    /// Applies a configuration text; `origin` names it in errors and anchors
    /// relative includes and paths.
    pub fn apply_str(&mut self, text: &str, origin: &Path) -> Result<()> {
        self.apply_text(text, origin, &mut Vec::new())
    }

    fn apply_file(&mut self, path: &Path, stack: &mut Vec<PathBuf>) -> Result<()> {
        let canon = path
            .canonicalize()
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        if stack.contains(&canon) {
            return Err(Error::Config(format!("include cycle through {}", path.display())));
        }
        let text = std::fs::read_to_string(&canon)?;
        stack.push(canon.clone());
        let r = self.apply_text(&text, &canon, stack);
        stack.pop();
        r
    }

    fn apply_text(&mut self, text: &str, origin: &Path, stack: &mut Vec<PathBuf>) -> Result<()> {
        let dir = origin.parent().unwrap_or(Path::new("."));
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.display().to_string(),
                line: n + 1,
                msg,
            };
            if let Some(rest) = line.strip_prefix("include") {
                if rest.starts_with(char::is_whitespace) {
                    self.apply_file(&dir.join(rest.trim()), stack)?;
                    continue;
                }
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value` or `include <path>`".into()))?;
            let (k, mut v) = (k.trim(), v.trim().to_string());
            if k == "data_path" && !v.is_empty() && Path::new(&v).is_relative() {
                v = dir.join(&v).display().to_string();
            }
            self.set(k, &v).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    /// Sets one key from its textual value (as given on the command line).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = schema(key).ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        self.values.insert(k.name, canonical(k.name, k.kind, value)?);
        Ok(())
    }

    /// Parses a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("unknown configuration key {key}"))
    }

    pub fn usize(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated integer")
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated number")
    }

    pub fn real(&self, key: &str) -> Real {
        self.f64(key) as Real
    }

    pub fn bool(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    pub fn f64_list(&self, key: &str) -> Vec<f64> {
        self.get(key).split(',').map(|s| s.parse().expect("validated list")).collect()
    }

    pub fn usize_list(&self, key: &str) -> Vec<usize> {
        self.get(key).split(',').map(|s| s.parse().expect("validated list")).collect()
    }

    fn opt_f64(&self, key: &str) -> Option<f64> {
        let v = self.get(key);
        (!v.is_empty()).then(|| v.parse().expect("validated number"))
    }

    /// Cross-key checks on top of the per-key ones.
    pub fn validate(&self) -> Result<()> {
        self.encoder(1).validate()?;
        self.pretrain().validate()?;
        self.fusion().validate()?;
        self.eval_fusion().validate()?;
        if self.usize("partition_lo") >= self.usize("partition_hi") {
            return Err(Error::Config("partition_lo must be below partition_hi".into()));
        }
        if self.usize("nprobe") > self.usize("clusters") {
            return Err(Error::Config("nprobe cannot exceed clusters".into()));
        }
        Ok(())
    }

    pub fn data_path(&self) -> Option<PathBuf> {
        let p = self.get("data_path");
        (!p.is_empty()).then(|| PathBuf::from(p))
    }

    pub fn seed(&self) -> u64 {
        self.get("seed").parse().expect("validated integer")
    }

    pub fn encoder(&self, num_items: usize) -> EncoderConfig {
        EncoderConfig {
            num_items,
            hidden: self.usize("hidden"),
            max_len: self.usize("max_len"),
            layers: self.usize("layers"),
            heads: self.usize("heads"),
            inner: self.usize("inner"),
            dropout: self.real("dropout"),
            ln_eps: self.real("ln_eps"),
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            lr: self.real("lr"),
            batch: self.usize("batch"),
            beta1: self.real("adam_beta1"),
            beta2: self.real("adam_beta2"),
            max_epochs: self.usize("epochs"),
            patience: self.usize("patience"),
            tau: self.real("tau"),
            lambda_ret: self.real("lambda_ret"),
            seed: self.seed(),
            track_retrieval_loss: self.bool("track_retrieval_loss"),
        }
    }

    /// Fusion used for RAFT.
    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            alpha: self.real("alpha"),
            beta: self.real("beta"),
            k: self.usize("retrieve_k"),
        }
    }

    /// Fusion used for evaluation: the RAFT values unless overridden.
    pub fn eval_fusion(&self) -> FusionConfig {
        let f = self.fusion();
        FusionConfig {
            alpha: self.opt_f64("eval_alpha").map_or(f.alpha, |x| x as Real),
            beta: self.opt_f64("eval_beta").map_or(f.beta, |x| x as Real),
            k: self.opt_f64("eval_k").map_or(f.k, |x| x as usize),
        }
    }

    pub fn raft(&self) -> RaftConfig {
        let p = self.pretrain();
        RaftConfig {
            lr: p.lr,
            batch: p.batch,
            beta1: p.beta1,
            beta2: p.beta2,
            max_epochs: p.max_epochs,
            patience: p.patience,
            seed: p.seed,
            fusion: self.fusion(),
        }
    }

    /// Sorted `key=value` lines of every key.
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn digest(lines: impl Iterator<Item = String>) -> String {
        let mut h = Sha256::new();
        for l in lines {
            h.update(l.as_bytes());
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Digest of the whole configuration.
    pub fn fingerprint(&self) -> String {
        Self::digest(self.values.iter().map(|(k, v)| format!("{k}={v}\n")))
    }

    /// Digest of the keys that shape persisted artifacts; names the run
    /// directory. Evaluation-only keys are left out so that evaluation
    /// variants share one set of trained artifacts.
    pub fn artifact_fingerprint(&self) -> String {
        Self::digest(
            self.values
                .iter()
                .filter(|(k, _)| schema(k).is_some_and(|s| s.artifact))
                .map(|(k, v)| format!("{k}={v}\n")),
        )
    }

    /// Human-readable listing of every key with its default.
    pub fn describe() -> String {
        SCHEMA
            .iter()
            .map(|k| format!("{} = {}\n", k.name, k.default))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn empty_config_has_table_defaults() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let e = c.encoder(100);
        assert_eq!((e.layers, e.heads, e.hidden, e.max_len), (2, 2, 64, 50));
        let p = c.pretrain();
        assert_eq!((p.lr, p.batch, p.max_epochs, p.patience), (0.001, 1024, 100, 10));
        assert_eq!((p.beta1, p.beta2), (0.9, 0.999));
        assert_eq!((c.usize("clusters"), c.usize("nprobe")), (128, 1));
        assert_eq!(c.fusion(), FusionConfig::default());
        assert_eq!(c.eval_fusion(), c.fusion());
    }

    #[test]
    fn files_includes_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("base.conf"), "hidden = 32\nalpha = 0.3 # comment\n").unwrap();
        fs::write(
            dir.path().join("run.conf"),
            "include base.conf\nalpha = 0.7\ndata_path = data/x.tsv\n",
        )
        .unwrap();
        let mut c = RunConfig::from_file(&dir.path().join("run.conf")).unwrap();
        assert_eq!(c.usize("hidden"), 32);
        assert_eq!(c.f64("alpha"), 0.7);
        assert!(c.data_path().unwrap().ends_with("data/x.tsv"));
        assert!(c.data_path().unwrap().is_absolute());
        c.set_pair("alpha=0.2").unwrap();
        assert_eq!(c.f64("alpha"), 0.2);
    }

    #[test]
    fn include_cycles_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.conf"), "include b.conf\n").unwrap();
        fs::write(dir.path().join("b.conf"), "include a.conf\n").unwrap();
        assert!(matches!(RunConfig::from_file(&dir.path().join("a.conf")), Err(Error::Config(_))));
    }

    #[test]
    fn bad_values_are_rejected_with_location() {
        let mut c = RunConfig::default();
        assert!(c.set("alpha", "1.5").is_err());
        assert!(c.set("heads", "two").is_err());
        assert!(c.set("nonsense", "1").is_err());
        assert!(c.set("sweep_mode", "random").is_err());
        let e = c.apply_str("hidden = 64\nalpha 0.5\n", Path::new("x.conf")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        c.set("heads", "3").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn fingerprints_are_canonical() {
        let mut a = RunConfig::default();
        let mut b = RunConfig::default();
        a.set("lr", "0.0010").unwrap();
        b.set("lr", "1e-3").unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.set("lr", "0.002").unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.artifact_fingerprint(), b.artifact_fingerprint());

        let mut c = a.clone();
        c.set("eval_alpha", "1").unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.artifact_fingerprint(), c.artifact_fingerprint());
        assert_eq!(c.eval_fusion().alpha, 1.0);
        assert_eq!(c.fusion().alpha, 0.5);
    }

    #[test]
    fn describe_lists_every_key() {
        let d = RunConfig::describe();
        let mut c = RunConfig::default();
        c.apply_str(&d, Path::new("defaults.conf")).unwrap();
        assert_eq!(c.fingerprint(), RunConfig::default().fingerprint());
    }
}
