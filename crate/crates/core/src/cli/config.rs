//! Flat `key = value` run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::error::{RearmError, Result};
use crate::fusion::SoftmaxAxis;
use crate::train::{Ablation, HyperParams};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("interactions", "user<TAB>item interaction file"),
    ("visual", "visual feature matrix, rows indexed by item token"),
    ("textual", "textual feature matrix, rows indexed by item token"),
    ("cache_dir", "graph cache directory (REARM_CACHE_DIR overrides)"),
    ("out", "output directory"),
    ("k_core", "k-core threshold applied before splitting"),
    ("split_seed", "seed of the 8:1:1 split"),
    ("d", "embedding dimension"),
    ("batch_size", "training batch size"),
    ("lr", "Adam learning rate"),
    ("layers", "bipartite propagation layers"),
    ("hom_layers", "homograph propagation layers"),
    ("top_k_co", "co-occurrence neighbours kept per node"),
    ("top_k_sem", "semantic neighbours kept per node"),
    ("alpha_co_user", "weight of the user co-occurrence graph"),
    ("alpha_co_item", "weight of the item co-occurrence graph"),
    ("alpha_modal_user", "visual,textual weights of the user semantic graphs"),
    ("alpha_modal_item", "visual,textual weights of the item semantic graphs"),
    ("tau", "InfoNCE temperature"),
    ("lambda_cl", "contrastive loss weight"),
    ("lambda_ort", "orthogonal loss weight"),
    ("lambda_p", "L2 weight"),
    ("rank", "meta-network rank"),
    ("dropout", "attention dropout rate"),
    ("softmax", "attention softmax axis: cols or rows"),
    ("epochs", "maximum epochs"),
    ("patience", "early-stopping patience in epochs"),
    ("eval_topk", "comma-separated cutoffs"),
    ("seed", "initialisation, sampling and dropout seed"),
    ("exact", "keep parameters in f64 between steps"),
    ("ablation", "comma-separated variants, e.g. wo_hom,wo_ort"),
    ("threads", "worker threads, 0 = automatic"),
    ("record_seconds", "write wall-clock seconds into the history"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub interactions: Option<PathBuf>,
    pub visual: Option<PathBuf>,
    pub textual: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub k_core: usize,
    pub split_seed: u64,
    pub hp: HyperParams,
    pub ablation: Vec<String>,
    pub threads: usize,
    pub record_seconds: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            interactions: None,
            visual: None,
            textual: None,
            cache_dir: None,
            out: None,
            k_core: 5,
            split_seed: 2024,
            hp: HyperParams::default(),
            ablation: Vec::new(),
            threads: 0,
            record_seconds: false,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| RearmError::Config(format!("{key}: cannot parse {value:?}")))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(RearmError::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Reads a config file; relative paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| RearmError::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, path.parent().unwrap_or(Path::new("")))?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str, base: &Path) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| RearmError::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1)))?;
            self.set(key.trim(), value.trim(), base)?;
        }
        Ok(())
    }

    /// Sets one key. Relative paths are joined onto `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let path = || Some(base.join(value));
        let hp = &mut self.hp;
        match key {
            "interactions" => self.interactions = path(),
            "visual" => self.visual = path(),
            "textual" => self.textual = path(),
            "cache_dir" => self.cache_dir = path(),
            "out" => self.out = path(),
            "k_core" => self.k_core = num(key, value)?,
            "split_seed" => self.split_seed = num(key, value)?,
            "d" => hp.dim = num(key, value)?,
            "batch_size" => hp.batch_size = num(key, value)?,
            "lr" => hp.learning_rate = num(key, value)?,
            "layers" => hp.layers = num(key, value)?,
            "hom_layers" => hp.homograph.layers = num(key, value)?,
            "top_k_co" => hp.homograph.top_k_co = num(key, value)?,
            "top_k_sem" => hp.homograph.top_k_sem = num(key, value)?,
            "alpha_co_user" => hp.homograph.alpha_co_user = num(key, value)?,
            "alpha_co_item" => hp.homograph.alpha_co_item = num(key, value)?,
            "alpha_modal_user" => hp.homograph.alpha_modal_user = list(key, value)?,
            "alpha_modal_item" => hp.homograph.alpha_modal_item = list(key, value)?,
            "tau" => hp.refine.tau = num(key, value)?,
            "lambda_cl" => hp.refine.lambda_cl = num(key, value)?,
            "lambda_ort" => hp.refine.lambda_ort = num(key, value)?,
            "lambda_p" => hp.refine.lambda_p = num(key, value)?,
            "rank" => hp.rank = num(key, value)?,
            "dropout" => hp.dropout = num(key, value)?,
            "softmax" => {
                hp.softmax = match value {
                    "cols" => SoftmaxAxis::Cols,
                    "rows" => SoftmaxAxis::Rows,
                    _ => return Err(RearmError::Config(format!("softmax: expected cols or rows, got {value:?}"))),
                }
            }
            "epochs" => hp.epochs_max = num(key, value)?,
            "patience" => hp.patience = num(key, value)?,
            "eval_topk" => hp.eval_topk = list(key, value)?,
            "seed" => hp.seed = num(key, value)?,
            "exact" => hp.exact = boolean(key, value)?,
            "ablation" => {
                self.ablation = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty() && *s != "full")
                    .map(String::from)
                    .collect()
            }
            "threads" => self.threads = num(key, value)?,
            "record_seconds" => self.record_seconds = boolean(key, value)?,
            _ => return Err(RearmError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_core == 0 {
            return Err(RearmError::Config("k_core must be >= 1".into()));
        }
        self.hp.validate()?;
        Ablation::from_names(&self.ablation)?;
        Ok(())
    }

    pub fn ablation(&self) -> Result<Ablation> {
        Ablation::from_names(&self.ablation)
    }

    /// Input files that must exist before any compute.
    pub fn input_paths(&self) -> Result<[&Path; 3]> {
        fn need<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
            p.as_deref()
                .ok_or_else(|| RearmError::Config(format!("`{key}` is not set")))
        }
        let paths = [
            need(&self.interactions, "interactions")?,
            need(&self.visual, "visual")?,
            need(&self.textual, "textual")?,
        ];
        for p in paths {
            if !p.is_file() {
                return Err(RearmError::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
                ));
            }
        }
        Ok(paths)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("rearm-out"))
    }

    /// `REARM_CACHE_DIR`, then `cache_dir`, then `<out>/cache`.
    pub fn cache_root(&self) -> PathBuf {
        match std::env::var_os("REARM_CACHE_DIR") {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.cache_dir.clone().unwrap_or_else(|| self.out_dir().join("cache")),
        }
    }

    /// Effective configuration as a JSON object keyed like the config file.
    pub fn to_json(&self) -> Value {
        let hp = &self.hp;
        let p = |x: &Option<PathBuf>| x.as_ref().map(|p| p.display().to_string());
        let mut m = Map::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        put("interactions", json!(p(&self.interactions)));
        put("visual", json!(p(&self.visual)));
        put("textual", json!(p(&self.textual)));
        put("cache_dir", json!(self.cache_root().display().to_string()));
        put("out", json!(self.out_dir().display().to_string()));
        put("k_core", json!(self.k_core));
        put("split_seed", json!(self.split_seed));
        put("d", json!(hp.dim));
        put("batch_size", json!(hp.batch_size));
        put("lr", json!(hp.learning_rate));
        put("layers", json!(hp.layers));
        put("hom_layers", json!(hp.homograph.layers));
        put("top_k_co", json!(hp.homograph.top_k_co));
        put("top_k_sem", json!(hp.homograph.top_k_sem));
        put("alpha_co_user", json!(hp.homograph.alpha_co_user));
        put("alpha_co_item", json!(hp.homograph.alpha_co_item));
        put("alpha_modal_user", json!(join(&hp.homograph.alpha_modal_user)));
        put("alpha_modal_item", json!(join(&hp.homograph.alpha_modal_item)));
        put("tau", json!(hp.refine.tau));
        put("lambda_cl", json!(hp.refine.lambda_cl));
        put("lambda_ort", json!(hp.refine.lambda_ort));
        put("lambda_p", json!(hp.refine.lambda_p));
        put("rank", json!(hp.rank));
        put("dropout", json!(hp.dropout));
        put("softmax", json!(hp.softmax));
        put("epochs", json!(hp.epochs_max));
        put("patience", json!(hp.patience));
        put("eval_topk", json!(join(&hp.eval_topk)));
        put("seed", json!(hp.seed));
        put("exact", json!(hp.exact));
        put("ablation", json!(self.ablation.join(",")));
        put("threads", json!(self.threads));
        put("record_seconds", json!(self.record_seconds));
        Value::Object(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let mut c = RunConfig::default();
        c.apply_text(
            "# header\nd = 32  # inline\neval_topk = 5, 10\nalpha_modal_item=0.3,0.7\nsoftmax = rows\nablation = wo_ort\n\n",
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(c.hp.dim, 32);
        assert_eq!(c.hp.eval_topk, vec![5, 10]);
        assert_eq!(c.hp.homograph.alpha_modal_item, vec![0.3, 0.7]);
        assert_eq!(c.hp.softmax, SoftmaxAxis::Rows);
        assert_eq!(c.ablation, vec!["wo_ort"]);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("learning_rate = 0.1", Path::new("")).is_err());
        assert!(c.apply_text("d 32", Path::new("")).is_err());
        assert!(c.apply_text("d = many", Path::new("")).is_err());
        assert!(c.apply_text("exact = maybe", Path::new("")).is_err());
    }

    #[test]
    fn relative_paths_join_base() {
        let mut c = RunConfig::default();
        c.apply_text("interactions = data/x.tsv", Path::new("/cfg")).unwrap();
        assert_eq!(c.interactions, Some(PathBuf::from("/cfg/data/x.tsv")));
    }

    #[test]
    fn every_key_round_trips_through_json() {
        let j = RunConfig::default().to_json();
        for (k, _) in KEYS {
            assert!(j.get(*k).is_some(), "{k} missing from json");
        }
        assert_eq!(j.as_object().unwrap().len(), KEYS.len());
    }

    #[test]
    fn missing_inputs_are_config_errors() {
        let c = RunConfig::default();
        assert_eq!(c.input_paths().unwrap_err().exit_code(), 1);
    }
}
