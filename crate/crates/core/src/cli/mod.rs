//! Experiment runner: graph caching, training, evaluation, ablations and
//! score-difference export.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Arg, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::dataset::{
    align_features_by_token, apply_k_core, load_interactions, read_feature_matrix, split_dataset, InteractionDataset,
    Modality, ModalFeatures, Split, SplitRatios,
};
use crate::error::{RearmError, Result};
use crate::eval::{difference_tsv, score_difference_matrix, EvalReport};
use crate::graph::{GraphKind, SparseGraph};
use crate::hetero::{build_bipartite, BipartiteGraph};
use crate::homograph::{HomographConfig, Homographs};
use crate::synthetic::{generate, SyntheticConfig};
use crate::train::{
    forward, load_checkpoint, save_checkpoint, Ablation, EpochRecord, FitOptions, FitOutcome, HyperParams, ModelInputs,
    TrainContext, Variant,
};

pub use config::{RunConfig, KEYS};

const GRAPH_CACHE_VERSION: &str = "rearm-graphs-1";
const GRAPH_FILES: [&str; 5] = ["user_co", "user_sem", "item_co", "item_sem", "bipartite"];

#[derive(Parser)]
#[command(name = "rearm", version, about = "Multi-modal graph recommendation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Build and cache the homogeneous and bipartite graphs
    BuildGraphs(Common),
    /// Train, write checkpoint, history and final val/test report
    Train(Common),
    /// Evaluate a checkpoint on the validation and test splits
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path (default: <out>/model.ckpt)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every ablation variant with one shared seed
    Ablate(Common),
    /// Export σ(score_b) − σ(score_a) over a user × item subset as TSV
    DiffMatrix {
        #[command(flatten)]
        common: Common,
        /// Baseline checkpoint
        #[arg(long)]
        a: PathBuf,
        /// Compared checkpoint
        #[arg(long)]
        b: PathBuf,
        /// Comma-separated user indices (default: first 20)
        #[arg(long)]
        users: Option<String>,
        /// Comma-separated item indices (default: first 20)
        #[arg(long)]
        items: Option<String>,
    },
    /// Write a two-block synthetic dataset and a matching config file
    GenerateSynthetic {
        /// Target directory
        #[arg(long)]
        dir: PathBuf,
        /// Generator seed
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

const CONFIG_COMMANDS: [&str; 5] = ["build-graphs", "train", "evaluate", "ablate", "diff-matrix"];

fn config_args() -> Vec<Arg> {
    KEYS.iter()
        .filter(|(k, _)| *k != "out")
        .map(|(k, help)| {
            let mut a = Arg::new(*k).long(*k).value_name("VALUE").allow_negative_numbers(true).help(*help).help_heading("Config overrides");
            if k.contains('_') {
                a = a.alias(clap::builder::Str::from(k.replace('_', "-").leak() as &'static str));
            }
            a
        })
        .collect()
}

fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for name in CONFIG_COMMANDS {
        cmd = cmd.mut_subcommand(name, |c| c.args(config_args()));
    }
    cmd
}

fn load_config(common: &Common, sub: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for (key, _) in KEYS {
        if *key == "out" {
            continue;
        }
        if let Some(v) = sub.get_one::<String>(key) {
            cfg.set(key, v, Path::new(""))?;
        }
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    cfg.validate()?;
    if cfg.threads > 0 {
        // A second initialisation in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    Ok(cfg)
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion
                | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    let sub = matches.subcommand().map(|(_, m)| m.clone()).unwrap_or_default();
    match dispatch(cli.command, &sub) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, sub: &ArgMatches) -> Result<()> {
    match cmd {
        Command::BuildGraphs(c) => {
            let cfg = load_config(&c, sub)?;
            let data = PreparedData::load(&cfg)?;
            let g = GraphSet::obtain(&cfg, &data, &cfg.hp.homograph)?;
            println!(
                "{}: {} users, {} items -> {}",
                if g.cache_hit { "cache hit" } else { "built graphs" },
                data.ds.n_users,
                data.ds.n_items,
                g.dir.display()
            );
            Ok(())
        }
        Command::Train(c) => cmd_train(&load_config(&c, sub)?),
        Command::Evaluate { common, checkpoint } => {
            let cfg = load_config(&common, sub)?;
            let ck = checkpoint.unwrap_or_else(|| cfg.out_dir().join("model.ckpt"));
            let text = cmd_evaluate(&cfg, &ck)?;
            println!("{text}");
            Ok(())
        }
        Command::Ablate(c) => cmd_ablate(&load_config(&c, sub)?),
        Command::DiffMatrix {
            common,
            a,
            b,
            users,
            items,
        } => {
            let cfg = load_config(&common, sub)?;
            cmd_diff_matrix(&cfg, &a, &b, users.as_deref(), items.as_deref())
        }
        Command::GenerateSynthetic { dir, seed } => cmd_generate(&dir, seed),
    }
}

fn hash_file(h: &mut Sha256, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| RearmError::io(path, e))?;
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(&bytes);
    Ok(())
}

/// Dataset and features as loaded from a run configuration.
pub struct PreparedData {
    pub ds: InteractionDataset,
    pub features: Vec<ModalFeatures>,
    /// SHA-256 over the input files and the settings that shape the split.
    pub input_digest: String,
}

impl PreparedData {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let [interactions, visual, textual] = cfg.input_paths()?;
        let mut h = Sha256::new();
        h.update(GRAPH_CACHE_VERSION);
        h.update((cfg.k_core as u64).to_le_bytes());
        h.update(cfg.split_seed.to_le_bytes());
        for p in [interactions, visual, textual] {
            hash_file(&mut h, p)?;
        }
        let input_digest = hex::encode(h.finalize());

        let pairs = load_interactions(interactions)?;
        let pairs = apply_k_core(&pairs, cfg.k_core)?;
        let ds = split_dataset(&pairs, SplitRatios::default(), cfg.split_seed)?;
        let mut features = Vec::new();
        for (m, p) in Modality::ALL.iter().zip([visual, textual]) {
            let catalog = read_feature_matrix(p)?;
            let aligned = align_features_by_token(&catalog, &ds.item_id_map)?;
            features.push(ModalFeatures::new(*m, &ds, aligned)?);
        }
        Ok(PreparedData {
            ds,
            features,
            input_digest,
        })
    }
}

/// The four homographs and the bipartite graph, from cache or freshly built.
pub struct GraphSet {
    pub graphs: Homographs,
    pub bipartite: Arc<BipartiteGraph>,
    pub cache_hit: bool,
    pub dir: PathBuf,
    pub digest: String,
}

fn graph_digest(data: &PreparedData, hc: &HomographConfig) -> String {
    let mut h = Sha256::new();
    h.update(data.input_digest.as_bytes());
    h.update((hc.top_k_co as u64).to_le_bytes());
    h.update((hc.top_k_sem as u64).to_le_bytes());
    for a in hc.alpha_modal_user.iter().chain(&hc.alpha_modal_item) {
        h.update(a.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl GraphSet {
    pub fn obtain(cfg: &RunConfig, data: &PreparedData, hc: &HomographConfig) -> Result<Self> {
        let digest = graph_digest(data, hc);
        let dir = cfg.cache_root().join(&digest[..16]);
        let meta_path = dir.join("meta.json");
        if let Some(set) = Self::read_cached(&dir, &meta_path, &digest, &data.ds)? {
            return Ok(set);
        }
        let users: Vec<_> = data.features.iter().map(|f| f.user_matrix.view()).collect();
        let items: Vec<_> = data.features.iter().map(|f| f.item_matrix.view()).collect();
        let graphs = Homographs::build(&data.ds, &users, &items, hc)?;
        let bipartite = build_bipartite(&data.ds)?;
        fs::create_dir_all(&dir).map_err(|e| RearmError::io(&dir, e))?;
        for (name, g) in GRAPH_FILES.iter().zip([
            &graphs.user_co,
            &graphs.user_sem,
            &graphs.item_co,
            &graphs.item_sem,
            bipartite.graph(),
        ]) {
            g.write(&dir.join(format!("{name}.csrg")))?;
        }
        let meta = json!({
            "digest": digest,
            "dataset_digest": data.ds.digest(),
            "n_users": data.ds.n_users,
            "n_items": data.ds.n_items,
        });
        write_text(&meta_path, &serde_json::to_string_pretty(&meta).expect("json"))?;
        Ok(GraphSet {
            graphs,
            bipartite: Arc::new(bipartite),
            cache_hit: false,
            dir,
            digest,
        })
    }

    fn read_cached(dir: &Path, meta_path: &Path, digest: &str, ds: &InteractionDataset) -> Result<Option<Self>> {
        let Ok(text) = fs::read_to_string(meta_path) else {
            return Ok(None);
        };
        let meta: Value = match serde_json::from_str(&text) {
            Ok(v) => v,
            Err(_) => return Ok(None),
        };
        if meta["digest"] != digest || meta["dataset_digest"] != ds.digest().as_str() {
            return Ok(None);
        }
        let read = |name: &str, kind| SparseGraph::read(&dir.join(format!("{name}.csrg")), kind);
        let graphs = Homographs {
            user_co: read("user_co", GraphKind::Cooccurrence)?,
            user_sem: read("user_sem", GraphKind::Semantic)?,
            item_co: read("item_co", GraphKind::Cooccurrence)?,
            item_sem: read("item_sem", GraphKind::Semantic)?,
        };
        let bipartite = BipartiteGraph::from_graph(ds.n_users, ds.n_items, read("bipartite", GraphKind::Bipartite)?)?;
        Ok(Some(GraphSet {
            graphs,
            bipartite: Arc::new(bipartite),
            cache_hit: true,
            dir: dir.to_path_buf(),
            digest: digest.to_string(),
        }))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| RearmError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| RearmError::io(path, e))
}

/// JSON array of `{split, K, recall, ndcg, n_users}` rows over several reports.
pub fn reports_json(reports: &[EvalReport]) -> String {
    let rows: Vec<Value> = reports
        .iter()
        .flat_map(|r| serde_json::from_str::<Vec<Value>>(&r.to_json()).expect("report json"))
        .collect();
    serde_json::to_string_pretty(&rows).expect("json")
}

fn history_jsonl(history: &[EpochRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

struct TrainedRun {
    hp: HyperParams,
    outcome: FitOutcome,
    reports: Vec<EvalReport>,
}

fn train_variant(
    cfg: &RunConfig,
    data: &PreparedData,
    graphs: &GraphSet,
    ablation: Ablation,
    label: &str,
) -> Result<TrainedRun> {
    let hp = ablation.apply(&cfg.hp);
    let inputs = ModelInputs::prepare(&graphs.graphs, graphs.bipartite.clone(), &data.features, &hp, &ablation)?;
    let ctx = TrainContext {
        ds: &data.ds,
        inputs: &inputs,
        hp: &hp,
        ablation,
    };
    let opts = FitOptions {
        record_seconds: cfg.record_seconds,
    };
    let outcome = ctx.fit(&opts, &mut |r| {
        log::info!(
            "[{label}] epoch {} loss {:.5} bpr {:.5} val R@20 {:.4} N@20 {:.4}",
            r.epoch,
            r.loss,
            r.bpr,
            r.val_recall20,
            r.val_ndcg20
        );
    })?;
    let reports = [Split::Val, Split::Test]
        .iter()
        .map(|s| ctx.evaluate(&outcome.store, *s, &hp.eval_topk))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainedRun { hp, outcome, reports })
}

fn write_run(dir: &Path, run: &TrainedRun, ablation: &Ablation, dataset_digest: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| RearmError::io(dir, e))?;
    save_checkpoint(
        &dir.join("model.ckpt"),
        &run.outcome.store,
        &run.hp,
        ablation,
        dataset_digest,
        run.outcome.best_epoch,
    )?;
    write_text(&dir.join("history.jsonl"), &history_jsonl(&run.outcome.history))?;
    write_text(&dir.join("report.json"), &reports_json(&run.reports))
}

fn write_manifest(cfg: &RunConfig, command: &str, extra: Value) -> Result<()> {
    let mut m = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg.to_json(),
    });
    if let (Some(obj), Value::Object(more)) = (m.as_object_mut(), extra) {
        obj.extend(more);
    }
    write_text(&cfg.out_dir().join("manifest.json"), &serde_json::to_string_pretty(&m).expect("json"))
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let data = PreparedData::load(cfg)?;
    let graphs = GraphSet::obtain(cfg, &data, &cfg.hp.homograph)?;
    if graphs.cache_hit {
        log::info!("cache hit: {}", graphs.dir.display());
    }
    let ablation = cfg.ablation()?;
    let out = cfg.out_dir();
    let run = train_variant(cfg, &data, &graphs, ablation, "train")?;
    let digest = data.ds.digest();
    write_run(&out, &run, &ablation, &digest)?;
    write_manifest(
        cfg,
        "train",
        json!({
            "dataset_digest": digest,
            "graph_digest": graphs.digest,
            "ablation": ablation,
            "hyperparams": run.hp,
            "best_epoch": run.outcome.best_epoch,
            "epochs_run": run.outcome.history.len(),
            "files": ["model.ckpt", "history.jsonl", "report.json"],
        }),
    )?;
    println!("{}", reports_json(&run.reports));
    Ok(())
}

/// Loads a checkpoint, refuses it unless it was trained on this dataset,
/// and reports val/test metrics under its own hyperparameters.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path) -> Result<String> {
    let data = PreparedData::load(cfg)?;
    let ck = load_checkpoint(checkpoint)?;
    let digest = data.ds.digest();
    if ck.header.dataset_digest != digest {
        return Err(RearmError::Data(format!(
            "checkpoint {} was trained on dataset {} but the configured data is {}",
            checkpoint.display(),
            &ck.header.dataset_digest,
            digest
        )));
    }
    let hp = &ck.header.hyperparams;
    let graphs = GraphSet::obtain(cfg, &data, &hp.homograph)?;
    let inputs = ModelInputs::prepare(&graphs.graphs, graphs.bipartite.clone(), &data.features, hp, &ck.header.ablation)?;
    ck.store.check_layout(&crate::train::StoreShape {
        n_users: data.ds.n_users,
        n_items: data.ds.n_items,
        dim: hp.dim,
        rank: hp.rank,
        modal_dims: inputs.modal_dims(),
    })?;
    let ctx = TrainContext {
        ds: &data.ds,
        inputs: &inputs,
        hp,
        ablation: ck.header.ablation,
    };
    let reports = [Split::Val, Split::Test]
        .iter()
        .map(|s| ctx.evaluate(&ck.store, *s, &hp.eval_topk))
        .collect::<Result<Vec<_>>>()?;
    let text = reports_json(&reports);
    write_text(&cfg.out_dir().join("eval_report.json"), &text)?;
    write_manifest(
        cfg,
        "evaluate",
        json!({
            "checkpoint": checkpoint.display().to_string(),
            "dataset_digest": digest,
            "files": ["eval_report.json"],
        }),
    )?;
    Ok(text)
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let data = PreparedData::load(cfg)?;
    let graphs = GraphSet::obtain(cfg, &data, &cfg.hp.homograph)?;
    let out = cfg.out_dir();
    let digest = data.ds.digest();
    let mut rows = Vec::new();
    let mut variants = serde_json::Map::new();
    let mut md = String::from("| variant |");
    let ks = &cfg.hp.eval_topk;
    for split in ["val", "test"] {
        for k in ks {
            md += &format!(" {split} R@{k} | {split} N@{k} |");
        }
    }
    md += "\n|---|";
    md += &"---|".repeat(4 * ks.len());
    md.push('\n');
    for v in Variant::ALL {
        let ablation = v.ablation();
        let run = train_variant(cfg, &data, &graphs, ablation, v.name())?;
        write_run(&out.join(v.name()), &run, &ablation, &digest)?;
        md += &format!("| {} |", v.name());
        for r in &run.reports {
            for m in &r.metrics {
                rows.push(json!({
                    "variant": v.name(),
                    "split": r.split,
                    "K": m.k,
                    "recall": m.recall,
                    "ndcg": m.ndcg,
                    "n_users": r.n_users,
                }));
                md += &format!(" {:.4} | {:.4} |", m.recall, m.ndcg);
            }
        }
        md.push('\n');
        variants.insert(
            v.name().to_string(),
            json!({
                "ablation": ablation,
                "hyperparams": run.hp,
                "best_epoch": run.outcome.best_epoch,
            }),
        );
    }
    write_text(&out.join("ablation.json"), &serde_json::to_string_pretty(&rows).expect("json"))?;
    write_text(&out.join("ablation.md"), &md)?;
    write_manifest(
        cfg,
        "ablate",
        json!({
            "dataset_digest": digest,
            "graph_digest": graphs.digest,
            "variants": variants,
            "files": ["ablation.json", "ablation.md"],
        }),
    )?;
    print!("{md}");
    Ok(())
}

fn parse_indices(list: Option<&str>, n: usize, what: &str) -> Result<Vec<usize>> {
    match list {
        None => Ok((0..n.min(20)).collect()),
        Some(s) => s
            .split(',')
            .map(str::trim)
            .filter(|x| !x.is_empty())
            .map(|x| {
                x.parse()
                    .map_err(|_| RearmError::Config(format!("{what}: cannot parse index {x:?}")))
            })
            .collect(),
    }
}

fn cmd_diff_matrix(cfg: &RunConfig, a: &Path, b: &Path, users: Option<&str>, items: Option<&str>) -> Result<()> {
    let data = PreparedData::load(cfg)?;
    let digest = data.ds.digest();
    let mut finals = Vec::new();
    for path in [a, b] {
        let ck = load_checkpoint(path)?;
        if ck.header.dataset_digest != digest {
            return Err(RearmError::Data(format!(
                "checkpoint {} belongs to a different dataset",
                path.display()
            )));
        }
        let hp = &ck.header.hyperparams;
        let graphs = GraphSet::obtain(cfg, &data, &hp.homograph)?;
        let inputs =
            ModelInputs::prepare(&graphs.graphs, graphs.bipartite.clone(), &data.features, hp, &ck.header.ablation)?;
        let cache = forward(&ck.store, &inputs, hp, &ck.header.ablation, None)?;
        finals.push((cache.user_star, cache.item_star));
    }
    let users = parse_indices(users, data.ds.n_users, "users")?;
    let items = parse_indices(items, data.ds.n_items, "items")?;
    let m = score_difference_matrix(
        (finals[0].0.view(), finals[0].1.view()),
        (finals[1].0.view(), finals[1].1.view()),
        &users,
        &items,
    )?;
    let path = cfg.out_dir().join("diff_matrix.tsv");
    write_text(&path, &difference_tsv(&m, &users, &items))?;
    write_manifest(
        cfg,
        "diff-matrix",
        json!({
            "a": a.display().to_string(),
            "b": b.display().to_string(),
            "files": ["diff_matrix.tsv"],
        }),
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Settings under which the synthetic data trains in seconds.
pub const SYNTHETIC_CONFIG: &str = "\
# two-block synthetic data
interactions = interactions.tsv
visual = visual.txt
textual = textual.txt
d = 32
lr = 0.01
layers = 1
epochs = 50
patience = 50
";

fn cmd_generate(dir: &Path, seed: u64) -> Result<()> {
    let data = generate(&SyntheticConfig {
        seed,
        ..Default::default()
    })?;
    data.write(dir)?;
    let path = dir.join("rearm.conf");
    write_text(&path, SYNTHETIC_CONFIG)?;
    let mut stdout = std::io::stdout();
    let _ = writeln!(stdout, "wrote {} interactions and features to {}", data.pairs.len(), dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        command().debug_assert();
    }

    #[test]
    fn help_and_bad_usage_codes() {
        assert_eq!(run(["rearm", "--help"]), 0);
        assert_eq!(run(["rearm", "train", "--help"]), 0);
        assert_eq!(run(["rearm", "train", "--no-such-flag", "1"]), 1);
        assert_eq!(run(["rearm"]), 0);
    }

    #[test]
    fn unknown_config_key_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.conf");
        fs::write(&cfg, "bogus = 1\n").unwrap();
        assert_eq!(run(["rearm", "train", "--config", cfg.to_str().unwrap()]), 1);
    }

    #[test]
    fn index_lists() {
        assert_eq!(parse_indices(None, 3, "u").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_indices(Some("4, 2"), 3, "u").unwrap(), vec![4, 2]);
        assert!(parse_indices(Some("x"), 3, "u").is_err());
    }
}
