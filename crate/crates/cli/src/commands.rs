use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use aurec_core::dataset::{self, synthetic, Delimiter, IdMap, Target};
use aurec_core::encoder::EmbeddingTable;
use aurec_core::eval::{measure_geometry, rank_eval};
use aurec_core::trainer::{emit_trace, train_with, TrainError, TrainOptions};
use aurec_core::{DatasetSplit, Error, InteractionSet, SplitRatios, TrainConfig};

use crate::report::{Artifacts, DatasetFingerprint, Geometry, MetricsReport, RunManifest};
use crate::{CliError, EvalArgs, PreprocessArgs, ProbeArgs, SplitArg, SynthArgs, TrainArgs};

type CmdResult = Result<(), CliError>;
type Writer<'a> = &'a dyn Fn(&Path) -> Result<(), Error>;

const MANIFEST_KS: [usize; 3] = [10, 20, 50];

fn delimiter(s: &str) -> Result<Delimiter, CliError> {
    Delimiter::parse(s).map_err(|e| CliError::Usage(e.to_string()))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize")
}

fn stats_line(set: &InteractionSet) -> String {
    format!("users={} items={} interactions={} density={:.6e}", set.n_users(), set.n_items(), set.len(), set.density())
}

/// Writes every output under a temporary name first and renames them only
/// once all writes succeeded, so a failure leaves nothing behind.
fn write_all_or_nothing(outputs: &[(PathBuf, Writer)]) -> Result<(), Error> {
    let staged: Vec<PathBuf> = outputs.iter().map(|(p, _)| sidecar(p, ".partial")).collect();
    let cleanup = || staged.iter().for_each(|p| drop(fs::remove_file(p)));
    for ((_, write), tmp) in outputs.iter().zip(&staged) {
        if let Err(e) = write(tmp) {
            cleanup();
            return Err(e);
        }
    }
    for ((dest, _), tmp) in outputs.iter().zip(&staged) {
        if let Err(e) = fs::rename(tmp, dest) {
            cleanup();
            return Err(Error::Io { path: dest.clone(), source: e });
        }
    }
    Ok(())
}

pub fn preprocess(args: &PreprocessArgs) -> CmdResult {
    let delim = delimiter(&args.delimiter)?;
    let raw = dataset::load_interactions(&args.input, delim)?;
    let pre = dataset::preprocess(&raw, args.k_core)?;
    let stats = stats_line(&pre.set);
    let ids: &IdMap = &pre.ids;
    write_all_or_nothing(&[
        (args.output.clone(), &|p: &Path| pre.set.write_to(p, Delimiter::Tab)),
        (sidecar(&args.output, ".users"), &|p: &Path| IdMap::write_side(&ids.users, p)),
        (sidecar(&args.output, ".items"), &|p: &Path| IdMap::write_side(&ids.items, p)),
        (sidecar(&args.output, ".stats"), &|p: &Path| {
            fs::write(p, format!("{stats}\n")).map_err(|e| Error::Io { path: p.to_owned(), source: e })
        }),
    ])?;
    println!("{stats}");
    Ok(())
}

fn load_config(args: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", args.config.display())))?;
    for o in &args.overrides {
        if !o.contains('=') {
            return Err(CliError::Usage(format!("--set expects key=value, got {o:?}")));
        }
        text.push('\n');
        text.push_str(o);
    }
    Ok(TrainConfig::from_kv_text(&text)?)
}

fn split_for(data: &InteractionSet, cfg: &TrainConfig) -> Result<DatasetSplit, CliError> {
    Ok(dataset::split(data, SplitRatios::default(), cfg.seed)?)
}

fn metrics(
    table: &EmbeddingTable,
    split: &DatasetSplit,
    target: Target,
    ks: &[usize],
    all_interactions: bool,
) -> Result<MetricsReport, Error> {
    let ranking = rank_eval(table, split, target, ks)?;
    let (over, geometry) = if all_interactions {
        ("all", measure_geometry(table, &split.all_interactions())?)
    } else {
        ("train", measure_geometry(table, &split.train)?)
    };
    let name = match target {
        Target::Validation => "validation",
        Target::Test => "test",
    };
    Ok(MetricsReport::new(name, &ranking, over, geometry))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_owned(), source: e })
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let cfg = load_config(args)?;
    let data = InteractionSet::read_remapped(&args.data, Delimiter::Tab)?;
    let split = split_for(&data, &cfg)?;
    let opts = TrainOptions { measure_time: args.timing };
    let quiet = args.quiet;
    let result = train_with(&split, &cfg, opts, |t| {
        if !quiet {
            eprintln!(
                "epoch {:>4} loss {:.6} align {:.4} uniform {:.4}/{:.4} val_ndcg@20 {:.4}",
                t.epoch, t.train_loss, t.l_align, t.l_uniform_user, t.l_uniform_item, t.val_ndcg20
            );
        }
    });

    create_dir(&args.out_dir)?;
    let trace_path = args.out_dir.join("trace.csv");
    let outcome = match result {
        Ok(o) => o,
        Err(TrainError::Diverged { epoch, batch, cause, last_good }) => {
            emit_trace(&last_good.trace, &trace_path)?;
            return Err(TrainError::Diverged { epoch, batch, cause, last_good }.into());
        }
        Err(e) => return Err(e.into()),
    };

    let ckpt = args.out_dir.join("checkpoint.emb");
    let meta = sidecar(&ckpt, ".meta");
    outcome.reps.write_dump(&ckpt)?;
    let mut meta_text = cfg.to_kv_text();
    meta_text.push_str(&format!("best_epoch={}\n", outcome.best_epoch));
    fs::write(&meta, meta_text).map_err(|e| Error::Io { path: meta.clone(), source: e })?;
    emit_trace(&outcome.trace, &trace_path)?;

    let mut final_metrics = BTreeMap::new();
    for (target, name) in [(Target::Validation, "validation"), (Target::Test, "test")] {
        if !split.target(target).is_empty() {
            final_metrics.insert(name.to_owned(), metrics(&outcome.reps, &split, target, &MANIFEST_KS, false)?);
        }
    }
    let manifest = RunManifest {
        config: cfg.to_kv_text(),
        dataset: DatasetFingerprint::of(&args.data.display().to_string(), &data),
        seed: cfg.seed,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.trace.len(),
        metrics: final_metrics,
        artifacts: Artifacts {
            checkpoint: ckpt.display().to_string(),
            checkpoint_meta: meta.display().to_string(),
            trace: trace_path.display().to_string(),
        },
    };
    let manifest_path = args.out_dir.join("manifest.json");
    fs::write(&manifest_path, to_json(&manifest) + "\n")
        .map_err(|e| Error::Io { path: manifest_path.clone(), source: e })?;

    let summary = manifest.metrics.get("test").or_else(|| manifest.metrics.get("validation"));
    match summary {
        Some(m) => println!("best_epoch={} {} ndcg@20={:.4}", outcome.best_epoch, m.split, m.ndcg["20"]),
        None => println!("best_epoch={}", outcome.best_epoch),
    }
    Ok(())
}

/// Config and best epoch recorded next to a checkpoint.
fn read_meta(path: &Path) -> Result<(TrainConfig, usize), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut best = None;
    let mut config = String::new();
    for line in text.lines() {
        match line.strip_prefix("best_epoch=") {
            Some(v) => best = v.trim().parse().ok(),
            None => {
                config.push_str(line);
                config.push('\n');
            }
        }
    }
    let best = best.ok_or_else(|| CliError::Data(format!("{}: missing best_epoch", path.display())))?;
    let cfg = TrainConfig::from_kv_text(&config).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok((cfg, best))
}

pub fn eval(args: &EvalArgs) -> CmdResult {
    if args.ks.is_empty() || args.ks.contains(&0) {
        return Err(CliError::Usage("--ks needs positive cutoffs".into()));
    }
    let (cfg, _) = read_meta(&sidecar(&args.checkpoint, ".meta"))?;
    let table = EmbeddingTable::read_dump(&args.checkpoint)?;
    let data = InteractionSet::read_remapped(&args.data, Delimiter::Tab)?;
    if (table.n_users(), table.n_items()) != (data.n_users(), data.n_items()) {
        return Err(CliError::Data(format!(
            "checkpoint covers {} users / {} items, dataset has {} / {}",
            table.n_users(),
            table.n_items(),
            data.n_users(),
            data.n_items()
        )));
    }
    let split = split_for(&data, &cfg)?;
    let target = match args.split {
        SplitArg::Validation => Target::Validation,
        SplitArg::Test => Target::Test,
    };
    let report = metrics(&table, &split, target, &args.ks, args.all_interactions)?;
    println!("{}", to_json(&report));
    Ok(())
}

pub fn probe(args: &ProbeArgs) -> CmdResult {
    let table = EmbeddingTable::read_dump(&args.embeddings)?;
    let set = InteractionSet::read_remapped(&args.interactions, delimiter(&args.delimiter)?)?;
    let geometry: Geometry = measure_geometry(&table, &set)?.into();
    println!("{}", to_json(&geometry));
    Ok(())
}

pub fn synth(args: &SynthArgs) -> CmdResult {
    if args.users < 2 || args.items < 2 || args.per_user == 0 || args.per_user > args.items / 2 {
        return Err(CliError::Usage("need users >= 2, items >= 2 and 0 < per_user <= items / 2".into()));
    }
    let set = synthetic::two_cluster(args.users, args.items, args.per_user, args.seed);
    set.write_to(&args.output, Delimiter::Tab)?;
    println!("{}", stats_line(&set));
    Ok(())
}
