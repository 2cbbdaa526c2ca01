//! Mini-batch training with early stopping on validation NDCG@20 and a
//! per-epoch geometry trace.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::dataset::{iter_batches, DatasetSplit, PositiveBatch, Target};
use crate::encoder::{init_xavier, EmbeddingTable, GraphPropagator};
use crate::error::{Error, Result};
use crate::eval::{measure_geometry, rank_eval};
use crate::loss::{bpr_loss, direct_au_loss, sample_negatives, AuTerms, LossOutput, NegativeStrategy, Score};
use crate::matrix::Matrix;
use crate::optim::{AdamState, RowGrads};
use crate::rng::{substream, Stream};

/// Cutoff used for model selection.
pub const SELECTION_K: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    DirectAu,
    Bpr,
    BprDs,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::DirectAu => "direct_au",
            Objective::Bpr => "bpr",
            Objective::BprDs => "bpr_ds",
        }
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct_au" => Ok(Objective::DirectAu),
            "bpr" => Ok(Objective::Bpr),
            "bpr_ds" => Ok(Objective::BprDs),
            _ => Err(Error::Config(format!("unknown objective {s:?} (direct_au, bpr, bpr_ds)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Mf,
    Lgcn { layers: usize },
}

/// All hyperparameters of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub encoder: EncoderKind,
    /// Uniformity weight; present exactly when the objective is `direct_au`.
    pub gamma: Option<f64>,
    pub d: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub ds_candidates: usize,
}

impl TrainConfig {
    pub fn new(objective: Objective) -> Self {
        TrainConfig {
            objective,
            encoder: EncoderKind::Mf,
            gamma: None,
            d: 64,
            lr: 1e-3,
            batch_size: 256,
            weight_decay: 0.0,
            max_epochs: 300,
            patience: 10,
            seed: 0,
            ds_candidates: crate::loss::DEFAULT_DS_CANDIDATES,
        }
    }

    pub fn direct_au(gamma: f64) -> Self {
        TrainConfig { gamma: Some(gamma), ..TrainConfig::new(Objective::DirectAu) }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        match (self.objective, self.gamma) {
            (Objective::DirectAu, None) => return fail("gamma is required for objective direct_au".into()),
            (Objective::DirectAu, Some(g)) if !(g >= 0.0 && g.is_finite()) => {
                return fail(format!("gamma must be a finite non-negative number, got {g}"))
            }
            (Objective::Bpr | Objective::BprDs, Some(_)) => {
                return fail(format!("gamma only applies to direct_au, not {}", self.objective.as_str()))
            }
            _ => {}
        }
        if self.d == 0 || self.batch_size == 0 || self.patience == 0 || self.ds_candidates == 0 {
            return fail("d, batch_size, patience and ds_candidates must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if let EncoderKind::Lgcn { layers: 0 } = self.encoder {
            return fail("lgcn needs at least one layer".into());
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 12] = [
        "objective",
        "encoder",
        "layers",
        "gamma",
        "d",
        "lr",
        "batch_size",
        "weight_decay",
        "max_epochs",
        "patience",
        "seed",
        "ds_candidates",
    ];

    /// Parses flat `key=value` lines; blank lines and `#` comments are
    /// skipped. Unknown keys are errors. Keys not given keep their defaults,
    /// except `objective` (required) and `gamma` (required for direct_au).
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", idx + 1)))?;
            entries.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        Self::from_entries(&entries)
    }

    /// Builds a config from `(key, value)` pairs; later entries win.
    pub fn from_entries(entries: &[(String, String)]) -> Result<Self> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        let mut objective = None;
        let mut encoder_name = "mf".to_owned();
        let mut layers = None;
        let mut cfg = TrainConfig::new(Objective::Bpr);
        for (k, v) in entries {
            match k.as_str() {
                "objective" => objective = Some(v.parse::<Objective>()?),
                "encoder" => encoder_name = v.clone(),
                "layers" => layers = Some(num::<usize>(k, v)?),
                "gamma" => cfg.gamma = Some(num(k, v)?),
                "d" => cfg.d = num(k, v)?,
                "lr" => cfg.lr = num(k, v)?,
                "batch_size" => cfg.batch_size = num(k, v)?,
                "weight_decay" => cfg.weight_decay = num(k, v)?,
                "max_epochs" => cfg.max_epochs = num(k, v)?,
                "patience" => cfg.patience = num(k, v)?,
                "seed" => cfg.seed = num(k, v)?,
                "ds_candidates" => cfg.ds_candidates = num(k, v)?,
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
        }
        cfg.objective = objective.ok_or_else(|| Error::Config("objective is required".into()))?;
        cfg.encoder = match (encoder_name.as_str(), layers) {
            ("mf", None) => EncoderKind::Mf,
            ("mf", Some(_)) => return Err(Error::Config("layers only applies to encoder=lgcn".into())),
            ("lgcn", l) => EncoderKind::Lgcn { layers: l.unwrap_or(2) },
            (other, _) => return Err(Error::Config(format!("unknown encoder {other:?} (mf, lgcn)"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical `key=value` echo, parseable by [`TrainConfig::from_kv_text`].
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "objective={}", self.objective.as_str());
        match self.encoder {
            EncoderKind::Mf => s.push_str("encoder=mf\n"),
            EncoderKind::Lgcn { layers } => {
                let _ = writeln!(s, "encoder=lgcn\nlayers={layers}");
            }
        }
        if let Some(g) = self.gamma {
            let _ = writeln!(s, "gamma={g}");
        }
        let _ = writeln!(s, "d={}", self.d);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "max_epochs={}", self.max_epochs);
        let _ = writeln!(s, "patience={}", self.patience);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "ds_candidates={}", self.ds_candidates);
        s
    }
}

/// One row of the learning-dynamics trace.
///
/// `l_align` and `l_uniform_*` are measured on the full training
/// interactions after the epoch; `batch_terms` holds the batch-averaged
/// loss components (direct_au only).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochTrace {
    pub epoch: usize,
    pub train_loss: f64,
    pub l_align: f64,
    pub l_uniform_user: f64,
    pub l_uniform_item: f64,
    pub val_ndcg20: f64,
    pub wall_seconds: f64,
    pub batch_terms: Option<AuTerms>,
}

/// Patience counter on a metric that should increase.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::NEG_INFINITY, best_epoch: 0, since_best: 0 }
    }

    /// Records the metric of `epoch`. Only a strictly greater value counts as
    /// an improvement.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.since_best = 0;
            StopDecision { improved: true, stop: false }
        } else {
            self.since_best += 1;
            StopDecision { improved: false, stop: self.since_best >= self.patience }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Parameters and scoring representations of a finished (or aborted) run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Trainable embeddings at the selected epoch.
    pub base: EmbeddingTable,
    /// Representations used for scoring: equal to `base` for MF, the
    /// propagated outputs for LGCN.
    pub reps: EmbeddingTable,
    pub trace: Vec<EpochTrace>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
}

/// Why training stopped early with an error.
#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Failed(#[from] Error),
    #[error("training diverged in epoch {epoch}, batch {batch}: {cause}")]
    Diverged {
        epoch: usize,
        batch: usize,
        cause: Error,
        /// Best snapshot before the failure.
        last_good: Box<TrainOutcome>,
    },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Record per-epoch wall-clock seconds; when off the column is 0 and
    /// traces are reproducible byte for byte.
    pub measure_time: bool,
}

enum Model {
    Mf(EmbeddingTable),
    Lgcn(GraphPropagator),
}

impl Model {
    fn base(&self) -> &EmbeddingTable {
        match self {
            Model::Mf(t) => t,
            Model::Lgcn(g) => &g.base,
        }
    }

    fn base_mut(&mut self) -> &mut EmbeddingTable {
        match self {
            Model::Mf(t) => t,
            Model::Lgcn(g) => &mut g.base,
        }
    }

    fn reps(&self) -> Cow<'_, EmbeddingTable> {
        match self {
            Model::Mf(t) => Cow::Borrowed(t),
            Model::Lgcn(g) => Cow::Owned(g.propagate()),
        }
    }
}

/// The table a run with `cfg` starts from.
pub fn initial_table(split: &DatasetSplit, cfg: &TrainConfig) -> EmbeddingTable {
    init_xavier(split.n_users(), split.n_items(), cfg.d, cfg.seed)
}

/// Scoring representations of `base` under `encoder`.
pub fn encode(base: &EmbeddingTable, encoder: EncoderKind, split: &DatasetSplit) -> Result<EmbeddingTable> {
    match encoder {
        EncoderKind::Mf => Ok(base.clone()),
        EncoderKind::Lgcn { layers } => Ok(GraphPropagator::new(base.clone(), layers, &split.train)?.propagate()),
    }
}

pub fn train(split: &DatasetSplit, cfg: &TrainConfig) -> std::result::Result<TrainOutcome, TrainError> {
    train_with(split, cfg, TrainOptions::default(), |_| {})
}

/// Runs training, calling `on_epoch` after each epoch's trace row is built.
pub fn train_with(
    split: &DatasetSplit,
    cfg: &TrainConfig,
    opts: TrainOptions,
    mut on_epoch: impl FnMut(&EpochTrace),
) -> std::result::Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let init = initial_table(split, cfg);
    let mut model = match cfg.encoder {
        EncoderKind::Mf => Model::Mf(init),
        EncoderKind::Lgcn { layers } => Model::Lgcn(GraphPropagator::new(init, layers, &split.train)?),
    };
    let mut adam_users = AdamState::new(split.n_users(), cfg.d, cfg.lr, cfg.weight_decay);
    let mut adam_items = AdamState::new(split.n_items(), cfg.d, cfg.lr, cfg.weight_decay);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let use_validation = !split.validation.is_empty();

    let mut best =
        TrainOutcome { base: model.base().clone(), reps: model.reps().into_owned(), trace: Vec::new(), best_epoch: 0 };
    let mut trace = Vec::with_capacity(cfg.max_epochs);

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut neg_rng = substream(cfg.seed, Stream::Negatives, epoch as u32);
        let mut loss_sum = 0.0;
        let mut terms_sum = AuTerms { align: 0.0, uniform_user: 0.0, uniform_item: 0.0 };
        let mut n_batches = 0usize;

        for (b, batch) in iter_batches(split, cfg.batch_size, cfg.seed, epoch as u32).enumerate() {
            // In-batch uniformity is undefined for a single pair.
            if cfg.objective == Objective::DirectAu && batch.len() < 2 {
                continue;
            }
            let diverged = |cause: Error, best: &TrainOutcome, trace: &[EpochTrace]| TrainError::Diverged {
                epoch,
                batch: b,
                cause,
                last_good: Box::new(TrainOutcome { trace: trace.to_vec(), ..best.clone() }),
            };
            let out = match batch_step(&mut model, split, cfg, &batch, &mut neg_rng, &mut adam_users, &mut adam_items) {
                Ok(out) => out,
                Err(e @ (Error::DivergedGradient { .. } | Error::DegenerateEmbedding { .. })) => {
                    return Err(diverged(e, &best, &trace))
                }
                Err(e) => return Err(e.into()),
            };
            if !out.value.is_finite() {
                return Err(diverged(Error::DivergedGradient { row: 0 }, &best, &trace));
            }
            loss_sum += out.value;
            if let Some(t) = out.terms {
                terms_sum.align += t.align;
                terms_sum.uniform_user += t.uniform_user;
                terms_sum.uniform_item += t.uniform_item;
            }
            n_batches += 1;
        }

        let reps = model.reps().into_owned();
        let geometry = measure_geometry(&reps, &split.train)?;
        let val_ndcg20 = if use_validation {
            rank_eval(&reps, split, Target::Validation, &[SELECTION_K])?.ndcg[&SELECTION_K]
        } else {
            f64::NAN
        };
        let nb = n_batches.max(1) as f64;
        let row = EpochTrace {
            epoch,
            train_loss: loss_sum / nb,
            l_align: geometry.l_align,
            l_uniform_user: geometry.l_uniform_user,
            l_uniform_item: geometry.l_uniform_item,
            val_ndcg20,
            wall_seconds: if opts.measure_time { started.elapsed().as_secs_f64() } else { 0.0 },
            batch_terms: (cfg.objective == Objective::DirectAu).then(|| AuTerms {
                align: terms_sum.align / nb,
                uniform_user: terms_sum.uniform_user / nb,
                uniform_item: terms_sum.uniform_item / nb,
            }),
        };
        on_epoch(&row);
        trace.push(row);

        if use_validation {
            let decision = stopper.observe(epoch, val_ndcg20);
            if decision.improved {
                best = TrainOutcome { base: model.base().clone(), reps, trace: Vec::new(), best_epoch: epoch };
            }
            if decision.stop {
                break;
            }
        } else {
            best = TrainOutcome { base: model.base().clone(), reps, trace: Vec::new(), best_epoch: epoch };
        }
    }
    best.trace = trace;
    Ok(best)
}

/// Forward, loss, backward and Adam update for one batch.
fn batch_step<R: rand::Rng>(
    model: &mut Model,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    batch: &PositiveBatch,
    neg_rng: &mut R,
    adam_users: &mut AdamState,
    adam_items: &mut AdamState,
) -> Result<LossOutput> {
    let reps = model.reps();
    let (u, i) = reps.forward_mf(&batch.users, &batch.items)?;
    let (out, negatives) = match cfg.objective {
        Objective::DirectAu => (direct_au_loss(&u, &i, cfg.gamma.unwrap_or(0.0))?, None),
        Objective::Bpr | Objective::BprDs => {
            let strategy = if cfg.objective == Objective::Bpr {
                NegativeStrategy::Uniform
            } else {
                NegativeStrategy::Dynamic { candidates: cfg.ds_candidates }
            };
            let negs = sample_negatives(split, &batch.users, strategy, &reps, neg_rng)?;
            let n = reps.items.gather(&negs);
            (bpr_loss(&u, &i, &n, Score::Dot)?, Some(negs))
        }
    };

    let d = cfg.d;
    drop(reps);
    let (user_grads, item_grads) = match model {
        Model::Mf(_) => {
            let mut gu = RowGrads::new(d);
            let mut gi = RowGrads::new(d);
            gu.scatter(&batch.users, &out.grads[0]);
            gi.scatter(&batch.items, &out.grads[1]);
            if let Some(negs) = &negatives {
                gi.scatter(negs, &out.grads[2]);
            }
            (gu, gi)
        }
        Model::Lgcn(ref g) => {
            let n_users = split.n_users();
            let mut dense = Matrix::zeros(n_users + split.n_items(), d);
            let mut add = |node: usize, grad: &[f64]| {
                dense.row_mut(node).iter_mut().zip(grad).for_each(|(a, b)| *a += b);
            };
            for (k, &user) in batch.users.iter().enumerate() {
                add(user, out.grads[0].row(k));
            }
            for (k, &item) in batch.items.iter().enumerate() {
                add(n_users + item, out.grads[1].row(k));
            }
            if let Some(negs) = &negatives {
                for (k, &item) in negs.iter().enumerate() {
                    add(n_users + item, out.grads[2].row(k));
                }
            }
            let (gu, gi) = g.backward(&dense).split_rows(n_users);
            (RowGrads::from_dense(&gu), RowGrads::from_dense(&gi))
        }
    };
    let base = model.base_mut();
    adam_users.step(&mut base.users, &user_grads)?;
    adam_items.step(&mut base.items, &item_grads)?;
    Ok(out)
}

pub const TRACE_HEADER: &str = "epoch,train_loss,l_align,l_uniform_user,l_uniform_item,val_ndcg20,wall_seconds";

/// Writes the trace CSV: header plus one row per epoch, reals with 9
/// digits after the decimal point.
pub fn emit_trace(traces: &[EpochTrace], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{TRACE_HEADER}").map_err(io)?;
    for t in traces {
        writeln!(
            w,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            t.epoch, t.train_loss, t.l_align, t.l_uniform_user, t.l_uniform_item, t.val_ndcg20, t.wall_seconds
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a file written by [`emit_trace`]; `batch_terms` are not stored.
pub fn read_trace(path: &Path) -> Result<Vec<EpochTrace>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if idx == 0 {
            if line != TRACE_HEADER {
                return Err(Error::MalformedLine { line: 1, reason: "unexpected trace header".into() });
            }
            continue;
        }
        let bad = |reason: String| Error::MalformedLine { line: idx + 1, reason };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", fields.len())));
        }
        let real = |k: usize| fields[k].parse::<f64>().map_err(|_| bad(format!("bad number {:?}", fields[k])));
        out.push(EpochTrace {
            epoch: fields[0].parse().map_err(|_| bad(format!("bad epoch {:?}", fields[0])))?,
            train_loss: real(1)?,
            l_align: real(2)?,
            l_uniform_user: real(3)?,
            l_uniform_item: real(4)?,
            val_ndcg20: real(5)?,
            wall_seconds: real(6)?,
            batch_terms: None,
        });
    }
    Ok(out)
}
