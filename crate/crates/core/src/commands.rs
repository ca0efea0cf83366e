//! Command-line interface of the `pig` binary.
//!
//! Every command returns its standard output as a string so that it can be
//! exercised in tests without spawning a process.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::{file_hash, Checkpoint};
use crate::config::RunConfig;
use crate::data::{generate, PairedDataset, RawText, Split};
use crate::error::{PigError, Result};
use crate::its;
use crate::objectives;
use crate::serving::{self, account_flops, build_index, IndexMeta, RetrievalIndex};
use crate::trainer::Trainer;

#[derive(Debug, Parser)]
#[command(name = "pig", version, about = "Hybrid-Tower text-to-video retrieval on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration sources shared by commands that build a [`RunConfig`].
#[derive(Debug, Clone, clap::Args)]
pub struct ConfigArgs {
    /// Flat `section.key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.alpha=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for data generation and training.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_text(&std::fs::read_to_string(path)?)?;
        }
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(seed) = self.seed {
            cfg.data.seed = seed;
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn pick(self, data: &PairedDataset) -> Vec<&crate::data::Pair> {
        match self {
            SplitArg::Train => data.split(Split::Train),
            SplitArg::Val => data.split(Split::Val),
            SplitArg::Test => data.split(Split::Test),
            SplitArg::All => data.pairs.iter().collect(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset.
    GenData {
        /// Config file whose `data.*` keys describe the dataset.
        #[arg(long = "spec")]
        spec: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the model.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset file; regenerated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
        /// Checkpoint to resume from; required for `--stage 2`.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training log, appended to. Defaults to `<out>.log`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Build a retrieval index over a dataset split.
    BuildIndex {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank indexed videos for one text.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Use the text of this pair id (requires `--data`).
        #[arg(long, conflicts_with = "text_file")]
        text_id: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// CSV file with one token vector per row.
        #[arg(long)]
        text_file: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Text-to-video metrics of an index against the texts of a split.
    Eval {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Evaluate even if the index was built from another checkpoint.
        #[arg(long)]
        force: bool,
    },
    /// Print the analytic cost table for the configured dimensions.
    BenchFlops {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write the token-selector scores of one video as CSV.
    DumpIts {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        video_id: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write text, pseudo-query and video embeddings as CSV.
    DumpEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData {
            spec,
            overrides,
            seed,
            out,
        } => gen_data(
            &ConfigArgs {
                config: spec,
                overrides,
                seed,
            },
            &out,
        ),
        Command::Train {
            config,
            data,
            stage,
            init,
            out,
            log,
        } => train(&config, data.as_deref(), stage, init.as_deref(), &out, log),
        Command::BuildIndex {
            ckpt,
            data,
            split,
            out,
        } => build_index_cmd(&ckpt, &data, split, &out),
        Command::Query {
            index,
            ckpt,
            text_id,
            data,
            text_file,
            top,
        } => query(&index, &ckpt, text_id, data.as_deref(), text_file.as_deref(), top),
        Command::Eval {
            index,
            ckpt,
            data,
            split,
            force,
        } => eval(&index, &ckpt, &data, split, force),
        Command::BenchFlops { config } => bench_flops(&config),
        Command::DumpIts {
            ckpt,
            data,
            video_id,
            out,
        } => dump_its(&ckpt, &data, video_id, &out),
        Command::DumpEmbeddings {
            ckpt,
            data,
            split,
            out,
        } => dump_embeddings(&ckpt, &data, split, &out),
    }
}

fn gen_data(args: &ConfigArgs, out: &Path) -> Result<String> {
    let cfg = args.resolve()?;
    let data = generate(&cfg.data)?;
    data.save(out)?;
    let (tr, va, te) = cfg.data.split_sizes();
    Ok(format!(
        "config_hash={:016x} pairs={} train={tr} val={va} test={te} out={}\n",
        data.config_hash(),
        data.pairs.len(),
        out.display()
    ))
}

fn load_checked_data(path: &Path, cfg: &RunConfig) -> Result<PairedDataset> {
    let data = PairedDataset::load(path)?;
    if data.spec != cfg.data {
        return Err(PigError::Data(format!(
            "dataset {} was generated with a different data section",
            path.display()
        )));
    }
    Ok(data)
}

fn train(
    args: &ConfigArgs,
    data_path: Option<&Path>,
    stage: StageArg,
    init: Option<&Path>,
    out: &Path,
    log: Option<PathBuf>,
) -> Result<String> {
    let resume = init.map(Checkpoint::load).transpose()?;
    let cfg = match &resume {
        Some(ck) if args.config.is_none() && args.overrides.is_empty() && args.seed.is_none() => {
            ck.config.clone()
        }
        _ => args.resolve()?,
    };
    if stage == StageArg::Two && resume.as_ref().is_none_or(|ck| ck.stage < 1) {
        return Err(PigError::Usage(
            "--stage 2 needs --init with a checkpoint that finished stage 1".into(),
        ));
    }
    let data = match data_path {
        Some(p) => load_checked_data(p, &cfg)?,
        None => generate(&cfg.data)?,
    };
    let mut trainer = match resume {
        Some(mut ck) => {
            ck.config = cfg.clone();
            Trainer::from_checkpoint(ck, &data)?
        }
        None => Trainer::new(cfg.clone(), &data)?,
    };
    let log_path = log.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log");
        PathBuf::from(s)
    });
    let sink = OpenOptions::new().create(true).append(true).open(&log_path)?;
    trainer.set_log_sink(Box::new(sink));

    let result = (|| -> Result<Option<objectives::RetrievalMetrics>> {
        if matches!(stage, StageArg::One | StageArg::Both) {
            trainer.train_stage0()?;
            trainer.train_stage1()?;
        }
        if matches!(stage, StageArg::Two | StageArg::Both) {
            return Ok(trainer.train_stage2()?.best);
        }
        Ok(None)
    })();
    // The trainer never applies a failed step, so its current state is the
    // last good one either way.
    trainer.checkpoint().save(out)?;
    trainer.verify_access()?;
    let best = result?;
    let mut report = format!(
        "config_hash={:016x} stage={} steps={} out={} log={}\n",
        cfg.hash(),
        trainer.stage,
        trainer.step,
        out.display(),
        log_path.display()
    );
    if let Some(m) = best {
        report.push_str(&format!("best_val {}\n", m.record()));
    }
    Ok(report)
}

fn build_index_cmd(ckpt_path: &Path, data_path: &Path, split: SplitArg, out: &Path) -> Result<String> {
    let bytes = std::fs::read(ckpt_path)?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let data = load_checked_data(data_path, &ck.config)?;
    let pairs = split.pick(&data);
    let videos: Vec<_> = pairs.iter().map(|p| (p.id, &p.video)).collect();
    let index = build_index(&ck.model, &videos)?;
    index.save(out)?;
    let meta = IndexMeta {
        checkpoint_hash: file_hash(&bytes),
        config_hash: ck.config_hash(),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        entries: index.len() as u64,
    };
    meta.save(out)?;
    Ok(format!(
        "config_hash={:016x} checkpoint_hash={:016x} entries={} dim={} out={}\n",
        meta.config_hash,
        meta.checkpoint_hash,
        index.len(),
        index.dim,
        out.display()
    ))
}

/// Loads an index and checks that it was built from `ckpt_bytes`.
fn load_index_for(index_path: &Path, ckpt_bytes: &[u8], ck: &Checkpoint, force: bool) -> Result<RetrievalIndex> {
    let index = RetrievalIndex::load(index_path)?;
    let meta = IndexMeta::load(index_path)?;
    let matches =
        meta.checkpoint_hash == file_hash(ckpt_bytes) && meta.config_hash == ck.config_hash();
    if !matches && !force {
        return Err(PigError::Data(format!(
            "index {} was built from a different checkpoint; pass --force to evaluate anyway",
            index_path.display()
        )));
    }
    if !matches {
        log::warn!("index and checkpoint hashes differ; continuing because of --force");
    }
    if index.dim != ck.model.cfg.d {
        return Err(PigError::Data(format!(
            "index dimension {} does not match model width {}",
            index.dim, ck.model.cfg.d
        )));
    }
    Ok(index)
}

fn read_text_file(path: &Path) -> Result<RawText> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row = record
            .iter()
            .map(|x| {
                x.parse::<f64>()
                    .map_err(|_| PigError::Data(format!("bad number {x:?} in {}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) || width == 0 {
        return Err(PigError::Data(format!("{} has ragged or empty rows", path.display())));
    }
    let tokens = crate::autodiff::Mat::from_shape_vec((rows.len(), width), rows.concat())
        .expect("rectangular rows");
    RawText::new(tokens).map_err(|e| PigError::Data(e.to_string()))
}

fn query(
    index_path: &Path,
    ckpt_path: &Path,
    text_id: Option<u64>,
    data_path: Option<&Path>,
    text_file: Option<&Path>,
    top: usize,
) -> Result<String> {
    let bytes = std::fs::read(ckpt_path)?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let index = load_index_for(index_path, &bytes, &ck, true)?;
    let text = match (text_id, text_file) {
        (Some(id), None) => {
            let path = data_path
                .ok_or_else(|| PigError::Usage("--text-id needs --data".into()))?;
            let data = load_checked_data(path, &ck.config)?;
            data.by_id(id)
                .ok_or_else(|| PigError::Data(format!("no pair with id {id}")))?
                .text
                .clone()
        }
        (None, Some(path)) => read_text_file(path)?,
        _ => {
            return Err(PigError::Usage(
                "give exactly one of --text-id or --text-file".into(),
            ))
        }
    };
    let t = ck.model.text.encode(&ck.model.store, &text)?;
    let hits = index.query(t.view(), top)?;
    let mut out = String::from("| rank | video_id | score |\n|---:|---:|---:|\n");
    for (i, (id, score)) in hits.iter().enumerate() {
        out.push_str(&format!("| {} | {id} | {score:.6} |\n", i + 1));
    }
    Ok(out)
}

fn eval(index_path: &Path, ckpt_path: &Path, data_path: &Path, split: SplitArg, force: bool) -> Result<String> {
    let bytes = std::fs::read(ckpt_path)?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let index = load_index_for(index_path, &bytes, &ck, force)?;
    let data = load_checked_data(data_path, &ck.config)?;
    let pairs = split.pick(&data);
    let texts: Vec<_> = pairs.iter().map(|p| &p.text).collect();
    let t = objectives::normalize_rows(&serving::text_vectors(&ck.model, &texts)?)?;
    let gallery = crate::autodiff::Mat::from_shape_fn((index.len(), index.dim), |(i, j)| {
        f64::from(index.vectors[i * index.dim + j])
    });
    let sim = t.dot(&gallery.t());
    let gt: Vec<u64> = pairs.iter().map(|p| p.id).collect();
    let m = objectives::compute_metrics(&sim, &index.ids, &gt)?;
    Ok(format!(
        "config_hash={:016x} texts={} gallery={}\n{}\n{}\n",
        ck.config_hash(),
        pairs.len(),
        index.len(),
        m.record(),
        m.table()
    ))
}

fn bench_flops(args: &ConfigArgs) -> Result<String> {
    let cfg = args.resolve()?;
    let r = account_flops(&cfg.model);
    Ok(format!(
        "config_hash={:016x} d={} frames={} patches={} top_k={}\n{}\nonline_per_matching={} storage_per_video={}\n",
        cfg.hash(),
        cfg.model.d,
        cfg.model.frames,
        cfg.model.patches,
        cfg.model.top_k,
        r,
        serving::humanize_count(r.online_per_matching_flops),
        serving::humanize_bytes(r.storage_bytes_per_video)
    ))
}

fn dump_its(ckpt_path: &Path, data_path: &Path, video_id: u64, out: &Path) -> Result<String> {
    let ck = Checkpoint::load(ckpt_path)?;
    let data = load_checked_data(data_path, &ck.config)?;
    let pair = data
        .by_id(video_id)
        .ok_or_else(|| PigError::Data(format!("no video with id {video_id}")))?;
    let feats = ck.model.video.encode(&ck.model.store, &pair.video)?;
    let s = &feats.informativeness;
    let order = its::top_k_indices(s, ck.model.cfg.top_k)?;
    let heads = s.per_head.len();
    let mut w = csv::Writer::from_path(out)?;
    let hash = format!("{:016x}", ck.config_hash());
    let mut header = vec![
        "config_hash".to_string(),
        "video_id".into(),
        "frame".into(),
        "patch".into(),
        "score".into(),
    ];
    header.extend((0..heads).map(|h| format!("head_{h}")));
    header.extend(["selected".into(), "selection_rank".into(), "signal".into()]);
    w.write_record(&header)?;
    for fr in 0..s.frames {
        for pa in 0..s.patches {
            let flat = fr * s.patches + pa;
            let rank = order.iter().position(|&j| j == flat);
            let mut row = vec![
                hash.clone(),
                video_id.to_string(),
                fr.to_string(),
                pa.to_string(),
                format!("{:.17e}", s.scores[[fr, pa]]),
            ];
            row.extend(s.per_head.iter().map(|h| format!("{:.17e}", h[[fr, pa]])));
            row.push(u8::from(rank.is_some()).to_string());
            row.push(rank.map_or(String::new(), |r| (r + 1).to_string()));
            row.push(u8::from(pair.signal.contains(&(fr, pa))).to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    let hits = order
        .iter()
        .filter(|&&j| pair.signal.contains(&(j / s.patches, j % s.patches)))
        .count();
    Ok(format!(
        "video_id={video_id} selected={} signal_hits={hits} out={}\n",
        order.len(),
        out.display()
    ))
}

fn dump_embeddings(ckpt_path: &Path, data_path: &Path, split: SplitArg, out: &Path) -> Result<String> {
    let ck = Checkpoint::load(ckpt_path)?;
    let data = load_checked_data(data_path, &ck.config)?;
    let pairs = split.pick(&data);
    let videos: Vec<_> = pairs.iter().map(|p| &p.video).collect();
    let texts: Vec<_> = pairs.iter().map(|p| &p.text).collect();
    let t = serving::text_vectors(&ck.model, &texts)?;
    let t_p = serving::pseudo_query_vectors(&ck.model, &videos)?;
    let v = serving::video_vectors(&ck.model, &videos)?;
    let d = ck.model.cfg.d;
    let mut w = csv::Writer::from_path(out)?;
    let hash = format!("{:016x}", ck.config_hash());
    let mut header = vec!["config_hash".to_string(), "id".into(), "kind".into()];
    header.extend((0..d).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for (i, p) in pairs.iter().enumerate() {
        for (kind, m) in [("t", &t), ("t_p", &t_p), ("v", &v)] {
            let mut row = vec![hash.clone(), p.id.to_string(), kind.to_string()];
            row.extend(m.row(i).iter().map(|x| format!("{x:.17e}")));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(format!("rows={} out={}\n", 3 * pairs.len(), out.display()))
}
