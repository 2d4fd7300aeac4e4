use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context as _};
use dmsconv::data::{
    generate_synthetic, language_names, load_features, prepare, write_corpus, FeatureSequence,
    Manifest, SyntheticCorpusSpec, FEATURE_MAGIC,
};
use dmsconv::evaluation::{score_dataset, MetricReport, ScoreTable};
use dmsconv::gradcheck::{check_model, random_batch, GradCheckOptions};
use dmsconv::model::checkpoint::{self, TrainState, CHECKPOINT_MAGIC};
use dmsconv::training::{train as run_training, Dataset, StopReason, TrainEvent};
use dmsconv::{Model, ModelConfig, Variant};

use crate::config::RunConfig;
use crate::NumericFailure;

/// Progress lines on stderr, stamped with the time since start.
pub struct Log {
    start: Instant,
    quiet: bool,
}

impl Log {
    pub fn new(quiet: bool) -> Self {
        Log {
            start: Instant::now(),
            quiet,
        }
    }

    pub fn info(&self, msg: std::fmt::Arguments) {
        if !self.quiet {
            eprintln!("[{:>8.1}s] {msg}", self.start.elapsed().as_secs_f64());
        }
    }
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// Writes through a temporary sibling so a crash never leaves half a file.
fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

pub fn generate(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let mut spec = match spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading corpus spec {}", path.display()))?;
            SyntheticCorpusSpec::from_toml(&text)
                .with_context(|| format!("in {}", path.display()))?
        }
        None => SyntheticCorpusSpec::default(),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let corpus = generate_synthetic(&spec)?;
    let manifest = write_corpus(&corpus, out)?;
    println!(
        "{} languages, {} channels, seed {}",
        manifest.languages.len(),
        spec.channels,
        spec.seed
    );
    for f in &manifest.files {
        println!(
            "{}  {:>5} utterances  sha256 {}",
            f.path.display(),
            f.utterances,
            f.sha256
        );
    }
    Ok(())
}

fn stop_name(stop: StopReason) -> &'static str {
    match stop {
        StopReason::MaxSteps => "max_steps",
        StopReason::LrFloor => "lr_floor",
    }
}

/// Keeps the rows logged on the `every` cadence before `step`, so a resumed
/// run continues the file without duplicates. The off-cadence row written at
/// the end of the previous run is dropped.
fn truncate_loss_csv(path: &Path, step: u64, every: u64) -> anyhow::Result<String> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(String::new()),
        Err(e) => return Err(e).with_context(|| format!("reading {}", path.display())),
    };
    let mut kept = String::new();
    for line in text.lines().skip(1) {
        let row_step: u64 = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .with_context(|| format!("{}: malformed row {line:?}", path.display()))?;
        if row_step < step && (every == 0 || row_step.is_multiple_of(every)) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    Ok(kept)
}

pub fn train(
    config: &Path,
    variant: Option<Variant>,
    resume: Option<Option<PathBuf>>,
    seed: Option<u64>,
    log: &Log,
) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(v) = variant {
        cfg.model.variant = v;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;

    let utts = load_features(&cfg.paths.train_data)?;
    let prepared = prepare(
        &utts,
        cfg.model.input_dim,
        cfg.model.mean_norm_window_frames,
    )
    .with_context(|| format!("{} vs [model] input_dim", cfg.paths.train_data.display()))?;
    let data = Dataset::new(prepared, cfg.model.num_classes)?;

    let (mut model, state) = match resume {
        Some(from) => {
            let path = from.unwrap_or_else(|| cfg.paths.checkpoint.clone());
            let (model, state) = checkpoint::load(&path)?;
            if model.config != cfg.model {
                bail!(dmsconv::Error::Config(format!(
                    "{} was trained with a different [model] table",
                    path.display()
                )));
            }
            let Some(state) = state else {
                bail!(dmsconv::Error::Config(format!(
                    "{} holds no training state to resume from",
                    path.display()
                )));
            };
            log.info(format_args!(
                "resuming {} at step {}",
                path.display(),
                state.step
            ));
            (model, Some(state))
        }
        None => (Model::build(&cfg.model, cfg.train.seed)?, None),
    };

    let loss_path = cfg.loss_csv();
    create_parent(&loss_path)?;
    create_parent(&cfg.paths.checkpoint)?;
    let kept = match &state {
        Some(s) => truncate_loss_csv(&loss_path, s.step, cfg.train.log_every_steps)?,
        None => String::new(),
    };
    let mut csv = BufWriter::new(
        File::create(&loss_path).with_context(|| format!("creating {}", loss_path.display()))?,
    );
    write!(csv, "step,lr,loss\n{kept}")?;

    log.info(format_args!(
        "training {} ({} parameters) on {} utterances",
        cfg.model.variant,
        model.count_params().total(),
        data.utterances.len()
    ));
    let checkpoint_path = cfg.paths.checkpoint.clone();
    let outcome = run_training(&mut model, &data, &cfg.train, state, |event| {
        match event {
            TrainEvent::Log(r) => {
                writeln!(csv, "{},{},{}", r.step, r.lr, r.loss)
                    .and_then(|_| csv.flush())
                    .map_err(|e| dmsconv::Error::Config(format!("loss csv: {e}")))?;
                log.info(format_args!(
                    "step {:>6}  lr {:.2e}  loss {:.5}",
                    r.step, r.lr, r.loss
                ));
            }
            TrainEvent::Checkpoint(m, s) => {
                let bytes = checkpoint::encode(m, Some(s))?;
                write_atomic(&checkpoint_path, &bytes)
                    .map_err(|e| dmsconv::Error::Config(format!("{e:#}")))?;
            }
        }
        Ok(())
    })?;
    csv.flush()?;

    let last = outcome.trace.last();
    println!(
        "done: variant {}, step {}, last loss {}, lr {:.3e}, stopped by {}, checkpoint {}",
        cfg.model.variant,
        outcome.state.step,
        last.map_or("n/a".to_string(), |r| format!("{:.6}", r.loss)),
        outcome.state.lr,
        stop_name(outcome.stop),
        cfg.paths.checkpoint.display()
    );
    Ok(())
}

/// Language names from a `manifest.toml` beside `data`, else `lang0, lang1, …`.
fn languages_for(data: &Path, classes: usize) -> anyhow::Result<Vec<String>> {
    let manifest = data.parent().unwrap_or(Path::new("")).join("manifest.toml");
    if let Ok(text) = std::fs::read_to_string(&manifest) {
        let m: Manifest =
            toml::from_str(&text).with_context(|| format!("parsing {}", manifest.display()))?;
        if m.languages.len() == classes {
            return Ok(m.languages);
        }
    }
    Ok(language_names(classes))
}

fn score_file(checkpoint: &Path, data: &Path) -> anyhow::Result<ScoreTable> {
    let (model, _) = checkpoint::load(checkpoint)?;
    let utts = load_features(data)?;
    let languages = languages_for(data, model.config.num_classes)?;
    Ok(score_dataset(&model, &utts, &languages)?)
}

pub fn score(checkpoint: &Path, data: &Path, out: &Path) -> anyhow::Result<()> {
    let table = score_file(checkpoint, data)?;
    create_parent(out)?;
    std::fs::write(out, table.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    println!("scored {} utterances into {}", table.len(), out.display());
    Ok(())
}

pub enum ScoreSource {
    Model { checkpoint: PathBuf, data: PathBuf },
    Csv(PathBuf),
}

pub fn evaluate(
    source: ScoreSource,
    subset: &[String],
    scores_out: Option<&Path>,
    report_out: Option<&Path>,
) -> anyhow::Result<()> {
    let mut table = match source {
        ScoreSource::Model { checkpoint, data } => score_file(&checkpoint, &data)?,
        ScoreSource::Csv(path) => {
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            ScoreTable::from_csv(&text).with_context(|| format!("in {}", path.display()))?
        }
    };
    if !subset.is_empty() {
        let idx = subset
            .iter()
            .map(|name| {
                table
                    .languages
                    .iter()
                    .position(|l| l == name)
                    .ok_or_else(|| {
                        dmsconv::Error::Config(format!(
                            "unknown language {name:?}; have {}",
                            table.languages.join(", ")
                        ))
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        table = table.restrict(&idx)?;
    }
    let report = MetricReport::compute(&table)?;
    print!("{}", report.table());
    if let Some(path) = scores_out {
        create_parent(path)?;
        std::fs::write(path, table.to_csv())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = report_out {
        create_parent(path)?;
        std::fs::write(path, report.to_toml())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn count_params(
    config: Option<&Path>,
    variant: Option<Variant>,
    csv: bool,
) -> anyhow::Result<()> {
    let single = match (config, variant) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            #[derive(serde::Deserialize)]
            struct ModelOnly {
                #[serde(default)]
                model: ModelConfig,
            }
            let parsed: ModelOnly = toml::from_str(&text)
                .map_err(|e| dmsconv::Error::Config(e.to_string()))
                .with_context(|| format!("parsing {}", path.display()))?;
            Some(parsed.model)
        }
        (None, Some(v)) => Some(ModelConfig::reference(v)),
        (None, None) => None,
    };

    let mut out = String::new();
    match single {
        Some(cfg) => {
            cfg.validate()?;
            let table = Model::build(&cfg, 0)?.count_params();
            if csv {
                out.push_str("layer,params\n");
                for (layer, n) in &table.rows {
                    let _ = writeln!(out, "{layer},{n}");
                }
            } else {
                let _ = writeln!(out, "{:<24} {:>10}", "layer", "params");
                for (layer, n) in &table.rows {
                    let _ = writeln!(out, "{layer:<24} {n:>10}");
                }
                let _ = writeln!(
                    out,
                    "{:<24} {:>10}",
                    format!("total ({})", cfg.variant),
                    table.total()
                );
            }
        }
        None => {
            if csv {
                out.push_str("variant,params\n");
            } else {
                let _ = writeln!(out, "{:<18} {:>10} {:>8}", "variant", "params", "millions");
            }
            for v in Variant::ALL {
                let total = Model::build(&ModelConfig::reference(v), 0)?
                    .count_params()
                    .total();
                if csv {
                    let _ = writeln!(out, "{v},{total}");
                } else {
                    let _ = writeln!(
                        out,
                        "{:<18} {:>10} {:>8.2}",
                        v.as_str(),
                        total,
                        total as f64 / 1e6
                    );
                }
            }
        }
    }
    print!("{out}");
    Ok(())
}

pub fn gradcheck(
    variant: Option<Variant>,
    models: u64,
    seed: u64,
    inject_fault: Option<String>,
) -> anyhow::Result<()> {
    let variants: Vec<Variant> = variant.map_or(Variant::ALL.to_vec(), |v| vec![v]);
    let options = GradCheckOptions {
        corrupt: inject_fault.clone(),
        ..Default::default()
    };
    println!(
        "{:<16} {:>5} {:<28} {:>7} {:>5} {:>10}  result",
        "variant", "model", "group", "checked", "kinks", "max rel"
    );
    let mut failures = 0;
    let mut fault_seen = false;
    for v in variants {
        let cfg = ModelConfig::tiny(v);
        for m in 0..models {
            let model = Model::build(&cfg, seed + m)?;
            if let Some(name) = &inject_fault {
                fault_seen |= model.params.trainable().any(|(_, e)| &e.name == name);
            }
            let lens = [cfg.min_frames() + 3, 12, 16];
            let batch = random_batch(cfg.input_dim, &lens, cfg.num_classes, seed + m)?;
            let report = check_model(&model, &batch, &options)?;
            for g in &report.groups {
                if !g.passed {
                    failures += 1;
                }
                println!(
                    "{:<16} {:>5} {:<28} {:>7} {:>5} {:>10.2e}  {}",
                    v.as_str(),
                    seed + m,
                    g.name,
                    g.checked,
                    g.kinks,
                    g.max_rel_err,
                    if g.passed { "ok" } else { "FAIL" }
                );
            }
        }
    }
    if let Some(name) = inject_fault {
        if !fault_seen {
            bail!(dmsconv::Error::Config(format!(
                "no parameter named {name:?}"
            )));
        }
    }
    if failures > 0 {
        bail!(NumericFailure(format!(
            "{failures} parameter groups exceed relative error {:.0e}",
            options.tolerance
        )));
    }
    println!("all groups within {:.0e}", options.tolerance);
    Ok(())
}

fn describe_features(utts: &[FeatureSequence]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "DMSF feature file, {} utterances", utts.len());
    if utts.is_empty() {
        return out;
    }
    let mut channels: Vec<usize> = utts.iter().map(FeatureSequence::channels).collect();
    channels.sort_unstable();
    channels.dedup();
    let frames: Vec<usize> = utts.iter().map(FeatureSequence::frames).collect();
    let total: usize = frames.iter().sum();
    let _ = writeln!(out, "channels    {channels:?}");
    let _ = writeln!(
        out,
        "frames      min {} / mean {:.1} / max {} / total {total}",
        frames.iter().min().unwrap(),
        total as f64 / frames.len() as f64,
        frames.iter().max().unwrap()
    );
    let classes = utts.iter().map(|u| u.label).max().unwrap() + 1;
    let mut counts = vec![0usize; classes];
    for u in utts {
        counts[u.label] += 1;
    }
    let _ = writeln!(out, "per label   {counts:?}");
    out
}

pub fn inspect(path: &Path) -> anyhow::Result<()> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let magic = bytes.get(..4).unwrap_or(&[]);
    if magic == FEATURE_MAGIC {
        let utts = dmsconv::data::decode_features(&bytes)?;
        print!("{}", describe_features(&utts));
    } else if magic == CHECKPOINT_MAGIC {
        let (model, state) = checkpoint::decode(&bytes)?;
        println!("checkpoint, variant {}", model.config.variant);
        println!("trainable parameters {}", model.count_params().total());
        println!("tensors {}", model.params.entries().len());
        match state {
            Some(TrainState {
                step, lr, loss_ema, ..
            }) => {
                println!("train state: step {step}, lr {lr:.3e}, smoothed loss {loss_ema:.6}")
            }
            None => println!("train state: none"),
        }
        println!("\n[model]\n{}", model.config.to_toml());
    } else {
        bail!(dmsconv::Error::Format {
            offset: 0,
            message: format!(
                "{} is neither a feature file nor a checkpoint",
                path.display()
            ),
        });
    }
    Ok(())
}
