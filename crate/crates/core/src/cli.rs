//! Command-line surface: `gen`, `train`, `eval`, `gridsearch`, `augtrain`,
//! `attribute`. Every subcommand writes its outputs plus `manifest.json`
//! under `--out`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attribution::{bci_iv_2a_layout, channel_influence, export_topography, load_layout};
use crate::augment::{corrupted_suite, train_uncer, ControllerShape, ControllerState};
use crate::config::ExperimentConfig;
use crate::data::{read_dataset, segment, split, synth_generate, write_dataset, SegmentSet, SplitMode, TrialSet};
use crate::decoder::{build_decoder, train, DecoderModel};
use crate::error::{Error, Result};
use crate::metrics::{corruption_error, metric_report, reliability_bins, EvalBatch};
use crate::rng::RngStream;
use crate::uncertainty::{estimate_set, gridsearch_dropout, gridsearch_input_noise, GridResult, UncertaintyConfig, VARIANCE_FLOOR};

#[derive(Debug, Parser)]
#[command(name = "eeg-uq", version, about = "Uncertainty estimation and reduction for EEG decoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Root seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// UEEG dataset; overrides `data.dataset`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(Common),
    /// Train a decoder.
    Train(Common),
    /// Metrics and uncertainty reports on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Input-noise and dropout-rate grid searches on the validation split.
    Gridsearch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Train decoder and mixing controller with augmentation.
    Augtrain(Common),
    /// Channel occlusion influence exported as a topography table.
    Attribute {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
}

/// Parse `argv` (program name first) and run; returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            1
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    subcommand: &'static str,
    seed: u64,
    config: FileEntry,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

struct Run {
    cfg: ExperimentConfig,
    seed: u64,
    out: PathBuf,
    config: FileEntry,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

impl Run {
    fn new(common: &Common) -> Result<Self> {
        let bytes = std::fs::read(&common.config).map_err(|e| Error::Config(format!("{}: {e}", common.config.display())))?;
        let mut cfg = ExperimentConfig::load(&common.config)?;
        if let Some(d) = &common.data {
            cfg.data.dataset = Some(d.clone());
        }
        let seed = common.seed.unwrap_or(cfg.seed);
        std::fs::create_dir_all(&common.out)?;
        Ok(Self {
            cfg,
            seed,
            out: common.out.clone(),
            config: FileEntry { path: common.config.display().to_string(), sha256: sha256_hex(&bytes) },
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn root(&self) -> RngStream {
        RngStream::new(self.seed, 0)
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.inputs.push(FileEntry { path: path.display().to_string(), sha256: sha256_hex(&bytes) });
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::write(self.out.join(name), bytes)?;
        self.outputs.push(FileEntry { path: name.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn finish(self, subcommand: &'static str) -> Result<()> {
        let manifest = Manifest {
            tool: "eeg-uq",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(self.out.join("manifest.json"), text)?;
        Ok(())
    }

    fn trials(&mut self) -> Result<TrialSet> {
        match self.cfg.data.dataset.clone() {
            Some(p) => {
                self.input(&p)?;
                read_dataset(&p)
            }
            None => synth_generate(&self.cfg.synth, &self.root().derive(1)),
        }
    }

    /// `(train, validation, test)` segment sets, identical across subcommands.
    fn splits(&mut self) -> Result<(SegmentSet, SegmentSet, SegmentSet)> {
        let trials = self.trials()?;
        let d = self.cfg.data.clone();
        let seg = segment(&trials, d.window, d.stride)?;
        let (train_all, test) = split(&seg, d.split, d.holdout_subject, d.train_fraction, &mut self.root().derive(2))?;
        let (train, val) = split(&train_all, SplitMode::Intra, None, 1.0 - d.val_fraction, &mut self.root().derive(3))?;
        Ok((train, val, test))
    }

    fn model(&mut self, path: &Path) -> Result<DecoderModel> {
        self.input(path)?;
        DecoderModel::load(path)
    }

    fn uncertainty(&self) -> UncertaintyConfig {
        UncertaintyConfig { seed: self.seed, ..self.cfg.uncertainty.clone() }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen(c) => {
            let mut r = Run::new(&c)?;
            let set = synth_generate(&r.cfg.synth, &r.root().derive(1))?;
            write_dataset(&set, r.out.join("dataset.ueeg"))?;
            let bytes = std::fs::read(r.out.join("dataset.ueeg"))?;
            r.outputs.push(FileEntry { path: "dataset.ueeg".into(), sha256: sha256_hex(&bytes) });
            r.finish("gen")
        }
        Command::Train(c) => {
            let mut r = Run::new(&c)?;
            let (train_set, val, _) = r.splits()?;
            let dc = r.cfg.decoder_for(train_set.n_channels(), train_set.window, train_set.n_classes)?;
            let model = build_decoder(dc, &r.root().derive(4))?;
            let (model, history) = train(model, &train_set, &val, r.cfg.train, &r.root().derive(5))?;
            r.write("model.uncm", &model.to_checkpoint()?.to_bytes()?)?;
            r.write_json("history.json", &history)?;
            r.finish("train")
        }
        Command::Eval { common, model } => {
            let mut r = Run::new(&common)?;
            let model = r.model(&model)?;
            let (_, _, test) = r.splits()?;
            let ucfg = r.uncertainty();
            let reports = estimate_set(&model, &test, &ucfg)?;
            let k = test.n_classes;
            let probs: Vec<f64> = reports.iter().flat_map(|rep| rep.predictive_mean.iter().copied()).collect();
            let vars: Vec<f64> =
                reports.iter().zip(&test.labels).map(|(rep, &y)| rep.probability_variance()[y].max(VARIANCE_FLOOR)).collect();
            let batch = EvalBatch::new(probs, k, test.labels.clone(), Some(vars))?;
            let suite = corrupted_suite(&test, &r.cfg.eval.corruptions, &r.root().derive(6))?;
            let ce = if suite.is_empty() { None } else { Some(corruption_error(&model, &suite)?) };
            let mut report = metric_report(&batch, ce)?;
            report.ece = crate::metrics::ece(&batch, r.cfg.eval.ece_bins)?;
            r.write_json("metrics.json", &report)?;
            r.write_json("uncertainty.json", &reports)?;
            let mut csv = String::from("lower,upper,count,accuracy,confidence\n");
            for b in reliability_bins(&batch, r.cfg.eval.ece_bins)? {
                csv.push_str(&format!("{},{},{},{},{}\n", b.lower, b.upper, b.count, b.accuracy, b.confidence));
            }
            r.write("reliability.csv", csv.as_bytes())?;
            r.finish("eval")
        }
        Command::Gridsearch { common, model } => {
            let mut r = Run::new(&common)?;
            let model = r.model(&model)?;
            let (_, val, _) = r.splits()?;
            let ucfg = r.uncertainty();
            let noise = gridsearch_input_noise(&model, &val, &r.cfg.eval.noise_grid, &ucfg)?;
            let dropout = gridsearch_dropout(&model, &val, r.cfg.eval.dropout_grid_points, &ucfg)?;
            r.write("noise_grid.csv", grid_csv("u", &noise).as_bytes())?;
            r.write("dropout_grid.csv", grid_csv("phi", &dropout).as_bytes())?;
            #[derive(Serialize)]
            struct Both<'a> {
                input_noise: &'a GridResult,
                dropout: &'a GridResult,
            }
            r.write_json("gridsearch.json", &Both { input_noise: &noise, dropout: &dropout })?;
            r.finish("gridsearch")
        }
        Command::Augtrain(c) => {
            let mut r = Run::new(&c)?;
            let (train_set, _, _) = r.splits()?;
            let dc = r.cfg.decoder_for(train_set.n_channels(), train_set.window, train_set.n_classes)?;
            let model = build_decoder(dc.clone(), &r.root().derive(4))?;
            let shape = ControllerShape { embedding_dim: dc.pointwise_filters, hidden_dim: r.cfg.augment.hidden_dim, width: r.cfg.augment.width };
            let ctrl = ControllerState::new(shape, &r.root().derive(7))?;
            let (model, ctrl, history) =
                train_uncer(model, ctrl, &train_set, &r.cfg.augment, r.cfg.train.epochs, r.cfg.train.batch_size, &r.root().derive(5))?;
            r.write("model.uncm", &model.to_checkpoint()?.to_bytes()?)?;
            r.write("controller.uncm", &ctrl.to_checkpoint()?.to_bytes()?)?;
            r.write_json("aug_history.json", &history)?;
            r.finish("augtrain")
        }
        Command::Attribute { common, model } => {
            let mut r = Run::new(&common)?;
            let model = r.model(&model)?;
            let (_, _, test) = r.splits()?;
            let layout = match r.cfg.eval.layout.clone() {
                Some(p) => {
                    r.input(&p)?;
                    load_layout(&p)?
                }
                None => bci_iv_2a_layout(),
            };
            let infl = channel_influence(&model, &test, &r.uncertainty(), r.cfg.eval.attribution_runs)?;
            export_topography(&infl, &layout, r.out.join("topography.csv"))?;
            let bytes = std::fs::read(r.out.join("topography.csv"))?;
            r.outputs.push(FileEntry { path: "topography.csv".into(), sha256: sha256_hex(&bytes) });
            r.write_json("influence.json", &infl)?;
            r.finish("attribute")
        }
    }
}

fn grid_csv(name: &str, g: &GridResult) -> String {
    let mut s = format!("{name},nll,argmin\n");
    for row in &g.rows {
        let mark = if row.value == g.best { "*" } else { "" };
        s.push_str(&format!("{},{},{}\n", row.value, row.nll, mark));
    }
    s
}
