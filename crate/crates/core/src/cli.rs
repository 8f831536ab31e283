//! Command-line surface: dataset synthesis, training, rendering, evaluation
//! and multi-view consistency.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{consistency_of_images, MetricReport};
use crate::model::{Model, RenderMode};
use crate::raster::Image;
use crate::trainer::{train, TrainConfig};
use crate::waterform::{make_dataset, Dataset, SceneSpec, WaterParams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "waterhe",
    version,
    about = "Underwater radiance field with illuminance attenuation"
)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render, degrade and equalize a procedural scene into a dataset.
    Synth(SynthArgs),
    /// Train a field on a dataset.
    Train(TrainArgs),
    /// Render views from a checkpoint.
    Render(RenderArgs),
    /// Score renders against the dataset's clean and degraded images.
    Eval(EvalArgs),
    /// Warp-based multi-view consistency of a checkpoint's renders.
    Consistency(ConsistencyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaterPreset {
    Paper,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Degraded,
    Restored,
}

impl From<ModeArg> for RenderMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Degraded => RenderMode::Degraded,
            ModeArg::Restored => RenderMode::Restored,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub water_preset: Option<WaterPreset>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub no_smoothing: bool,
    /// Hold the attenuation at 1 (plain radiance field).
    #[arg(long)]
    pub freeze_attenuation: bool,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset whose poses are rendered.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    #[arg(long, value_enum, default_value = "restored")]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory holding `restored_NNN.png` / `degraded_NNN.png` renders.
    #[arg(long)]
    pub renders: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    /// Where `metrics.jsonl` is written; defaults to the renders directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConsistencyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Comma-separated `a:b` view index pairs; defaults to consecutive
    /// held-out views.
    #[arg(long)]
    pub pairs: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub size: usize,
    pub train_views: usize,
    pub test_views: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 64,
            train_views: 16,
            test_views: 4,
        }
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// JSON scene description replacing the default procedural scene.
    pub scene_file: Option<PathBuf>,
    pub scene: SceneConfig,
    pub water_preset: WaterPreset,
    pub water: Option<WaterParams>,
    /// Keys given here override the desk preset rather than the full-scale defaults.
    #[serde(deserialize_with = "desk_overrides")]
    pub train: TrainConfig,
}

fn desk_overrides<'de, D: serde::Deserializer<'de>>(de: D) -> std::result::Result<TrainConfig, D::Error> {
    use serde::de::Error as _;
    let overrides = toml::Table::deserialize(de)?;
    let mut merged = toml::Table::try_from(TrainConfig::desk()).map_err(D::Error::custom)?;
    for (key, value) in overrides {
        match (merged.get_mut(&key), value) {
            (Some(toml::Value::Table(base)), toml::Value::Table(inner)) => base.extend(inner),
            (_, value) => {
                merged.insert(key, value);
            }
        }
    }
    toml::Value::Table(merged).try_into().map_err(D::Error::custom)
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out: None,
            scene_file: None,
            scene: SceneConfig::default(),
            water_preset: WaterPreset::Paper,
            water: None,
            train: TrainConfig::desk(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| if p.is_relative() { base.join(p) } else { p.clone() })
        };
        let cfg = RunConfig {
            dataset: resolve(&cfg.dataset),
            out: resolve(&cfg.out),
            scene_file: resolve(&cfg.scene_file),
            ..cfg
        };
        if let Some(s) = &cfg.scene_file {
            if !s.exists() {
                return Err(Error::Config(format!("scene_file {} does not exist", s.display())));
            }
        }
        Ok(cfg)
    }

    fn water_params(&self, preset: WaterPreset) -> Result<WaterParams> {
        match preset {
            WaterPreset::Paper => Ok(WaterParams::PAPER),
            WaterPreset::Custom => self
                .water
                .ok_or_else(|| Error::Usage("custom water preset needs a [water] table in the config".into())),
        }
    }

    fn scene(&self) -> Result<SceneSpec> {
        match &self.scene_file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let scene: SceneSpec = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
                scene.validate()?;
                Ok(scene)
            }
            None => SceneSpec::desk_default(self.scene.size, self.scene.train_views, self.scene.test_views),
        }
    }
}

fn required(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::Usage(format!("missing --{what} (or `{what}` in the config)")))
}

fn split_indices(dataset: &Dataset, split: Split) -> Vec<usize> {
    match split {
        Split::Train => dataset.manifest.train.clone(),
        Split::Test => dataset.manifest.test.clone(),
        Split::All => (0..dataset.views.len()).collect(),
    }
}

fn render_name(mode: RenderMode, index: usize) -> String {
    let m = match mode {
        RenderMode::Degraded => "degraded",
        RenderMode::Restored => "restored",
    };
    format!("{m}_{index:03}.png")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One line of an evaluation or consistency table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub view: String,
    pub comparison: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

fn format_table(rows: &[ReportRow]) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:<10} {:<34} {:>8} {:>8} {:>8} {:>8}  LPIPS",
        "view", "comparison", "PSNR", "SSIM", "NRMSE", "coverage"
    )
    .unwrap();
    for r in rows {
        let ssim = r.report.ssim.map_or("-".to_string(), |v| format!("{v:.4}"));
        writeln!(
            s,
            "{:<10} {:<34} {:>8.3} {:>8} {:>8.4} {:>8.3}  n/a",
            r.view, r.comparison, r.report.psnr, ssim, r.report.nrmse, r.report.coverage
        )
        .unwrap();
    }
    s
}

fn jsonl(rows: &[ReportRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect()
}

fn mean_row(rows: &[ReportRow], comparison: &str) -> Option<ReportRow> {
    let sel: Vec<&ReportRow> = rows.iter().filter(|r| r.comparison == comparison).collect();
    if sel.is_empty() {
        return None;
    }
    let n = sel.len() as f64;
    let ssims: Vec<f64> = sel.iter().filter_map(|r| r.report.ssim).collect();
    Some(ReportRow {
        view: "mean".into(),
        comparison: comparison.into(),
        report: MetricReport {
            psnr: sel.iter().map(|r| r.report.psnr).sum::<f64>() / n,
            ssim: (!ssims.is_empty()).then(|| ssims.iter().sum::<f64>() / ssims.len() as f64),
            nrmse: sel.iter().map(|r| r.report.nrmse).sum::<f64>() / n,
            pixels: sel.iter().map(|r| r.report.pixels).sum(),
            coverage: sel.iter().map(|r| r.report.coverage).sum::<f64>() / n,
        },
    })
}

pub fn cmd_synth(cfg: &RunConfig, preset: WaterPreset, seed: u64, out: &Path) -> Result<Dataset> {
    let water = cfg.water_params(preset)?;
    make_dataset(&cfg.scene()?, &water, out, seed)
}

pub fn cmd_train(cfg: &TrainConfig, dataset: &Path, out: &Path) -> Result<PathBuf> {
    let dataset = Dataset::load(dataset)?;
    Ok(train::<f32>(&dataset, cfg, out)?.final_checkpoint)
}

pub fn cmd_render(
    checkpoint: &Path,
    dataset: &Path,
    split: Split,
    mode: RenderMode,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let model = Model::<f32>::load(checkpoint)?;
    let dataset = Dataset::load(dataset)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    split_indices(&dataset, split)
        .into_iter()
        .map(|i| {
            let img = model.render_image(&dataset.views[i].pose, mode)?;
            let path = out.join(render_name(mode, i));
            img.save_png(&path)?;
            Ok(path)
        })
        .collect()
}

/// Rows per view: restored render vs clean, degraded input vs clean, and
/// degraded render vs degraded input, for whichever renders exist.
pub fn cmd_eval(renders: &Path, dataset: &Path, split: Split) -> Result<Vec<ReportRow>> {
    let dataset = Dataset::load(dataset)?;
    let mut rows = Vec::new();
    for i in split_indices(&dataset, split) {
        let view = &dataset.views[i];
        let name = format!("{i:03}");
        let load = |mode| {
            let path = renders.join(render_name(mode, i));
            path.exists().then(|| Image::load_png(&path)).transpose()
        };
        let restored = load(RenderMode::Restored)?;
        let degraded = load(RenderMode::Degraded)?;
        if restored.is_none() && degraded.is_none() {
            return Err(Error::Usage(format!(
                "no renders for view {i} in {}",
                renders.display()
            )));
        }
        let mut push = |comparison: &str, a: &Image, b: &Image| -> Result<()> {
            rows.push(ReportRow {
                view: name.clone(),
                comparison: comparison.into(),
                report: MetricReport::compute(a, b, None)?,
            });
            Ok(())
        };
        if let Some(r) = &restored {
            push("restored render vs clean", r, &view.clean)?;
        }
        push("degraded input vs clean", &view.degraded, &view.clean)?;
        if let Some(d) = &degraded {
            push("degraded render vs degraded input", d, &view.degraded)?;
        }
    }
    let means: Vec<ReportRow> = [
        "restored render vs clean",
        "degraded input vs clean",
        "degraded render vs degraded input",
    ]
    .iter()
    .filter_map(|c| mean_row(&rows, c))
    .collect();
    rows.extend(means);
    Ok(rows)
}

fn parse_pairs(text: &str) -> Result<Vec<(usize, usize)>> {
    text.split(',')
        .map(|p| {
            let (a, b) = p
                .split_once(':')
                .ok_or_else(|| Error::Usage(format!("pose pair {p:?} is not of the form a:b")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Usage(format!("bad view index {s:?}")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

pub fn default_pairs(dataset: &Dataset) -> Vec<(usize, usize)> {
    let mut ids = dataset.manifest.test.clone();
    if ids.len() < 2 {
        ids = (0..dataset.views.len()).collect();
    }
    ids.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Clean-image oracle plus restored and degraded render consistency for
/// each pose pair.
pub fn cmd_consistency(checkpoint: &Path, dataset: &Path, pairs: Option<&[(usize, usize)]>) -> Result<Vec<ReportRow>> {
    let model = Model::<f32>::load(checkpoint)?;
    let dataset = Dataset::load(dataset)?;
    let pairs = pairs.map_or_else(|| default_pairs(&dataset), |p| p.to_vec());
    if let Some(&(a, b)) = pairs
        .iter()
        .find(|(a, b)| *a >= dataset.views.len() || *b >= dataset.views.len())
    {
        return Err(Error::Usage(format!("pose pair {a}:{b} is outside the dataset")));
    }
    let mut rows = Vec::new();
    for (a, b) in pairs {
        let (va, vb) = (&dataset.views[a], &dataset.views[b]);
        let name = format!("{a:03}->{b:03}");
        let mut push = |comparison: &str, ia: &Image, ib: &Image| -> Result<()> {
            let report = consistency_of_images(ia, ib, &va.pose, &vb.pose, &va.depth, &vb.depth)?;
            rows.push(ReportRow {
                view: name.clone(),
                comparison: comparison.into(),
                report,
            });
            Ok(())
        };
        push("clean ground truth (oracle)", &va.clean, &vb.clean)?;
        for (mode, label) in [
            (RenderMode::Restored, "restored renders"),
            (RenderMode::Degraded, "degraded renders"),
        ] {
            let ia = model.render_image(&va.pose, mode)?;
            let ib = model.render_image(&vb.pose, mode)?;
            push(label, &ia, &ib)?;
        }
    }
    let means: Vec<ReportRow> = ["clean ground truth (oracle)", "restored renders", "degraded renders"]
        .iter()
        .filter_map(|c| mean_row(&rows, c))
        .collect();
    rows.extend(means);
    Ok(rows)
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Synth(a) => {
            let out = required(a.out.or(cfg.out.clone()), "out")?;
            let seed = cli.seed.unwrap_or(cfg.train.seed);
            let ds = cmd_synth(&cfg, a.water_preset.unwrap_or(cfg.water_preset), seed, &out)?;
            println!(
                "wrote {} views ({} train, {} test) to {}",
                ds.views.len(),
                ds.manifest.train.len(),
                ds.manifest.test.len(),
                out.display()
            );
        }
        Command::Train(a) => {
            let dataset = required(a.dataset.or(cfg.dataset.clone()), "dataset")?;
            let out = required(a.out.or(cfg.out.clone()), "out")?;
            let mut tc = cfg.train.clone();
            if let Some(s) = cli.seed {
                tc.seed = s;
            }
            if let Some(alpha) = a.alpha {
                tc.alpha = alpha;
            }
            if let Some(n) = a.iters {
                tc.total_iters = n;
            }
            if a.no_smoothing {
                tc.smoothing_enabled = false;
            }
            if a.freeze_attenuation {
                tc.freeze_attenuation = true;
            }
            let ckpt = cmd_train(&tc, &dataset, &out)?;
            println!("final checkpoint {}", ckpt.display());
        }
        Command::Render(a) => {
            let dataset = required(a.dataset.or(cfg.dataset.clone()), "dataset")?;
            let out = required(a.out.or(cfg.out.clone()), "out")?;
            let paths = cmd_render(&a.checkpoint, &dataset, a.split, a.mode.into(), &out)?;
            println!("wrote {} images to {}", paths.len(), out.display());
        }
        Command::Eval(a) => {
            let dataset = required(a.dataset.or(cfg.dataset.clone()), "dataset")?;
            let rows = cmd_eval(&a.renders, &dataset, a.split)?;
            let out = a.out.unwrap_or_else(|| a.renders.clone());
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_text(&out.join("metrics.jsonl"), &jsonl(&rows))?;
            print!("{}", format_table(&rows));
            let mean = |c: &str| rows.iter().find(|r| r.view == "mean" && r.comparison == c);
            if let (Some(r), Some(d)) = (mean("restored render vs clean"), mean("degraded input vs clean")) {
                println!("restoration gain: {:+.3} dB PSNR", r.report.psnr - d.report.psnr);
            }
        }
        Command::Consistency(a) => {
            let dataset = required(a.dataset.or(cfg.dataset.clone()), "dataset")?;
            let pairs = a.pairs.as_deref().map(parse_pairs).transpose()?;
            let rows = cmd_consistency(&a.checkpoint, &dataset, pairs.as_deref())?;
            if let Some(out) = a.out.or(cfg.out.clone()) {
                fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
                write_text(&out.join("consistency.jsonl"), &jsonl(&rows))?;
            }
            print!("{}", format_table(&rows));
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}
