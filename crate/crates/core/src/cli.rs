//! Command-line front end. Every failure is reported as one line,
//! `error: <kind>: <message>`, followed by a nonzero exit status.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::discretize::{DiscretizationScheme, Midpoint, SchemeKind};
use crate::error::{Error, Result};
use crate::heatmap::{diff_heatmap, heatmap};
use crate::metrics::{evaluate_batch, format_table, DEFAULT_EPSILON};
use crate::net::{Checkpoint, HeadKind, NetConfig};
use crate::predict::{predict_image, write_prediction};
use crate::raster::{load_image, load_raster, save_image, save_raster, RasterGrid};
use crate::stitch::{stitch, PatchLayout};
use crate::synth::{generate_dataset, load_dataset, SceneConfig};
use crate::trainer::{apply_config_text, holdout_split, set_config_key, train, write_epoch_log, OptimConfig};

pub const THREADS_ENV: &str = "ORDSURF_THREADS";

#[derive(Debug, Parser)]
#[command(name = "ordsurf", version, about = "Height maps from single aerial images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Generate a synthetic image/height dataset.
    Synth(SynthArgs),
    /// Train a network and write a checkpoint.
    Train(TrainArgs),
    /// Predict heights for an image or a directory of images.
    Predict(PredictArgs),
    /// Stitch per-patch height rasters using a layout file.
    Stitch(StitchArgs),
    /// Compare predicted and reference height rasters.
    Eval(EvalArgs),
    /// Print discretization thresholds and bin widths.
    Thresholds(ThresholdArgs),
    /// Render a height raster (or a difference) as a color image.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 220)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 320)]
    pub tile_size: usize,
    #[arg(long, default_value_t = 5)]
    pub min_buildings: usize,
    #[arg(long, default_value_t = 12)]
    pub max_buildings: usize,
    #[arg(long, default_value_t = 0.5)]
    pub ground_texture_amp: f64,
    #[arg(long, default_value_t = 135.0)]
    pub sun_azimuth: f64,
    #[arg(long, default_value_t = 0.5)]
    pub shadow_px_per_meter: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Separate validation dataset; without it 10% of `--data` is held out.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch CSV log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// `key = value` file with optimizer and network settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting point for all settings: `desk` (64 px patches, K=16) or `full`.
    #[arg(long, default_value = "full")]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "sid")]
    pub kind: SchemeKind,
    #[arg(long, default_value_t = 0.0)]
    pub a: f64,
    #[arg(long, default_value_t = 40.0)]
    pub b: f64,
    #[arg(long)]
    pub lr_head: Option<f64>,
    #[arg(long)]
    pub lr_backbone: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patches_per_epoch: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub head: Option<HeadKind>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Three comma-separated rates, e.g. `1,2,3`.
    #[arg(long)]
    pub aspp_rates: Option<String>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A PPM image, or a directory of them.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the checkpoint's training patch size.
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub overlap: usize,
    /// How a bin is turned back into meters: `geometric` or `linear`.
    #[arg(long, default_value = "geometric")]
    pub midpoint: Midpoint,
}

#[derive(Debug, Args)]
pub struct StitchArgs {
    #[arg(long)]
    pub layout: PathBuf,
    /// Directory holding `patch_r<row>_c<col>.hmap` files.
    #[arg(long)]
    pub patches: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub shifts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted HMAP file, or a directory of them.
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference HMAP file, or a directory with matching file names.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Also write the JSON report to this file.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Print the fixed-width table after the JSON line.
    #[arg(long)]
    pub table: bool,
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    #[arg(long, default_value = "sid")]
    pub kind: SchemeKind,
    #[arg(long, default_value_t = 0.0)]
    pub a: f64,
    #[arg(long, default_value_t = 40.0)]
    pub b: f64,
    #[arg(long, default_value_t = 64)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Lower end of the ramp, or `auto`.
    #[arg(long, default_value = "auto")]
    pub min: String,
    /// Upper end of the ramp, or `auto`.
    #[arg(long, default_value = "auto")]
    pub max: String,
    /// Reference raster; renders `input - diff` with the signed ramp.
    #[arg(long)]
    pub diff: Option<PathBuf>,
}

fn parse_bound(s: &str) -> Result<Option<f64>> {
    if s == "auto" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::InvalidArgument(format!("bound {s:?} is neither a number nor auto")))
}

fn require_file(p: &Path) -> Result<()> {
    if !p.exists() {
        return Err(Error::InvalidArgument(format!("{} does not exist", p.display())));
    }
    Ok(())
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let cfg = SceneConfig {
        tile_size: a.tile_size,
        n_buildings: (a.min_buildings, a.max_buildings),
        ground_texture_amp: a.ground_texture_amp,
        sun_azimuth: a.sun_azimuth,
        shadow_px_per_meter: a.shadow_px_per_meter,
        seed: a.seed,
        ..SceneConfig::default()
    };
    cfg.validate()?;
    let entries = generate_dataset(&cfg, a.n, &a.out)?;
    println!("wrote {} tiles to {}", entries.len(), a.out.display());
    Ok(())
}

/// Defaults from the preset, then the config file, then explicit flags.
pub fn resolve_train_config(a: &TrainArgs) -> Result<(OptimConfig, NetConfig)> {
    let (mut optim, mut net) = match a.preset.as_str() {
        "desk" => (OptimConfig::default(), NetConfig::desk()),
        "full" => (OptimConfig::full(), NetConfig::default()),
        p => return Err(Error::InvalidArgument(format!("unknown preset {p:?}"))),
    };
    if let Some(path) = &a.config {
        apply_config_text(&fs::read_to_string(path)?, &mut optim, &mut net)?;
    }
    let flags: [(&str, Option<String>); 10] = [
        ("lr_head", a.lr_head.map(|v| v.to_string())),
        ("lr_backbone", a.lr_backbone.map(|v| v.to_string())),
        ("weight_decay", a.weight_decay.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("patches_per_epoch", a.patches_per_epoch.map(|v| v.to_string())),
        ("k", a.k.map(|v| v.to_string())),
        ("head", a.head.map(|v| v.name().to_string())),
        ("patch_size", a.patch_size.map(|v| v.to_string())),
        ("aspp_rates", a.aspp_rates.clone()),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            set_config_key(key, &v, &mut optim, &mut net)?;
        }
    }
    optim.validate()?;
    net.validate()?;
    Ok((optim, net))
}

fn run_train(a: TrainArgs) -> Result<()> {
    let (optim, net) = resolve_train_config(&a)?;
    let scheme = DiscretizationScheme::new(a.kind, a.a, a.b, net.k)?;
    for w in net.aspp_warnings() {
        eprintln!("warning: {w}");
    }
    let tiles = load_dataset(&a.data)?;
    let extra_val = match &a.val_data {
        Some(p) => Some(load_dataset(p)?),
        None => None,
    };
    let (train_tiles, val_tiles) = match &extra_val {
        Some(v) => (&tiles[..], &v[..]),
        None => holdout_split(&tiles, 0.1),
    };
    let report = train(train_tiles, val_tiles, &net, &optim, &scheme, a.seed, |e| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  lr {:.1e}/{:.1e}  val rmse {:.4}  val rel {:.4}",
            e.epoch, e.mean_loss, e.lr_head, e.lr_backbone, e.val_rmse, e.val_rel
        );
    })?;
    report.checkpoint.save(&a.out)?;
    if let Some(p) = &a.log {
        write_epoch_log(&report.epochs, fs::File::create(p)?)?;
    }
    println!(
        "first batch loss {:.6}, baseline rmse {:.4}, checkpoint {}",
        report.first_batch_loss,
        report.baseline_rmse,
        a.out.display()
    );
    Ok(())
}

fn list_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    out.sort();
    Ok(out)
}

fn run_predict(a: PredictArgs) -> Result<()> {
    require_file(&a.checkpoint)?;
    require_file(&a.input)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let patch = a.patch.unwrap_or(ckpt.config.patch_size);
    if patch != ckpt.config.patch_size {
        return Err(Error::Config(format!(
            "checkpoint was trained on {}-pixel patches, not {patch}",
            ckpt.config.patch_size
        )));
    }
    let net = ckpt.to_model()?;
    let jobs: Vec<(PathBuf, PathBuf)> = if a.input.is_dir() {
        list_with_ext(&a.input, "ppm")?
            .into_iter()
            .map(|p| {
                let stem = p.file_stem().unwrap_or_default().to_owned();
                (p, a.out.join(stem))
            })
            .collect()
    } else {
        vec![(a.input.clone(), a.out.clone())]
    };
    for (input, out) in jobs {
        let image = load_image(&input)?;
        let pred = predict_image(&net, &ckpt.scheme, &image, patch, a.overlap, a.midpoint)?;
        write_prediction(&pred, &out)?;
        println!(
            "{} -> {} ({} patches)",
            input.display(),
            out.join("stitched.hmap").display(),
            pred.patches.len()
        );
    }
    Ok(())
}

fn run_stitch(a: StitchArgs) -> Result<()> {
    require_file(&a.layout)?;
    let layout = PatchLayout::read_csv(fs::File::open(&a.layout)?)?;
    let patches = layout
        .rects()
        .iter()
        .map(|r| load_raster(a.patches.join(format!("patch_r{:03}_c{:03}.hmap", r.row, r.col))))
        .collect::<Result<Vec<_>>>()?;
    let result = stitch(&patches, &layout)?;
    save_raster(&result.raster, &a.out)?;
    if let Some(p) = &a.shifts {
        result.write_shift_report(&layout, fs::File::create(p)?)?;
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    require_file(&a.pred)?;
    require_file(&a.truth)?;
    let pairs: Vec<(RasterGrid, RasterGrid)> = if a.pred.is_dir() {
        list_with_ext(&a.pred, "hmap")?
            .into_iter()
            .map(|p| {
                let name = p.file_name().unwrap_or_default();
                Ok((load_raster(&p)?, load_raster(a.truth.join(name))?))
            })
            .collect::<Result<_>>()?
    } else {
        vec![(load_raster(&a.pred)?, load_raster(&a.truth)?)]
    };
    let refs: Vec<(&RasterGrid, &RasterGrid)> = pairs.iter().map(|(p, t)| (p, t)).collect();
    let report = evaluate_batch(&refs, a.epsilon)?;
    let json = serde_json::to_string(&report)?;
    if let Some(p) = &a.json {
        fs::write(p, &json)?;
    }
    println!("{json}");
    if a.table {
        print!("{}", format_table(&[("prediction", report)]));
    }
    Ok(())
}

/// The threshold table printed by `thresholds`.
pub fn threshold_table(scheme: &DiscretizationScheme) -> String {
    let mut out = String::from("i\tt_i\theight_m\tbin_width_m\n");
    let t = scheme.thresholds();
    for (i, &ti) in t.iter().enumerate() {
        let width = if i + 1 < t.len() {
            let (lo, hi) = scheme.bin_edges(i);
            format!("{:.6}", hi - lo)
        } else {
            "-".to_string()
        };
        out.push_str(&format!("{i}\t{ti:.6}\t{:.6}\t{width}\n", scheme.to_meters(ti)));
    }
    out
}

fn run_thresholds(a: ThresholdArgs) -> Result<()> {
    let scheme = DiscretizationScheme::new(a.kind, a.a, a.b, a.k)?;
    print!("{}", threshold_table(&scheme));
    Ok(())
}

fn run_heatmap(a: HeatmapArgs) -> Result<()> {
    require_file(&a.input)?;
    let (lo, hi) = (parse_bound(&a.min)?, parse_bound(&a.max)?);
    let grid = load_raster(&a.input)?;
    let image = match &a.diff {
        Some(truth) => {
            let limit = match (lo, hi) {
                (None, None) => None,
                (l, h) => Some(l.map(f64::abs).unwrap_or(0.0).max(h.map(f64::abs).unwrap_or(0.0))),
            };
            diff_heatmap(&grid, &load_raster(truth)?, limit)?
        }
        None => heatmap(&grid, lo, hi)?,
    };
    save_image(&image, &a.out)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Predict(a) => run_predict(a),
        Command::Stitch(a) => run_stitch(a),
        Command::Eval(a) => run_eval(a),
        Command::Thresholds(a) => run_thresholds(a),
        Command::Heatmap(a) => run_heatmap(a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_table_sid_example() {
        let s = threshold_table(&DiscretizationScheme::sid(0.0, 99.0, 2).unwrap());
        let t: Vec<&str> = s.lines().skip(1).map(|l| l.split('\t').nth(1).unwrap()).collect();
        assert_eq!(t, ["0.000000", "2.302585", "4.605170"]);
    }

    #[test]
    fn threshold_table_ud_example() {
        let s = threshold_table(&DiscretizationScheme::ud(0.0, 10.0, 5).unwrap());
        let t: Vec<f64> = s.lines().skip(1).map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
        assert_eq!(t, [0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
        let one = threshold_table(&DiscretizationScheme::sid(0.0, 40.0, 1).unwrap());
        assert_eq!(one.lines().count(), 3);
    }

    #[test]
    fn flags_override_file_and_preset() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("train.cfg");
        fs::write(&cfg, "epochs = 7\nbatch_size = 3\n").unwrap();
        let cli = Cli::try_parse_from([
            "ordsurf", "train", "--data", "d", "--out", "o", "--preset", "desk", "--config",
            cfg.to_str().unwrap(), "--epochs", "4", "--aspp-rates", "1,2,4",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let (o, n) = resolve_train_config(&a).unwrap();
        assert_eq!((o.epochs, o.batch_size), (4, 3));
        assert_eq!(n.aspp_rates, [1, 2, 4]);
        assert_eq!(n.k, 16);
    }

    #[test]
    fn usage_errors_are_single_line() {
        assert_eq!(main_with_args(["ordsurf", "thresholds", "--k", "x"]), 2);
        assert_eq!(main_with_args(["ordsurf", "thresholds", "--k", "0"]), 1);
    }
}
