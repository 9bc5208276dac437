//! Command-line front end. Every subcommand validates flags, calls the
//! library, writes its artifacts where named, and records a run manifest
//! next to them. Exit codes: 0 success, 2 usage, 3 data, 4 numeric.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use symface::error::{Error, Result};
use symface::generator::Generator;
use symface::masking::{random_mask, read_mask_png, MaskKind, MaskSpec};
use symface::metrics::{perceptual_distance, symmetry_error, FeatureExtractor};
use symface::params::derive_seed;
use symface::scs::{
    heatmap, heatmap_csv, render_heatmap, scs_detailed, scs_regions, ConstantFill, Inpaint,
    LocalFill, MirrorFill, ModelInpainter, ScsTarget,
};
use symface::toyfaces::{
    generate_face, read_dataset, read_rgb_png, write_dataset, write_rgb_png, Part, Sample,
};
use symface::trainer::{
    load_checkpoint, train, TrainConfig, TrainState,
};

#[derive(Parser)]
#[command(
    name = "symface",
    version,
    about = "Symmetric face inpainting toolkit: toy data, training, inpainting, symmetry metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy-face dataset with exact part masks.
    MakeDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        asymmetry: f64,
    },
    /// Train the generator and the seven critics on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Inpaint one image with a trained checkpoint.
    Inpaint {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep raw generator output everywhere instead of compositing the
        /// known pixels back in.
        #[arg(long)]
        no_composite: bool,
    },
    /// Symmetry concentration score over a dataset.
    Scs {
        /// mirror | constant:V | local:R | model:CKPT
        #[arg(long)]
        inpainter: String,
        #[arg(long)]
        data: PathBuf,
        /// eye | half
        #[arg(long)]
        target: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Inpainting quality metrics over a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// narrow | medium | wide | aggressive
        #[arg(long)]
        masks: String,
        /// Comma list from fid, perc, pixel, symmetry.
        #[arg(long, default_value = "fid,perc,pixel,symmetry")]
        metrics: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Influence heatmaps of one sample for one block size (or all three).
    Heatmap {
        /// mirror | constant:V | local:R | model:CKPT
        #[arg(long)]
        inpainter: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// eye | half
        #[arg(long)]
        target: String,
        /// 16 | 32 | 64 | all
        #[arg(long, default_value = "all")]
        k: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_manifest(dir_or_file: &Path, is_dir: bool, extra: serde_json::Value) -> Result<()> {
    let argv: Vec<String> = std::env::args().collect();
    let manifest = serde_json::json!({
        "tool": "symface",
        "crate_version": env!("CARGO_PKG_VERSION"),
        "argv": argv,
        "details": extra,
    });
    let path = if is_dir {
        dir_or_file.join("run_manifest.json")
    } else {
        let mut name = dir_or_file.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        dir_or_file.with_file_name(name)
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Integrity(format!("manifest serialize: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn load_generator(path: &Path) -> Result<Generator<f32>> {
    let state: TrainState<f32> = load_checkpoint(path)?;
    Ok(state.generator)
}

fn parse_inpainter(spec: &str) -> Result<Box<dyn Inpaint>> {
    if spec == "mirror" {
        return Ok(Box::new(MirrorFill));
    }
    if let Some(v) = spec.strip_prefix("constant:") {
        let v: f32 = v
            .parse()
            .map_err(|_| Error::Parameter(format!("constant fill value `{v}`")))?;
        return Ok(Box::new(ConstantFill(v)));
    }
    if let Some(r) = spec.strip_prefix("local:") {
        let radius: usize = r
            .parse()
            .map_err(|_| Error::Parameter(format!("local fill radius `{r}`")))?;
        return Ok(Box::new(LocalFill { radius }));
    }
    if spec == "local" {
        return Ok(Box::new(LocalFill::default()));
    }
    if let Some(path) = spec.strip_prefix("model:") {
        let generator = load_generator(Path::new(path))?;
        return Ok(Box::new(ModelInpainter {
            generator,
            composite: true,
        }));
    }
    Err(Error::Parameter(format!(
        "unknown inpainter `{spec}` (expected mirror | constant:V | local:R | model:CKPT)"
    )))
}

fn cmd_make_dataset(
    out: &Path,
    count: usize,
    size: usize,
    seed: u64,
    asymmetry: f64,
) -> Result<()> {
    if count == 0 {
        return Err(Error::Parameter("--count must be >= 1".into()));
    }
    let samples: Vec<Sample> = (0..count)
        .map(|i| generate_face(seed.wrapping_add(i as u64), size, asymmetry))
        .collect::<Result<_>>()?;
    let manifest = write_dataset(&samples, out)?;
    write_manifest(
        out,
        true,
        serde_json::json!({
            "command": "make-dataset",
            "count": manifest.count,
            "size": manifest.size,
            "seed": seed,
            "asymmetry": asymmetry,
        }),
    )?;
    println!(
        "wrote {} samples of {}x{} to {}",
        manifest.count,
        manifest.size,
        manifest.size,
        out.display()
    );
    Ok(())
}

fn cmd_train(data: &Path, config: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let text =
        std::fs::read_to_string(config).map_err(|e| Error::io(config.to_path_buf(), e))?;
    let file_config = TrainConfig::parse_kv(&text)?;
    let dataset = read_dataset(data)?;
    let mut state: TrainState<f32> = match resume {
        Some(ckpt) => {
            let mut s = load_checkpoint(ckpt)?;
            // the checkpoint fixes everything except how much longer to run
            s.config.epochs = file_config.epochs;
            s.config.max_steps = file_config.max_steps;
            s
        }
        None => TrainState::new(file_config)?,
    };
    let outcome = train(&dataset, &mut state, Some(out))?;
    write_manifest(
        out,
        true,
        serde_json::json!({
            "command": "train",
            "data": data.display().to_string(),
            "steps_run": outcome.reports.len(),
            "global_step": state.global_step,
            "seed": state.config.seed,
            "config": state.config,
            "generator_params": state.generator.param_count(),
        }),
    )?;
    println!(
        "trained {} steps (global step {}), checkpoint {}",
        outcome.reports.len(),
        state.global_step,
        outcome
            .final_checkpoint
            .as_deref()
            .map(|p| p.display().to_string())
            .unwrap_or_default()
    );
    Ok(())
}

fn cmd_inpaint(
    ckpt: &Path,
    image: &Path,
    mask: &Path,
    out: &Path,
    no_composite: bool,
) -> Result<()> {
    let generator = load_generator(ckpt)?;
    let img = read_rgb_png(image)?;
    let m = read_mask_png(mask)?;
    let result = generator.inpaint_image(&img, &m, !no_composite)?;
    write_rgb_png(out, &result)?;
    write_manifest(
        out,
        false,
        serde_json::json!({
            "command": "inpaint",
            "ckpt": ckpt.display().to_string(),
            "image": image.display().to_string(),
            "mask": mask.display().to_string(),
            "composite": !no_composite,
        }),
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_scs(
    inpainter_spec: &str,
    data: &Path,
    target: &str,
    out: &Path,
    samples: Option<usize>,
    workers: Option<usize>,
) -> Result<()> {
    if let Some(w) = workers {
        // deterministic regardless of pool size; ignore failure if a pool
        // already exists in this process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    let inpainter = parse_inpainter(inpainter_spec)?;
    let target = ScsTarget::from_name(target)?;
    let dataset = read_dataset(data)?;
    let n = samples.unwrap_or(dataset.len()).min(dataset.len());
    if n == 0 {
        return Err(Error::Parameter("no samples selected".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.to_path_buf(), e))?;

    let mut per_sample = Vec::with_capacity(n);
    let mut first_breakdown = None;
    for (i, sample) in dataset.iter().take(n).enumerate() {
        let breakdown = scs_detailed(inpainter.as_ref(), sample, target)?;
        per_sample.push((i, breakdown.value));
        if first_breakdown.is_none() {
            first_breakdown = Some(breakdown);
        }
    }
    let mean = per_sample.iter().map(|(_, v)| v).sum::<f64>() / n as f64;

    std::fs::write(out.join("scs.txt"), format!("{mean}\n"))
        .map_err(|e| Error::io(out.join("scs.txt"), e))?;
    let mut rows = String::from("index,scs\n");
    for (i, v) in &per_sample {
        rows.push_str(&format!("{i},{v}\n"));
    }
    std::fs::write(out.join("scs_per_sample.csv"), rows)
        .map_err(|e| Error::io(out.join("scs_per_sample.csv"), e))?;

    if let Some(b) = first_breakdown {
        let mut csv = String::new();
        for (k, _, hm) in &b.per_k {
            let img = render_heatmap(hm, true);
            let path = out.join(format!("heatmap_K{k}.png"));
            img.save(&path)
                .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
            if csv.is_empty() {
                csv = heatmap_csv(hm);
            } else {
                // append without the header
                let body = heatmap_csv(hm);
                csv.push_str(body.split_once('\n').map(|x| x.1).unwrap_or(""));
            }
        }
        std::fs::write(out.join("heatmap.csv"), csv)
            .map_err(|e| Error::io(out.join("heatmap.csv"), e))?;
    }
    write_manifest(
        out,
        true,
        serde_json::json!({
            "command": "scs",
            "inpainter": inpainter.label(),
            "target": target.name(),
            "data": data.display().to_string(),
            "samples": n,
            "scs": mean,
        }),
    )?;
    println!("scs {mean} over {n} samples -> {}", out.display());
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    masks: &str,
    metrics: &str,
    out: &Path,
    seed: u64,
    samples: Option<usize>,
) -> Result<()> {
    let wanted: Vec<&str> = metrics.split(',').map(|s| s.trim()).collect();
    for m in &wanted {
        if !["fid", "perc", "pixel", "symmetry"].contains(m) {
            return Err(Error::Parameter(format!(
                "unknown metric `{m}` (expected fid, perc, pixel, symmetry)"
            )));
        }
    }
    let preset = MaskSpec::preset(MaskKind::from_name(masks)?);
    let generator = load_generator(ckpt)?;
    let dataset = read_dataset(data)?;
    let n = samples.unwrap_or(dataset.len()).min(dataset.len());
    if n == 0 {
        return Err(Error::Parameter("no samples selected".into()));
    }

    let mut inpainted = Vec::with_capacity(n);
    for (i, sample) in dataset.iter().take(n).enumerate() {
        let mask = random_mask(&preset, derive_seed(seed, 77, i as u64), sample.size())?;
        inpainted.push(generator.inpaint_image(&sample.image, &mask, true)?);
    }

    let extractor = FeatureExtractor::RandomConv { seed: 0, dims: 32 };
    let mut rows = vec![("samples".to_string(), n as f64)];
    for m in wanted {
        let value = match m {
            "fid" => {
                let real: Vec<_> = dataset.iter().take(n).map(|s| s.image.clone()).collect();
                let fa = extractor.feature_matrix(&real)?;
                let fb = extractor.feature_matrix(&inpainted)?;
                symface::metrics::frechet_distance(&fa, &fb)?
            }
            "perc" => {
                let mut acc = 0.0;
                for (s, inp) in dataset.iter().take(n).zip(inpainted.iter()) {
                    acc += perceptual_distance(&extractor, &s.image, inp)?;
                }
                acc / n as f64
            }
            "pixel" => {
                let mut acc = 0.0;
                for (s, inp) in dataset.iter().take(n).zip(inpainted.iter()) {
                    let mut total = 0.0f64;
                    for (a, b) in s.image.iter().zip(inp.iter()) {
                        total += (a - b).abs() as f64;
                    }
                    acc += total / s.image.len() as f64;
                }
                acc / n as f64
            }
            "symmetry" => {
                let mut acc = 0.0;
                let mut counted = 0usize;
                for (s, inp) in dataset.iter().take(n).zip(inpainted.iter()) {
                    match symmetry_error(s, inp, Part::Eye) {
                        Ok(v) => {
                            acc += v;
                            counted += 1;
                        }
                        Err(Error::OrganNotFound { .. }) => {}
                        Err(e) => return Err(e),
                    }
                }
                if counted == 0 {
                    f64::NAN
                } else {
                    acc / counted as f64
                }
            }
            _ => unreachable!(),
        };
        rows.push((m.to_string(), value));
    }

    let mut csv = String::from("metric,value\n");
    for (k, v) in &rows {
        csv.push_str(&format!("{k},{v}\n"));
    }
    std::fs::write(out, csv).map_err(|e| Error::io(out.to_path_buf(), e))?;
    write_manifest(
        out,
        false,
        serde_json::json!({
            "command": "eval",
            "ckpt": ckpt.display().to_string(),
            "data": data.display().to_string(),
            "masks": masks,
            "seed": seed,
            "samples": n,
        }),
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_heatmap(
    inpainter_spec: &str,
    data: &Path,
    index: usize,
    target: &str,
    k_spec: &str,
    out: &Path,
) -> Result<()> {
    let inpainter = parse_inpainter(inpainter_spec)?;
    let target = ScsTarget::from_name(target)?;
    let dataset = read_dataset(data)?;
    let sample = dataset
        .get(index)
        .ok_or_else(|| Error::Parameter(format!("sample index {index} of {}", dataset.len())))?;
    let ks: Vec<usize> = match k_spec {
        "all" => vec![16, 32, 64],
        other => vec![other
            .parse()
            .map_err(|_| Error::Parameter(format!("block size `{other}`")))?],
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.to_path_buf(), e))?;
    let (m, _) = scs_regions(sample, target)?;
    let mut csv = String::new();
    for k in &ks {
        let hm = heatmap(inpainter.as_ref(), sample, &m, *k)?;
        let img = render_heatmap(&hm, true);
        let path = out.join(format!("heatmap_K{k}.png"));
        img.save(&path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        if csv.is_empty() {
            csv = heatmap_csv(&hm);
        } else {
            let body = heatmap_csv(&hm);
            csv.push_str(body.split_once('\n').map(|x| x.1).unwrap_or(""));
        }
    }
    std::fs::write(out.join("heatmap.csv"), &csv)
        .map_err(|e| Error::io(out.join("heatmap.csv"), e))?;
    write_manifest(
        out,
        true,
        serde_json::json!({
            "command": "heatmap",
            "inpainter": inpainter.label(),
            "target": target.name(),
            "index": index,
            "k": ks,
        }),
    )?;
    println!("wrote heatmaps to {}", out.display());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::MakeDataset {
            out,
            count,
            size,
            seed,
            asymmetry,
        } => cmd_make_dataset(out, *count, *size, *seed, *asymmetry),
        Command::Train {
            data,
            config,
            out,
            resume,
        } => cmd_train(data, config, out, resume.as_deref()),
        Command::Inpaint {
            ckpt,
            image,
            mask,
            out,
            no_composite,
        } => cmd_inpaint(ckpt, image, mask, out, *no_composite),
        Command::Scs {
            inpainter,
            data,
            target,
            out,
            samples,
            workers,
        } => cmd_scs(inpainter, data, target, out, *samples, *workers),
        Command::Eval {
            ckpt,
            data,
            masks,
            metrics,
            out,
            seed,
            samples,
        } => cmd_eval(ckpt, data, masks, metrics, out, *seed, *samples),
        Command::Heatmap {
            inpainter,
            data,
            index,
            target,
            k,
            out,
        } => cmd_heatmap(inpainter, data, *index, target, k, out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
