//! The five commands behind the CLI verbs, callable as library functions.
//!
//! Each command first writes `resolved-<command>.cfg` into `paths.out`; a
//! rerun from that file reproduces every output byte for byte. Random streams
//! derive from `seed` with one label per purpose, so commands never share
//! randomness.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kao_core::denoiser::{Denoiser, TptDenoiser};
use kao_core::metrics::{masked_mse, psnr, ssim};
use kao_core::sampler::{inpaint as inpaint_image, known_from_hole, SamplerConfig};
use kao_core::scenegen::{generate_eval_pair, generate_scene, SceneKind};
use kao_core::trainer::{lr_at, TrainConfig, TrainState};
use kao_core::{Grid, SeededRng};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::pnm::{read_image, read_mask, write_atomic, write_image, write_mask};

const STREAM_SCENES: u64 = 1;
const STREAM_EVAL_PAIRS: u64 = 2;
const STREAM_MODEL_INIT: u64 = 3;
const STREAM_INPAINT: u64 = 4;
const STREAM_EVAL_SAMPLING: u64 = 5;

/// Gray value of the hidden region in masked-input images and of grid
/// separators.
const HOLE_VALUE: f32 = 0.0;
const SEPARATOR_VALUE: f32 = 1.0;
const SEPARATOR_WIDTH: usize = 2;

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Validates the config and writes its resolved echo for `command`.
pub fn write_resolved(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    cfg.validate()?;
    let out = cfg.path("paths.out");
    create_dir(&out)?;
    let path = out.join(format!("resolved-{command}.cfg"));
    write_text(&path, &cfg.resolved_text())?;
    Ok(path)
}

fn image_ext(channels: usize) -> &'static str {
    if channels == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

fn kind_name(kind: SceneKind) -> &'static str {
    match kind {
        SceneKind::Roads => "roads",
        SceneKind::Fields => "fields",
    }
}

/// Seed of scene `index` in stream `stream`.
fn item_seed(seed: u64, stream: u64, index: usize) -> u64 {
    SeededRng::new(seed).derive(stream).derive(index as u64).next_u64()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSummary {
    pub train_dir: PathBuf,
    pub eval_dir: PathBuf,
    pub train_count: usize,
    pub eval_count: usize,
}

/// Writes `data.count` training scenes to `<paths.data>/train` and
/// `eval.count` image/mask pairs to `<paths.data>/eval`, each with a
/// tab-separated manifest. Evaluation masks are stored white where pixels are
/// known, the convention `inpaint` reads.
pub fn gen_data(cfg: &RunConfig) -> Result<DataSummary> {
    write_resolved(cfg, "gen-data")?;
    let seed = cfg.seed()?;
    let root = cfg.path("paths.data");
    let train_dir = root.join("train");
    let eval_dir = root.join("eval");
    create_dir(&train_dir)?;
    create_dir(&eval_dir)?;
    let train_count = cfg.usize("data.count")?;
    let eval_count = cfg.usize("eval.count")?;
    let ratio = cfg.f64("eval.mask_ratio")?;
    let ext = image_ext(cfg.usize("data.channels")?);

    let mut manifest = String::from("file\tseed\tkind\n");
    for i in 0..train_count {
        let spec = cfg.scene_spec(i)?;
        let s = item_seed(seed, STREAM_SCENES, i);
        let img = generate_scene(&spec, &mut SeededRng::new(s))?;
        let name = format!("scene_{i:04}.{ext}");
        write_image(&img, &train_dir.join(&name))?;
        manifest.push_str(&format!("{name}\t{s}\t{}\n", kind_name(spec.kind)));
    }
    write_text(&train_dir.join("manifest.tsv"), &manifest)?;

    let mut manifest = String::from("image\tmask\tseed\tkind\n");
    for i in 0..eval_count {
        let spec = cfg.scene_spec(i)?;
        let s = item_seed(seed, STREAM_EVAL_PAIRS, i);
        let (img, hole) = generate_eval_pair(&spec, ratio, &mut SeededRng::new(s))?;
        let image = format!("image_{i:04}.{ext}");
        let mask = format!("known_{i:04}.pgm");
        write_image(&img, &eval_dir.join(&image))?;
        write_mask(&known_from_hole(&hole)?, &eval_dir.join(&mask))?;
        manifest.push_str(&format!("{image}\t{mask}\t{s}\t{}\n", kind_name(spec.kind)));
    }
    write_text(&eval_dir.join("manifest.tsv"), &manifest)?;
    Ok(DataSummary {
        train_dir,
        eval_dir,
        train_count,
        eval_count,
    })
}

/// Rows of a manifest after its header, split on tabs.
fn manifest_rows(dir: &Path, columns: usize) -> Result<Vec<Vec<String>>> {
    let path = dir.join("manifest.tsv");
    let text = read_text(&path)?;
    let rows: Vec<Vec<String>> = text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect();
    if let Some(bad) = rows.iter().position(|r| r.len() < columns) {
        return Err(CliError::Data(format!("{}: row {} has too few columns", path.display(), bad + 2)));
    }
    Ok(rows)
}

pub fn load_train_set(cfg: &RunConfig) -> Result<Vec<Grid>> {
    let dir = cfg.path("paths.data").join("train");
    let rows = manifest_rows(&dir, 1)?;
    if rows.is_empty() {
        return Err(CliError::Data(format!("{}: no training images", dir.display())));
    }
    rows.iter().map(|r| read_image(&dir.join(&r[0]))).collect()
}

fn new_model(cfg: &RunConfig) -> Result<TptDenoiser> {
    let mut rng = SeededRng::new(cfg.seed()?).derive(STREAM_MODEL_INIT);
    Ok(TptDenoiser::new(cfg.denoiser()?, &mut rng)?)
}

fn load_model(cfg: &RunConfig) -> Result<TptDenoiser> {
    let state = checkpoint::load(&cfg.path("paths.checkpoint"))?;
    if state.model.config() != &cfg.denoiser()? {
        return Err(CliError::Config("checkpoint model shape differs from the config".into()));
    }
    Ok(state.model)
}

/// Loss table: iteration, loss and learning rate, tab separated.
pub fn loss_table(state: &TrainState, cfg: &TrainConfig) -> Result<String> {
    let mut out = String::from("iter\tloss\tlr\n");
    for (i, l) in state.losses.iter().enumerate() {
        out.push_str(&format!("{i}\t{l:.6e}\t{:.6e}\n", lr_at(i, cfg)?));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub loss_table: PathBuf,
    pub start_iter: usize,
    pub iters: usize,
    pub final_loss: Option<f64>,
}

/// Trains on `<paths.data>/train`, checkpointing to `paths.checkpoint` every
/// `train.checkpoint_every` iterations and at the end, and writes
/// `<paths.out>/loss.tsv`. With `resume`, training continues from the
/// checkpoint's iteration. On divergence the loss table is still written.
pub fn train(cfg: &RunConfig, resume: bool, mut progress: impl FnMut(usize, f64)) -> Result<TrainSummary> {
    write_resolved(cfg, "train")?;
    let tcfg = cfg.train()?;
    let sched = cfg.schedule()?;
    let data = load_train_set(cfg)?;
    let ckpt = cfg.path("paths.checkpoint");
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut state = if resume {
        let st = checkpoint::load(&ckpt)?;
        if st.model.config() != &cfg.denoiser()? {
            return Err(CliError::Config("checkpoint model shape differs from the config".into()));
        }
        st
    } else {
        TrainState::new(new_model(cfg)?, &tcfg)
    };
    let start_iter = state.iter;
    let every = cfg.usize("train.checkpoint_every")?;
    let table_path = cfg.path("paths.out").join("loss.tsv");
    let mut result = Ok(());
    while state.iter < tcfg.total_iters {
        let chunk_end = match state.iter.checked_div(every) {
            Some(k) => ((k + 1) * every).min(tcfg.total_iters),
            None => tcfg.total_iters,
        };
        result = (|| {
            while state.iter < chunk_end {
                let loss = state.step(&data, &sched, &tcfg)?;
                progress(state.iter - 1, loss);
            }
            Ok::<(), kao_core::Error>(())
        })();
        if result.is_err() {
            break;
        }
        checkpoint::save(&state, &ckpt)?;
    }
    write_text(&table_path, &loss_table(&state, &tcfg)?)?;
    result?;
    if state.iter == start_iter {
        // Nothing left to run; still leave the checkpoint behind.
        checkpoint::save(&state, &ckpt)?;
    }
    Ok(TrainSummary {
        checkpoint: ckpt,
        loss_table: table_path,
        start_iter,
        iters: state.iter,
        final_loss: state.losses.last().copied(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintSummary {
    pub output: PathBuf,
    pub forward_passes: usize,
    pub seconds: f64,
    pub clamped: usize,
}

/// Inpaints `image` where `mask` is black (white = known) with the
/// checkpoint at `paths.checkpoint`, writing `<paths.out>/inpainted.*` and,
/// when `sampler.trace_every` is positive, `<paths.out>/trace/step_*.*`.
pub fn inpaint(cfg: &RunConfig, image: &Path, mask: &Path) -> Result<InpaintSummary> {
    write_resolved(cfg, "inpaint")?;
    let model = load_model(cfg)?;
    let sched = cfg.schedule()?;
    let scfg = cfg.sampler()?;
    let x0 = read_image(image)?;
    let known = read_mask(mask)?;
    let [c, h, w] = model.image_shape();
    if x0.shape() != [c, h, w] || known.shape() != [1, h, w] {
        return Err(CliError::Data(format!(
            "image {:?} and mask {:?} must match the model's {c}x{h}x{w}",
            x0.shape(),
            known.shape()
        )));
    }
    let trace_every = cfg.usize("sampler.trace_every")?;
    let mut trace: Vec<(usize, Grid)> = Vec::new();
    let mut observe = |t: usize, x: &Grid| {
        if trace_every > 0 && t.is_multiple_of(trace_every) {
            trace.push((t, x.clone()));
        }
    };
    let rng = SeededRng::new(cfg.seed()?).derive(STREAM_INPAINT);
    let start = Instant::now();
    let out = inpaint_image(&model, &x0, &known, &sched, &scfg, &rng, Some(&mut observe))?;
    let seconds = start.elapsed().as_secs_f64();
    let out_dir = cfg.path("paths.out");
    let ext = image_ext(c);
    let output = out_dir.join(format!("inpainted.{ext}"));
    let clamped = write_image(&out.image, &output)?;
    if !trace.is_empty() {
        let dir = out_dir.join("trace");
        create_dir(&dir)?;
        for (t, x) in &trace {
            write_image(x, &dir.join(format!("step_{t:04}.{ext}")))?;
        }
    }
    Ok(InpaintSummary {
        output,
        forward_passes: out.forward_passes,
        seconds,
        clamped,
    })
}

/// One ablation configuration.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: &'static str,
    pub sampler: SamplerConfig,
}

/// The four fixed rows: pixel replacement only, latent blending only,
/// blending plus the input-level mixer, and the configured full sampler.
pub fn ablation_rows(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    use kao_core::conditioning::CondFlags;
    let full = cfg.sampler()?;
    let partial = |lsc, ep_sites| SamplerConfig {
        resample_jumps: 0,
        flags: CondFlags {
            lsc,
            ep_sites,
            kernel_blend: false,
        },
        kernel: full.kernel.clone(),
    };
    Ok(vec![
        AblationRow {
            label: "no-conditioning",
            sampler: partial(false, 0),
        },
        AblationRow {
            label: "lsc-only",
            sampler: partial(true, 0),
        },
        AblationRow {
            label: "lsc+1xEP",
            sampler: partial(true, 1),
        },
        AblationRow {
            label: "full",
            sampler: full,
        },
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub label: String,
    pub masked_mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

struct EvalItem {
    image: Grid,
    known: Grid,
}

/// Runs every ablation row on every pair in `<data_dir>/eval`, writes the
/// per-row outputs and a figure manifest to `<paths.out>/eval`, and the
/// averaged table to `<paths.out>/eval.tsv`. Items run in parallel; each
/// item's sampling stream is shared by all rows.
pub fn eval(cfg: &RunConfig, data_dir: &Path) -> Result<Vec<EvalRow>> {
    write_resolved(cfg, "eval")?;
    let model = load_model(cfg)?;
    let sched = cfg.schedule()?;
    let rows = ablation_rows(cfg)?;
    let window = cfg.usize("eval.ssim_window")?;
    let seed = cfg.seed()?;
    let src = data_dir.join("eval");
    let items = manifest_rows(&src, 2)?
        .iter()
        .map(|r| {
            Ok(EvalItem {
                image: read_image(&src.join(&r[0]))?,
                known: read_mask(&src.join(&r[1]))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        return Err(CliError::Data(format!("{}: no evaluation pairs", src.display())));
    }

    let run_item = |k: usize| -> Result<Vec<Grid>> {
        let item = &items[k];
        let rng = SeededRng::new(seed).derive(STREAM_EVAL_SAMPLING).derive(k as u64);
        rows.iter()
            .map(|row| Ok(inpaint_image(&model, &item.image, &item.known, &sched, &row.sampler, &rng, None)?.image))
            .collect()
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len());
    let mut outputs: Vec<Option<Result<Vec<Grid>>>> = (0..items.len()).map(|_| None).collect();
    let count = items.len();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let run_item = &run_item;
                s.spawn(move || {
                    (w..count)
                        .step_by(workers)
                        .map(|k| (k, run_item(k)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (k, r) in h.join().expect("evaluation worker panicked") {
                outputs[k] = Some(r);
            }
        }
    });

    let out_dir = cfg.path("paths.out").join("eval");
    create_dir(&out_dir)?;
    let ext = image_ext(items[0].image.shape()[0]);
    let mut figure_manifest = String::from("masked\ttarget");
    for row in &rows {
        figure_manifest.push('\t');
        figure_manifest.push_str(row.label);
    }
    figure_manifest.push('\n');
    let mut sums = vec![[0.0f64; 3]; rows.len()];
    for (k, (item, out)) in items.iter().zip(outputs).enumerate() {
        let images = out.expect("every item evaluated")?;
        let hole = item.known.map(|v| 1.0 - v);
        let plane = item.known.len();
        let masked = Grid::from_fn(item.image.shape(), |i| {
            if item.known.data()[i % plane] == 1.0 {
                item.image.data()[i]
            } else {
                HOLE_VALUE
            }
        });
        let masked_name = format!("masked_{k:04}.{ext}");
        let target_name = format!("target_{k:04}.{ext}");
        write_image(&masked, &out_dir.join(&masked_name))?;
        write_image(&item.image, &out_dir.join(&target_name))?;
        figure_manifest.push_str(&format!("{masked_name}\t{target_name}"));
        for (r, (row, img)) in rows.iter().zip(&images).enumerate() {
            sums[r][0] += masked_mse(img, &item.image, &hole)?;
            sums[r][1] += psnr(img, &item.image, 2.0)?;
            sums[r][2] += ssim(img, &item.image, window)?;
            let name = format!("{}_{k:04}.{ext}", row.label);
            write_image(img, &out_dir.join(&name))?;
            figure_manifest.push('\t');
            figure_manifest.push_str(&name);
        }
        figure_manifest.push('\n');
    }
    write_text(&out_dir.join("manifest.tsv"), &figure_manifest)?;

    let n = items.len() as f64;
    let table: Vec<EvalRow> = rows
        .iter()
        .zip(&sums)
        .map(|(row, s)| EvalRow {
            label: row.label.to_string(),
            masked_mse: s[0] / n,
            psnr: s[1] / n,
            ssim: s[2] / n,
        })
        .collect();
    write_text(&cfg.path("paths.out").join("eval.tsv"), &format_eval_table(&table))?;
    Ok(table)
}

pub fn format_eval_table(rows: &[EvalRow]) -> String {
    let mut out = String::from("config\tmasked_mse\tpsnr\tssim\n");
    for r in rows {
        out.push_str(&format!("{}\t{:.6}\t{:.4}\t{:.4}\n", r.label, r.masked_mse, r.psnr, r.ssim));
    }
    out
}

/// Places images side by side with white separators of two pixels.
pub fn compose_row(images: &[Grid]) -> Result<Grid> {
    let first = images
        .first()
        .ok_or_else(|| CliError::Data("figure row needs at least one image".into()))?;
    let (c, h, w) = first.chw()?;
    if let Some(bad) = images.iter().find(|g| g.shape() != first.shape()) {
        return Err(CliError::Data(format!(
            "mixed extents in figure row: {:?} and {:?}",
            first.shape(),
            bad.shape()
        )));
    }
    let stride = w + SEPARATOR_WIDTH;
    let total = images.len() * w + (images.len() - 1) * SEPARATOR_WIDTH;
    Ok(Grid::from_fn(&[c, h, total], |i| {
        let (ch, y, x) = (i / (h * total), (i / total) % h, i % total);
        let (k, dx) = (x / stride, x % stride);
        if dx >= w {
            SEPARATOR_VALUE
        } else {
            images[k].at3(ch, y, dx)
        }
    }))
}

/// Writes one figure per evaluation item from `<eval_dir>/manifest.tsv`:
/// masked input, target and one column per ablation row.
pub fn figures(cfg: &RunConfig, eval_dir: &Path) -> Result<Vec<PathBuf>> {
    write_resolved(cfg, "figures")?;
    let rows = manifest_rows(eval_dir, 2)?;
    let out_dir = cfg.path("paths.out").join("figures");
    create_dir(&out_dir)?;
    let mut written = Vec::with_capacity(rows.len());
    for (k, row) in rows.iter().enumerate() {
        let images = row
            .iter()
            .map(|name| read_image(&eval_dir.join(name)))
            .collect::<Result<Vec<_>>>()?;
        let grid = compose_row(&images)?;
        let path = out_dir.join(format!("figure_{k:04}.{}", image_ext(grid.shape()[0])));
        write_image(&grid, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_layout_arithmetic() {
        let imgs: Vec<Grid> = (0..3).map(|k| Grid::full(&[1, 4, 5], k as f32 * 0.1)).collect();
        let row = compose_row(&imgs).unwrap();
        assert_eq!(row.shape(), &[1, 4, 3 * 5 + 2 * 2]);
        assert_eq!(row.at3(0, 1, 5), SEPARATOR_VALUE);
        assert_eq!(row.at3(0, 1, 7), 0.1);
        assert_eq!(compose_row(&imgs[..1]).unwrap(), imgs[0]);
        let mixed = [imgs[0].clone(), Grid::zeros(&[1, 4, 6])];
        assert!(compose_row(&mixed).is_err());
        assert!(compose_row(&[]).is_err());
    }

    #[test]
    fn four_rows_with_fixed_labels() {
        let rows = ablation_rows(&RunConfig::default()).unwrap();
        let labels: Vec<_> = rows.iter().map(|r| r.label).collect();
        assert_eq!(labels, ["no-conditioning", "lsc-only", "lsc+1xEP", "full"]);
        assert!(!rows[0].sampler.flags.any());
        assert_eq!(rows[3].sampler.resample_jumps, 1);
    }
}
