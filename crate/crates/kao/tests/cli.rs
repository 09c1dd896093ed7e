//! The `kao` binary: exit codes and the per-command contracts.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kao::pnm::{read_image, read_mask, write_mask};
use kao_core::scenegen::{count_regions, voronoi_labels};
use kao_core::Grid;

fn kao(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kao")).args(args).output().unwrap()
}

fn tiny_config(dir: &Path, extra: &str) -> String {
    let text = format!(
        "paths.data = {d}/data\npaths.out = {d}/run\npaths.checkpoint = {d}/run/model.ckpt\n\
         data.count = 4\ndata.height = 16\ndata.width = 16\neval.count = 2\n\
         train.iters = 3\ntrain.batch_size = 2\nschedule.T = 4\n",
        d = dir.display()
    );
    // Keys in `extra` replace the base values; duplicates are a config error.
    let overridden: Vec<&str> = extra.lines().filter_map(|l| l.split('=').next()).map(str::trim).collect();
    let text: String = text
        .lines()
        .filter(|l| !overridden.contains(&l.split('=').next().unwrap_or("").trim()))
        .map(|l| format!("{l}\n"))
        .chain(std::iter::once(extra.to_string()))
        .collect();
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "train.nonsense = 1\n").unwrap();
    assert_eq!(code(&kao(&["gen-data", "--config", bad.to_str().unwrap()])), 2);
    let cfg = tiny_config(dir.path(), "");
    let o = kao(&["train", "--config", &cfg]);
    assert_eq!(code(&o), 3, "missing dataset: {}", String::from_utf8_lossy(&o.stderr));
    let diverging = tiny_config(dir.path(), "train.lr_peak = 1e12\ntrain.warmup_fraction = 0\n");
    assert_eq!(code(&kao(&["gen-data", "--config", &diverging])), 0);
    let o = kao(&["train", "--config", &diverging]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(kao(&["--help"]).status.success());
}

#[test]
fn gen_data_is_deterministic_and_listed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "data.count = 10\nseed = 7\n");
    assert!(kao(&["gen-data", "--config", &cfg]).status.success());
    let train = dir.path().join("data/train");
    let manifest = fs::read_to_string(train.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 11);
    let first: Vec<Vec<u8>> = (0..10).map(|i| fs::read(train.join(format!("scene_{i:04}.pgm"))).unwrap()).collect();
    assert!(kao(&["gen-data", "--config", &cfg]).status.success());
    for (i, bytes) in first.iter().enumerate() {
        assert_eq!(&fs::read(train.join(format!("scene_{i:04}.pgm"))).unwrap(), bytes);
    }
    assert!(dir.path().join("run/resolved-gen-data.cfg").exists());
}

#[test]
fn field_plots_form_the_configured_regions() {
    // The label map behind every field scene has exactly `plot_count`
    // connected regions.
    for seed in 0..10 {
        let mut rng = kao_core::SeededRng::new(seed);
        let labels = voronoi_labels(32, 32, 5, &mut rng).unwrap();
        assert_eq!(count_regions(&labels, 32, 32), 5);
    }
}

#[test]
fn train_resume_and_inpaint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "train.iters = 4\n");
    assert!(kao(&["gen-data", "--config", &cfg]).status.success());
    assert!(kao(&["train", "--config", &cfg]).status.success());
    let ckpt = dir.path().join("run/model.ckpt");
    let full_run = fs::read(&ckpt).unwrap();
    let table = fs::read_to_string(dir.path().join("run/loss.tsv")).unwrap();
    assert_eq!(table.lines().count(), 5);

    // Same seed, fresh run: identical checkpoint.
    assert!(kao(&["train", "--config", &cfg]).status.success());
    assert!(fs::read(&ckpt).unwrap() == full_run, "checkpoints differ");

    // Two iterations, then resume to four: numbering and the loss table
    // continue. The schedule depends on the total, so the weights differ
    // from the uninterrupted run; exact resume is covered by the trainer.
    let short = tiny_config(dir.path(), "train.iters = 2\n");
    assert!(kao(&["train", "--config", &short]).status.success());
    let cfg = tiny_config(dir.path(), "train.iters = 4\n");
    let o = kao(&["train", "--config", &cfg, "--resume"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("trained iterations 2..4"), "{}", String::from_utf8_lossy(&o.stdout));
    let table = fs::read_to_string(dir.path().join("run/loss.tsv")).unwrap();
    let iters: Vec<&str> = table.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(iters, ["0", "1", "2", "3"]);

    let image = dir.path().join("data/eval/image_0000.pgm");
    let ones = dir.path().join("ones.pgm");
    write_mask(&Grid::full(&[1, 16, 16], 1.0), &ones).unwrap();
    let o = kao(&["inpaint", "--config", &cfg, "--image", image.to_str().unwrap(), "--mask", ones.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("forward_passes\t16"), "{stdout}");
    let out = dir.path().join("run/inpainted.pgm");
    assert!(fs::read(&out).unwrap() == fs::read(&image).unwrap(), "all-known mask changed the image");

    let mask = dir.path().join("data/eval/known_0000.pgm");
    let args = ["inpaint", "--config", &cfg, "--image", image.to_str().unwrap(), "--mask", mask.to_str().unwrap()];
    assert!(kao(&args).status.success());
    let a = fs::read(&out).unwrap();
    assert!(kao(&args).status.success());
    assert!(fs::read(&out).unwrap() == a, "inpaint is not deterministic");
    let known = read_mask(&mask).unwrap();
    let (src, got) = (read_image(&image).unwrap(), read_image(&out).unwrap());
    for i in 0..256 {
        if known.data()[i] == 1.0 {
            assert_eq!(src.data()[i], got.data()[i]);
        }
    }

    let gray = dir.path().join("gray.pgm");
    fs::write(&gray, b"P5\n16 16\n255\n".iter().chain(&[128u8; 256]).copied().collect::<Vec<u8>>()).unwrap();
    let o = kao(&["inpaint", "--config", &cfg, "--image", image.to_str().unwrap(), "--mask", gray.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let small = dir.path().join("small.pgm");
    write_mask(&Grid::full(&[1, 8, 8], 1.0), &small).unwrap();
    let o = kao(&["inpaint", "--config", &cfg, "--image", small.to_str().unwrap(), "--mask", ones.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn eval_table_and_figures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    for verb in ["gen-data", "train", "eval", "figures"] {
        let o = kao(&[verb, "--config", &cfg]);
        assert!(o.status.success(), "{verb}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let table = fs::read_to_string(dir.path().join("run/eval.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    let labels: Vec<&str> = rows.iter().map(|r| r.split('\t').next().unwrap()).collect();
    assert_eq!(labels, ["no-conditioning", "lsc-only", "lsc+1xEP", "full"]);
    for r in &rows {
        assert!(r.split('\t').skip(1).all(|v| v.parse::<f64>().unwrap().is_finite()), "{r}");
    }
    let fig = read_image(&dir.path().join("run/figures/figure_0000.pgm")).unwrap();
    assert_eq!(fig.shape(), &[1, 16, 6 * 16 + 5 * 2]);
    let first = fs::read(dir.path().join("run/figures/figure_0001.pgm")).unwrap();
    assert!(kao(&["figures", "--config", &cfg]).status.success());
    assert_eq!(fs::read(dir.path().join("run/figures/figure_0001.pgm")).unwrap(), first);
}
