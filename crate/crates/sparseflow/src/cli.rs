//! Command-line interface: scene synthesis, training, inference, evaluation,
//! and error-map rendering.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_scene, list_scene_dirs, read_scene, write_scene, GeneratorConfig, ScenePair};
use crate::error::{FlowError, Result};
use crate::fusion::FusionMode;
use crate::geometry::{project_points, CameraIntrinsics};
use crate::image_features::Image;
use crate::metrics::{compute_metrics, format_report, AccSemantics, MetricsAccumulator};
use crate::model::{forward, init_params, load_checkpoint, save_checkpoint, Config, FlowField};
use crate::numerics::Value;
use crate::training::{train, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "sparseflow", about = "Sparse scene flow from RGB images and point clouds")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic rigid-motion dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        #[arg(long)]
        points: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        max_t: f64,
        #[arg(long, default_value_t = 10.0)]
        max_deg: f64,
        #[arg(long, default_value_t = 0.2)]
        coplanar_frac: f64,
        #[arg(long, default_value_t = 0.1)]
        occlusion: f64,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        epochs: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[arg(long)]
        lr_drop_epoch: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "late")]
        fusion: String,
        #[arg(long, default_value_t = 1)]
        mlps: usize,
        #[arg(long, default_value_t = 1)]
        sinkhorn_k: usize,
        #[arg(long, default_value_t = 32)]
        knn: usize,
        #[arg(long, default_value_t = 10.0)]
        dmax: f64,
        #[arg(long, default_value = "or")]
        acc_semantics: String,
    },
    /// Run a checkpoint over a dataset and write per-scene flow estimates.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Render a per-point error map as a P6 image.
    Plot {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// EPE3D rendered on a black canvas: blue at zero error to red at 0.3 m,
/// clamped; pixels without points stay black.
pub fn render_error_map(scene: &ScenePair, est: &FlowField, cam: &CameraIntrinsics) -> Image {
    let n = scene.pc_t.len();
    assert_eq!(est.flow.shape(), &[n, 3], "flow rows must match pc_t");
    let (w, h) = (cam.width, cam.height);
    let mut img = vec![0.0; w * h * 3];
    let mut zbuf = vec![f64::INFINITY; w * h];
    let (pixels, valid) = project_points(&scene.pc_t, cam);
    for i in 0..n {
        if !valid[i] {
            continue;
        }
        let e = [
            est.flow.at(i, 0) - scene.gt_flow[i][0],
            est.flow.at(i, 1) - scene.gt_flow[i][1],
            est.flow.at(i, 2) - scene.gt_flow[i][2],
        ];
        let epe = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
        let ratio = (epe / 0.3).clamp(0.0, 1.0);
        let color = [ratio, 0.0, 1.0 - ratio];
        let z = scene.pc_t.point(i)[2];
        let (px, py) = (pixels[i][0] as usize, pixels[i][1] as usize);
        let idx = py * w + px;
        if z < zbuf[idx] {
            zbuf[idx] = z;
            img[idx * 3..idx * 3 + 3].copy_from_slice(&color);
        }
    }
    Image::new(h, w, img)
}

fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    buf.extend(img.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    fs::write(path, buf)?;
    Ok(())
}

fn write_flow_rows(path: &Path, rows: &Value) -> Result<()> {
    let n = rows.shape()[0];
    let mut out = String::new();
    for i in 0..n {
        out.push_str(&format!("{:.16e} {:.16e} {:.16e}\n", rows.at(i, 0), rows.at(i, 1), rows.at(i, 2)));
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_flow_rows(path: &Path, expect: usize) -> Result<Value> {
    let text = fs::read_to_string(path)?;
    let mut data = Vec::with_capacity(expect * 3);
    for (i, line) in text.lines().enumerate() {
        let vals: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        let vals = vals.map_err(|e| FlowError::Parse {
            file: path.display().to_string(),
            line: i + 1,
            msg: format!("bad float: {e}"),
        })?;
        if vals.len() != 3 {
            return Err(FlowError::Parse {
                file: path.display().to_string(),
                line: i + 1,
                msg: format!("expected 3 values, got {}", vals.len()),
            });
        }
        data.extend(vals);
    }
    if data.len() != expect * 3 {
        return Err(FlowError::Parse {
            file: path.display().to_string(),
            line: data.len() / 3 + 1,
            msg: format!("expected {expect} rows, got {}", data.len() / 3),
        });
    }
    Ok(Value::new(vec![expect, 3], data))
}

fn parse_fusion(s: &str) -> Result<FusionMode> {
    FusionMode::parse(s).ok_or_else(|| FlowError::Data(format!("unknown fusion mode {s:?} (late|early|none)")))
}

fn run_synth(
    out: &Path,
    scenes: usize,
    points: usize,
    seed: u64,
    max_t: f64,
    max_deg: f64,
    coplanar_frac: f64,
    occlusion: f64,
) -> Result<()> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..scenes {
        let scene_seed: u64 = master.gen();
        let coplanar = master.gen::<f64>() < coplanar_frac;
        let config = GeneratorConfig {
            n_points: points,
            max_translation: max_t,
            max_rotation_deg: max_deg,
            coplanar,
            occlusion_frac: occlusion,
            ..Default::default()
        };
        let scene = generate_scene(scene_seed, &config);
        write_scene(&scene, &out.join(format!("{i:06}")))?;
    }
    Ok(())
}

fn run_infer(data: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let params = load_checkpoint(checkpoint)?;
    for dir in list_scene_dirs(data)? {
        let scene = read_scene(&dir)?;
        let result = forward(&scene, &params)?;
        let name = dir.file_name().unwrap();
        let scene_out = out.join(name);
        fs::create_dir_all(&scene_out)?;
        write_flow_rows(&scene_out.join("flow_est.txt"), &result.flow.flow)?;
        let flags: String = result.flow.unmatched.iter().map(|&b| if b { "1\n" } else { "0\n" }).collect();
        fs::write(scene_out.join("unmatched.txt"), flags)?;
    }
    Ok(())
}

fn run_eval(data: &Path, pred: &Path, report: Option<&Path>) -> Result<()> {
    let mut acc = MetricsAccumulator::new();
    for dir in list_scene_dirs(data)? {
        let scene = read_scene(&dir)?;
        let name = dir.file_name().unwrap();
        let est = read_flow_rows(&pred.join(name).join("flow_est.txt"), scene.pc_t.len())?;
        acc.add(&compute_metrics(&est, &scene.gt_flow, &scene.pc_t, &scene.cam, AccSemantics::Or));
    }
    let text = format_report(&acc.finish());
    print!("{text}");
    if let Some(path) = report {
        fs::write(path, text)?;
    }
    Ok(())
}

fn run_command(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, scenes, points, seed, max_t, max_deg, coplanar_frac, occlusion } => {
            run_synth(&out, scenes, points, seed, max_t, max_deg, coplanar_frac, occlusion)
        }
        Command::Train {
            data,
            val,
            epochs,
            batch,
            lr,
            lr_drop_epoch,
            seed,
            checkpoint,
            fusion,
            mlps,
            sinkhorn_k,
            knn,
            dmax,
            acc_semantics,
        } => {
            AccSemantics::parse(&acc_semantics)
                .ok_or_else(|| FlowError::Data(format!("unknown accuracy semantics {acc_semantics:?} (or|and)")))?;
            let config = Config { knn, sinkhorn_k, d_max: dmax, fusion: parse_fusion(&fusion)?, mlps };
            let mut params = init_params(seed, config);
            let dataset = crate::data::read_dataset(&data)?;
            let val_set = crate::data::read_dataset(&val)?;
            let tc = TrainConfig { epochs, batch_size: batch, lr, lr_drop_epoch, seed };
            train(&dataset, &val_set, &tc, &mut params, |log| println!("{log}"))?;
            save_checkpoint(&params, &checkpoint)
        }
        Command::Infer { data, checkpoint, out } => run_infer(&data, &checkpoint, &out),
        Command::Eval { data, pred, report } => run_eval(&data, &pred, report.as_deref()),
        Command::Plot { scene, pred, out } => {
            let s = read_scene(&scene)?;
            let flow = read_flow_rows(&pred, s.pc_t.len())?;
            let unmatched = vec![false; s.pc_t.len()];
            let img = render_error_map(&s, &FlowField { flow, unmatched }, &s.cam);
            write_ppm(&out, &img)
        }
    }
}

/// Binary entry point: parses arguments, runs, and maps structured errors to
/// a one-line diagnostic with a nonzero exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run_command(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
