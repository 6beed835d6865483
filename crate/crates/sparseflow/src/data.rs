//! Synthetic rigid-motion scenes and the on-disk scene format.
//!
//! Each scene is a frame pair: points sampled in the camera frustum (or on a
//! random plane in coplanar mode), moved by a rigid transform, colored by a
//! smooth procedural field of their pre-motion position, and splatted into
//! both frames' images with z-buffering. Occluded points are deleted from
//! frame t+1 and unmasked; the two frames are subsampled independently.

use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FlowError, Result};
use crate::geometry::{project_points, CameraIntrinsics, PointCloud};
use crate::image_features::Image;

/// One supervised frame pair.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub pc_t: PointCloud,
    pub pc_t1: PointCloud,
    pub img_t: Image,
    pub img_t1: Image,
    pub cam: CameraIntrinsics,
    /// Row-aligned with `pc_t`.
    pub gt_flow: Vec<[f64; 3]>,
    /// True where the point's match survives in frame t+1.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratorConfig {
    pub n_points: usize,
    pub max_translation: f64,
    pub max_rotation_deg: f64,
    pub coplanar: bool,
    pub occlusion_frac: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
}

impl Default for GeneratorConfig {
    fn default() -> GeneratorConfig {
        GeneratorConfig {
            n_points: 2048,
            max_translation: 1.0,
            max_rotation_deg: 10.0,
            coplanar: false,
            occlusion_frac: 0.1,
            width: 64,
            height: 48,
            focal: 60.0,
        }
    }
}

pub const DEPTH_MIN: f64 = 1.0;
pub const DEPTH_MAX: f64 = 35.0;
const SPLAT_RADIUS: i64 = 2;
const CLUSTER_SIZE: usize = 8;
const CLUSTER_SPREAD: f64 = 0.025;

// one fixed color field for every scene: colors are a deterministic function
// of pre-motion position, so appearance is a stable correspondence cue that
// generalizes across scenes
const COLOR_FREQS: [[f64; 3]; 3] = [
    [2.70, 1.05, 1.86],
    [0.81, 3.30, 1.35],
    [1.50, 2.10, 3.90],
];
const COLOR_PHASES: [f64; 3] = [0.0, 2.1, 4.2];

fn rotation_about_axis(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let (x, y, z) = (axis[0] / n, axis[1] / n, axis[2] / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Smooth sinusoidal color field over pre-motion positions; quantized to the
/// 8-bit grid so scenes survive the image format losslessly.
fn procedural_color(p: [f64; 3]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for ch in 0..3 {
        let f = COLOR_FREQS[ch];
        let a = f[0] * p[0] + f[1] * p[1] + f[2] * p[2] + COLOR_PHASES[ch];
        let v = 0.5 + 0.5 * a.sin();
        c[ch] = (v * 255.0).round() / 255.0;
    }
    c
}

/// Z-buffered disk splats, 2-pixel radius; nearer points win, ties go to the
/// earlier point index.
fn splat_image(
    cam: &CameraIntrinsics,
    points: &[[f64; 3]],
    colors: &[[f64; 3]],
) -> Image {
    let (w, h) = (cam.width, cam.height);
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut img = vec![0.0; w * h * 3];
    let cloud = PointCloud::new(points.to_vec());
    let (pixels, valid) = project_points(&cloud, cam);
    for i in 0..points.len() {
        if !valid[i] {
            continue;
        }
        let z = points[i][2];
        let (u, v) = (pixels[i][0], pixels[i][1]);
        let (cu, cv) = (u.floor() as i64, v.floor() as i64);
        for dv in -SPLAT_RADIUS..=SPLAT_RADIUS {
            for du in -SPLAT_RADIUS..=SPLAT_RADIUS {
                if du * du + dv * dv > SPLAT_RADIUS * SPLAT_RADIUS {
                    continue;
                }
                let (px, py) = (cu + du, cv + dv);
                if px < 0 || py < 0 || px >= w as i64 || py >= h as i64 {
                    continue;
                }
                let idx = py as usize * w + px as usize;
                if z < zbuf[idx] {
                    zbuf[idx] = z;
                    img[idx * 3..idx * 3 + 3].copy_from_slice(&colors[i]);
                }
            }
        }
    }
    Image::new(h, w, img)
}

/// Generates one scene. Deterministic in `seed`.
pub fn generate_scene(seed: u64, config: &GeneratorConfig) -> ScenePair {
    assert!(config.n_points >= 16, "need at least 16 points, got {}", config.n_points);
    assert!(
        (0.0..=0.5).contains(&config.occlusion_frac),
        "occlusion fraction {} outside [0, 0.5]",
        config.occlusion_frac
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = CameraIntrinsics::new(
        config.focal,
        config.focal,
        config.width as f64 / 2.0,
        config.height as f64 / 2.0,
        config.width,
        config.height,
    );

    // oversample just enough that both frames can subsample independently
    // after occlusion; a small surplus keeps the frames unpaired without
    // starving frame t of counterparts that frame t+1 never sampled
    let m = (config.n_points + config.n_points / 8)
        .max((config.n_points as f64 / (1.0 - config.occlusion_frac)).ceil() as usize + 1);
    // points come in tight local clusters, like surface patches in a real
    // scan: correspondence only has to be resolved at cluster level, while
    // rigid motion keeps cluster mates' flows nearly identical
    let mut base = Vec::with_capacity(m);
    if config.coplanar {
        // fronto-leaning random plane; cluster centers via view rays, jitter
        // within the plane so the scene stays exactly coplanar
        let center = cam.unproject(
            cam.cx + rng.gen_range(-0.2..0.2) * config.width as f64,
            cam.cy + rng.gen_range(-0.2..0.2) * config.height as f64,
            rng.gen_range(5.0..20.0),
        );
        let tilt = rng.gen_range(0.0..0.9f64);
        let az = rng.gen_range(0.0..std::f64::consts::TAU);
        let normal = [tilt.sin() * az.cos(), tilt.sin() * az.sin(), -tilt.cos()];
        let pn = center[0] * normal[0] + center[1] * normal[1] + center[2] * normal[2];
        // in-plane orthonormal basis
        let e1 = {
            let h = if normal[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            let c = [
                normal[1] * h[2] - normal[2] * h[1],
                normal[2] * h[0] - normal[0] * h[2],
                normal[0] * h[1] - normal[1] * h[0],
            ];
            let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            [c[0] / n, c[1] / n, c[2] / n]
        };
        let e2 = [
            normal[1] * e1[2] - normal[2] * e1[1],
            normal[2] * e1[0] - normal[0] * e1[2],
            normal[0] * e1[1] - normal[1] * e1[0],
        ];
        while base.len() < m {
            let u = rng.gen_range(0.0..config.width as f64);
            let v = rng.gen_range(0.0..config.height as f64);
            let dir = [(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0];
            let dn = dir[0] * normal[0] + dir[1] * normal[1] + dir[2] * normal[2];
            if dn.abs() < 1e-6 {
                continue;
            }
            let z = pn / dn;
            if !(DEPTH_MIN..=DEPTH_MAX).contains(&z) {
                continue;
            }
            let c = [dir[0] * z, dir[1] * z, z];
            for _ in 0..CLUSTER_SIZE.min(m - base.len()) {
                let a = rng.gen_range(-CLUSTER_SPREAD..CLUSTER_SPREAD);
                let b = rng.gen_range(-CLUSTER_SPREAD..CLUSTER_SPREAD);
                let p = [
                    c[0] + a * e1[0] + b * e2[0],
                    c[1] + a * e1[1] + b * e2[1],
                    c[2] + a * e1[2] + b * e2[2],
                ];
                if (DEPTH_MIN..=DEPTH_MAX).contains(&p[2]) {
                    base.push(p);
                }
            }
        }
    } else {
        while base.len() < m {
            let u = rng.gen_range(0.0..config.width as f64);
            let v = rng.gen_range(0.0..config.height as f64);
            let z = rng.gen_range(DEPTH_MIN + CLUSTER_SPREAD..DEPTH_MAX - CLUSTER_SPREAD);
            let c = cam.unproject(u, v, z);
            for _ in 0..CLUSTER_SIZE.min(m - base.len()) {
                base.push([
                    c[0] + rng.gen_range(-CLUSTER_SPREAD..CLUSTER_SPREAD),
                    c[1] + rng.gen_range(-CLUSTER_SPREAD..CLUSTER_SPREAD),
                    c[2] + rng.gen_range(-CLUSTER_SPREAD..CLUSTER_SPREAD),
                ]);
            }
        }
    }

    // rigid motion about the camera origin; zero angle yields an exact
    // identity rotation, so zero motion maps every point to itself bitwise
    let angle = rng.gen_range(-1.0..1.0) * config.max_rotation_deg.to_radians();
    let axis = [rng.gen_range(-1.0..1.0f64), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let axis = if axis.iter().all(|a| a.abs() < 1e-9) { [0.0, 0.0, 1.0] } else { axis };
    let r = rotation_about_axis(axis, angle);
    let t = [
        rng.gen_range(-config.max_translation..=config.max_translation),
        rng.gen_range(-config.max_translation..=config.max_translation),
        rng.gen_range(-config.max_translation..=config.max_translation),
    ];
    let moved: Vec<[f64; 3]> = base
        .iter()
        .map(|&p| {
            let q = mat_vec(&r, p);
            [q[0] + t[0], q[1] + t[1], q[2] + t[2]]
        })
        .collect();

    // colors come from pre-motion positions so each point keeps its color
    // across frames
    let colors: Vec<[f64; 3]> = base.iter().map(|&p| procedural_color(p)).collect();

    // occlusion: delete sources from frame t+1 and clear their supervision
    let n_occluded = (config.occlusion_frac * m as f64).round() as usize;
    let mut occluded = vec![false; m];
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take(n_occluded) {
        occluded[i] = true;
    }
    let survivors: Vec<usize> = (0..m).filter(|&i| !occluded[i]).collect();

    let img_t = splat_image(&cam, &base, &colors);
    let moved_pts: Vec<[f64; 3]> = survivors.iter().map(|&i| moved[i]).collect();
    let moved_colors: Vec<[f64; 3]> = survivors.iter().map(|&i| colors[i]).collect();
    let img_t1 = splat_image(&cam, &moved_pts, &moved_colors);

    // independent unpaired subsampling per frame
    let n = config.n_points;
    let mut idx_t: Vec<usize> = (0..m).collect();
    idx_t.shuffle(&mut rng);
    idx_t.truncate(n);
    let mut idx_t1 = survivors;
    idx_t1.shuffle(&mut rng);
    idx_t1.truncate(n);

    let pc_t = PointCloud::new(idx_t.iter().map(|&i| base[i]).collect());
    let pc_t1 = PointCloud::new(idx_t1.iter().map(|&i| moved[i]).collect());
    let gt_flow: Vec<[f64; 3]> = idx_t
        .iter()
        .map(|&i| [moved[i][0] - base[i][0], moved[i][1] - base[i][1], moved[i][2] - base[i][2]])
        .collect();
    let mask: Vec<bool> = idx_t.iter().map(|&i| !occluded[i]).collect();

    ScenePair { pc_t, pc_t1, img_t, img_t1, cam, gt_flow, mask }
}

// ---- on-disk format --------------------------------------------------------

fn fmt_floats(vals: &[f64]) -> String {
    vals.iter().map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(" ")
}

fn parse_floats(file: &Path, line_no: usize, line: &str, expect: usize) -> Result<Vec<f64>> {
    let vals: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
    let vals = vals.map_err(|e| FlowError::Parse {
        file: file.display().to_string(),
        line: line_no,
        msg: format!("bad float: {e}"),
    })?;
    if vals.len() != expect {
        return Err(FlowError::Parse {
            file: file.display().to_string(),
            line: line_no,
            msg: format!("expected {expect} values, got {}", vals.len()),
        });
    }
    Ok(vals)
}

fn write_rows(path: &Path, rows: &[[f64; 3]]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&fmt_floats(r));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_rows(path: &Path) -> Result<Vec<[f64; 3]>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let v = parse_floats(path, i + 1, line, 3)?;
        rows.push([v[0], v[1], v[2]]);
    }
    Ok(rows)
}

fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    buf.extend(img.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    fs::write(path, buf)?;
    Ok(())
}

fn read_ppm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| FlowError::Parse {
        file: path.display().to_string(),
        line: 1,
        msg: msg.to_string(),
    };
    // header: three whitespace-separated tokens after the magic
    if !bytes.starts_with(b"P6") {
        return Err(bad("not a binary P6 image"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header field"))?;
    }
    pos += 1; // single whitespace after maxval
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    let data: Vec<f64> = bytes[pos..pos + need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image::new(h, w, data))
}

/// Writes all scene files into `dir` (created if missing).
pub fn write_scene(scene: &ScenePair, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let cam = &scene.cam;
    fs::write(
        dir.join("intrinsics.txt"),
        format!(
            "{} {} {}\n",
            fmt_floats(&[cam.fx, cam.fy]),
            fmt_floats(&[cam.cx, cam.cy]),
            format_args!("{} {}", cam.width, cam.height)
        ),
    )?;
    write_rows(&dir.join("pc1.txt"), scene.pc_t.points())?;
    write_rows(&dir.join("pc2.txt"), scene.pc_t1.points())?;
    write_ppm(&dir.join("img1.ppm"), &scene.img_t)?;
    write_ppm(&dir.join("img2.ppm"), &scene.img_t1)?;
    write_rows(&dir.join("flow.txt"), &scene.gt_flow)?;
    let mask: String = scene.mask.iter().map(|&b| if b { "1\n" } else { "0\n" }).collect();
    fs::write(dir.join("mask.txt"), mask)?;
    Ok(())
}

/// Reads a scene directory written by [`write_scene`].
pub fn read_scene(dir: &Path) -> Result<ScenePair> {
    let intr_path = dir.join("intrinsics.txt");
    let text = fs::read_to_string(&intr_path)?;
    let line = text.lines().next().unwrap_or("");
    let v = parse_floats(&intr_path, 1, line, 6)?;
    let cam = CameraIntrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize);

    let pc_t = read_rows(&dir.join("pc1.txt"))?;
    let pc_t1 = read_rows(&dir.join("pc2.txt"))?;
    let gt_flow = read_rows(&dir.join("flow.txt"))?;
    if gt_flow.len() != pc_t.len() {
        return Err(FlowError::Parse {
            file: dir.join("flow.txt").display().to_string(),
            line: gt_flow.len().min(pc_t.len()) + 1,
            msg: format!("{} flow rows for {} points", gt_flow.len(), pc_t.len()),
        });
    }
    let mask_path = dir.join("mask.txt");
    let mask_text = fs::read_to_string(&mask_path)?;
    let mut mask = Vec::new();
    for (i, line) in mask_text.lines().enumerate() {
        match line.trim() {
            "0" => mask.push(false),
            "1" => mask.push(true),
            other => {
                return Err(FlowError::Parse {
                    file: mask_path.display().to_string(),
                    line: i + 1,
                    msg: format!("expected 0 or 1, got {other:?}"),
                })
            }
        }
    }
    if mask.len() != pc_t.len() {
        return Err(FlowError::Parse {
            file: mask_path.display().to_string(),
            line: mask.len().min(pc_t.len()) + 1,
            msg: format!("{} mask rows for {} points", mask.len(), pc_t.len()),
        });
    }
    Ok(ScenePair {
        pc_t: PointCloud::new(pc_t),
        pc_t1: PointCloud::new(pc_t1),
        img_t: read_ppm(&dir.join("img1.ppm"))?,
        img_t1: read_ppm(&dir.join("img2.ppm"))?,
        cam,
        gt_flow,
        mask,
    })
}

/// Numbered scene subdirectories of a dataset root, sorted by name.
pub fn list_scene_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    if dirs.is_empty() {
        return Err(FlowError::Data(format!("no scene directories under {}", root.display())));
    }
    dirs.sort();
    Ok(dirs)
}

/// Reads every scene in a dataset directory.
pub fn read_dataset(root: &Path) -> Result<Vec<ScenePair>> {
    list_scene_dirs(root)?.iter().map(|d| read_scene(d)).collect()
}
