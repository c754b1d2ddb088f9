use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatwave::scene_file::{self, Splits};
use splatwave::train_file::{self, TrainFile};
use splatwave::{colmap, imageio};
use splatwave_core::partition::{self, VisibilityTable};
use splatwave_core::synthetic::{self, Preset};
use splatwave_core::trainer::{self, Family, GradcheckOptions, LrSchedule};
use splatwave_core::{mmsampler, wavelet, SceneConfig, Tensor3};

#[derive(Parser)]
#[command(name = "splatwave", version, about = "Anchor-based Gaussian splatting with wavelet appearance features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene.
    Gen {
        #[arg(long, default_value = "tiny")]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "scene")]
        out: PathBuf,
    },
    /// Build a scene from plain-text points and cameras.
    Import {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        /// Image directory; defaults to the cameras file's directory.
        #[arg(long)]
        images: Option<PathBuf>,
        /// TOML file of scene hyperparameters.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one view to PNG and optionally raw floats.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        view: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        raw: Option<PathBuf>,
    },
    /// Round-trip and energy errors of the Haar transform on a random map.
    DwtCheck {
        /// `HxW` or `HxWxC`.
        #[arg(long, default_value = "64x64x32")]
        size: String,
        #[arg(long, default_value_t = 2)]
        levels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Density of an anchor's feature-map samples as a grayscale PNG.
    SampleViz {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        anchor: usize,
        #[arg(long)]
        view: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        zoom: usize,
    },
    /// PSNR and SSIM per view. Held-out views first get their appearance fitted.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        /// Appearance-fitting iterations for held-out views.
        #[arg(long, default_value_t = 300)]
        fit: usize,
    },
    /// Split the scene into blocks and assign cameras.
    Partition {
        #[arg(long)]
        scene: PathBuf,
        /// `MxN`.
        #[arg(long, default_value = "2x2")]
        grid: String,
        #[arg(long)]
        kappa: Option<f64>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the block rotation table.
    Schedule {
        #[arg(long)]
        blocks: usize,
        #[arg(long)]
        slots: usize,
        /// Iterations per period.
        #[arg(long)]
        niter: usize,
        #[arg(long)]
        total: usize,
    },
    /// Train a scene.
    Train {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>/log.tsv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        view: u32,
        /// Family name, or `all`.
        #[arg(long, default_value = "all")]
        family: String,
        #[arg(long, default_value_t = 12)]
        samples: usize,
    },
}

fn parse_dims(s: &str) -> anyhow::Result<Vec<usize>> {
    s.split('x').map(|p| p.trim().parse::<usize>().with_context(|| format!("bad size {s:?}"))).collect()
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Gen { preset, seed, out } => gen(preset, seed, &out),
        Command::Import { points, cameras, images, config, seed, out } => {
            import(&points, &cameras, images.as_deref(), config.as_deref(), seed, &out)
        }
        Command::Render { scene, view, out, raw } => render(&scene, view, &out, raw.as_deref()),
        Command::DwtCheck { size, levels, seed } => dwt_check(&size, levels, seed),
        Command::SampleViz { scene, anchor, view, out, zoom } => sample_viz(&scene, anchor, view, &out, zoom),
        Command::Eval { scene, fit } => eval(&scene, fit),
        Command::Partition { scene, grid, kappa, eta, out } => partition_cmd(&scene, &grid, kappa, eta, &out),
        Command::Schedule { blocks, slots, niter, total } => {
            let s = partition::rotational_schedule(blocks, slots, niter, total)?;
            println!("{s}");
            Ok(())
        }
        Command::Train { scene, config, iterations, out, log } => train(&scene, config.as_deref(), iterations, &out, log),
        Command::Gradcheck { scene, view, family, samples } => gradcheck(&scene, view, &family, samples),
    }
}

fn gen(preset: Preset, seed: u64, out: &Path) -> anyhow::Result<()> {
    let s = synthetic::generate(preset, seed)?;
    let splits = Splits { train: s.train_views.clone(), heldout: s.heldout_views.clone() };
    scene_file::save(out, &s.bundle, Some(&splits))?;
    let images = out.join("images");
    fs::create_dir_all(&images)?;
    for v in &s.bundle.views {
        if let Some(img) = &v.image {
            imageio::write_png(&images.join(format!("view_{:03}.png", v.id)), img)?;
        }
    }
    println!(
        "wrote {}: {} anchors, {} Gaussians, {} train and {} held-out views",
        out.display(),
        s.bundle.anchors.len(),
        s.bundle.gaussian_count(),
        splits.train.len(),
        splits.heldout.len()
    );
    Ok(())
}

fn import(points: &Path, cameras: &Path, images: Option<&Path>, config: Option<&Path>, seed: u64, out: &Path) -> anyhow::Result<()> {
    let config: SceneConfig = match config {
        Some(p) => toml::from_str(&fs::read_to_string(p).with_context(|| p.display().to_string())?)
            .with_context(|| p.display().to_string())?,
        None => SceneConfig::default(),
    };
    let pts = colmap::read_points(points)?;
    let cams = colmap::read_cameras(cameras)?;
    let root = images.map(Path::to_path_buf).unwrap_or_else(|| cameras.parent().unwrap_or(Path::new(".")).to_path_buf());
    let bundle = colmap::build_scene(&pts, &cams, &root, config, seed)?;
    let with_images = bundle.views.iter().filter(|v| v.image.is_some()).count();
    scene_file::save(out, &bundle, None)?;
    println!(
        "wrote {}: {} points into {} anchors, {} cameras ({with_images} with images)",
        out.display(),
        pts.len(),
        bundle.anchors.len(),
        bundle.views.len()
    );
    Ok(())
}

fn render(scene: &Path, view: u32, out: &Path, raw: Option<&Path>) -> anyhow::Result<()> {
    let s = scene_file::load(scene)?.bundle;
    let img = trainer::render_view(&s, view)?;
    imageio::write_png(out, &img)?;
    if let Some(raw) = raw {
        imageio::write_raw(raw, &img)?;
    }
    match &s.view(view)?.image {
        Some(target) => println!(
            "view {view}: psnr {:.3} dB, ssim {:.4}",
            splatwave_core::losses::psnr(&img, target)?,
            splatwave_core::losses::ssim(&img, target)?
        ),
        None => println!("view {view}: rendered {}x{}", img.width, img.height),
    }
    Ok(())
}

fn dwt_check(size: &str, levels: usize, seed: u64) -> anyhow::Result<()> {
    let dims = parse_dims(size)?;
    let (h, w, c) = match dims[..] {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        _ => bail!("size must be HxW or HxWxC"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = Tensor3::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0));
    let bands = wavelet::dwt1(&f)?;
    let round_trip = wavelet::idwt1(&bands).max_abs_diff(&f);
    println!("size {h}x{w}x{c}, seed {seed}");
    println!("one-level round-trip max error\t{round_trip:e}");
    if h % (1 << levels) == 0 && w % (1 << levels) == 0 {
        let energy = f.squared_norm();
        let one = (bands.squared_norm() - energy).abs() / energy.max(f64::MIN_POSITIVE);
        let packet = wavelet::packet_decompose(&f, levels)?;
        let packet_energy: f64 = packet.iter().map(Tensor3::squared_norm).sum();
        let back = wavelet::packet_adjoint(&packet, levels, h, w)?;
        println!("one-level relative energy error\t{one:e}");
        println!("{levels}-level packet round-trip max error\t{:e}", back.max_abs_diff(&f));
        println!("{levels}-level packet relative energy error\t{:e}", (packet_energy - energy).abs() / energy.max(f64::MIN_POSITIVE));
    } else {
        println!("energy check skipped: size not divisible by 2^{levels}, edge padding adds energy");
    }
    Ok(())
}

fn sample_viz(scene: &Path, anchor: usize, view: u32, out: &Path, zoom: usize) -> anyhow::Result<()> {
    let s = scene_file::load(scene)?.bundle;
    let a = s.anchors.get(anchor).with_context(|| format!("scene has {} anchors", s.anchors.len()))?;
    let v = s.view(view)?;
    let pyramid = wavelet::split_feature_map(&v.feature_map, s.config.wavelet_levels)?;
    let density = mmsampler::sample_density(a, &pyramid, &v.camera, &s.config)?;
    imageio::write_gray_png(out, &density, pyramid.width, pyramid.height, zoom)?;
    if density.iter().all(|d| *d == 0.0) {
        println!("anchor {anchor} does not project into view {view}");
    } else {
        println!("wrote {}x{} density map to {}", pyramid.width * zoom, pyramid.height * zoom, out.display());
    }
    Ok(())
}

fn eval(scene: &Path, fit: usize) -> anyhow::Result<()> {
    let file = scene_file::load(scene)?;
    let mut s = file.bundle;
    let splits = file.splits.unwrap_or_else(|| Splits {
        train: s.views.iter().filter(|v| v.image.is_some()).map(|v| v.id).collect(),
        heldout: Vec::new(),
    });
    if fit > 0 && !splits.heldout.is_empty() {
        s = trainer::fit_appearance(s, &splits.heldout, fit, LrSchedule::new(1e-2, 1e-3), None)?;
    }
    println!("view\tsplit\tpsnr\tssim");
    for (name, ids) in [("train", &splits.train), ("heldout", &splits.heldout)] {
        let mut sum = 0.0;
        for &id in ids {
            let (p, q) = trainer::view_metrics(&s, id)?;
            sum += p;
            println!("{id}\t{name}\t{p:.4}\t{q:.5}");
        }
        if !ids.is_empty() {
            println!("mean\t{name}\t{:.4}\t", sum / ids.len() as f64);
        }
    }
    Ok(())
}

fn partition_cmd(scene: &Path, grid: &str, kappa: Option<f64>, eta: Option<f64>, out: &Path) -> anyhow::Result<()> {
    let s = scene_file::load(scene)?.bundle;
    let dims = parse_dims(grid)?;
    let [m, n] = dims[..] else { bail!("grid must be MxN") };
    let kappa = kappa.unwrap_or(s.config.kappa);
    let eta = eta.unwrap_or(s.config.eta);
    let centers: Vec<_> = s.anchors.iter().map(|a| a.center).collect();
    let cameras: Vec<(u32, &splatwave_core::Camera)> = s.views.iter().map(|v| (v.id, &v.camera)).collect();
    let (mut blocks, vis): (_, VisibilityTable) = partition::partition_scene(&centers, &cameras, m, n, kappa)?;
    // Each camera judges removals with the colors it would render.
    let mut stage2 = 0;
    for v in &s.views {
        let gaussians = trainer::view_gaussians(&s, v.id)?;
        stage2 += partition::psg_stage2(&mut blocks, &gaussians, &[(v.id, &v.camera)], eta)?.len();
    }
    partition::assign_anchors(&mut blocks, &centers);
    fs::create_dir_all(out)?;
    for b in &mut blocks {
        b.refresh_supervision(&vis);
        train_file::write_block(out, b)?;
    }
    let hist = partition::supervision_histogram(&blocks);
    let mut tsv = String::from("supervision\tpoints\n");
    for (k, count) in hist.iter().enumerate() {
        tsv.push_str(&format!("{k}\t{count}\n"));
    }
    fs::write(out.join("supervision.tsv"), tsv)?;
    println!("tau {:.3} (kappa {kappa}, mean visibility {:.3}), {stage2} stage-2 additions", vis.tau, vis.mean_count);
    println!("block\tpoints\tanchors\tcameras\tmin_supervision");
    for b in &blocks {
        println!(
            "{}\t{}\t{}\t{}\t{}",
            b.id,
            b.point_ids.len(),
            b.anchor_ids.len(),
            b.cameras.len(),
            b.min_supervision().map_or("-".into(), |v| v.to_string())
        );
    }
    Ok(())
}

fn train(scene: &Path, config: Option<&Path>, iterations: Option<usize>, out: &Path, log: Option<PathBuf>) -> anyhow::Result<()> {
    let file = scene_file::load(scene)?;
    let (mut spec, base) = match config {
        Some(p) => (TrainFile::read(p)?, p.parent().unwrap_or(Path::new(".")).to_path_buf()),
        None => (toml::from_str::<TrainFile>("")?, PathBuf::from(".")),
    };
    if let Some(n) = iterations {
        spec.iterations = n;
    }
    let cfg = spec.to_config(&base, file.splits.as_ref(), file.bundle.config.rotation_period)?;
    let start = Instant::now();
    let mut clock = || start.elapsed().as_secs_f64();
    let (trained, train_log) = trainer::train_with_clock(file.bundle, &cfg, &mut clock)?;
    scene_file::save(out, &trained, file.splits.as_ref())?;
    let log_path = log.unwrap_or_else(|| out.join("log.tsv"));
    fs::write(&log_path, train_log.to_tsv()).with_context(|| log_path.display().to_string())?;
    let mut timings = String::from("iteration\tseconds\n");
    for (i, t) in train_log.timings.iter().enumerate() {
        timings.push_str(&format!("{i}\t{t:e}\n"));
    }
    fs::write(out.join("timings.tsv"), timings)?;
    if !train_log.evals.is_empty() {
        let mut evals = String::from("iteration\tmean_psnr\n");
        for e in &train_log.evals {
            evals.push_str(&format!("{}\t{:e}\n", e.iteration, e.mean_psnr));
        }
        fs::write(out.join("eval.tsv"), evals)?;
    }
    let last = train_log.entries.last().map_or(f64::NAN, |e| e.loss.total);
    println!("{} iterations in {:.2} s, final loss {last:.6}", cfg.iterations, start.elapsed().as_secs_f64());
    Ok(())
}

fn gradcheck(scene: &Path, view: u32, family: &str, samples: usize) -> anyhow::Result<()> {
    let s = scene_file::load(scene)?.bundle;
    let families: Vec<Family> = if family == "all" {
        Family::TRAINABLE.iter().chain(Family::FROZEN.iter()).copied().collect()
    } else {
        vec![family.parse()?]
    };
    println!("family\tmax_rel_error\tchecked\tskipped");
    for f in families {
        let r = trainer::gradcheck(&s, view, f, None, GradcheckOptions { samples, ..Default::default() })?;
        println!("{f:?}\t{:e}\t{}\t{}", r.max_rel_error, r.checked, r.skipped);
    }
    Ok(())
}
