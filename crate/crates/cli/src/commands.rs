use crate::{Command, EvalArgs, ExtractArgs, InitArgs, InitKind, LocationsArgs, MatchArgs, ModelArgs, SynthArgs, TrainArgs};
use anyhow::{bail, Context, Result};
use image::DynamicImage;
use log::info;
use rapnet::backbone::{open_image, Backbone, BackboneConfig};
use rapnet::evalkit::{match_mutual_nn, mma, run_benchmark, Homography, THRESHOLDS};
use rapnet::extractor::{extract, ExtractOptions, FeatureSet};
use rapnet::heads::AttentionParams;
use rapnet::locdata::{dataset_path, extract_locations, load_tum, LocationSet, LocationThresholds, PosedImage};
use rapnet::synth;
use rapnet::trainer::{train_attention, TrainConfig, TripletMiner};
use rapnet::weights::WeightFile;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub fn read_config(path: &Path) -> Result<Command> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn absolute(p: &mut PathBuf) -> Result<()> {
    *p = std::path::absolute(&*p).with_context(|| format!("resolving {}", p.display()))?;
    Ok(())
}

fn absolute_opt(p: &mut Option<PathBuf>) -> Result<()> {
    if let Some(p) = p {
        absolute(p)?;
    }
    Ok(())
}

fn resolve_model(m: &mut ModelArgs) -> Result<()> {
    absolute(&mut m.weights)?;
    if m.weights.is_dir() {
        m.weights = m.weights.join("backbone.rapw");
    }
    absolute_opt(&mut m.attention)
}

/// Makes every path absolute so the echoed config replays from anywhere.
fn resolve(mut cmd: Command) -> Result<Command> {
    match &mut cmd {
        Command::Extract(a) => {
            resolve_model(&mut a.model)?;
            absolute(&mut a.image)?;
            absolute(&mut a.out)?;
        }
        Command::Train(a) => {
            absolute(&mut a.manifest)?;
            absolute(&mut a.weights)?;
            if a.weights.is_dir() {
                a.weights = a.weights.join("backbone.rapw");
            }
            if a.image_root.is_none() {
                a.image_root = a.manifest.parent().map(Path::to_path_buf);
            }
            absolute_opt(&mut a.image_root)?;
            absolute_opt(&mut a.init)?;
            absolute_opt(&mut a.loss_csv)?;
            absolute(&mut a.out)?;
        }
        Command::Locations(a) => {
            absolute(&mut a.poses)?;
            absolute_opt(&mut a.images)?;
            absolute(&mut a.out)?;
        }
        Command::Match(a) => {
            absolute(&mut a.a)?;
            absolute(&mut a.b)?;
            absolute(&mut a.out)?;
            absolute_opt(&mut a.homography)?;
            absolute_opt(&mut a.curve)?;
        }
        Command::EvalMma(a) => {
            resolve_model(&mut a.model)?;
            absolute(&mut a.dataset)?;
            absolute(&mut a.out)?;
        }
        Command::InspectWeights(a) => absolute(&mut a.weights)?,
        Command::InitWeights(a) => absolute(&mut a.out)?,
        Command::SynthDataset(a) => absolute(&mut a.out)?,
    }
    Ok(cmd)
}

fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".config.json");
    PathBuf::from(name)
}

fn config_path(cmd: &Command) -> Option<PathBuf> {
    match cmd {
        Command::Extract(a) => Some(sidecar(&a.out)),
        Command::Train(a) => Some(sidecar(&a.out)),
        Command::Locations(a) => Some(sidecar(&a.out)),
        Command::Match(a) => Some(sidecar(&a.out)),
        Command::InitWeights(a) => Some(sidecar(&a.out)),
        Command::EvalMma(a) => Some(a.out.join("config.json")),
        Command::SynthDataset(a) => Some(a.out.join("config.json")),
        Command::InspectWeights(_) => None,
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cmd: Command) -> Result<()> {
    let cmd = resolve(cmd)?;
    let echo = config_path(&cmd).map(|p| (p, serde_json::to_string_pretty(&cmd)));
    match cmd {
        Command::Extract(a) => run_extract(a),
        Command::Train(a) => run_train(a),
        Command::Locations(a) => run_locations(a),
        Command::Match(a) => run_match(a),
        Command::EvalMma(a) => run_eval(a),
        Command::InspectWeights(a) => run_inspect(&a.weights),
        Command::InitWeights(a) => run_init(a),
        Command::SynthDataset(a) => run_synth(a),
    }?;
    if let Some((path, json)) = echo {
        write(&path, json? + "\n")?;
    }
    Ok(())
}

struct Model {
    backbone: Backbone,
    attention: Option<AttentionParams>,
    options: ExtractOptions,
}

fn load_model(m: &ModelArgs) -> Result<Model> {
    let file = WeightFile::load(&m.weights).with_context(|| format!("loading {}", m.weights.display()))?;
    let config = BackboneConfig::infer(&file)?;
    let backbone = Backbone::from_weights(&file, &config)?;
    let attention = if m.no_attention {
        None
    } else if let Some(path) = &m.attention {
        let f = WeightFile::load(path).with_context(|| format!("loading {}", path.display()))?;
        Some(AttentionParams::from_weights(&f)?)
    } else if AttentionParams::present_in(&file) {
        Some(AttentionParams::from_weights(&file)?)
    } else {
        None
    };
    if let Some(a) = &attention {
        if a.channels != backbone.descriptor_dim() {
            bail!("attention expects {} channels but the backbone produces {}", a.channels, backbone.descriptor_dim());
        }
    }
    Ok(Model {
        backbone,
        attention,
        options: ExtractOptions {
            top_k: m.top_k,
            max_edge: m.max_edge,
            border: m.border,
        },
    })
}

fn run_extract(a: ExtractArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let image = open_image(&a.image)?;
    let features = extract(&image, &model.backbone, model.attention.as_ref(), &model.options)?;
    info!("{} keypoints from {}", features.len(), a.image.display());
    if a.text {
        write(&a.out, features.to_text())
    } else {
        ensure_parent(&a.out)?;
        Ok(features.save(&a.out)?)
    }
}

fn run_train(a: TrainArgs) -> Result<()> {
    let set = LocationSet::load_manifest(&a.manifest)?;
    let report = set.validate()?;
    info!("{report}");
    let root = a.image_root.clone().unwrap_or_default();
    let images: Vec<DynamicImage> = set
        .images
        .par_iter()
        .map(|e| open_image(&root.join(&e.path)))
        .collect::<Result<_, _>>()?;
    let file = WeightFile::load(&a.weights).with_context(|| format!("loading {}", a.weights.display()))?;
    let backbone = Backbone::from_weights(&file, &BackboneConfig::infer(&file)?)?;
    let init = match &a.init {
        Some(path) => AttentionParams::from_weights(&WeightFile::load(path)?)?,
        None => AttentionParams::init(backbone.descriptor_dim(), a.seed),
    };
    let steps = match a.epochs {
        Some(e) => e * TripletMiner::new(&set, a.seed)?.anchors_per_epoch(),
        None => a.steps,
    };
    let cfg = TrainConfig {
        learning_rate: a.learning_rate,
        momentum: a.momentum,
        steps,
        batch_size: a.batch_size,
        ..TrainConfig::new(a.seed)
    };
    let (trained, report) = train_attention(&set, &images, &backbone, init, &cfg, a.max_edge)?;
    for (epoch, mean, n) in report.epoch_means() {
        info!("epoch {epoch}: mean loss {mean:.6} over {n} triplets");
    }
    ensure_parent(&a.out)?;
    trained.to_weights().save(&a.out)?;
    if let Some(path) = &a.loss_csv {
        write(path, report.to_csv())?;
    }
    Ok(())
}

fn run_locations(a: LocationsArgs) -> Result<()> {
    let records = load_tum(&a.poses)?;
    let sequence: Vec<PosedImage> = records
        .iter()
        .map(|r| PosedImage {
            path: format!("{}.{}", r.stamp, a.ext),
            timestamp: r.timestamp,
            pose: r.pose,
        })
        .collect();
    let thresholds = LocationThresholds {
        dist: a.dist_thresh,
        angle: a.angle_thresh,
    };
    let set = extract_locations(&sequence, &a.scene, thresholds)?;
    let rows: Vec<(String, String, usize)> = set
        .images
        .iter()
        .map(|e| (dataset_path(&a.scene, e.location, &e.path), a.scene.clone(), e.location))
        .collect();
    if let Some(src) = &a.images {
        let root = a.out.parent().unwrap_or(Path::new("."));
        for (entry, (rel, _, _)) in set.images.iter().zip(&rows) {
            let dest = root.join(rel);
            ensure_parent(&dest)?;
            std::fs::copy(src.join(&entry.path), &dest).with_context(|| format!("copying {}", entry.path))?;
        }
    }
    let manifest = LocationSet::from_entries(&rows)?;
    info!("{}", manifest.validate()?);
    write(&a.out, manifest.to_manifest())
}

fn load_features(path: &Path) -> Result<FeatureSet> {
    FeatureSet::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run_match(a: MatchArgs) -> Result<()> {
    let (fa, fb) = (load_features(&a.a)?, load_features(&a.b)?);
    let matches = match_mutual_nn(&fa, &fb)?;
    let mut csv = String::from("index_a,index_b,distance\n");
    for (&(i, j), d) in matches.pairs.iter().zip(&matches.distances) {
        writeln!(csv, "{i},{j},{d}")?;
    }
    write(&a.out, csv)?;
    if let (Some(h), Some(curve_path)) = (&a.homography, &a.curve) {
        let h = Homography::load(h)?;
        let curve = mma(&matches, &fa.keypoints, &fb.keypoints, &h, &THRESHOLDS)?;
        let mut csv = String::from("threshold,accuracy,matches\n");
        for (t, acc) in curve.thresholds.iter().zip(&curve.accuracy) {
            writeln!(csv, "{t},{acc},{}", curve.matches)?;
        }
        write(curve_path, csv)?;
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let report = run_benchmark(
        &a.dataset,
        |img: &DynamicImage| extract(img, &model.backbone, model.attention.as_ref(), &model.options),
        &THRESHOLDS,
    )?;
    if report.skipped_images > 0 {
        log::warn!("{} images skipped", report.skipped_images);
    }
    write(&a.out.join("mma.csv"), report.to_csv())?;
    write(&a.out.join("mma.svg"), report.to_svg())
}

fn run_inspect(path: &Path) -> Result<()> {
    let file = WeightFile::load(path).with_context(|| format!("loading {}", path.display()))?;
    print!("{}", file.manifest());
    if let Ok(config) = BackboneConfig::infer(&file) {
        let backbone = Backbone::from_weights(&file, &config)?;
        println!("# backbone: descriptor dim {}", backbone.descriptor_dim());
        for layer in backbone.inventory() {
            println!("#   {} {} -> {} ({} params)", layer.name, layer.in_channels, layer.out_channels, layer.params);
        }
    }
    if AttentionParams::present_in(&file) {
        let att = AttentionParams::from_weights(&file)?;
        println!("# attention: {} channels, branch width {}", att.channels, att.width());
    }
    Ok(())
}

fn run_init(a: InitArgs) -> Result<()> {
    let backbone = match a.kind {
        InitKind::Toy => Backbone::random(BackboneConfig::toy(a.channels), a.seed)?,
        InitKind::Full => Backbone::random(BackboneConfig::full(), a.seed)?,
        InitKind::Hue => synth::hue_backbone(a.channels, synth::HUE_THRESHOLD),
    };
    let mut weights = backbone.to_weights();
    if a.with_attention {
        weights.merge(AttentionParams::init(backbone.descriptor_dim(), a.seed).to_weights());
    }
    ensure_parent(&a.out)?;
    Ok(weights.save(&a.out)?)
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let spec = synth::OccluderSpec {
        locations: a.locations,
        per_location: a.per_location,
        width: a.size,
        height: a.size,
        seed: a.seed,
        ..Default::default()
    };
    let data = synth::occluder_dataset(&spec);
    for (img, entry) in data.images.iter().zip(&data.set.images) {
        let path = a.out.join(&entry.path);
        ensure_parent(&path)?;
        img.save(&path).with_context(|| format!("writing {}", path.display()))?;
    }
    write(&a.out.join("manifest.txt"), data.set.to_manifest())
}
