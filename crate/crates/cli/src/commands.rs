use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use facseg::arch::{
    init_refinement, load_checkpoint, save_checkpoint, train, Control, Graph, HeadKind, LossConfig, TrainSet,
    REFINEMENT_SCALE,
};
use facseg::dataset::{
    joint_labels, mask_manifest_name, rasterize_multilabel, read_mask, weights_report, write_mask, AnnotationSet,
    ClassStats, EdgeBandRules, Label, MultiLabelMask, BACKGROUND, CMP_PAINT_ORDER,
};
use facseg::geo::{
    extract_facade_image, load_footprints, parse_photosphere_manifest, point_segment_distance, simplify_and_merge,
    subdivide_and_extend, WallQuad,
};
use facseg::inference::{
    composite_single_label, load_blob, predict_image, probs_header_name, renormalize_pos_neg, save_probability_maps,
    BlobHeader, NetworkSegmenter, ECP_COMPOSITE_ORDER,
};
use facseg::metrics::MetricsAccumulator;
use facseg::raster::Planes;
use facseg::synth::{generate, write_corpus};
use facseg::{Error, Result};
use image::RgbImage;
use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use crate::config::{existing, PipelineConfig};
use crate::record::write_record;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn out_dir(flag: Option<&PathBuf>, cfg: &PipelineConfig, command: &str) -> Result<PathBuf> {
    let dir = match (flag, &cfg.paths.workdir) {
        (Some(d), _) => d.clone(),
        (None, Some(w)) => w.join(command),
        (None, None) => return Err(Error::Invalid("no --out given and no paths.workdir in the config".into())),
    };
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

/// Sorted entries of `dir` whose names end with `suffix`, as (stem, path).
fn list_with_suffix(dir: &Path, suffix: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(stem) = name.strip_suffix(suffix) {
            out.push((stem.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

fn find_image(dir: &Path, id: &str) -> Result<PathBuf> {
    for ext in ["png", "jpg", "jpeg"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Invalid(format!("no image for '{id}' in {}", dir.display())))
}

fn open_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

#[derive(Args, Clone, Debug, Default)]
pub struct ExtractArgs {
    /// GeoJSON footprints in a local metric frame.
    #[arg(long)]
    pub footprints: Option<PathBuf>,
    /// Photosphere manifest (JSON object or array).
    #[arg(long)]
    pub spheres: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Maximum distance in meters from a photosphere to a wall it is rendered for.
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub mpp: Option<f64>,
}

#[derive(Debug, Default, Serialize)]
pub struct ExtractLog {
    pub footprints: usize,
    pub walls: usize,
    pub quads: usize,
    pub spheres: usize,
    pub spheres_failed: Vec<String>,
    pub images: usize,
    pub images_failed: usize,
    pub warnings: Vec<String>,
}

pub fn cmd_extract(cfg: &PipelineConfig, args: &ExtractArgs) -> Result<ExtractLog> {
    let mut geometry = cfg.geometry.clone();
    if let Some(r) = args.radius {
        geometry.radius_m = r;
    }
    if let Some(m) = args.mpp {
        geometry.mpp = m;
    }
    geometry.validate()?;
    let fp_path = existing(args.footprints.as_ref(), cfg.paths.footprints.as_ref(), "footprints")?;
    let sp_path = existing(args.spheres.as_ref(), cfg.paths.spheres.as_ref(), "sphere manifest")?;
    let out = out_dir(args.out.as_ref(), cfg, "extract")?;
    let polygons = load_footprints(&fp_path)?;
    let text = fs::read_to_string(&sp_path).map_err(|e| io_err(&sp_path, e))?;
    let spheres = parse_photosphere_manifest(&text).map_err(|e| Error::Format {
        path: sp_path.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut log = ExtractLog {
        footprints: polygons.len(),
        spheres: spheres.len(),
        ..ExtractLog::default()
    };
    if polygons.is_empty() {
        info!("nothing to do: {} has no footprints", fp_path.display());
        finish_extract(&out, cfg, &geometry, &log)?;
        return Ok(log);
    }
    let simplified = simplify_and_merge(&polygons, geometry.tolerance_m)?;
    log.warnings = simplified.warnings.clone();
    log.walls = simplified.segments.len();
    let mut quads = Vec::new();
    for (wi, wall) in simplified.segments.iter().enumerate() {
        for (pi, piece) in subdivide_and_extend(wall, geometry.max_wall_m, geometry.extension_m)?
            .into_iter()
            .enumerate()
        {
            let id = format!("{}_w{wi}_p{pi}", wall.source_footprint);
            quads.push(WallQuad::new(id, piece, geometry.wall_height_m, geometry.mpp)?);
        }
    }
    log.quads = quads.len();
    let base = sp_path.parent().unwrap_or(Path::new("."));
    for entry in &spheres {
        let sphere = match entry.load(base) {
            Ok(s) => s,
            Err(e) => {
                warn!("skipping photosphere '{}': {e}", entry.id);
                log.spheres_failed.push(entry.id.clone());
                continue;
            }
        };
        let c = [sphere.center[0], sphere.center[1]];
        for q in &quads {
            if point_segment_distance(c, q.base.p0, q.base.p1) > geometry.radius_m {
                continue;
            }
            match extract_facade_image(q, &sphere) {
                Ok(img) => {
                    img.save(&out, &format!("{}__{}", q.id, sphere.id))?;
                    log.images += 1;
                }
                Err(e) => {
                    warn!("quad '{}' from '{}': {e}", q.id, sphere.id);
                    log.images_failed += 1;
                }
            }
        }
    }
    finish_extract(&out, cfg, &geometry, &log)?;
    if !spheres.is_empty() && log.spheres_failed.len() == spheres.len() {
        return Err(Error::Io {
            path: sp_path,
            source: std::io::Error::other(format!("all {} photospheres failed to load", spheres.len())),
        });
    }
    Ok(log)
}

fn finish_extract(out: &Path, cfg: &PipelineConfig, geometry: &crate::config::Geometry, log: &ExtractLog) -> Result<()> {
    let path = out.join("extract_log.json");
    fs::write(&path, serde_json::to_string_pretty(log)?).map_err(|e| io_err(&path, e))?;
    write_record(out, "extract", cfg.seed, &json!({ "paths": cfg.paths, "geometry": geometry }))
}

#[derive(Args, Clone, Debug, Default)]
pub struct SynthArgs {
    /// Number of facades to generate.
    #[arg(long, short)]
    pub n: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub no_balconies: bool,
}

pub fn cmd_synth(cfg: &PipelineConfig, args: &SynthArgs) -> Result<usize> {
    let mut sc = cfg.synth.clone();
    if let Some(w) = args.width {
        sc.width = w;
    }
    if let Some(h) = args.height {
        sc.height = h;
    }
    if args.no_balconies {
        sc.balconies = false;
    }
    let facades = generate(&sc, args.n, cfg.seed)?;
    let out = out_dir(args.out.as_ref(), cfg, "synth")?;
    write_corpus(&out, &facades)?;
    write_record(&out, "synth", cfg.seed, &json!({ "n": args.n, "synth": sc }))?;
    info!("wrote {} synthetic facades to {}", facades.len(), out.display());
    Ok(facades.len())
}

#[derive(Args, Clone, Debug, Default)]
pub struct RasterizeArgs {
    /// Directory of per-image annotation JSON files.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn is_derived_json(name: &str) -> bool {
    [".mask.json", ".probs.json", ".legend.json"].iter().any(|s| name.ends_with(s))
        || ["run.json", "extract_log.json", "class_weights.json", "metrics.json"].contains(&name)
}

pub fn load_annotations(dir: &Path) -> Result<Vec<AnnotationSet>> {
    let mut out = Vec::new();
    for (stem, path) in list_with_suffix(dir, ".json")? {
        if is_derived_json(&format!("{stem}.json")) {
            continue;
        }
        out.push(AnnotationSet::load(&path).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn cmd_rasterize(cfg: &PipelineConfig, args: &RasterizeArgs) -> Result<usize> {
    let dir = existing(args.annotations.as_ref(), cfg.paths.annotations.as_ref(), "annotations")?;
    let vocab = cfg.vocabulary.resolve()?;
    let out = out_dir(args.out.as_ref(), cfg, "rasterize")?;
    let rules = EdgeBandRules::default();
    let mut stats = ClassStats::empty(vocab.clone());
    let anns = load_annotations(&dir)?;
    for ann in &anns {
        let mask = rasterize_multilabel(ann, (ann.width, ann.height), ann.mpp, &vocab, &rules)?;
        stats.merge(&ClassStats::from_mask(&mask))?;
        write_mask(&out, &ann.image_id, &mask)?;
    }
    match weights_report(&stats) {
        Ok(report) => {
            let p = out.join("class_weights.json");
            fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(|e| io_err(&p, e))?;
        }
        Err(e) => warn!("class weights not written: {e}"),
    }
    write_record(&out, "rasterize", cfg.seed, &json!({ "paths": cfg.paths, "vocabulary": vocab }))?;
    info!("rasterized {} annotations", anns.len());
    Ok(anns.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Baseline,
    Multihead,
    Separable,
    Compatibility,
}

impl HeadArg {
    fn kind(self) -> HeadKind {
        match self {
            HeadArg::Baseline => HeadKind::baseline(),
            HeadArg::Multihead => HeadKind::Multihead,
            HeadArg::Separable => HeadKind::Separable,
            HeadArg::Compatibility => HeadKind::compatibility(),
        }
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// toy, small or vgg16.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, value_enum)]
    pub head: Option<HeadArg>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Checkpoint whose matching parameters initialize the network.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub tiles: usize,
    pub iterations: usize,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

/// Masks in `dir` paired with the same-named images in `images`, resized to `size` (w, h).
pub fn load_tiles(images: &Path, masks: &Path, classes: &[String], size: (usize, usize)) -> Result<TrainSet> {
    let mut imgs = Vec::new();
    let mut ms = Vec::new();
    for (id, _) in list_with_suffix(masks, ".mask.json")? {
        let mut mask = read_mask(masks, &id, None)?;
        for c in classes {
            if mask.class_index(c).is_none() {
                return Err(Error::Invalid(format!("mask '{id}' has no plane for class '{c}'")));
            }
        }
        let mut img = open_rgb(&find_image(images, &id)?)?;
        if (img.width() as usize, img.height() as usize) != size {
            info!("resizing '{id}' to {}x{}", size.0, size.1);
            img = image::imageops::resize(&img, size.0 as u32, size.1 as u32, image::imageops::FilterType::Triangle);
            mask = mask.resize_nearest(size.0, size.1);
        }
        imgs.push(img);
        ms.push(mask);
    }
    if imgs.is_empty() {
        return Err(Error::Invalid(format!("no masks in {}", masks.display())));
    }
    TrainSet::new(imgs, ms)
}

pub fn cmd_train(cfg: &PipelineConfig, args: &TrainArgs) -> Result<TrainSummary> {
    let mut cfg = cfg.clone();
    if let Some(p) = &args.preset {
        cfg.architecture.preset = p.clone();
        cfg.architecture.spec = None;
    }
    if let Some(h) = args.head {
        cfg.architecture.head = h.kind();
        cfg.architecture.spec = None;
    }
    if let Some(n) = args.iterations {
        cfg.schedule.iterations = n;
    }
    if let Some(lr) = args.lr {
        cfg.schedule.lr = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.schedule.batch_size = b;
    }
    cfg.validate()?;
    let images = existing(args.images.as_ref(), cfg.paths.images.as_ref(), "images")?;
    let masks = existing(args.masks.as_ref(), cfg.paths.masks.as_ref(), "masks")?;
    let out = out_dir(args.out.as_ref(), &cfg, "train")?;
    let spec = cfg.architecture_spec()?;
    let (h, w) = spec.input_size;
    let data = load_tiles(&images, &masks, &spec.classes, (w, h))?;
    let (graph, mut store) = Graph::build::<f32>(&spec)?;
    let refine = args.init.is_some() && matches!(spec.head, HeadKind::Compatibility { .. });
    if let Some(init) = &args.init {
        let (_, source) = load_checkpoint::<f32>(init)?;
        let fresh = init_refinement(&mut store, &source, cfg.seed, REFINEMENT_SCALE)?;
        info!("initialized from {}; {} fresh parameters", init.display(), fresh.len());
    }
    let schedule = cfg.train_schedule(refine);
    let mut log = String::from("iteration,phase,loss\n");
    let report = train(&graph, &mut store, &data, &schedule, &LossConfig::default(), |l, _| {
        log.push_str(&format!("{},{},{}\n", l.iteration, l.phase, l.loss));
        if (l.iteration + 1) % 100 == 0 {
            info!("iteration {} loss {:.5}", l.iteration + 1, l.loss);
        }
        Control::Continue
    })?;
    let checkpoint = out.join("model.weights");
    save_checkpoint(&checkpoint, &graph, &store)?;
    let p = out.join("train_log.csv");
    fs::write(&p, log).map_err(|e| io_err(&p, e))?;
    write_record(
        &out,
        "train",
        cfg.seed,
        &json!({ "paths": cfg.paths, "architecture": spec, "schedule": schedule, "init": args.init }),
    )?;
    Ok(TrainSummary {
        tiles: data.len(),
        iterations: report.losses.len(),
        final_loss: report.losses.last().copied(),
        checkpoint,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CompositeArg {
    Ecp,
    Cmp,
}

impl CompositeArg {
    fn order(self) -> &'static [&'static str] {
        match self {
            CompositeArg::Ecp => &ECP_COMPOSITE_ORDER,
            CompositeArg::Cmp => &CMP_PAINT_ORDER,
        }
    }

    /// The order restricted to `classes`.
    fn order_for(self, classes: &[String]) -> Result<Vec<&'static str>> {
        let (kept, dropped): (Vec<&str>, Vec<&str>) =
            self.order().iter().partition(|c| classes.iter().any(|k| k == *c));
        if !dropped.is_empty() {
            info!("composite skips classes absent from the vocabulary: {}", dropped.join(", "));
        }
        if kept.is_empty() {
            return Err(Error::Invalid("no composite class is in the vocabulary".into()));
        }
        Ok(kept)
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct InferArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// An image file or a directory of images.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub composite: Option<CompositeArg>,
}

pub fn cmd_infer(cfg: &PipelineConfig, args: &InferArgs) -> Result<usize> {
    for (p, what) in [(&args.weights, "weights"), (&args.image, "image")] {
        if !p.exists() {
            return Err(Error::Invalid(format!("{what} '{}' does not exist", p.display())));
        }
    }
    let out = out_dir(args.out.as_ref(), cfg, "infer")?;
    let (graph, store) = load_checkpoint::<f32>(&args.weights)?;
    let net = NetworkSegmenter::new(graph, store);
    let inputs: Vec<(String, PathBuf)> = if args.image.is_dir() {
        let mut v = Vec::new();
        for ext in [".png", ".jpg", ".jpeg"] {
            v.extend(list_with_suffix(&args.image, ext)?);
        }
        v.sort();
        v
    } else {
        let stem = args
            .image
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Invalid(format!("bad image name {}", args.image.display())))?;
        vec![(stem.to_string(), args.image.clone())]
    };
    let order = args.composite.map(|c| c.order_for(&net.graph.classes().to_vec())).transpose()?;
    for (stem, path) in &inputs {
        let img = open_rgb(path)?;
        let maps = predict_image(&img, &net)?;
        let pn = renormalize_pos_neg(&maps);
        if pn.flagged_count() > 0 {
            warn!("{stem}: {} pixels had POS + NEG = 0", pn.flagged_count());
        }
        save_probability_maps(&out, stem, &maps, &pn)?;
        if let Some(order) = &order {
            composite_single_label(&pn, order)?.save(&out, &format!("{stem}.composite"))?;
        }
    }
    write_record(
        &out,
        "infer",
        cfg.seed,
        &json!({ "weights": args.weights, "image": args.image, "composite": args.composite.map(|c| format!("{c:?}")) }),
    )?;
    Ok(inputs.len())
}

#[derive(Args, Clone, Debug, Default)]
pub struct EvalArgs {
    /// Directory of predictions: probability maps from `infer` or masks.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth masks.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub boundary_px: Option<usize>,
    /// Evaluate EDG pixels as their nearest class instead of ignoring them.
    #[arg(long)]
    pub include_edges: bool,
    #[arg(long)]
    pub iou: Option<f64>,
    #[arg(long, value_enum)]
    pub composite: Option<CompositeArg>,
}

/// POS' maps for one image id, keyed by class, at the given size.
fn load_prediction(dir: &Path, id: &str, size: (usize, usize)) -> Result<BTreeMap<String, Vec<f32>>> {
    let header_path = dir.join(probs_header_name(id));
    let mut out = BTreeMap::new();
    if header_path.exists() {
        let text = fs::read_to_string(&header_path).map_err(|e| io_err(&header_path, e))?;
        let header: BlobHeader = serde_json::from_str(&text)?;
        for (class, files) in &header.files {
            let file = files.get("pos_renorm").ok_or_else(|| Error::Format {
                path: header_path.display().to_string(),
                reason: format!("class '{class}' has no pos_renorm plane"),
            })?;
            let plane = load_blob(&dir.join(file), header.width, header.height)?;
            let plane = if (header.width, header.height) == size {
                plane
            } else {
                Planes {
                    channels: 1,
                    width: header.width,
                    height: header.height,
                    data: plane,
                }
                .resize_bilinear(size.0, size.1)
                .data
            };
            out.insert(class.clone(), plane);
        }
        return Ok(out);
    }
    if dir.join(mask_manifest_name(id)).exists() {
        let m = read_mask(dir, id, None)?;
        let m = if (m.width(), m.height()) == size {
            m
        } else {
            m.resize_nearest(size.0, size.1)
        };
        for (c, name) in m.classes().iter().enumerate() {
            let plane = m.plane(c).iter().map(|&v| if v == Label::Pos as u8 { 1.0 } else { 0.0 }).collect();
            out.insert(name.clone(), plane);
        }
        return Ok(out);
    }
    Err(Error::Invalid(format!("no prediction for '{id}' in {}", dir.display())))
}

fn composite_gt(mask: &MultiLabelMask, order: &[&str]) -> Result<Vec<u8>> {
    let mut vocab = vec![BACKGROUND.to_string()];
    vocab.extend(order.iter().map(|s| s.to_string()));
    joint_labels(mask, &vocab, order)
}

pub fn cmd_eval(cfg: &PipelineConfig, args: &EvalArgs) -> Result<facseg::metrics::MetricsReport> {
    for (p, what) in [(&args.pred, "prediction directory"), (&args.gt, "ground-truth directory")] {
        if !p.is_dir() {
            return Err(Error::Invalid(format!("{what} '{}' does not exist", p.display())));
        }
    }
    let mut ec = cfg.eval.clone();
    if let Some(b) = args.boundary_px {
        ec.boundary_px = b;
    }
    if let Some(t) = args.iou {
        ec.iou_threshold = t;
    }
    ec.include_edges |= args.include_edges;
    let out = out_dir(args.out.as_ref(), cfg, "eval")?;
    let ids = list_with_suffix(&args.gt, ".mask.json")?;
    if ids.is_empty() {
        return Err(Error::Invalid(format!("no ground-truth masks in {}", args.gt.display())));
    }
    let mut acc: Option<MetricsAccumulator> = None;
    for (id, _) in &ids {
        let gt = read_mask(&args.gt, id, None)?;
        let pred = load_prediction(&args.pred, id, (gt.width(), gt.height()))?;
        let acc = acc.get_or_insert_with(|| {
            let classes = gt.classes().iter().filter(|c| pred.contains_key(*c)).cloned().collect();
            MetricsAccumulator::new(classes, ec.clone())
        });
        let maps: Vec<Vec<f32>> = acc
            .classes
            .iter()
            .map(|c| {
                pred.get(c)
                    .cloned()
                    .ok_or_else(|| Error::Invalid(format!("prediction for '{id}' lacks class '{c}'")))
            })
            .collect::<Result<_>>()?;
        acc.add_image(&maps, &gt)?;
        if let Some(c) = args.composite {
            let order = c.order_for(&acc.classes)?;
            let pn = facseg::inference::PosNegMaps {
                classes: acc.classes.clone(),
                width: gt.width(),
                height: gt.height(),
                neg: maps.iter().map(|m| m.iter().map(|v| 1.0 - v).collect()).collect(),
                flagged: maps.iter().map(|m| vec![false; m.len()]).collect(),
                pos: maps,
            };
            let predicted = composite_single_label(&pn, &order)?;
            acc.add_composite(&predicted.data, &composite_gt(&gt, &order)?)?;
        }
    }
    let acc = acc.expect("at least one image");
    if acc.classes.is_empty() {
        return Err(Error::Invalid("predictions and ground truth share no class".into()));
    }
    let report = acc.report();
    report.save(&out)?;
    write_record(
        &out,
        "eval",
        cfg.seed,
        &json!({ "pred": args.pred, "gt": args.gt, "eval": ec, "composite": args.composite.map(|c| format!("{c:?}")) }),
    )?;
    Ok(report)
}
