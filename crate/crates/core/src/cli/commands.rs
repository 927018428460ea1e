//! Command implementations. Every command writes its outputs and a
//! `config.resolved.json` under the output directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde_json::{json, Value};

use super::{Command, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{
    cmc_curve, correspondence_quality, dice_report, perturb, robustness_sweep, roc_curve,
    roc_pairs, Disturbance, MetricCurve,
};
use crate::pointset::{
    load_cloud, save_cloud, synthetic_dataset, CloudFormat, DatasetManifest, PointCloud,
    ShapeEntry, BODY_PARTS, N_BODY_PARTS,
};
use crate::rng;
use crate::spgraph::{build_adjacency, build_knn, degrees, distance_graph};
use crate::tasks::{
    extract_descriptors, extract_descriptors_timed, predict_labels, train_descriptor,
    train_segmentation, Checkpoint,
};

pub(super) fn execute(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    let out = cfg.require_path("out")?.to_path_buf();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_json(&out.join("config.resolved.json"), &cfg.to_json())?;
    match cmd {
        Command::Synth(_) => synth(cfg, &out),
        Command::GraphStats(_) => graph_stats(cfg, &out),
        Command::TrainDesc(_) | Command::TrainSeg(_) => train(cfg, &out),
        Command::Extract(_) => extract(cfg, &out),
        Command::EvalDesc(_) => eval_desc(cfg, &out),
        Command::EvalSeg(_) => eval_seg(cfg, &out),
        Command::Perturb(_) => perturb_cloud(cfg, &out),
        Command::Sweep(_) => sweep(cfg, &out),
    }
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cloud_format(cfg: &RunConfig, path: &Path) -> Result<CloudFormat> {
    cfg.options
        .format
        .or_else(|| CloudFormat::from_path(path))
        .ok_or_else(|| Error::Config {
            key: "format".into(),
            msg: format!("cannot infer the format of {}", path.display()),
        })
}

fn input_cloud(cfg: &RunConfig) -> Result<(PathBuf, CloudFormat, PointCloud)> {
    let path = cfg.require_path("cloud")?.to_path_buf();
    let format = cloud_format(cfg, &path)?;
    let cloud = load_cloud(&path, format)?;
    Ok((path, format, cloud))
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let o = &cfg.options;
    let format = o.format.unwrap_or(CloudFormat::XyzAscii);
    let shapes = synthetic_dataset(o.shapes, o.points, cfg.train.seed)?;
    let mut entries = Vec::with_capacity(shapes.len());
    for (i, s) in shapes.iter().enumerate() {
        let name = format!("shape_{i:03}.{}", format.extension());
        save_cloud(&s.cloud, &out.join(&name), format)?;
        entries.push(ShapeEntry {
            cloud: PathBuf::from(&name),
            labels: Some(PathBuf::from(format!("shape_{i:03}.labels"))),
            subject: s.subject,
            pose: s.pose,
            split: s.split,
        });
    }
    let manifest = DatasetManifest {
        shapes: entries,
        n_classes: N_BODY_PARTS + 1,
        units_scale: 1.0,
        format,
        root: out.to_path_buf(),
    };
    manifest.save(&out.join("manifest.json"))?;
    println!(
        "wrote {} shapes of {} points to {}",
        shapes.len(),
        o.points,
        out.display()
    );
    Ok(())
}

fn graph_stats(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (_, _, cloud) = input_cloud(cfg)?;
    let k = cfg.train.k;
    let nb = build_knn(&cloud.coords, k)?;
    let dist = distance_graph(&nb)?;
    let knn_d: Vec<f64> = nb.dists.clone();
    let mean_d = knn_d.iter().sum::<f64>() / knn_d.len() as f64;
    let mut per_sigma = Vec::new();
    for &sigma in &cfg.train.sigmas {
        let a = build_adjacency(&nb, sigma)?;
        let d = degrees(&a)?.0;
        let n = d.len() as f64;
        per_sigma.push(json!({
            "sigma": sigma,
            "degree_min": d.iter().copied().fold(f64::INFINITY, f64::min),
            "degree_max": d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            "degree_mean": d.iter().sum::<f64>() / n,
        }));
    }
    let stats = json!({
        "n": cloud.len(),
        "k": k,
        "nnz": dist.nnz(),
        "components": components(&dist),
        "knn_distance_mean": mean_d,
        "knn_distance_max": knn_d.iter().copied().fold(0.0, f64::max),
        "per_sigma": per_sigma,
    });
    write_json(&out.join("graph_stats.json"), &stats)?;
    println!(
        "n {} k {k} nnz {} mean kNN distance {mean_d:.4}",
        cloud.len(),
        dist.nnz()
    );
    Ok(())
}

fn components(g: &crate::spgraph::SparseMatrix) -> usize {
    let mut seen = vec![false; g.n()];
    let mut count = 0;
    for start in 0..g.n() {
        if seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            for &j in g.row(i).0 {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    count
}

fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    DatasetManifest::load(cfg.require_path("manifest")?)
}

fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let manifest = load_manifest(cfg)?;
    cfg.train.validate()?;
    let log_path = out.join("train_log.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let ckpt = match cfg.train.task {
        crate::tasks::Task::Descriptor => train_descriptor(&cfg.train, &manifest, &mut log)?,
        crate::tasks::Task::Segmentation => train_segmentation(&cfg.train, &manifest, &mut log)?,
    };
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    ckpt.save(&out.join("checkpoint.mkdc"))?;
    let best = &ckpt.history[ckpt.best_epoch - 1];
    println!(
        "trained {} epochs; best epoch {} (val metric {:.4}, train loss {:.4}); {} parameters",
        ckpt.history.len(),
        ckpt.best_epoch,
        best.val_metric,
        best.train_loss,
        ckpt.params.param_count()
    );
    Ok(())
}

fn load_ckpt(cfg: &RunConfig) -> Result<Checkpoint> {
    Checkpoint::load(cfg.require_path("ckpt")?)
}

fn extract(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ckpt = load_ckpt(cfg)?;
    let (_, _, cloud) = input_cloud(cfg)?;
    let (desc, timing) = extract_descriptors_timed(&ckpt, &cloud)?;
    let mut csv = String::with_capacity(desc.len() * 20);
    for row in desc.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        csv.push_str(&line.join(","));
        csv.push('\n');
    }
    write_text(&out.join("descriptors.csv"), &csv)?;
    write_json(
        &out.join("extract.json"),
        &json!({ "n": cloud.len(), "dim": desc.ncols(), "timing": timing }),
    )?;
    println!(
        "{} descriptors of dimension {}; bank {:.1} ms, forward {:.1} ms ({:.0} points/s)",
        cloud.len(),
        desc.ncols(),
        timing.bank_ms,
        timing.forward_ms,
        timing.points_per_second
    );
    Ok(())
}

fn split_clouds(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<Vec<PointCloud>> {
    let clouds = manifest.load_split(cfg.options.split)?;
    if clouds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "split {:?} is empty",
            cfg.options.split
        )));
    }
    Ok(clouds)
}

fn corr(c: &PointCloud) -> Result<&[i64]> {
    c.corr
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("descriptor evaluation needs correspondences".into()))
}

fn eval_desc(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ckpt = load_ckpt(cfg)?;
    let manifest = load_manifest(cfg)?;
    let clouds = split_clouds(cfg, &manifest)?;
    let descs = clouds
        .iter()
        .map(|c| extract_descriptors(&ckpt, c))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs: Vec<(usize, usize)> = (0..clouds.len())
        .flat_map(|i| {
            (0..clouds.len())
                .filter(move |&j| j != i)
                .map(move |j| (i, j))
        })
        .collect();
    if let Some(cap) = cfg.options.max_pairs {
        if cap < pairs.len() {
            pairs.shuffle(&mut rng::stream(cfg.train.seed, "eval-pairs", 0, 0));
            pairs.truncate(cap);
            pairs.sort_unstable();
        }
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "descriptor evaluation needs at least two shapes".into(),
        ));
    }
    let k_max = cfg
        .options
        .k_max
        .min(clouds.iter().map(PointCloud::len).min().unwrap_or(1));
    let graphs = clouds
        .iter()
        .map(|c| distance_graph(&build_knn(&c.coords, ckpt.config.k)?))
        .collect::<Result<Vec<_>>>()?;
    let mut cmcs = Vec::new();
    let mut quality = Vec::new();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (pi, &(i, j)) in pairs.iter().enumerate() {
        let (ci, cj) = (corr(&clouds[i])?, corr(&clouds[j])?);
        cmcs.push(cmc_curve(descs[i].view(), descs[j].view(), ci, cj, k_max)?);
        quality.push(correspondence_quality(
            descs[i].view(),
            descs[j].view(),
            ci,
            cj,
            &graphs[j],
            &cfg.options.radii,
        )?);
        let (p, n) = roc_pairs(
            descs[i].view(),
            descs[j].view(),
            ci,
            cj,
            rng::derive_seed(cfg.train.seed, "roc", pi as u64, 0),
        )?;
        pos.extend(p);
        neg.extend(n);
    }
    let cmc = MetricCurve::mean(&cmcs)?;
    let quality = MetricCurve::mean(&quality)?;
    let roc = roc_curve(&pos, &neg, cfg.options.n_thresholds)?;
    write_text(&out.join("cmc.csv"), &cmc.to_csv())?;
    write_text(&out.join("roc.csv"), &roc.to_csv())?;
    write_text(&out.join("correspondence.csv"), &quality.to_csv())?;
    let at = |k: f64| cmc.at(k).unwrap_or(f64::NAN);
    let metrics = json!({
        "n_shapes": clouds.len(),
        "n_pairs": pairs.len(),
        "cmc_at_1": at(1.0),
        "cmc_at_10": at(10.0),
        "auc": roc.meta["auc"],
        "cmc": cmc,
        "roc": roc,
        "correspondence_quality": quality,
    });
    write_json(&out.join("metrics.json"), &metrics)?;
    println!(
        "{} pairs: CMC@1 {:.4} CMC@10 {:.4} AUC {:.4}",
        pairs.len(),
        at(1.0),
        at(10.0),
        metrics["auc"].as_f64().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn part_name(label: u32) -> &'static str {
    match label {
        0 => "background",
        l if (l as usize) <= N_BODY_PARTS => BODY_PARTS[l as usize - 1],
        _ => "unknown",
    }
}

fn dice_json(report: &crate::eval::DiceReport) -> Value {
    let per_class: Vec<Value> = report
        .classes
        .iter()
        .zip(&report.per_class)
        .map(|(&l, d)| json!({ "label": l, "name": part_name(l), "dice": d }))
        .collect();
    json!({
        "mean": report.mean,
        "std": report.std,
        "per_class": per_class,
        "per_shape": report.per_shape,
    })
}

fn eval_seg(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ckpt = load_ckpt(cfg)?;
    let manifest = load_manifest(cfg)?;
    let clouds = split_clouds(cfg, &manifest)?;
    let mut preds = Vec::with_capacity(clouds.len());
    let mut gts = Vec::with_capacity(clouds.len());
    for c in &clouds {
        preds.push(predict_labels(&ckpt, c)?);
        gts.push(c.labels.clone().ok_or_else(|| {
            Error::InvalidArgument("segmentation evaluation needs labels".into())
        })?);
    }
    let n_labels = manifest.n_classes.max(ckpt.config.n_classes + 1);
    let report = dice_report(&preds, &gts, n_labels, &ckpt.config.scored_labels())?;
    write_json(&out.join("dice.json"), &dice_json(&report))?;
    println!(
        "{} shapes: Dice {:.4} ± {:.4}",
        clouds.len(),
        report.mean,
        report.std
    );
    Ok(())
}

fn require_kind(cfg: &RunConfig) -> Result<Disturbance> {
    cfg.options.kind.ok_or_else(|| Error::Config {
        key: "kind".into(),
        msg: "required".into(),
    })
}

fn perturb_cloud(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (path, format, cloud) = input_cloud(cfg)?;
    let kind = require_kind(cfg)?;
    let result = perturb(&cloud, kind, cfg.options.magnitude, cfg.train.seed)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("cloud");
    let kind_name = serde_json::to_value(kind)?
        .as_str()
        .unwrap_or("perturbed")
        .to_string();
    let target = out.join(format!("{stem}_{kind_name}.{}", format.extension()));
    save_cloud(&result, &target, format)?;
    println!(
        "{} -> {} points in {}",
        cloud.len(),
        result.len(),
        target.display()
    );
    Ok(())
}

fn default_grid(kind: Disturbance) -> Vec<f64> {
    match kind {
        Disturbance::Noise => vec![0.0, 0.01, 0.02, 0.03, 0.04, 0.05],
        Disturbance::Missing | Disturbance::Outlier => vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
    }
}

fn sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ckpt = load_ckpt(cfg)?;
    let manifest = load_manifest(cfg)?;
    let clouds = split_clouds(cfg, &manifest)?;
    let kind = require_kind(cfg)?;
    let grid = if cfg.options.grid.is_empty() {
        default_grid(kind)
    } else {
        cfg.options.grid.clone()
    };
    let rows = robustness_sweep(&ckpt, &clouds, kind, &grid, cfg.train.seed)?;
    let mut csv = String::from("magnitude,mean,std\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{}\n",
            r.magnitude, r.report.mean, r.report.std
        ));
        println!(
            "{:?} {}: Dice {:.4} ± {:.4}",
            kind, r.magnitude, r.report.mean, r.report.std
        );
    }
    write_text(&out.join("sweep.csv"), &csv)?;
    let table: Vec<Value> = rows
        .iter()
        .map(|r| json!({ "magnitude": r.magnitude, "dice": dice_json(&r.report) }))
        .collect();
    write_json(
        &out.join("sweep.json"),
        &json!({ "kind": kind, "rows": table }),
    )
}
